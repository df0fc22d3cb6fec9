"""Decoder/encoder pair: small dense networks with Gaussian conditionals.

The generative side draws z from a standard normal prior and emits
x = decoder(z) + sigma_x * noise; the variational side resamples x from
the training set and emits z = encoder(x) + sigma_z * noise. Both
samplers draw the noise first and transform it, so samples stay
differentiable in the network parameters.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tape, Tensor
from .costs import ORIGIN_MODEL, ORIGIN_VARIATIONAL, JointBatch

CHECKPOINT_MAGIC = "wvi-checkpoint"
CHECKPOINT_VERSION = 1


class DenseNet:
    """Fully connected stack, relu on hidden layers, linear output."""

    def __init__(self, sizes: Sequence[int], rng: Optional[np.random.Generator],
                 name: str):
        sizes = [int(s) for s in sizes]
        if len(sizes) < 2 or any(s < 1 for s in sizes):
            raise ValueError(f"{name}: need at least input and output sizes, got {sizes}")
        self.sizes = sizes
        self.name = name
        self.weights: list[Parameter] = []
        self.biases: list[Parameter] = []
        for i, (d_in, d_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            if rng is None:
                w = np.zeros((d_in, d_out))
            else:
                w = rng.standard_normal((d_in, d_out)) * math.sqrt(2.0 / d_in)
            self.weights.append(Parameter(w, f"{name}.w{i}"))
            self.biases.append(Parameter(np.zeros(d_out), f"{name}.b{i}"))

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    def parameters(self) -> list[Parameter]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def forward(self, x, tape: Optional[Tape] = None) -> Tensor:
        """Forward pass on (n, in_dim) rows; tracked when a tape is involved."""
        x = ad.as_tensor(x)
        if x.data.ndim != 2 or x.shape[1] != self.in_dim:
            raise ad.ShapeError(
                f"{self.name}: expected (n, {self.in_dim}) input, got {x.shape}")
        tape = tape if tape is not None else x.tape
        if tape is None:
            return Tensor(self.forward_array(x.data))
        h: Tensor = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = ad.matmul(h, tape.leaf_for(w)) + tape.leaf_for(b)
            if i != last:
                h = ad.relu(h)
        return h

    def forward_array(self, x: np.ndarray) -> np.ndarray:
        h = np.asarray(x, dtype=np.float64)
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w.data + b.data
            if i != last:
                h = np.maximum(h, 0.0)
        return h


def gaussian_row_logpdf(x, mean, sigma) -> Tensor:
    """Per-row log N(x; mean, sigma^2 I) for (n, d) rows.

    sigma may be a positive float or a positive scalar tensor (the
    learnable-noise path).
    """
    x = ad.as_tensor(x)
    d = x.shape[1]
    if isinstance(sigma, Tensor):
        if float(sigma.data) <= 0:
            raise ValueError(f"sigma must be positive, got {float(sigma.data)}")
        diff = (x - mean) / sigma
        sq = ad.reduce_sum(ad.square(diff), axis=1)
        return (sq * (-0.5) - ad.log(sigma) * float(d)
                - 0.5 * d * math.log(2.0 * math.pi))
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    diff = (x - mean) / sigma
    sq = ad.reduce_sum(ad.square(diff), axis=1)
    const = -0.5 * d * math.log(2.0 * math.pi * sigma * sigma)
    return sq * (-0.5) + const


class ModelPair:
    """Generative decoder and variational encoder with fixed noise scales.

    A zero obs_noise_sigma selects the deterministic-generator mode (the
    observable residual cost then collapses to a reconstruction error);
    log densities require both sigmas strictly positive.
    """

    def __init__(self, decoder: DenseNet, encoder: DenseNet,
                 obs_noise_sigma: float = 0.1, latent_noise_sigma: float = 0.1,
                 learn_sigmas: bool = False):
        if decoder.in_dim != encoder.out_dim or decoder.out_dim != encoder.in_dim:
            raise ad.ShapeError(
                f"decoder {decoder.sizes} and encoder {encoder.sizes} do not pair up")
        if obs_noise_sigma < 0 or latent_noise_sigma < 0:
            raise ValueError("noise scales must be non-negative")
        self.decoder = decoder
        self.encoder = encoder
        self.learn_sigmas = bool(learn_sigmas)
        if self.learn_sigmas:
            if obs_noise_sigma == 0 or latent_noise_sigma == 0:
                raise ValueError("learnable noise scales must start positive")
            self._log_sigma_x = Parameter(np.array(math.log(obs_noise_sigma)),
                                          "log_sigma_x")
            self._log_sigma_z = Parameter(np.array(math.log(latent_noise_sigma)),
                                          "log_sigma_z")
        else:
            self._log_sigma_x = None
            self._log_sigma_z = None
        self._obs_noise_sigma = float(obs_noise_sigma)
        self._latent_noise_sigma = float(latent_noise_sigma)

    @property
    def obs_noise_sigma(self) -> float:
        if self._log_sigma_x is not None:
            return float(np.exp(self._log_sigma_x.data))
        return self._obs_noise_sigma

    @property
    def latent_noise_sigma(self) -> float:
        if self._log_sigma_z is not None:
            return float(np.exp(self._log_sigma_z.data))
        return self._latent_noise_sigma

    def _sigma(self, log_param: Optional[Parameter], fixed: float,
               tape: Optional[Tape]):
        if log_param is None:
            return fixed
        if tape is None:
            return float(np.exp(log_param.data))
        return ad.exp(tape.leaf_for(log_param))

    @classmethod
    def build(cls, latent_dim: int, observable_dim: int,
              decoder_hidden: Sequence[int] = (64, 128),
              encoder_hidden: Sequence[int] = (128, 64),
              obs_noise_sigma: float = 0.1, latent_noise_sigma: float = 0.1,
              rng: Optional[np.random.Generator] = None):
        decoder = DenseNet([latent_dim, *decoder_hidden, observable_dim], rng, "decoder")
        encoder = DenseNet([observable_dim, *encoder_hidden, latent_dim], rng, "encoder")
        return cls(decoder, encoder, obs_noise_sigma, latent_noise_sigma)

    @property
    def latent_dim(self) -> int:
        return self.decoder.in_dim

    @property
    def observable_dim(self) -> int:
        return self.decoder.out_dim

    def parameters(self) -> list[Parameter]:
        return self.decoder.parameters() + self.encoder.parameters()

    def decoder_mean(self, z, tape: Optional[Tape] = None) -> Tensor:
        return self.decoder.forward(z, tape)

    def encoder_mean(self, x, tape: Optional[Tape] = None) -> Tensor:
        return self.encoder.forward(x, tape)

    def sample_joint_p(self, n: int, rng: np.random.Generator,
                       tape: Optional[Tape] = None) -> JointBatch:
        """n draws of (x, z) from the generative side."""
        if n < 1:
            raise ValueError(f"need n >= 1 samples, got {n}")
        z = rng.standard_normal((n, self.latent_dim))
        x_mean = self.decoder.forward(Tensor(z), tape)
        if self.obs_noise_sigma > 0:
            noise = rng.standard_normal((n, self.observable_dim))
            x = x_mean + self.obs_noise_sigma * Tensor(noise)
        else:
            x = x_mean
        return JointBatch(x=x, z=Tensor(z), origin=ORIGIN_MODEL)

    def sample_joint_q(self, n: int, dataset, rng: np.random.Generator,
                       tape: Optional[Tape] = None) -> JointBatch:
        """n draws of (x, z): x resampled from the dataset, z from the encoder."""
        examples = getattr(dataset, "examples", dataset)
        examples = np.asarray(examples, dtype=np.float64)
        if examples.ndim != 2 or examples.shape[0] < 1:
            raise ValueError(f"dataset must be a non-empty (N, D) array, got {examples.shape}")
        if n < 1:
            raise ValueError(f"need n >= 1 samples, got {n}")
        rows = examples[rng.integers(0, examples.shape[0], size=n)]
        x = Tensor(rows)
        z_mean = self.encoder.forward(x, tape)
        if self.latent_noise_sigma > 0:
            noise = rng.standard_normal((n, self.latent_dim))
            z = z_mean + self.latent_noise_sigma * Tensor(noise)
        else:
            z = z_mean
        return JointBatch(x=x, z=z, origin=ORIGIN_VARIATIONAL)

    def log_densities(self, batch: JointBatch, tape: Optional[Tape] = None):
        """Per-sample log p(x, z) and log q(z | x) under the Gaussian model."""
        tape = tape if tape is not None else _batch_tape(batch)
        gz = self.decoder.forward(batch.z, tape)
        log_p = (gaussian_row_logpdf(batch.x, gz, self.obs_noise_sigma)
                 + gaussian_row_logpdf(batch.z, 0.0, 1.0))
        hx = self.encoder.forward(batch.x, tape)
        log_q = gaussian_row_logpdf(batch.z, hx, self.latent_noise_sigma)
        return log_p, log_q


def _batch_tape(batch: JointBatch):
    return batch.x.tape if batch.x.tape is not None else batch.z.tape


def save_checkpoint(pair: ModelPair, path, meta: Optional[dict] = None):
    """Text key-value checkpoint; float values round-trip exactly via %.17g."""
    lines = [f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}"]
    lines.append(f"meta decoder_sizes {','.join(map(str, pair.decoder.sizes))}")
    lines.append(f"meta encoder_sizes {','.join(map(str, pair.encoder.sizes))}")
    lines.append(f"meta obs_noise_sigma {pair.obs_noise_sigma:.17g}")
    lines.append(f"meta latent_noise_sigma {pair.latent_noise_sigma:.17g}")
    for key, value in (meta or {}).items():
        if any(ch.isspace() for ch in str(key)):
            raise ValueError(f"meta key may not contain whitespace: {key!r}")
        lines.append(f"meta {key} {value}")
    for param in pair.parameters():
        shape = ",".join(map(str, param.data.shape))
        values = " ".join(f"{v:.17g}" for v in param.data.reshape(-1))
        lines.append(f"param {param.name} {shape} {values}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path):
    """Rebuild a ModelPair from a checkpoint; returns (pair, meta dict)."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith(f"{CHECKPOINT_MAGIC} "):
        raise ValueError(f"{path}: not a {CHECKPOINT_MAGIC} file")
    version = lines[0].split()[1]
    if version != str(CHECKPOINT_VERSION):
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    meta: dict[str, str] = {}
    params: dict[str, np.ndarray] = {}
    for line in lines[1:]:
        if not line.strip():
            continue
        kind, rest = line.split(" ", 1)
        if kind == "meta":
            key, value = rest.split(" ", 1)
            meta[key] = value
        elif kind == "param":
            name, shape_s, values_s = rest.split(" ", 2)
            shape = tuple(int(s) for s in shape_s.split(","))
            values = np.array([float(v) for v in values_s.split()], dtype=np.float64)
            if values.size != int(np.prod(shape)):
                raise ValueError(f"{path}: param {name} has {values.size} values, "
                                 f"expected shape {shape}")
            params[name] = values.reshape(shape)
        else:
            raise ValueError(f"{path}: unknown record kind {kind!r}")
    for key in ("decoder_sizes", "encoder_sizes", "obs_noise_sigma", "latent_noise_sigma"):
        if key not in meta:
            raise ValueError(f"{path}: missing meta key {key}")
    decoder = DenseNet([int(s) for s in meta["decoder_sizes"].split(",")], None, "decoder")
    encoder = DenseNet([int(s) for s in meta["encoder_sizes"].split(",")], None, "encoder")
    pair = ModelPair(decoder, encoder,
                     obs_noise_sigma=float(meta["obs_noise_sigma"]),
                     latent_noise_sigma=float(meta["latent_noise_sigma"]))
    for param in pair.parameters():
        if param.name not in params:
            raise ValueError(f"{path}: missing parameter {param.name}")
        if params[param.name].shape != param.data.shape:
            raise ValueError(
                f"{path}: parameter {param.name} has shape "
                f"{params[param.name].shape}, expected {param.data.shape}")
        param.data = params[param.name]
    return pair, meta
