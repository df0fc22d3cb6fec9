"""Transport cost functionals over joint (x, z) samples.

Five weighted components combine into the matrix handed to the transport
solver: an observable-space metric, the decoder-pullback metric, latent
and observable autoencoder residual costs, and a density-ratio term.
Components that do not depend on the coupling (the density-ratio term,
and the observable residual cost when the first batch comes from a
deterministic generator) are returned separately as plain expectations
instead of being folded into the matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .ot import CostMatrix

METRICS = ("euclidean", "sqeuclidean")
F_KINDS = ("none", "reverse_kl", "forward_kl")

ORIGIN_MODEL = "model_p"
ORIGIN_VARIATIONAL = "variational_q"


@dataclass(frozen=True)
class WeightVector:
    """Non-negative component weights; at least one must be positive."""

    w1: float = 0.0  # observable metric
    w2: float = 0.0  # pullback
    w3: float = 0.0  # latent residual
    w4: float = 0.0  # observable residual
    w5: float = 0.0  # density ratio

    def __post_init__(self):
        vals = self.as_tuple()
        if any(w < 0 for w in vals):
            raise ValueError(f"weights must be non-negative, got {vals}")
        if not any(w > 0 for w in vals):
            raise ValueError("at least one weight must be positive")

    def as_tuple(self):
        return (self.w1, self.w2, self.w3, self.w4, self.w5)

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def active_names(self):
        return [name for name, w in self.as_dict().items() if w > 0]


@dataclass(frozen=True)
class CostFunctionalSpec:
    """Which components are active, which metrics they use, and the f choice."""

    weights: WeightVector
    observable_metric: str = "euclidean"
    residual_metric: str = "euclidean"
    f_kind: str = "none"

    def __post_init__(self):
        if self.observable_metric not in METRICS or self.residual_metric not in METRICS:
            raise ValueError(f"metrics must be one of {METRICS}")
        if self.f_kind not in F_KINDS:
            raise ValueError(f"f_kind must be one of {F_KINDS}")
        if (self.f_kind == "none") != (self.weights.w5 == 0):
            raise ValueError("f_kind is 'none' exactly when w5 is 0")


@dataclass
class JointBatch:
    """Matched samples: x rows are observables, z rows are latents."""

    x: Tensor
    z: Tensor
    origin: str

    def __post_init__(self):
        self.x = ad.as_tensor(self.x)
        self.z = ad.as_tensor(self.z)
        if self.origin not in (ORIGIN_MODEL, ORIGIN_VARIATIONAL):
            raise ValueError(f"unknown origin {self.origin!r}")
        if self.x.data.ndim != 2 or self.z.data.ndim != 2:
            raise ad.ShapeError("joint batches must be (n, D_x) and (n, D_z) matrices")
        if self.x.shape[0] != self.z.shape[0]:
            raise ad.ShapeError(
                f"x and z disagree on batch size: {self.x.shape} vs {self.z.shape}")
        if self.x.shape[0] < 1:
            raise ad.ShapeError("joint batch must be non-empty")

    @property
    def n(self) -> int:
        return self.x.shape[0]


def pairwise_metric(a, b, metric: str) -> Tensor:
    """(n, m) matrix of distances between rows of a and rows of b."""
    sq = ad.pairwise_sqdist(a, b)
    if metric == "sqeuclidean":
        return sq
    if metric == "euclidean":
        return ad.sqrt(sq)
    raise ValueError(f"unknown metric {metric!r}")


def rows_metric_to_zero(res, metric: str) -> Tensor:
    """Per-row distance between residual rows and the origin."""
    sq = ad.reduce_sum(ad.square(res), axis=1)
    return sq if metric == "sqeuclidean" else ad.sqrt(sq)


def metric_distance(u, v, metric: str) -> Tensor:
    """Scalar distance between two points given as 1-D tensors."""
    diff = ad.as_tensor(u) - ad.as_tensor(v)
    sq = ad.reduce_sum(ad.square(diff))
    return sq if metric == "sqeuclidean" else ad.sqrt(sq)


def _as_row_matrix(p) -> Tensor:
    p = ad.as_tensor(p)
    if p.data.ndim == 1:
        return ad.reshape(p, (1, p.data.size))
    return p


def pullback_cost(z1, z2, decoder, metric: str = "euclidean") -> Tensor:
    """Distance between the decoded means of two latent points."""
    g1 = decoder.forward(_as_row_matrix(z1))
    g2 = decoder.forward(_as_row_matrix(z2))
    return ad.reshape(pairwise_metric(g1, g2, metric), ())


def latent_ae_cost(x1, z1, x2, z2, encoder, metric: str = "euclidean") -> Tensor:
    """Distance between the two latent reconstruction residuals z - h(x)."""
    r1 = _as_row_matrix(z1) - encoder.forward(_as_row_matrix(x1))
    r2 = _as_row_matrix(z2) - encoder.forward(_as_row_matrix(x2))
    return ad.reshape(pairwise_metric(r1, r2, metric), ())


def observable_ae_cost(x1, z1, x2, z2, decoder, metric: str = "euclidean") -> Tensor:
    """Distance between the two observable reconstruction residuals x - g(z)."""
    r1 = _as_row_matrix(x1) - decoder.forward(_as_row_matrix(z1))
    r2 = _as_row_matrix(x2) - decoder.forward(_as_row_matrix(z2))
    return ad.reshape(pairwise_metric(r1, r2, metric), ())


def _check_finite_per_sample(vals: Tensor, name: str):
    finite = np.isfinite(vals.data)
    if not finite.all():
        raise ad.DomainError(f"non-finite {name} for sample {int(np.argmax(~finite))}")


def f_divergence_mc(log_p, log_q, f_kind: str) -> Tensor:
    """Monte Carlo estimate of E_q[f(p/q)] from per-sample log densities
    evaluated at q-samples.

    reverse_kl uses f(r) = -log r, forward_kl uses f(r) = r log r; both
    satisfy f(1) = 0.
    """
    log_p, log_q = ad.as_tensor(log_p), ad.as_tensor(log_q)
    if f_kind == "reverse_kl":
        return ad.reduce_mean(log_q - log_p)
    if f_kind == "forward_kl":
        diff = log_p - log_q
        return ad.reduce_mean(ad.exp(diff) * diff)
    raise ValueError(f"f_kind {f_kind!r} is not a computable choice")


def f_term(batch_q: JointBatch, models, f_kind: str) -> Tensor:
    """Density-ratio component, averaged over the given batch.

    models must expose log_densities(batch) -> (log p(x, z), log q(z | x))
    per sample. For reverse_kl the data-resampling factor of q contributes
    a parameter-independent constant and is dropped.
    """
    if f_kind == "none":
        raise ValueError("f_kind 'none' cannot be evaluated (w5 must be 0)")
    if f_kind not in F_KINDS:
        raise ValueError(f"f_kind must be one of {F_KINDS}")
    log_p, log_q = models.log_densities(batch_q)
    _check_finite_per_sample(ad.as_tensor(log_p), "log p(x, z)")
    _check_finite_per_sample(ad.as_tensor(log_q), "log q(z | x)")
    return f_divergence_mc(log_p, log_q, f_kind)


def assemble_total_cost_matrix(batch_p: JointBatch, batch_q: JointBatch,
                               spec: CostFunctionalSpec, models,
                               component_log: Optional[dict] = None):
    """Weighted sum of the coupling-dependent components as one cost matrix,
    plus the coupling-independent terms as a separate scalar.

    Entry (j, k) combines, per the active weights: the observable metric
    between x1_j and x2_k, the pullback metric between decoded latents,
    the latent residual distance, and (when not separable) the observable
    residual distance. The density-ratio term, and the observable residual
    term when batch_p comes from a deterministic generator, reduce to
    per-sample averages over batch_q and are returned as the second value.

    component_log, if given, receives the detached magnitude of each
    weighted component under keys w1..w5.
    """
    w = spec.weights
    tape = _first_tape(batch_p, batch_q)
    matrix: Optional[Tensor] = None
    separable: Optional[Tensor] = None
    log = dict.fromkeys(("w1", "w2", "w3", "w4", "w5"), 0.0)

    def add_matrix(old, term, weight, key):
        term = weight * term
        log[key] = float(term.data.mean())
        return term if old is None else old + term

    def add_sep(old, term, weight, key):
        term = weight * term
        log[key] = float(term.data)
        return term if old is None else old + term

    if w.w1 > 0:
        matrix = add_matrix(
            matrix, pairwise_metric(batch_p.x, batch_q.x, spec.observable_metric),
            w.w1, "w1")
    if w.w2 > 0:
        g1 = models.decoder_mean(batch_p.z, tape)
        g2 = models.decoder_mean(batch_q.z, tape)
        matrix = add_matrix(
            matrix, pairwise_metric(g1, g2, spec.observable_metric), w.w2, "w2")
    if w.w3 > 0:
        r1 = batch_p.z - models.encoder_mean(batch_p.x, tape)
        r2 = batch_q.z - models.encoder_mean(batch_q.x, tape)
        matrix = add_matrix(
            matrix, pairwise_metric(r1, r2, spec.residual_metric), w.w3, "w3")
    if w.w4 > 0:
        res2 = batch_q.x - models.decoder_mean(batch_q.z, tape)
        if batch_p.origin == ORIGIN_MODEL and models.obs_noise_sigma == 0:
            # first-batch residuals are identically zero, so the transport
            # term collapses to the mean reconstruction error of batch_q
            separable = add_sep(
                separable,
                ad.reduce_mean(rows_metric_to_zero(res2, spec.residual_metric)),
                w.w4, "w4")
        else:
            res1 = batch_p.x - models.decoder_mean(batch_p.z, tape)
            matrix = add_matrix(
                matrix, pairwise_metric(res1, res2, spec.residual_metric), w.w4, "w4")
    if w.w5 > 0:
        separable = add_sep(separable, f_term(batch_q, models, spec.f_kind), w.w5, "w5")

    if matrix is None:
        matrix = Tensor(np.zeros((batch_p.n, batch_q.n)))
    if separable is None:
        separable = Tensor(0.0)
    if component_log is not None:
        component_log.update(log)
    return CostMatrix(matrix), separable


def _first_tape(*batches: JointBatch):
    for b in batches:
        for t in (b.x, b.z):
            if t.tape is not None:
                return t.tape
    return None
