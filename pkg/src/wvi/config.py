"""Run configuration files: sectioned key-value text.

Grammar: ``[section]`` headers, ``key = value`` lines, ``#`` or ``;``
comments, blank lines ignored. Unknown sections or keys are rejected;
missing keys fall back to defaults with a printed notice. Environment
variables of the form ``WVI_<SECTION>_<KEY>`` override file values
(section names contain no underscores, so the split is unambiguous).
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .costs import WeightVector
from .data import DatasetHandle, load_mnist_idx, split_train_val, synth_dataset
from .models import ModelPair
from .trainer import TrainConfig

ENV_PREFIX = "WVI_"
_REQUIRED = object()


class ConfigError(ValueError):
    """Unusable configuration file or values."""


def _parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("on", "true", "yes", "1"):
        return True
    if low in ("off", "false", "no", "0"):
        return False
    raise ValueError(f"expected on/off, got {s!r}")


def _parse_int_list(s: str):
    s = s.strip()
    return tuple(int(v) for v in s.split(",")) if s else ()


# section -> key -> (parser, default); _REQUIRED means the key must appear
SCHEMA: dict[str, dict[str, tuple[Callable, object]]] = {
    "data": {
        "kind": (str, _REQUIRED),          # ring8 | checkerboard | moons | idx
        "path": (str, ""),                 # idx image file (for kind = idx)
        "size": (int, 2048),               # synthetic sample count
        "val_count": (int, 0),             # 0: hold out 20 percent
        "downsample": (int, 1),
        "limit": (int, 0),
        "split_seed": (int, 0),
    },
    "model": {
        "latent_dim": (int, _REQUIRED),
        "decoder_hidden": (_parse_int_list, (64, 128)),
        "encoder_hidden": (_parse_int_list, (128, 64)),
        "obs_noise_sigma": (float, 0.1),
        "latent_noise_sigma": (float, 0.1),
    },
    "train": {
        "w1": (float, 0.0),
        "w2": (float, 0.0),
        "w3": (float, 0.0),
        "w4": (float, 0.0),
        "w5": (float, 0.0),
        "epsilon": (float, 0.1),
        "sinkhorn_t": (int, 20),
        "batch_n": (int, 32),
        "learning_rate": (float, 1e-3),
        "epochs": (int, 1),
        "steps_per_epoch": (int, 0),
        "seed": (int, 0),
        "debias": (_parse_bool, True),
        "f_kind": (str, "none"),
        "observable_metric": (str, "euclidean"),
        "residual_metric": (str, "euclidean"),
        "normalize_costs": (_parse_bool, True),
    },
    "output": {
        "dir": (str, "runs/out"),
        "n_eval": (int, 512),
        "n_gen": (int, 64),
    },
}


@dataclass
class RunConfig:
    """Parsed configuration; values keyed as (section, key)."""

    values: dict

    def __getitem__(self, section_key):
        return self.values[section_key]

    def train_config(self) -> TrainConfig:
        g = lambda key: self.values[("train", key)]
        weights = WeightVector(w1=g("w1"), w2=g("w2"), w3=g("w3"),
                               w4=g("w4"), w5=g("w5"))
        return TrainConfig(weights=weights, epsilon=g("epsilon"),
                           sinkhorn_t=g("sinkhorn_t"), batch_n=g("batch_n"),
                           learning_rate=g("learning_rate"), epochs=g("epochs"),
                           steps_per_epoch=g("steps_per_epoch"), seed=g("seed"),
                           debias=g("debias"), f_kind=g("f_kind"),
                           observable_metric=g("observable_metric"),
                           residual_metric=g("residual_metric"),
                           normalize_costs=g("normalize_costs"))

    def build_dataset(self) -> tuple[DatasetHandle, DatasetHandle]:
        kind = self.values[("data", "kind")]
        if kind == "idx":
            path = self.values[("data", "path")]
            if not path:
                raise ConfigError("data.kind = idx requires data.path")
            if not os.path.exists(path):
                raise ConfigError(f"dataset file does not exist: {path}")
            full = load_mnist_idx(path, downsample=self.values[("data", "downsample")],
                                  limit=self.values[("data", "limit")])
        else:
            full = synth_dataset(kind, self.values[("data", "size")],
                                 seed=self.values[("data", "split_seed")])
        val_count = self.values[("data", "val_count")] or max(1, len(full) // 5)
        return split_train_val(full, val_count, seed=self.values[("data", "split_seed")])

    def build_models(self, observable_dim: int, rng: np.random.Generator) -> ModelPair:
        return ModelPair.build(
            latent_dim=self.values[("model", "latent_dim")],
            observable_dim=observable_dim,
            decoder_hidden=self.values[("model", "decoder_hidden")],
            encoder_hidden=self.values[("model", "encoder_hidden")],
            obs_noise_sigma=self.values[("model", "obs_noise_sigma")],
            latent_noise_sigma=self.values[("model", "latent_noise_sigma")],
            rng=rng)


def _read_sections(path) -> dict:
    raw: dict[tuple, str] = {}
    section = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith(("#", ";")):
                continue
            if stripped.startswith("[") and stripped.endswith("]"):
                section = stripped[1:-1].strip().lower()
                if section not in SCHEMA:
                    raise ConfigError(f"{path}: line {lineno}: unknown section [{section}]")
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}: line {lineno}: expected key = value")
            if section is None:
                raise ConfigError(f"{path}: line {lineno}: key outside any [section]")
            key, value = (part.strip() for part in stripped.split("=", 1))
            key = key.lower()
            if key not in SCHEMA[section]:
                raise ConfigError(f"{path}: line {lineno}: unknown key {section}.{key}")
            raw[(section, key)] = value
    return raw


def _env_overrides(env) -> dict:
    out = {}
    for section in SCHEMA:
        for key in SCHEMA[section]:
            name = f"{ENV_PREFIX}{section.upper()}_{key.upper()}"
            if name in env:
                out[(section, key)] = env[name]
    return out


def parse_config(path, env: Optional[dict] = None, echo: Callable = print) -> RunConfig:
    """Parse, apply env overrides, fill defaults (with a notice per default)."""
    raw = _read_sections(path)
    raw.update(_env_overrides(os.environ if env is None else env))
    values: dict = {}
    for section, keys in SCHEMA.items():
        for key, (parser, default) in keys.items():
            if (section, key) in raw:
                text = raw[(section, key)]
                try:
                    values[(section, key)] = parser(text)
                except ValueError as err:
                    raise ConfigError(f"{path}: {section}.{key} = {text!r}: {err}") from None
            elif default is _REQUIRED:
                raise ConfigError(f"{path}: missing required key {section}.{key}")
            else:
                values[(section, key)] = default
                echo(f"[config] {section}.{key} defaulted to {default!r}")
    return RunConfig(values=values)
