"""Evaluation metrics and the weight-perturbation robustness harness.

Three metrics, all per-dimension normalized so values are comparable
across architectures: latent round-trip error on generated samples,
pixelwise reconstruction error on held-out data, and sample quality as
the mean nearest-neighbour distance from generated samples to the
validation set.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import kernels
from .costs import WeightVector
from .models import ModelPair
from .ot import SinkhornUnderflowError
from .trainer import TrainConfig, TrainingAbort, train_run

METRIC_NAMES = ("latent", "observable", "sample")


@dataclass
class MetricReport:
    run_id: int
    latent_mse: float
    observable_mse: float
    sample_quality: float
    weights: WeightVector
    seed: int

    def __post_init__(self):
        for name in ("latent_mse", "observable_mse", "sample_quality"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and non-negative, got {v!r}")

    def values(self) -> dict:
        return {"latent": self.latent_mse, "observable": self.observable_mse,
                "sample": self.sample_quality}


@dataclass
class PerturbationSummary:
    n_runs: int
    mean: dict
    std: dict
    min: dict
    max: dict
    failures: list

    def __post_init__(self):
        for name in METRIC_NAMES:
            if not self.min[name] <= self.mean[name] <= self.max[name]:
                raise ValueError(f"inconsistent aggregate for {name}")


def latent_error(models: ModelPair, n_eval: int, rng: np.random.Generator) -> float:
    """Mean squared latent deviation per dimension, on generated samples.

    Draws z from the prior and x from the observation model, encodes x
    back, and measures |z - encode(x)|^2 / D_z. Generated samples are
    used because a data round trip has no ground-truth latent.
    """
    dz = models.latent_dim
    z = rng.standard_normal((n_eval, dz))
    x = models.decoder.forward_array(z)
    if models.obs_noise_sigma > 0:
        x = x + models.obs_noise_sigma * rng.standard_normal(x.shape)
    z_hat = models.encoder.forward_array(x)
    return float(((z - z_hat) ** 2).sum(axis=1).mean() / dz)


def reconstruction_error(models: ModelPair, validation: np.ndarray) -> float:
    """Mean squared reconstruction error per pixel over a validation set."""
    validation = _examples(validation)
    recon = models.decoder.forward_array(models.encoder.forward_array(validation))
    return float(((validation - recon) ** 2).mean())


def sample_quality(models: ModelPair, validation: np.ndarray, n_gen: int,
                   rng: np.random.Generator) -> float:
    """Mean distance from generated samples to their nearest validation row.

    Distances are root mean square per pixel, matching the normalization
    of reconstruction_error.
    """
    if n_gen < 1:
        raise ValueError(f"need n_gen >= 1, got {n_gen}")
    validation = _examples(validation)
    z = rng.standard_normal((n_gen, models.latent_dim))
    generated = models.decoder.forward_array(z)
    d2 = kernels.min_sqdist(np.ascontiguousarray(generated),
                            np.ascontiguousarray(validation))
    return float(np.sqrt(d2 / validation.shape[1]).mean())


def evaluate(models: ModelPair, validation, n_eval: int, n_gen: int,
             rng: np.random.Generator) -> dict:
    """All three metrics with a single generator stream."""
    return {
        "latent": latent_error(models, n_eval, rng),
        "observable": reconstruction_error(models, validation),
        "sample": sample_quality(models, validation, n_gen, rng),
    }


def _examples(dataset) -> np.ndarray:
    arr = np.asarray(getattr(dataset, "examples", dataset), dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1:
        raise ValueError(f"validation set must be a non-empty (N, D) array, got {arr.shape}")
    return arr


def perturb_weights(weights: WeightVector, rng: np.random.Generator,
                    low: float = 0.1, high: float = 1.0) -> WeightVector:
    """Redraw every active weight uniformly from [low, high]."""
    draws = {name: float(rng.uniform(low, high)) for name in weights.active_names()}
    return replace(weights, **draws)


def perturbation_harness(base_cfg: TrainConfig, model_factory: Callable,
                         train_data, val_data, n_runs: int, seed: int = 0,
                         n_eval: int = 512, n_gen: int = 64,
                         run_dirs: Optional[Sequence[str]] = None):
    """Repeated re-initialization / re-weighting / retraining runs.

    Each run draws fresh active weights from [0.1, 1], rebuilds the model
    from the factory, trains with the base configuration, and evaluates
    all three metrics. Failed runs are recorded and excluded from the
    aggregates. Returns (PerturbationSummary, reports).
    """
    if n_runs < 2:
        raise ValueError(f"need at least 2 runs, got {n_runs}")
    reports: list[MetricReport] = []
    failures: list[str] = []
    children = np.random.SeedSequence(seed).spawn(n_runs)
    for run_id, child in enumerate(children):
        rng = np.random.default_rng(child)
        weights = perturb_weights(base_cfg.weights, rng)
        run_seed = int(rng.integers(0, 2**31))
        cfg = replace(base_cfg, weights=weights, seed=run_seed)
        out_dir = run_dirs[run_id] if run_dirs is not None else None
        try:
            models = model_factory(rng)
            models, _ = train_run(cfg, train_data, models, out_dir=out_dir)
            values = evaluate(models, val_data, n_eval, n_gen, rng)
            reports.append(MetricReport(run_id=run_id, latent_mse=values["latent"],
                                        observable_mse=values["observable"],
                                        sample_quality=values["sample"],
                                        weights=weights, seed=run_seed))
        except (TrainingAbort, SinkhornUnderflowError, FloatingPointError, ValueError) as err:
            failures.append(f"run {run_id}: {err}")
    if not reports:
        raise TrainingAbort(f"all {n_runs} perturbation runs failed: {failures}")
    return summarize(reports, n_runs, failures), reports


def summarize(reports: Sequence[MetricReport], n_runs: int,
              failures: Sequence[str]) -> PerturbationSummary:
    agg = {k: {} for k in ("mean", "std", "min", "max")}
    for name in METRIC_NAMES:
        # sorted so the reduction is order-independent
        vals = np.sort([r.values()[name] for r in reports])
        agg["mean"][name] = float(vals.mean())
        agg["std"][name] = float(vals.std())
        agg["min"][name] = float(vals.min())
        agg["max"][name] = float(vals.max())
    return PerturbationSummary(n_runs=n_runs, failures=list(failures), **agg)


CSV_HEADER = ["run_id", "w1", "w2", "w3", "w4", "w5",
              "latent", "observable", "sample", "seed"]


def write_metric_csv(path, reports: Sequence[MetricReport],
                     summary: Optional[PerturbationSummary] = None):
    """Per-run rows, plus one aggregate row when a summary is given."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for r in reports:
            writer.writerow([r.run_id, *[f"{w:.17g}" for w in r.weights.as_tuple()],
                             f"{r.latent_mse:.17g}", f"{r.observable_mse:.17g}",
                             f"{r.sample_quality:.17g}", r.seed])
        if summary is not None:
            writer.writerow(["aggregate", "", "", "", "", "",
                             f"{summary.mean['latent']:.17g}",
                             f"{summary.mean['observable']:.17g}",
                             f"{summary.mean['sample']:.17g}", ""])


def format_summary_table(summary: PerturbationSummary) -> str:
    """Mean/std/min/max table in the usual robustness-report layout."""
    rows = [f"{'':12s} {'mean ± std':>22s}   {'min, max':>18s}"]
    for name in METRIC_NAMES:
        mean, std = summary.mean[name], summary.std[name]
        lo, hi = summary.min[name], summary.max[name]
        rows.append(f"{name:12s} {mean:10.4f} ± {std:<9.4f}   {lo:8.4f}, {hi:8.4f}")
    if summary.failures:
        rows.append(f"failed runs: {len(summary.failures)}")
    return "\n".join(rows)
