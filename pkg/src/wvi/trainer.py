"""Stochastic training loop for transport-trained autoencoders.

Each step samples matched minibatches from the generative and variational
sides, assembles the weighted cost matrix, pushes it through the scaling
iterations, and backpropagates through the whole graph. The debiased
estimator subtracts half of each self-comparison loss, computed on fresh
independent batches, so its expectation vanishes when the two
distributions coincide.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tape, Tensor
from .costs import CostFunctionalSpec, JointBatch, WeightVector, assemble_total_cost_matrix
from .models import ModelPair, save_checkpoint
from .ot import CostMatrix, SinkhornConfig, sinkhorn_value

CHECKPOINT_NAME = "model.ckpt"
LOG_NAME = "train_log.jsonl"


class TrainingAbort(ArithmeticError):
    """Training hit a non-finite loss or gradient; message carries diagnostics."""


@dataclass(frozen=True)
class TrainConfig:
    weights: WeightVector
    epsilon: float = 0.1
    sinkhorn_t: int = 20
    batch_n: int = 32
    learning_rate: float = 1e-3
    epochs: int = 1
    steps_per_epoch: int = 0  # 0: one pass, len(dataset) // batch_n steps
    seed: int = 0
    debias: bool = True
    f_kind: str = "none"
    observable_metric: str = "euclidean"
    residual_metric: str = "euclidean"
    normalize_costs: bool = True

    def __post_init__(self):
        if self.batch_n < 2:
            raise ValueError(f"batch_n must be >= 2, got {self.batch_n}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.sinkhorn_t < 1:
            raise ValueError(f"sinkhorn_t must be >= 1, got {self.sinkhorn_t}")

    def cost_spec(self) -> CostFunctionalSpec:
        return CostFunctionalSpec(weights=self.weights,
                                  observable_metric=self.observable_metric,
                                  residual_metric=self.residual_metric,
                                  f_kind=self.f_kind)

    def sinkhorn_config(self) -> SinkhornConfig:
        return SinkhornConfig(epsilon=self.epsilon, iterations=self.sinkhorn_t)


@dataclass
class LossReport:
    step: int
    epoch: int
    loss: float
    debiased_loss: float
    components: dict = field(default_factory=dict)
    cost_scale: float = 1.0
    time_ms: float = 0.0

    def json_record(self) -> dict:
        # wall time is excluded from the persisted record so that logs are
        # byte-identical across reruns with the same seed
        return {"step": self.step, "loss": self.loss,
                "debiased_loss": self.debiased_loss,
                "components": self.components, "time_ms": None}


def mc_wasserstein_loss(batch_p: JointBatch, batch_q: JointBatch,
                        spec: CostFunctionalSpec, models: ModelPair,
                        cfg: TrainConfig, component_log: Optional[dict] = None,
                        cost_scale: Optional[float] = None) -> Tensor:
    """Minibatch transport divergence plus the separable terms.

    When normalize_costs is on, the matrix is divided by its largest entry
    before the scaling iterations and the value rescaled back; the scale
    is treated as a per-batch constant (equivalent to rescaling epsilon
    for that batch). Pass cost_scale to pin it externally.
    """
    if batch_p.n != batch_q.n:
        raise ad.ShapeError(f"batches must match in size, got {batch_p.n} and {batch_q.n}")
    matrix, separable = assemble_total_cost_matrix(batch_p, batch_q, spec, models,
                                                   component_log=component_log)
    top = float(matrix.entries.data.max())
    if top == 0.0:
        # all transport costs vanish (or only separable components are
        # active): any feasible plan gives zero transport cost
        if component_log is not None:
            component_log["cost_scale"] = 1.0
        return separable
    n, m = matrix.shape
    r = np.full(n, 1.0 / n)
    c = np.full(m, 1.0 / m)
    if cfg.normalize_costs:
        scale = float(cost_scale) if cost_scale is not None else top
        scaled = CostMatrix(matrix.entries * (1.0 / scale))
        value = sinkhorn_value(scaled, r, c, cfg.sinkhorn_config()) * scale
    else:
        scale = 1.0
        value = sinkhorn_value(matrix, r, c, cfg.sinkhorn_config())
    if component_log is not None:
        component_log["cost_scale"] = scale
    return value + separable


def debiased_loss(batch_p: JointBatch, batch_q: JointBatch,
                  spec: CostFunctionalSpec, models: ModelPair, cfg: TrainConfig,
                  batch_p2: Optional[JointBatch] = None,
                  batch_q2: Optional[JointBatch] = None,
                  component_log: Optional[dict] = None) -> Tensor:
    """Cross loss minus half of each self loss.

    The self comparisons use batch_p2/batch_q2 when given (fresh
    independent draws, the estimator's intended form); otherwise they
    reuse the cross batches, which makes the result exactly zero on
    identical inputs. With debias off this is just the raw loss.
    """
    cross = mc_wasserstein_loss(batch_p, batch_q, spec, models, cfg,
                                component_log=component_log)
    if not cfg.debias:
        return cross
    self_p = mc_wasserstein_loss(batch_p, batch_p2 if batch_p2 is not None else batch_p,
                                 spec, models, cfg)
    self_q = mc_wasserstein_loss(batch_q, batch_q2 if batch_q2 is not None else batch_q,
                                 spec, models, cfg)
    return cross - 0.5 * (self_p + self_q)


def _abort(reason: str, clog: dict, cfg: TrainConfig) -> TrainingAbort:
    parts = [f"{k}={v:.6g}" for k, v in clog.items()]
    return TrainingAbort(f"{reason} (epsilon={cfg.epsilon}, {', '.join(parts)})")


def train_step(models: ModelPair, dataset, cfg: TrainConfig, optimizer: Adam,
               rng: np.random.Generator, step: int = 0, epoch: int = 0) -> LossReport:
    """One sample / loss / backward / update cycle."""
    spec = cfg.cost_spec()
    t0 = time.perf_counter()
    tape = Tape()
    batch_p = models.sample_joint_p(cfg.batch_n, rng, tape)
    batch_q = models.sample_joint_q(cfg.batch_n, dataset, rng, tape)
    batch_p2 = batch_q2 = None
    if cfg.debias:
        batch_p2 = models.sample_joint_p(cfg.batch_n, rng, tape)
        batch_q2 = models.sample_joint_q(cfg.batch_n, dataset, rng, tape)
    clog: dict = {}
    cross = mc_wasserstein_loss(batch_p, batch_q, spec, models, cfg, component_log=clog)
    if cfg.debias:
        self_p = mc_wasserstein_loss(batch_p, batch_p2, spec, models, cfg)
        self_q = mc_wasserstein_loss(batch_q, batch_q2, spec, models, cfg)
        total = cross - 0.5 * (self_p + self_q)
    else:
        total = cross
    if not np.isfinite(total.data):
        raise _abort(f"non-finite loss {float(total.data)!r}", clog, cfg)
    grads = tape.backward(total)
    for param, grad in grads.items():
        if not np.isfinite(grad).all():
            raise _abort(f"non-finite gradient for {param.name}", clog, cfg)
    optimizer.step(grads)
    scale = clog.pop("cost_scale", 1.0)
    return LossReport(step=step, epoch=epoch, loss=float(cross.data),
                      debiased_loss=float(total.data), components=clog,
                      cost_scale=scale,
                      time_ms=(time.perf_counter() - t0) * 1000.0)


def train_run(cfg: TrainConfig, dataset, models: ModelPair,
              out_dir: Optional[str] = None, checkpoint_meta: Optional[dict] = None):
    """Full training loop; returns (models, list of per-step reports).

    With an output directory, writes one JSONL record per step and a final
    checkpoint (the initial weights when epochs is 0).
    """
    examples = getattr(dataset, "examples", dataset)
    steps = cfg.steps_per_epoch or max(1, examples.shape[0] // cfg.batch_n)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    optimizer = Adam(models.parameters(), lr=cfg.learning_rate)
    reports: list[LossReport] = []
    log_fh = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / LOG_NAME, "w")
    try:
        step = 0
        for epoch in range(cfg.epochs):
            for _ in range(steps):
                report = train_step(models, dataset, cfg, optimizer, rng,
                                    step=step, epoch=epoch)
                reports.append(report)
                if log_fh is not None:
                    json.dump(report.json_record(), log_fh)
                    log_fh.write("\n")
                step += 1
    finally:
        if log_fh is not None:
            log_fh.close()
    if out_dir is not None:
        save_checkpoint(models, Path(out_dir) / CHECKPOINT_NAME, meta=checkpoint_meta)
    return models, reports


def smoothed(values, window: int = 50) -> np.ndarray:
    """Trailing moving average, shorter windows at the start."""
    values = np.asarray(values, dtype=np.float64)
    out = np.empty_like(values)
    csum = np.cumsum(values)
    for i in range(values.size):
        lo = max(0, i - window + 1)
        out[i] = (csum[i] - (csum[lo - 1] if lo > 0 else 0.0)) / (i - lo + 1)
    return out
