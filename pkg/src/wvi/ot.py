"""Entropic-regularized optimal transport between discrete distributions.

sinkhorn_value runs the alternating scaling iterations on K = exp(-C/eps)
and returns the transport cost of the resulting plan. When the cost
matrix is tape-tracked the loop is recorded op by op, so the value is
differentiable in every cost entry; otherwise a fast kernel path is used.
exact_ot_oracle solves the unregularized problem exactly (test oracle).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import Tensor

MARGINAL_TOL = 1e-12
UNDERFLOW_FLOOR = 1e-300
ORACLE_LP_MAX_ENTRIES = 64


class SinkhornUnderflowError(ArithmeticError):
    """K = exp(-C/eps) lost all mass in a row or column."""


class OracleSizeError(ValueError):
    """The exact solver is test-only and refuses large instances."""


def _check_weights(w: np.ndarray, n: int, name: str) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (n,):
        raise ad.ShapeError(f"{name}: expected {n} weights, got shape {w.shape}")
    if (w < 0).any():
        raise ValueError(f"{name}: negative weight at index {int(np.argmin(w))}")
    if abs(w.sum() - 1.0) > 1e-9:
        raise ValueError(f"{name}: weights sum to {w.sum()!r}, expected 1")
    return w


class DiscreteDistribution:
    """Empirical distribution: support rows plus non-negative weights summing to 1."""

    def __init__(self, points, weights=None):
        self.points = ad.as_tensor(points)
        if self.points.data.ndim != 2 or self.points.shape[0] < 1:
            raise ad.ShapeError(f"points must be a non-empty (n, d) matrix, got {self.points.shape}")
        n = self.points.shape[0]
        if weights is None:
            weights = np.full(n, 1.0 / n)
        self.weights = _check_weights(weights, n, "weights")

    @property
    def n(self) -> int:
        return self.points.shape[0]


class CostMatrix:
    """Non-negative finite transport costs, possibly tape-tracked."""

    def __init__(self, entries):
        self.entries = ad.as_tensor(entries)
        if self.entries.data.ndim != 2:
            raise ad.ShapeError(f"cost matrix must be rank 2, got shape {self.entries.shape}")
        vals = self.entries.data
        if not np.isfinite(vals).all():
            bad = np.unravel_index(int(np.argmax(~np.isfinite(vals))), vals.shape)
            raise ValueError(f"non-finite cost at {bad}")
        if (vals < 0).any():
            bad = np.unravel_index(int(np.argmax(vals < 0)), vals.shape)
            raise ValueError(f"negative cost {vals[bad]!r} at {bad}")

    @property
    def shape(self):
        return self.entries.shape

    @property
    def tracked(self) -> bool:
        return self.entries.tracked


@dataclass(frozen=True)
class SinkhornConfig:
    epsilon: float = 0.1
    iterations: int = 20
    stop_tol: Optional[float] = None

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")


@dataclass
class Coupling:
    """Transport plan with its worst marginal mismatch."""

    plan: np.ndarray
    max_marginal_violation: float
    iterations_run: int


def build_cost_matrix(a: DiscreteDistribution, b: DiscreteDistribution,
                      cost: Callable) -> CostMatrix:
    """Evaluate a per-pair cost over the two supports.

    cost receives one row of a and one row of b (1-D tensors) and must
    return a finite non-negative scalar. The result is tracked whenever
    the points or the cost's own parameters are tracked.
    """
    values = []
    for j in range(a.n):
        pj = ad.take_row(a.points, j)
        for k in range(b.n):
            qk = ad.take_row(b.points, k)
            v = ad.as_tensor(cost(pj, qk))
            val = float(v.data)
            if not np.isfinite(val) or val < 0:
                raise ValueError(f"cost({j}, {k}) returned invalid value {val!r}")
            values.append(v)
    return CostMatrix(ad.stack_scalars(values, (a.n, b.n)))


def _kernel_matrix_checked(C: np.ndarray, epsilon: float) -> np.ndarray:
    K = np.exp(-C / epsilon)
    for axis, name in ((1, "row"), (0, "column")):
        sums = K.sum(axis=axis)
        if sums.min() < UNDERFLOW_FLOOR:
            raise SinkhornUnderflowError(
                f"{name} {int(np.argmin(sums))} of exp(-C/eps) has no mass; "
                f"increase epsilon (eps={epsilon!r}) or normalize the costs")
    return K


def _scalings_fast(C: np.ndarray, r, c, cfg: SinkhornConfig):
    """Kernel-path scaling vectors.

    Shifts each row and column of C so both contain a zero before
    exponentiating. The plan is invariant to such shifts (they are
    absorbed into the scalings), and exp(-C/eps) then keeps mass in
    every line for any epsilon.
    """
    C = np.ascontiguousarray(C)
    row_off = C.min(axis=1)
    shifted = C - row_off[:, None]
    col_off = shifted.min(axis=0)
    shifted = shifted - col_off[None, :]
    K = np.exp(-shifted / cfg.epsilon)
    stop = cfg.stop_tol if cfg.stop_tol is not None else 0.0
    u, v, done, status = kernels.sinkhorn_scalings(K, r, c, cfg.iterations, stop)
    if status != kernels.SINKHORN_OK:
        raise _underflow_error(cfg.epsilon)
    return K, u, v, done


def _underflow_error(epsilon):
    return SinkhornUnderflowError(
        f"scaling denominators underflowed; increase epsilon (eps={epsilon!r}) "
        "or normalize the costs")


def _plan_fast(C: np.ndarray, r, c, cfg: SinkhornConfig):
    K, u, v, done = _scalings_fast(C, r, c, cfg)
    plan = u[:, None] * K * v[None, :]
    viol = max(np.abs(plan.sum(axis=1) - r).max(), np.abs(plan.sum(axis=0) - c).max())
    return plan, viol, done


def sinkhorn_value(C: CostMatrix, weights_a, weights_b, cfg: SinkhornConfig) -> Tensor:
    """Transport cost after a fixed number of scaling iterations.

    Returns sum_ij plan_ij * C_ij as a scalar tensor. For a tracked cost
    matrix the whole loop is recorded on the tape (gradients flow into
    every entry); untracked inputs take the preconditioned kernel path,
    which agrees at convergence.
    """
    n, m = C.shape
    r = _check_weights(weights_a, n, "weights_a")
    c = _check_weights(weights_b, m, "weights_b")
    if not C.tracked:
        plan, _, _ = _plan_fast(C.entries.data, r, c, cfg)
        return Tensor((plan * C.entries.data).sum())

    entries = C.entries
    _kernel_matrix_checked(entries.data, cfg.epsilon)
    K = ad.exp(ad.neg(entries / cfg.epsilon))
    KT = ad.transpose(K)
    rt = Tensor(r[:, None])
    ct = Tensor(c[:, None])
    u = rt
    try:
        for _ in range(cfg.iterations):
            v = ct / (KT @ u)
            b = K @ v
            viol = float(np.abs(u.data * b.data - rt.data).max())
            u = rt / b
            if cfg.stop_tol is not None and viol <= cfg.stop_tol:
                break
        v = ct / (KT @ u)
    except ad.DomainError as err:
        raise _underflow_error(cfg.epsilon) from err
    plan = u * K * ad.transpose(v)
    return ad.reduce_sum(plan * entries)


def sinkhorn_plan(C: CostMatrix, weights_a, weights_b, cfg: SinkhornConfig) -> Coupling:
    """The scaled plan diag(u) K diag(v) with its marginal violation.

    Plans are evaluation outputs, so this always runs the kernel path on
    the cost values.
    """
    n, m = C.shape
    r = _check_weights(weights_a, n, "weights_a")
    c = _check_weights(weights_b, m, "weights_b")
    plan, viol, done = _plan_fast(C.entries.data, r, c, cfg)
    return Coupling(plan=plan, max_marginal_violation=viol, iterations_run=done)


def plan_mutual_information(plan: np.ndarray) -> float:
    """KL(plan || marginal product); finite for any strictly feasible plan."""
    r = plan.sum(axis=1)
    c = plan.sum(axis=0)
    outer = np.outer(r, c)
    mask = plan > 0
    return float((plan[mask] * np.log(plan[mask] / outer[mask])).sum())


def exact_ot_oracle(C: CostMatrix, weights_a=None, weights_b=None) -> float:
    """Exact unregularized transport cost for small instances (test oracle).

    Uniform square instances are solved as an assignment problem (the
    optimum is a permutation scaled by 1/n); other instances up to
    64 entries go through an LP solver.
    """
    entries = C.entries.data
    n, m = entries.shape
    r = np.full(n, 1.0 / n) if weights_a is None else _check_weights(weights_a, n, "weights_a")
    c = np.full(m, 1.0 / m) if weights_b is None else _check_weights(weights_b, m, "weights_b")
    uniform = (n == m and np.allclose(r, 1.0 / n, atol=1e-12)
               and np.allclose(c, 1.0 / m, atol=1e-12))
    if uniform:
        from scipy.optimize import linear_sum_assignment

        rows, cols = linear_sum_assignment(entries)
        return float(entries[rows, cols].sum() / n)
    if n * m > ORACLE_LP_MAX_ENTRIES:
        raise OracleSizeError(
            f"{n}x{m} exceeds the {ORACLE_LP_MAX_ENTRIES}-entry LP limit of the test oracle")
    from scipy.optimize import linprog

    a_eq = np.zeros((n + m, n * m))
    for i in range(n):
        a_eq[i, i * m : (i + 1) * m] = 1.0
    for j in range(m):
        a_eq[n + j, j::m] = 1.0
    res = linprog(entries.reshape(-1), A_eq=a_eq, b_eq=np.concatenate([r, c]),
                  bounds=(0, None), method="highs")
    if not res.success:
        raise RuntimeError(f"LP solver failed: {res.message}")
    return float(res.fun)
