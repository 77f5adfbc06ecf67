"""Iterative regularized score matching for the expert weights.

Each iteration draws a weighted batch from the current PoE, evaluates the
target score at the draws, and solves::

    alpha_{t+1} = argmin_{alpha in C}  sum_b pi_b ||Q_b alpha - g_b||^2 + ||alpha - alpha_t||^2 / eta_t

which, because the PoE score ``Q_b alpha`` is linear in the weights, is the
strongly convex QP ``0.5 a^T G a - h^T a`` with
``G = sum_b pi_b Q_b^T Q_b + I / eta`` and ``h = sum_b pi_b Q_b^T g_b + alpha_t / eta``.
The importance weights ``pi`` are normalized to sum to one.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import eigvalsh

from .errors import ConstraintRepairError, DimensionError, NonConvergenceError, NonFiniteError
from .poe_model import (
    DEFAULT_EPSILON,
    PRUNE_THRESHOLD,
    ExpertPool,
    PoEDensity,
    check_normalizable,
    score_matrix,
)
from .qp_solver import DEFAULT_TOL, FeasibleSet, QuadraticProgram, solve_constrained
from .simplex_sampling import WeightedBatch, draw_weighted_batch

log = logging.getLogger(__name__)


@dataclass
class FitConfig:
    batch_size: int = 10_000
    iterations: int = 20
    learning_rates: float | Sequence[float] | Callable[[int], float] = 1.0
    qp_tolerance: float = DEFAULT_TOL
    prune_threshold: float = PRUNE_THRESHOLD
    epsilon: float = DEFAULT_EPSILON
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        if not callable(self.learning_rates) and not np.isscalar(self.learning_rates):
            rates = list(self.learning_rates)
            if len(rates) < self.iterations:
                raise ValueError(f"{len(rates)} learning rates for {self.iterations} iterations")
            if any(not r > 0 for r in rates):
                raise ValueError("learning rates must be positive")
        elif np.isscalar(self.learning_rates) and not self.learning_rates > 0:
            raise ValueError("learning rate must be positive")

    def eta(self, t: int) -> float:
        """Learning rate of iteration ``t`` (1-based)."""
        lr = self.learning_rates
        if callable(lr):
            value = float(lr(t))
        elif np.isscalar(lr):
            value = float(lr)
        else:
            value = float(list(lr)[t - 1])
        if not value > 0:
            raise ValueError(f"learning rate at iteration {t} is {value}")
        return value

    def to_dict(self) -> dict:
        lr = self.learning_rates
        if callable(lr):
            raise TypeError("callable learning-rate schedules cannot be serialized")
        return {
            "batch_size": self.batch_size,
            "iterations": self.iterations,
            "learning_rates": float(lr) if np.isscalar(lr) else [float(r) for r in lr],
            "qp_tolerance": self.qp_tolerance,
            "prune_threshold": self.prune_threshold,
            "epsilon": self.epsilon,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "FitConfig":
        return cls(**doc)


@dataclass
class IterationRecord:
    iteration: int
    alpha: np.ndarray
    empirical_fisher: float
    lambda_min: float
    lambda_max: float
    r_min: float
    relative_ess: float
    qp_iterations: int
    wall_time: float
    grad_norm: float = float("nan")


@dataclass
class FitTrace:
    records: list = field(default_factory=list)
    final_alpha: np.ndarray | None = None
    active_count: int = 0
    alpha0: np.ndarray | None = None

    def alphas(self) -> np.ndarray:
        return np.array([r.alpha for r in self.records])

    def to_rows(self, record_wall_time: bool = True):
        k = len(self.final_alpha)
        header = ["t"] + [f"alpha_{i + 1}" for i in range(k)] + [
            "empirical_fisher", "lambda_min", "lambda_max", "r_min", "relative_ess", "qp_iterations",
            "wall_time_ms"]
        rows = []
        for r in self.records:
            wall = r.wall_time * 1e3 if record_wall_time else 0.0
            rows.append([r.iteration] + [repr(float(a)) for a in r.alpha] + [
                repr(float(r.empirical_fisher)), repr(float(r.lambda_min)), repr(float(r.lambda_max)),
                repr(float(r.r_min)), repr(float(r.relative_ess)), r.qp_iterations, repr(float(wall))])
        return header, rows


def _check_scores(target_scores, batch: WeightedBatch) -> np.ndarray:
    g = np.asarray(target_scores, dtype=float)
    if g.shape != batch.z.shape:
        raise DimensionError(f"target scores have shape {g.shape}, batch draws have {batch.z.shape}")
    finite = np.all(np.isfinite(g), axis=1)
    if not np.all(finite):
        bad = int(np.flatnonzero(~finite)[0])
        raise NonFiniteError(f"non-finite target score at sample {bad}", index=bad)
    return g


def _weighted_gram(q: np.ndarray, pi: np.ndarray) -> np.ndarray:
    """``sum_b pi_b Q_b^T Q_b`` for Q of shape (B, D, K)."""
    b, d, k = q.shape
    flat = q.reshape(b * d, k)
    wts = np.repeat(pi, d)
    h = flat.T @ (flat * wts[:, None])
    return 0.5 * (h + h.T)


def batch_score_matrices(pool, batch: WeightedBatch) -> np.ndarray:
    return score_matrix(pool, batch.z)


def assemble_system(batch: WeightedBatch, pool, target_scores, alpha_t, eta_t: float,
                    q: np.ndarray | None = None) -> QuadraticProgram:
    """Build ``(G_t, h_t)`` from a batch, the target scores at its draws, and the previous weights."""
    pool = ExpertPool.coerce(pool)
    g = _check_scores(target_scores, batch)
    alpha_t = np.asarray(alpha_t, dtype=float)
    if alpha_t.shape != (len(pool),):
        raise DimensionError(f"alpha_t has length {alpha_t.shape[0]}, pool has {len(pool)} experts")
    if not eta_t > 0:
        raise ValueError("eta_t must be positive")
    q = batch_score_matrices(pool, batch) if q is None else q
    k = len(pool)
    gram = _weighted_gram(q, batch.pi)
    lin = np.einsum("b,bdk,bd->k", batch.pi, q, g)
    return QuadraticProgram(gram + np.eye(k) / eta_t, lin + alpha_t / eta_t)


def empirical_fisher(batch: WeightedBatch, pool, alpha, target_scores, q: np.ndarray | None = None) -> float:
    """``sum_b pi_b ||Q_b alpha - g_b||^2`` (self-normalized importance estimate)."""
    pool = ExpertPool.coerce(pool)
    g = _check_scores(target_scores, batch)
    q = batch_score_matrices(pool, batch) if q is None else q
    resid = q @ np.asarray(alpha, dtype=float) - g
    return float(batch.pi @ np.einsum("bd,bd->b", resid, resid))


def hessian_diagnostics(batch: WeightedBatch, pool, q: np.ndarray | None = None):
    """Extreme eigenvalues of ``H = sum_b pi_b Q_b^T Q_b`` and their ratio ``r_min``."""
    if batch.size == 0:
        raise ValueError("empty batch")
    pool = ExpertPool.coerce(pool)
    q = batch_score_matrices(pool, batch) if q is None else q
    ev = eigvalsh(_weighted_gram(q, batch.pi))
    lmin, lmax = float(ev[0]), float(ev[-1])
    r = lmin / lmax if lmax > 0 else 0.0
    return lmin, lmax, r


def _repair(alpha: np.ndarray, c: FeasibleSet) -> np.ndarray:
    s = alpha.sum()
    if s >= c.bound:
        return alpha
    if s <= 0:
        raise ConstraintRepairError("pruning removed every expert weight")
    scale = c.bound / s
    out = alpha * scale
    while out.sum() < c.bound:
        out = out * (1.0 + 1e-15)
    log.warning("pruning dropped sum(alpha) below D/2 + eps; rescaled by %.17g", scale)
    return out


def fit(pool, target, config: FitConfig | None = None, alpha0=None, callback=None) -> FitTrace:
    """Learn expert weights by iterated regularized score matching.

    Parameters
    ----------
    pool : ExpertPool or sequence of Expert
        Fixed experts; only their weights are learned.
    target : TargetModel
        Provides ``score`` on (N, D) arrays.
    config : FitConfig
    alpha0 : array, optional
        Initial weights (default all ones).
    callback : callable, optional
        Called as ``callback(record)`` after every iteration.
    """
    config = config or FitConfig()
    pool = ExpertPool.coerce(pool)
    k, d = len(pool), pool.dim
    if target.dim != d:
        raise DimensionError(f"target has D={target.dim}, pool has D={d}")
    alpha = np.ones(k) if alpha0 is None else np.array(alpha0, dtype=float)
    feasible = FeasibleSet(d, config.epsilon)
    check = check_normalizable(PoEDensity(pool, alpha), config.epsilon)
    if not check:
        raise ConstraintRepairError(f"initial weights are not normalizable: {check.reason}")
    root = np.random.SeedSequence(config.seed)
    trace = FitTrace(alpha0=alpha.copy())
    for t in range(1, config.iterations + 1):
        tic = time.perf_counter()
        poe = PoEDensity(pool, alpha)
        batch = draw_weighted_batch(poe, config.batch_size, np.random.SeedSequence(root.entropy, spawn_key=(t,)))
        scores = _check_scores(target.score(batch.z), batch)
        q = batch_score_matrices(pool, batch)
        eta = config.eta(t)
        qp = assemble_system(batch, pool, scores, alpha, eta, q=q)
        try:
            sol = solve_constrained(qp, feasible, tol=config.qp_tolerance, warm_start=alpha)
        except NonConvergenceError as exc:
            exc.iteration = t
            raise
        new = np.where(sol.alpha < config.prune_threshold, 0.0, sol.alpha)
        new = _repair(new, feasible)
        if not check_normalizable(PoEDensity(pool, new), config.epsilon):
            raise ConstraintRepairError(f"weights at iteration {t} are not normalizable")
        lmin, lmax, rmin = hessian_diagnostics(batch, pool, q=q)
        fisher = empirical_fisher(batch, pool, new, scores, q=q)
        resid = q @ new - scores
        grad = 2.0 * np.einsum("b,bdk,bd->k", batch.pi, q, resid)
        rec = IterationRecord(
            iteration=t, alpha=new.copy(), empirical_fisher=fisher, lambda_min=lmin, lambda_max=lmax,
            r_min=rmin, relative_ess=batch.ess().relative_ess, qp_iterations=sol.iterations,
            wall_time=time.perf_counter() - tic, grad_norm=float(np.linalg.norm(0.5 * grad)))
        trace.records.append(rec)
        log.debug("iter %d fisher=%.4g active=%d", t, fisher, int(np.count_nonzero(new)))
        if callback is not None:
            callback(rec)
        alpha = new
    trace.final_alpha = alpha
    trace.active_count = int(np.count_nonzero(alpha))
    return trace


def error_decay_study(pool, target, alpha_star, config: FitConfig | None = None, alpha0=None) -> np.ndarray:
    """Euclidean distance to ``alpha_star`` of the initial weights and of every iterate.

    The returned array has ``T + 1`` entries, the first one for ``alpha0``.
    """
    alpha_star = np.asarray(alpha_star, dtype=float)
    trace = fit(pool, target, config, alpha0=alpha0)
    errs = [np.linalg.norm(trace.alpha0 - alpha_star)]
    errs += [np.linalg.norm(r.alpha - alpha_star) for r in trace.records]
    return np.array(errs)


def decay_summary(errors, floor_window: int = 5, floor_factor: float = 2.0):
    """Least-squares slope of log-error before the floor, and the floor itself.

    The floor is the median of the last ``floor_window`` errors; the pre-floor
    segment runs until the error first falls below ``floor_factor`` times it.
    """
    e = np.maximum(np.asarray(errors, dtype=float), 1e-300)
    floor = float(np.median(e[-floor_window:]))
    below = np.flatnonzero(e <= floor_factor * floor)
    end = int(below[0]) if below.size else e.size
    end = max(end, 2)
    t = np.arange(end)
    slope = float(np.polyfit(t, np.log(e[:end]), 1)[0])
    return slope, floor
