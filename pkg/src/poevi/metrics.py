"""Divergences between a target and a fitted PoE, plus a moment-matched Gaussian baseline."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionError, NonFiniteError
from .poe_model import PoEDensity, poe_score, poe_unnorm_log_density
from .simplex_sampling import estimate_log_normalizer
from .targets import DEFAULT_NORMALIZER_BUDGET, ReferenceSamples, TargetModel, gaussian_target

DEFAULT_SAMPLES = 1000
BASELINE_RIDGE = 1e-9


def _samples(p_samples, dim: int) -> np.ndarray:
    if isinstance(p_samples, ReferenceSamples):
        p_samples.check_dim(dim)
        z = p_samples.samples
    else:
        z = np.atleast_2d(np.asarray(p_samples, dtype=float))
        if z.shape[1] != dim:
            raise DimensionError(f"samples have dimension {z.shape[1]}, model has {dim}")
    if z.shape[0] == 0:
        raise ValueError("no samples to evaluate on")
    return z


def _model_score(q, z):
    return poe_score(q, z) if isinstance(q, PoEDensity) else q.score(z)


def _finite_mean(terms: np.ndarray, what: str) -> float:
    bad = ~np.isfinite(terms)
    if np.any(bad):
        raise NonFiniteError(f"{int(bad.sum())} non-finite {what} terms out of {terms.size}",
                             index=int(np.flatnonzero(bad)[0]))
    return float(terms.mean())


def fisher_under_p(p_samples, q, target: TargetModel) -> float:
    """Mean of ``||grad log q(z) - grad log p(z)||^2`` over samples from p.

    ``q`` is a PoEDensity or any model with a ``score`` method (e.g. the baseline).
    """
    z = _samples(p_samples, target.dim)
    diff = _model_score(q, z) - target.score(z)
    return _finite_mean(np.sum(diff**2, axis=1), "Fisher")


def poe_log_density(q: PoEDensity, z, log_normalizer: float) -> np.ndarray:
    return poe_unnorm_log_density(q, z) - log_normalizer


def forward_kl(p_samples, target: TargetModel, q, normalizer_budget: int = DEFAULT_NORMALIZER_BUDGET,
               rng=0, log_normalizer: float | None = None) -> float:
    """Monte Carlo ``KL(p; q)`` with the PoE normalizer estimated from ``normalizer_budget`` draws."""
    if not target.normalized:
        raise ValueError(f"forward KL needs a normalized target; {target.name} is unnormalized")
    z = _samples(p_samples, target.dim)
    if isinstance(q, PoEDensity):
        if log_normalizer is None:
            log_normalizer = estimate_log_normalizer(q, normalizer_budget, rng)
        log_q = poe_log_density(q, z, log_normalizer)
    else:
        if not q.normalized:
            raise ValueError("forward KL needs a normalized model")
        log_q = q.log_density(z)
    return _finite_mean(target.log_density(z) - log_q, "KL")


def neg_llh(p_samples, q: PoEDensity, normalizer_budget: int = DEFAULT_NORMALIZER_BUDGET, rng=0,
            log_normalizer: float | None = None) -> float:
    """``-mean log q(z)`` over the samples."""
    z = _samples(p_samples, q.dim)
    if isinstance(q, PoEDensity):
        if log_normalizer is None:
            log_normalizer = estimate_log_normalizer(q, normalizer_budget, rng)
        log_q = poe_log_density(q, z, log_normalizer)
    else:
        log_q = q.log_density(z)
    return -_finite_mean(log_q, "log-likelihood")


def gaussian_baseline(p_samples) -> TargetModel:
    """Gaussian with the sample mean and (ridged) sample covariance of ``p_samples``."""
    z = p_samples.samples if isinstance(p_samples, ReferenceSamples) else np.atleast_2d(
        np.asarray(p_samples, dtype=float))
    n, d = z.shape
    if n <= d:
        raise ValueError(f"need more samples than dimensions for a covariance, got {n} for D={d}")
    mean = z.mean(axis=0)
    cov = np.atleast_2d(np.cov(z, rowvar=False))
    scale = max(float(np.trace(cov)) / d, 0.0)
    vals = np.linalg.eigvalsh(cov)
    if not scale > 0 or vals.min() <= 1e-12 * max(vals.max(), 1e-300):
        raise np.linalg.LinAlgError("sample covariance is degenerate")
    cov = cov + BASELINE_RIDGE * np.eye(d)
    model = gaussian_target(mean, cov)
    model.name = "gaussian_baseline"
    model.mean, model.cov = mean, cov
    return model


@dataclass
class EvaluationReport:
    fisher_under_p: float
    n_samples: int
    forward_kl: float | None = None
    neg_llh: float | None = None
    log_normalizer: float | None = None
    seed: int | None = None

    def __post_init__(self):
        if not self.fisher_under_p >= 0:
            raise ValueError(f"Fisher divergence must be nonnegative, got {self.fisher_under_p}")

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2))
        return path


def evaluate(p_samples, target: TargetModel, q, normalizer_budget: int = DEFAULT_NORMALIZER_BUDGET,
             seed: int = 0) -> EvaluationReport:
    """All applicable metrics for one model.

    The PoE normalizer is estimated once and reused by KL and Neg-LLH.
    """
    z = _samples(p_samples, target.dim)
    log_c = None
    if isinstance(q, PoEDensity):
        log_c = estimate_log_normalizer(q, normalizer_budget, seed)
    fisher = fisher_under_p(z, q, target)
    kl = forward_kl(z, target, q, log_normalizer=log_c) if target.normalized else None
    nll = neg_llh(z, q, log_normalizer=log_c)
    return EvaluationReport(fisher, len(z), kl, nll, log_c, seed)
