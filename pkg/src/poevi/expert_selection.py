"""Building an oversaturated expert pool from a target.

For each mode found by hill climbing, an expert is placed at the mode with
inverse scale ``-H`` (``H`` = half the Hessian of ``log p``).  Satellite
locations come from a Halton box around the mode, resampled by the tempered
target and thinned greedily; each satellite gets the PSD-projected ``-H`` at
its own location.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .errors import DimensionError, NonConvergenceError, NonFiniteError, SingularityError
from .poe_model import JITTER_SCALE, MAX_CONDITION, Expert, ExpertPool, as_generator
from .simplex_sampling import halton_points

# published expert-selection settings for the synthetic targets
TARGET_SETTINGS = {
    "gaussian_mixture_example": {"max_experts": 143, "candidates": 50_000, "scale": 28.0, "beta": 0.4},
    "poe_example": {"max_experts": 157, "candidates": 50_000, "scale": 28.0, "beta": 0.5},
    "diamond": {"max_experts": 60, "candidates": 50_000, "scale": 28.0, "beta": 0.1},
    "funnel": {"max_experts": 50, "candidates": 50_000, "scale": 15.0, "beta": 0.5},
    "sinh_arcsinh": {"max_experts": 100, "candidates": 50_000, "scale": 15.0, "beta": 0.5},
    "rosenbrock": {"max_experts": 90, "candidates": 3_500_000, "scale": 20.0, "beta": 0.5},
}


@dataclass
class HillClimb:
    initial_step: float = 1.0
    shrink: float = 0.5
    armijo_c: float = 1e-4
    grad_tol: float = 1e-6
    max_steps: int = 10_000


@dataclass
class SelectionConfig:
    """Knobs of the selection heuristic.

    ``resample`` defaults to ``candidates``; ``min_separation`` defaults to
    ``0.05 * scale * max sqrt(diag(Lambda_1^{-1}))`` of each mode; ``fd_step``
    defaults to ``1e-4 * (1 + ||z||)``; ``seed=None`` gives an unscrambled Halton box.
    """

    candidates: int = 50_000
    scale: float = 15.0
    beta: float = 0.5
    tau: float = 6.0
    min_separation: float | None = None
    max_experts: int = 50
    resample: int | None = None
    hill_climb: HillClimb = field(default_factory=HillClimb)
    fd_step: float | None = None
    seed: int | None = 0

    def __post_init__(self):
        if isinstance(self.hill_climb, dict):
            self.hill_climb = HillClimb(**self.hill_climb)
        if not 0 < self.beta <= 1:
            raise ValueError(f"beta must lie in (0, 1], got {self.beta}")
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.min_separation is not None and self.min_separation < 0:
            raise ValueError("min_separation must be nonnegative")
        if not self.candidates >= self.max_experts >= 1:
            raise ValueError(f"need candidates >= max_experts >= 1, got {self.candidates}, {self.max_experts}")
        if self.resample is not None and self.resample < 1:
            raise ValueError("resample count must be positive")

    @property
    def n_resample(self) -> int:
        return self.candidates if self.resample is None else int(self.resample)

    @classmethod
    def for_target(cls, name: str, **overrides) -> "SelectionConfig":
        return cls(**{**TARGET_SETTINGS.get(name, {}), **overrides})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "SelectionConfig":
        return cls(**doc)


@dataclass
class CandidateSet:
    points: np.ndarray
    temper_weights: np.ndarray


@dataclass
class SelectionReport:
    modes: list
    mode_steps: list
    candidates_generated: int
    accepted_per_mode: list
    pool_size: int

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2))
        return path


def find_mode(target, z0, cfg: SelectionConfig | HillClimb | None = None):
    """Gradient ascent on ``log p`` with Armijo backtracking; returns ``(z_star, steps)``.

    Without a log-density the sufficient-decrease test is made on the score norm.
    """
    hc = cfg.hill_climb if isinstance(cfg, SelectionConfig) else (cfg or HillClimb())
    z = np.asarray(z0, dtype=float).reshape(-1)
    if z.size != target.dim:
        raise DimensionError(f"start has dimension {z.size}, target has {target.dim}")
    if not np.all(np.isfinite(z)):
        raise NonFiniteError("starting point is not finite")
    use_logp = target.has_log_density

    def merit(x):
        return target.log_density(x) if use_logp else -0.5 * float(np.sum(target.score(x) ** 2))

    f = merit(z)
    g = target.score(z)
    step = hc.initial_step
    for it in range(hc.max_steps):
        gn2 = float(g @ g)
        if np.sqrt(gn2) <= hc.grad_tol:
            return z, it
        t = step
        while True:
            cand = z + t * g
            fc = merit(cand)
            if np.isfinite(fc) and fc >= f + hc.armijo_c * t * gn2:
                break
            t *= hc.shrink
            if t < 1e-300:
                raise NonConvergenceError("line search failed to find an ascent step", best=z,
                                          residual=np.sqrt(gn2), iteration=it)
        z, f = cand, fc
        g = target.score(z)
        # let the step grow back so one tight region does not stall the climb
        step = min(hc.initial_step, t / hc.shrink)
    gn = float(np.linalg.norm(g))
    if gn <= hc.grad_tol:
        return z, hc.max_steps
    raise NonConvergenceError(f"hill climbing stopped after {hc.max_steps} steps with gradient norm {gn:.3g}",
                              best=z, residual=gn, iteration=hc.max_steps)


def curvature_at(target, z, fd_step: float | None = None) -> np.ndarray:
    """Half the Hessian of ``log p`` at z, analytic when the target has one.

    Otherwise the score is differenced centrally with step ``fd_step`` (default
    ``1e-4 * (1 + ||z||)``) and symmetrized.  Accepts one point or a batch.
    """
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    z2 = np.atleast_2d(z)
    if z2.shape[1] != target.dim:
        raise DimensionError(f"point has dimension {z2.shape[1]}, target has {target.dim}")
    n, d = z2.shape
    if target.has_hessian:
        hess = np.asarray(target.hessian(z2), dtype=float).reshape(n, d, d)
    else:
        if fd_step is None:
            h = 1e-4 * (1.0 + np.linalg.norm(z2, axis=1))
        else:
            h = np.full(n, float(fd_step))
        eye = np.eye(d)
        shifts = h[:, None, None] * eye[None]
        plus = np.asarray(target.score((z2[:, None, :] + shifts).reshape(-1, d))).reshape(n, d, d)
        minus = np.asarray(target.score((z2[:, None, :] - shifts).reshape(-1, d))).reshape(n, d, d)
        # row j holds d(score)/dz_j
        hess = (plus - minus) / (2.0 * h[:, None, None])
    hess = 0.5 * (hess + np.swapaxes(hess, 1, 2))
    if not np.all(np.isfinite(hess)):
        bad = int(np.flatnonzero(~np.all(np.isfinite(hess), axis=(1, 2)))[0])
        raise NonFiniteError(f"non-finite curvature at point {bad}", index=bad)
    out = 0.5 * hess
    return out[0] if single else out


def psd_project(m) -> np.ndarray:
    """Nearest PSD matrix in Frobenius norm: clip negative eigenvalues to zero."""
    m = np.asarray(m, dtype=float)
    sym = 0.5 * (m + np.swapaxes(m, -1, -2))
    vals, vecs = np.linalg.eigh(sym)
    out = (vecs * np.maximum(vals, 0.0)[..., None, :]) @ np.swapaxes(vecs, -1, -2)
    return 0.5 * (out + np.swapaxes(out, -1, -2))


def _box_halfwidths(expert: Expert, s: float) -> np.ndarray:
    lam = np.asarray(expert.lam)
    vals, vecs = np.linalg.eigh(lam)
    top = vals.max()
    if not top > 0:
        raise SingularityError("mode expert has no positive curvature; the candidate box is unbounded")
    if vals.min() <= top / MAX_CONDITION:
        lam = lam + JITTER_SCALE * np.trace(lam) / lam.shape[0] * np.eye(lam.shape[0])
    try:
        cov = np.linalg.inv(lam)
    except np.linalg.LinAlgError as exc:
        raise SingularityError(f"mode expert inverse scale is singular: {exc}") from exc
    return s * np.sqrt(np.diag(cov))


def generate_candidates(mode_expert: Expert, M: int, s: float, seed=None) -> np.ndarray:
    """M Halton points mapped onto ``mu +- s sqrt(diag(Lambda^{-1}))``."""
    half = _box_halfwidths(mode_expert, s)
    u = halton_points(int(M), mode_expert.dim, seed)
    return np.asarray(mode_expert.mu) + (2.0 * u - 1.0) * half


def temper_weights(log_rho, beta: float) -> np.ndarray:
    if not 0 < beta <= 1:
        raise ValueError(f"beta must lie in (0, 1], got {beta}")
    lw = beta * np.asarray(log_rho, dtype=float)
    lw = np.where(np.isnan(lw), -np.inf, lw)
    if not np.any(np.isfinite(lw)):
        raise NonFiniteError("every candidate has zero tempered weight")
    return np.exp(lw - logsumexp(lw))


def temper_resample(candidates, target, beta: float, N: int, rng=None, return_set: bool = False):
    """N draws with replacement, probability ``∝ exp(beta log rho(z_i))``."""
    pts = np.asarray(candidates, dtype=float)
    w = temper_weights(target.log_density(pts), beta)
    gen = as_generator(rng)
    idx = gen.choice(len(pts), size=int(N), replace=True, p=w)
    out = pts[idx]
    return (out, CandidateSet(pts, w)) if return_set else out


def greedy_select(mode, points, tau: float, min_separation: float, K_max: int) -> np.ndarray:
    """Locations starting at the mode, each within ``tau`` of it and ``min_separation`` of the rest."""
    mode = np.asarray(mode, dtype=float).reshape(-1)
    chosen = [mode]
    if K_max <= 1:
        return np.array(chosen)
    pts = np.asarray(points, dtype=float).reshape(-1, mode.size)
    near = pts[np.linalg.norm(pts - mode, axis=1) < tau]
    for p in near:
        gaps = np.linalg.norm(np.asarray(chosen) - p, axis=1)
        if np.all(gaps >= min_separation):
            chosen.append(p)
            if len(chosen) >= K_max:
                break
    return np.array(chosen)


def _shares(total: int, parts: int) -> list:
    base, extra = divmod(total, parts)
    return [base + (1 if i < extra else 0) for i in range(parts)]


def _expert_at(target, z, fd_step) -> Expert:
    return Expert(z, psd_project(-curvature_at(target, z, fd_step)))


def build_pool(target, cfg: SelectionConfig | None = None, mode_starts=None, return_report: bool = False):
    """Mode experts plus tempered-resampled satellites, merged into one pool."""
    cfg = cfg or SelectionConfig()
    starts = [np.zeros(target.dim)] if mode_starts is None else [np.asarray(s, dtype=float) for s in mode_starts]
    if not starts:
        raise ValueError("at least one mode start is needed")
    modes, steps = [], []
    for z0 in starts:
        z, n = find_mode(target, z0, cfg)
        if all(np.linalg.norm(z - m) > 1e-3 * cfg.scale for m in modes):
            modes.append(z)
            steps.append(n)
    if len(modes) > cfg.max_experts:
        modes, steps = modes[: cfg.max_experts], steps[: cfg.max_experts]

    root = np.random.SeedSequence(cfg.seed)
    children = root.spawn(len(modes))
    experts, accepted = [], []
    generated = 0
    for mode, share, child in zip(modes, _shares(cfg.max_experts, len(modes)), children):
        head = _expert_at(target, mode, cfg.fd_step)
        if share <= 1:
            experts.append(head)
            accepted.append(1)
            continue
        halton_seed = None if cfg.seed is None else child.spawn(1)[0]
        cand = generate_candidates(head, cfg.candidates, cfg.scale, halton_seed)
        generated += len(cand)
        picked = temper_resample(cand, target, cfg.beta, cfg.n_resample, np.random.default_rng(child))
        sep = cfg.min_separation
        if sep is None:
            sep = 0.05 * float(np.max(_box_halfwidths(head, 1.0))) * cfg.scale
        locs = greedy_select(mode, picked, cfg.tau, sep, share)
        experts.append(head)
        if len(locs) > 1:
            lams = psd_project(-curvature_at(target, locs[1:], cfg.fd_step))
            experts.extend(Expert(loc, lam) for loc, lam in zip(locs[1:], lams))
        accepted.append(len(locs))
    pool = ExpertPool(experts)
    if not return_report:
        return pool
    report = SelectionReport([m.tolist() for m in modes], steps, generated, accepted, len(pool))
    return pool, report
