"""Products of multivariate t-experts.

An expert is the function ``q_k(z) = 1 / (1 + (z - mu_k)^T Lambda_k (z - mu_k))``
and the product of experts (PoE) is ``q(z | alpha) ∝ prod_k q_k(z)^alpha_k``.

Writing the product through a Dirichlet-weighted integral over the simplex
turns it into a continuous mixture of t-distributions indexed by
``w ∈ Δ^{K-1}``; :func:`mixture_component` computes that component and its
log weight ``log C_alpha(w)``.  Everything downstream (sampling, the
normalizing constant, importance weights) is built on it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import gammaln

from .errors import DimensionError, NormalizabilityError, SingularityError

DEFAULT_EPSILON = 1e-12
PRUNE_THRESHOLD = 1e-10
JITTER_SCALE = 1e-10
MAX_CONDITION = 1e14
SYMMETRY_TOL = 1e-10
NEG_EIG_TOL = 1e-10
TAIL_CHECK_DRAWS = 10_000


def as_generator(rng=None) -> np.random.Generator:
    """Coerce ``None``, an int seed, a SeedSequence or a Generator to a Generator."""
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Expert:
    """One t-expert with location ``mu`` and PSD inverse scale ``lam``."""

    mu: np.ndarray
    lam: np.ndarray

    def __post_init__(self):
        mu = np.array(self.mu, dtype=float).reshape(-1)
        lam = np.array(self.lam, dtype=float)
        d = mu.shape[0]
        if d == 0:
            raise DimensionError("expert location must be non-empty")
        if lam.shape != (d, d):
            raise DimensionError(f"lambda has shape {lam.shape}, expected {(d, d)}")
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(lam))):
            raise ValueError("expert parameters must be finite")
        if np.max(np.abs(lam - lam.T)) > SYMMETRY_TOL:
            raise ValueError("lambda must be symmetric")
        lam = 0.5 * (lam + lam.T)
        evals, evecs = np.linalg.eigh(lam)
        if evals[0] < -NEG_EIG_TOL:
            raise ValueError(f"lambda has negative eigenvalue {evals[0]:.3g}")
        if evals[0] < 0.0:
            lam = (evecs * np.clip(evals, 0.0, None)) @ evecs.T
            lam = 0.5 * (lam + lam.T)
        object.__setattr__(self, "mu", _readonly(mu))
        object.__setattr__(self, "lam", _readonly(lam))

    @property
    def dim(self) -> int:
        return self.mu.shape[0]

    def is_full_rank(self) -> bool:
        evals = np.linalg.eigvalsh(self.lam)
        return evals[-1] > 0 and evals[0] > 1e-12 * evals[-1]


class ExpertPool(Sequence):
    """An ordered, immutable collection of experts sharing one dimension.

    Stacked copies of the parameters (``mus`` with shape (K, D) and ``lams``
    with shape (K, D, D)) are kept for vectorized evaluation.
    """

    def __init__(self, experts: Sequence[Expert]):
        experts = tuple(experts)
        if not experts:
            raise DimensionError("an expert pool needs at least one expert")
        dims = {e.dim for e in experts}
        if len(dims) != 1:
            raise DimensionError(f"experts disagree on dimension: {sorted(dims)}")
        self._experts = experts
        self.mus = _readonly(np.stack([e.mu for e in experts]))
        self.lams = _readonly(np.stack([e.lam for e in experts]))
        # Lambda_k mu_k and mu_k^T Lambda_k mu_k, reused by the mixture map
        self._lam_mu = _readonly(np.einsum("kde,ke->kd", self.lams, self.mus))

    @classmethod
    def coerce(cls, pool) -> "ExpertPool":
        if isinstance(pool, ExpertPool):
            return pool
        if isinstance(pool, PoEDensity):
            return pool.pool
        return cls(pool)

    def __getitem__(self, i):
        return self._experts[i]

    def __len__(self):
        return len(self._experts)

    def __repr__(self):
        return f"ExpertPool(K={len(self)}, D={self.dim})"

    @property
    def dim(self) -> int:
        return self.mus.shape[1]

    def subset(self, idx) -> "ExpertPool":
        return ExpertPool([self._experts[i] for i in idx])

    def full_rank_mask(self) -> np.ndarray:
        return np.array([e.is_full_rank() for e in self._experts])


class PoEDensity:
    """Expert pool plus nonnegative weights ``alpha``: the unnormalized ``q(z|alpha)``.

    Weights are only required to be nonnegative here so that scores can be
    evaluated at arbitrary ``alpha``; integrability (``sum(alpha) > D/2``) is
    checked by :func:`check_normalizable` and enforced by every sampling routine.
    """

    def __init__(self, experts, alpha=None):
        self.pool = ExpertPool.coerce(experts)
        k = len(self.pool)
        alpha = np.ones(k) if alpha is None else np.array(alpha, dtype=float).reshape(-1)
        if alpha.shape != (k,):
            raise DimensionError(f"alpha has length {alpha.shape[0]}, pool has {k} experts")
        if not np.all(np.isfinite(alpha)):
            raise ValueError("alpha must be finite")
        if np.any(alpha < 0):
            raise ValueError("alpha must be nonnegative")
        self.alpha = _readonly(alpha)

    def __repr__(self):
        return f"PoEDensity(K={self.n_experts}, D={self.dim}, sum_alpha={self.alpha.sum():.4g})"

    @property
    def experts(self) -> ExpertPool:
        return self.pool

    @property
    def dim(self) -> int:
        return self.pool.dim

    @property
    def n_experts(self) -> int:
        return len(self.pool)

    @property
    def nu(self) -> float:
        return degrees_of_freedom(self.effective_alpha(), self.dim)

    def effective_alpha(self, threshold: float = PRUNE_THRESHOLD) -> np.ndarray:
        """Weights with entries below ``threshold`` set to exactly zero."""
        return np.where(self.alpha < threshold, 0.0, self.alpha)

    def active(self, threshold: float = PRUNE_THRESHOLD) -> np.ndarray:
        return np.flatnonzero(self.alpha >= threshold)

    def with_alpha(self, alpha) -> "PoEDensity":
        return PoEDensity(self.pool, alpha)


def _as_points(z, dim: int):
    """Return z as a (N, D) array plus a flag telling whether it was a single point."""
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    z2 = np.atleast_2d(z)
    if z2.ndim != 2 or z2.shape[1] != dim:
        raise DimensionError(f"point has dimension {z.shape[-1] if z.ndim else 0}, expected {dim}")
    return z2, single


def _chunk_rows(k: int, d: int, budget: int = 4_000_000) -> int:
    """Rows per chunk keeping (rows, K, D) temporaries near ``budget`` floats."""
    return max(1, budget // max(1, k * d))


def _quad_forms(pool: ExpertPool, z2: np.ndarray):
    diff = z2[:, None, :] - pool.mus[None, :, :]
    lam_diff = np.einsum("kde,nke->nkd", pool.lams, diff)
    qf = np.einsum("nkd,nkd->nk", diff, lam_diff)
    return np.maximum(qf, 0.0), lam_diff


def expert_log_factors(pool, z) -> np.ndarray:
    """``log q_k(z)`` for every expert; shape (K,) or (N, K)."""
    pool = ExpertPool.coerce(pool)
    z2, single = _as_points(z, pool.dim)
    qf, _ = _quad_forms(pool, z2)
    out = -np.log1p(qf)
    return out[0] if single else out


def poe_unnorm_log_density(poe: PoEDensity, z):
    """``sum_k -alpha_k log(1 + ||z - mu_k||^2_{Lambda_k})`` at one point or a batch."""
    z2, single = _as_points(z, poe.dim)
    step = _chunk_rows(poe.n_experts, poe.dim)
    out = np.empty(z2.shape[0])
    for lo in range(0, z2.shape[0], step):
        qf, _ = _quad_forms(poe.pool, z2[lo:lo + step])
        out[lo:lo + step] = -np.log1p(qf) @ poe.alpha
    return float(out[0]) if single else out


def score_matrix(pool, z) -> np.ndarray:
    """Matrix whose k-th column is ``grad log q_k(z) = -2 q_k(z) Lambda_k (z - mu_k)``.

    Returns shape (D, K) for a single point and (N, D, K) for a batch.
    """
    pool = ExpertPool.coerce(pool)
    z2, single = _as_points(z, pool.dim)
    qf, lam_diff = _quad_forms(pool, z2)
    q = 1.0 / (1.0 + qf)
    cols = -2.0 * q[:, :, None] * lam_diff  # (N, K, D)
    out = np.ascontiguousarray(np.swapaxes(cols, 1, 2))
    return out[0] if single else out


def poe_score(poe: PoEDensity, z) -> np.ndarray:
    """Score of the PoE; linear in the weights, so just ``Q(z) @ alpha``."""
    return score_matrix(poe.pool, z) @ poe.alpha


def poe_hessian(poe: PoEDensity, z) -> np.ndarray:
    """Hessian of the unnormalized log-density, shape (D, D) or (N, D, D)."""
    z2, single = _as_points(z, poe.dim)
    qf, lam_diff = _quad_forms(poe.pool, z2)
    q = 1.0 / (1.0 + qf)
    # d/dz [-2 q Lam (z-mu)] = -2 q Lam + 4 q^2 Lam (z-mu)(z-mu)^T Lam
    a = poe.alpha
    h = -2.0 * np.einsum("k,nk,kde->nde", a, q, poe.pool.lams)
    h += 4.0 * np.einsum("k,nk,nkd,nke->nde", a, q**2, lam_diff, lam_diff)
    return h[0] if single else h


def degrees_of_freedom(alpha, dim: int) -> float:
    """``nu = 2 sum(alpha) - D``; positivity is the caller's business."""
    return 2.0 * float(np.sum(alpha)) - dim


@dataclass(frozen=True, eq=False)
class MixtureComponent:
    """The t-component attached to one simplex point ``w``.

    ``omega_w = nu * Lambda(w) / (1 + sigma2_w)``; ``log_c_w`` is the log of the
    weight the component carries relative to the Dirichlet density.
    """

    mu_w: np.ndarray
    omega_w: np.ndarray
    nu: float
    sigma2_w: float
    log_c_w: float
    lambda_w: np.ndarray = field(repr=False, default=None)


@dataclass
class MixtureBatch:
    """Vectorized mixture parameters for B simplex points (internal workhorse)."""

    w: np.ndarray  # (B, K)
    mu_w: np.ndarray  # (B, D)
    lambda_w: np.ndarray  # (B, D, D), post-jitter
    chol_lambda: np.ndarray  # (B, D, D), lower Cholesky factor of lambda_w
    logdet_lambda: np.ndarray  # (B,)
    sigma2: np.ndarray  # (B,)
    nu: float
    log_c: np.ndarray  # (B,)

    @property
    def omega_scale(self) -> np.ndarray:
        """Per-draw factor ``nu / (1 + sigma2)`` turning Lambda(w) into Omega(w)."""
        return self.nu / (1.0 + self.sigma2)


def _validate_simplex(w: np.ndarray, k: int) -> np.ndarray:
    w = np.atleast_2d(np.asarray(w, dtype=float))
    if w.shape[1] != k:
        raise DimensionError(f"simplex point has length {w.shape[1]}, pool has {k} experts")
    if np.any(w < 0) or np.any(np.abs(w.sum(axis=1) - 1.0) > 1e-12):
        raise ValueError("w must lie on the probability simplex")
    return w


def jittered_cholesky(mats: np.ndarray, w=None):
    """Batched Cholesky with the jitter policy for near-singular matrices.

    Matrices with condition number above ``MAX_CONDITION`` get
    ``delta * I`` added, ``delta = JITTER_SCALE * trace / D``; if that still
    fails a :class:`SingularityError` naming the offending ``w`` is raised.
    Returns the (possibly jittered) matrices and their lower factors.
    """
    mats = np.array(mats, dtype=float)
    d = mats.shape[-1]
    evals = np.linalg.eigvalsh(mats)
    bad = ~(evals[:, 0] > evals[:, -1] / MAX_CONDITION) | ~np.all(np.isfinite(evals), axis=1)
    if np.any(bad):
        tr = np.trace(mats[bad], axis1=1, axis2=2)
        delta = JITTER_SCALE * tr / d
        mats[bad] += delta[:, None, None] * np.eye(d)
        ev2 = np.linalg.eigvalsh(mats[bad])
        still = ~(ev2[:, 0] > ev2[:, -1] / MAX_CONDITION) | ~(tr > 0) | ~np.all(np.isfinite(ev2), axis=1)
        if np.any(still):
            i = np.flatnonzero(bad)[np.flatnonzero(still)[0]]
            wi = None if w is None else w[i]
            raise SingularityError(f"Lambda(w) is singular beyond jitter tolerance at w={wi}", w=wi)
    try:
        chol = np.linalg.cholesky(mats)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - eigenvalue screen should catch this
        raise SingularityError(f"Cholesky factorization failed: {exc}") from exc
    return mats, chol


def mixture_batch(poe: PoEDensity, w) -> MixtureBatch:
    """Mixture parameters for each row of ``w`` (shape (B, K)), all in log domain."""
    pool = poe.pool
    w = np.atleast_2d(np.asarray(w, dtype=float))
    if w.shape[1] != len(pool):
        raise DimensionError(f"simplex point has length {w.shape[1]}, pool has {len(pool)} experts")
    d = pool.dim
    alpha = poe.effective_alpha()
    nu = degrees_of_freedom(alpha, d)
    if not nu > 0:
        raise NormalizabilityError(f"degrees of freedom nu={nu:.4g} must be positive")
    lam_w = np.einsum("bk,kde->bde", w, pool.lams)
    lam_w, chol = jittered_cholesky(lam_w, w)
    rhs = w @ pool._lam_mu
    y = np.linalg.solve(chol, rhs[:, :, None])
    mu_w = np.linalg.solve(np.swapaxes(chol, 1, 2), y)[:, :, 0]
    diff = pool.mus[None, :, :] - mu_w[:, None, :]
    qf = np.einsum("bkd,kde,bke->bk", diff, pool.lams, diff)
    sigma2 = np.maximum(np.einsum("bk,bk->b", w, qf), 0.0)
    logdet_lam = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=1, axis2=2)), axis=1)
    log1s = np.log1p(sigma2)
    logdet_omega = d * np.log(nu) + logdet_lam - d * log1s
    const = gammaln(nu / 2.0) + 0.5 * d * np.log(np.pi * nu) - gammaln((nu + d) / 2.0)
    log_c = -0.5 * (logdet_omega + (nu + d) * log1s) + const
    return MixtureBatch(w, mu_w, lam_w, chol, logdet_lam, sigma2, nu, log_c)


def mixture_component(poe: PoEDensity, w) -> MixtureComponent:
    """Location, inverse scale, dispersion and log weight of the w-indexed t-component."""
    w = _validate_simplex(w, poe.n_experts)
    if w.shape[0] != 1:
        raise DimensionError("mixture_component takes a single simplex point; use mixture_batch")
    mb = mixture_batch(poe, w)
    omega = mb.omega_scale[0] * mb.lambda_w[0]
    return MixtureComponent(
        mu_w=mb.mu_w[0],
        omega_w=omega,
        nu=mb.nu,
        sigma2_w=float(mb.sigma2[0]),
        log_c_w=float(mb.log_c[0]),
        lambda_w=mb.lambda_w[0],
    )


@dataclass(frozen=True)
class NormalizabilityCheck:
    ok: bool
    reason: str

    def __bool__(self):
        return self.ok


def check_normalizable(poe: PoEDensity, epsilon: float = DEFAULT_EPSILON, rng=0,
                       n_draws: int = TAIL_CHECK_DRAWS) -> NormalizabilityCheck:
    """Decide whether ``prod_k q_k^alpha_k`` is integrable; failure is a value, not an error.

    With rank-deficient inverse scales the weight-sum test is not enough, so
    Lambda(w) is additionally required to be numerically positive definite
    (before any jitter) at ``n_draws`` Dirichlet(alpha) points.
    """
    alpha = poe.alpha
    d = poe.dim
    if np.any(alpha < 0):
        return NormalizabilityCheck(False, "negative expert weight")
    total = float(alpha.sum())
    if not 2.0 * total > d + 2.0 * epsilon:
        return NormalizabilityCheck(
            False, f"sum(alpha)={total:.6g} does not exceed D/2 + epsilon = {d / 2 + epsilon:.6g}")
    active = poe.active()
    if active.size == 0:
        return NormalizabilityCheck(False, "all weights pruned")
    full = poe.pool.full_rank_mask()[active]
    if np.all(full):
        return NormalizabilityCheck(True, "weight sum exceeds D/2 with full-rank experts")
    gen = as_generator(rng)
    a = poe.alpha[active]
    w = gen.dirichlet(a, size=n_draws) if active.size > 1 else np.ones((n_draws, 1))
    lam_w = np.einsum("bk,kde->bde", w, poe.pool.lams[active])
    evals = np.linalg.eigvalsh(lam_w)
    good = evals[:, 0] > evals[:, -1] / MAX_CONDITION
    if not np.all(good):
        frac = 1.0 - good.mean()
        return NormalizabilityCheck(
            False, f"Lambda(w) singular at {frac:.2%} of {n_draws} Dirichlet draws (rank-deficient experts)")
    return NormalizabilityCheck(True, f"Lambda(w) positive definite at all {n_draws} Dirichlet draws")


def require_normalizable(poe: PoEDensity, epsilon: float = DEFAULT_EPSILON) -> None:
    check = check_normalizable(poe, epsilon)
    if not check:
        raise NormalizabilityError(check.reason)


def mixture_density_estimate(poe: PoEDensity, z, n_w: int, rng=None, return_stderr: bool = False):
    """Monte-Carlo value of ``prod_k q_k(z)^alpha_k`` through the continuous t-mixture.

    Averages ``(1 + sigma2)^(-(nu+D)/2) (1 + ||z - mu(w)||^2_Omega / nu)^(-(nu+D)/2)``
    over ``n_w`` Dirichlet(alpha) draws.  Meant for checking the mixture
    identity, not for production density evaluation.  ``z`` may be a batch,
    in which case all points share the same draws.
    """
    # deferred import: simplex_sampling depends on this module
    from .simplex_sampling import sample_dirichlet

    require_normalizable(poe)
    z2, single = _as_points(z, poe.dim)
    gen = as_generator(rng)
    w = sample_dirichlet(poe.effective_alpha(), gen, size=n_w)
    mb = mixture_batch(poe, w)
    d = poe.dim
    expo = -(mb.nu + d) / 2.0
    diff = z2[:, None, :] - mb.mu_w[None, :, :]  # (N, B, D)
    qf_lam = np.einsum("nbd,bde,nbe->nb", diff, mb.lambda_w, diff)
    qf_omega = qf_lam * mb.omega_scale[None, :]
    terms = np.exp(expo * (np.log1p(mb.sigma2)[None, :] + np.log1p(qf_omega / mb.nu)))
    est = terms.mean(axis=1)
    se = terms.std(axis=1, ddof=1) / np.sqrt(n_w) if n_w > 1 else np.zeros_like(est)
    if single:
        est, se = float(est[0]), float(se[0])
    return (est, se) if return_stderr else est


# ---------------------------------------------------------------------------
# expert-pool JSON


def pool_to_dict(poe_or_pool, alpha=None) -> dict:
    if isinstance(poe_or_pool, PoEDensity):
        pool, alpha = poe_or_pool.pool, poe_or_pool.alpha if alpha is None else alpha
    else:
        pool = ExpertPool.coerce(poe_or_pool)
    doc = {
        "dim": pool.dim,
        "experts": [{"mu": e.mu.tolist(), "lambda": e.lam.tolist()} for e in pool],
    }
    if alpha is not None:
        doc["alpha"] = np.asarray(alpha, dtype=float).tolist()
    return doc


def pool_from_dict(doc: dict) -> PoEDensity:
    try:
        dim = int(doc["dim"])
        experts = [Expert(e["mu"], e["lambda"]) for e in doc["experts"]]
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed expert-pool document: {exc}") from exc
    pool = ExpertPool(experts)
    if pool.dim != dim:
        raise DimensionError(f"pool file declares dim={dim} but experts have dim={pool.dim}")
    return PoEDensity(pool, doc.get("alpha"))


def save_pool(path, poe_or_pool, alpha=None) -> Path:
    path = Path(path)
    path.write_text(json.dumps(pool_to_dict(poe_or_pool, alpha), indent=2) + "\n")
    return path


def load_pool(path) -> PoEDensity:
    """Read an expert-pool JSON file; missing ``alpha`` defaults to all ones."""
    return pool_from_dict(json.loads(Path(path).read_text()))
