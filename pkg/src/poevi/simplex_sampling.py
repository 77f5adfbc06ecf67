"""Sampling a product of t-experts through its latent simplex variable.

Draws go Dirichlet(alpha) -> w, then t(mu(w), Omega(w), nu) -> z, and each
draw carries the importance weight ``C_alpha(w)``.  The same weights give the
normalizing constant as a plain Dirichlet expectation.

Batches are generated in fixed-size chunks, each with its own counter-derived
seed (root seed + chunk index), so the output does not depend on how many
workers produce the chunks.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import logsumexp
from scipy.stats import qmc

from .errors import DimensionError, EmptyModelError, NonFiniteError, SingularityError
from .poe_model import (
    PRUNE_THRESHOLD,
    MixtureComponent,
    PoEDensity,
    as_generator,
    mixture_batch,
    require_normalizable,
)

CHUNK_SIZE = 8192
MAX_HALTON_DIM = 50


def root_seed_sequence(rng) -> np.random.SeedSequence:
    """Root of the counter-based seed tree for one batch.

    A Generator is advanced by one draw so that consecutive batches from the
    same generator differ; ints and SeedSequences are used as given.
    """
    if isinstance(rng, np.random.SeedSequence):
        return rng
    if isinstance(rng, np.random.Generator):
        return np.random.SeedSequence(int(rng.integers(2**63)))
    return np.random.SeedSequence(rng)


def chunk_generator(root: np.random.SeedSequence, index: int) -> np.random.Generator:
    child = np.random.SeedSequence(root.entropy, spawn_key=(*root.spawn_key, index))
    return np.random.default_rng(child)


def _chunks(n: int, chunk_size: int):
    return [(j, j * chunk_size, min(n, (j + 1) * chunk_size)) for j in range((n + chunk_size - 1) // chunk_size)]


def sample_dirichlet(alpha, rng=None, size: int | None = None, threshold: float = PRUNE_THRESHOLD) -> np.ndarray:
    """Dirichlet(alpha) draws from normalized Gamma(alpha_k, 1) variates.

    Weights below ``threshold`` are pruned: the corresponding coordinates are
    exactly zero.  Returns shape (K,) when ``size`` is None, else (size, K).
    """
    alpha = np.asarray(alpha, dtype=float).reshape(-1)
    gen = as_generator(rng)
    active = np.flatnonzero(alpha >= threshold)
    if active.size == 0:
        raise EmptyModelError("every Dirichlet concentration is below the pruning threshold")
    n = 1 if size is None else int(size)
    w = np.zeros((n, alpha.size))
    if active.size == 1:
        w[:, active[0]] = 1.0
    else:
        g = gen.standard_gamma(alpha[active], size=(n, active.size))
        s = g.sum(axis=1)
        # all-underflow rows only occur for tiny concentrations; redraw them
        while np.any(s <= 0):
            bad = s <= 0
            g[bad] = gen.standard_gamma(alpha[active], size=(int(bad.sum()), active.size))
            s = g.sum(axis=1)
        w[:, active] = g / s[:, None]
    return w[0] if size is None else w


def _t_draws(mu: np.ndarray, chol_lambda: np.ndarray, scale: np.ndarray, nu: float,
             gen: np.random.Generator) -> np.ndarray:
    """Batched t draws with inverse scale ``scale_b * L_b L_b^T``."""
    b, d = mu.shape
    u = gen.standard_normal((b, d))
    g = 2.0 * gen.standard_gamma(nu / 2.0, size=b)  # chi-square(nu)
    # x = L^{-T} u has covariance (L L^T)^{-1}
    x = np.linalg.solve(np.swapaxes(chol_lambda, 1, 2), u[:, :, None])[:, :, 0]
    return mu + x * np.sqrt(nu / (g * scale))[:, None]


def sample_student_t(comp: MixtureComponent, rng=None) -> np.ndarray:
    """One draw from t(mu(w), Omega(w), nu) as ``mu + L u sqrt(nu/g)`` with ``L L^T = Omega^{-1}``."""
    gen = as_generator(rng)
    omega = np.asarray(comp.omega_w, dtype=float)
    d = omega.shape[0]
    try:
        cov = np.linalg.inv(omega)
        low = np.linalg.cholesky(0.5 * (cov + cov.T))
    except np.linalg.LinAlgError as exc:
        raise SingularityError(f"Omega(w) could not be factored: {exc}") from exc
    u = gen.standard_normal(d)
    g = 2.0 * gen.standard_gamma(comp.nu / 2.0)
    return np.asarray(comp.mu_w) + low @ u * np.sqrt(comp.nu / g)


@dataclass(frozen=True)
class EssReport:
    ess: float
    relative_ess: float

    def to_dict(self) -> dict:
        return {"ess": self.ess, "relative_ess": self.relative_ess}


def effective_sample_size(pi) -> EssReport:
    """``(sum pi)^2 / sum pi^2`` and its ratio to the batch size."""
    pi = np.asarray(pi, dtype=float).reshape(-1)
    if pi.size == 0:
        raise ValueError("effective sample size of an empty weight vector")
    ess = float(pi.sum() ** 2 / np.sum(pi**2))
    ess = min(max(ess, 1.0), float(pi.size))
    return EssReport(ess, ess / pi.size)


def log_ess(log_weights) -> float:
    """Log ESS straight from unnormalized log weights."""
    lw = np.asarray(log_weights, dtype=float)
    return float(2.0 * logsumexp(lw) - logsumexp(2.0 * lw))


@dataclass
class WeightedBatch:
    """B draws ``(w_b, z_b, log C(w_b))`` with self-normalized importance weights ``pi``."""

    w: np.ndarray
    z: np.ndarray
    log_c: np.ndarray
    pi: np.ndarray
    log_normalizer_contrib: float

    @classmethod
    def from_draws(cls, w, z, log_c) -> "WeightedBatch":
        log_c = np.asarray(log_c, dtype=float)
        lse = logsumexp(log_c)
        pi = np.exp(log_c - lse)
        pi /= pi.sum()
        return cls(np.asarray(w), np.asarray(z), log_c, pi, float(lse - np.log(log_c.size)))

    def __len__(self):
        return self.z.shape[0]

    @property
    def size(self) -> int:
        return self.z.shape[0]

    @property
    def dim(self) -> int:
        return self.z.shape[1]

    def ess(self) -> EssReport:
        return effective_sample_size(self.pi)

    def records(self):
        for b in range(self.size):
            yield self.w[b], self.z[b], float(self.log_c[b])

    def resample(self, n: int, rng=None) -> np.ndarray:
        """Unweighted points drawn with replacement according to ``pi``."""
        gen = as_generator(rng)
        idx = gen.choice(self.size, size=n, replace=True, p=self.pi)
        return self.z[idx]

    def to_csv(self, path) -> Path:
        path = Path(path)
        k, d = self.w.shape[1], self.z.shape[1]
        header = [f"w_{i + 1}" for i in range(k)] + [f"z_{i + 1}" for i in range(d)] + ["log_c", "pi"]
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for b in range(self.size):
                writer.writerow([repr(float(v)) for v in self.w[b]] + [repr(float(v)) for v in self.z[b]]
                                + [repr(float(self.log_c[b])), repr(float(self.pi[b]))])
        return path


def _batch_chunk(poe: PoEDensity, alpha, n: int, gen: np.random.Generator, with_z: bool):
    w = sample_dirichlet(alpha, gen, size=n)
    mb = mixture_batch(poe, w)
    z = _t_draws(mb.mu_w, mb.chol_lambda, mb.omega_scale, mb.nu, gen) if with_z else None
    return w, z, mb.log_c


def _run_chunks(poe, n, rng, with_z, chunk_size, workers):
    if n < 1:
        raise ValueError(f"batch size must be at least 1, got {n}")
    require_normalizable(poe)
    root = root_seed_sequence(rng)
    alpha = poe.effective_alpha()

    def job(spec):
        j, lo, hi = spec
        return _batch_chunk(poe, alpha, hi - lo, chunk_generator(root, j), with_z)

    specs = _chunks(n, chunk_size)
    if workers and workers > 1 and len(specs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(job, specs))
    else:
        parts = [job(s) for s in specs]
    w = np.concatenate([p[0] for p in parts])
    z = np.concatenate([p[1] for p in parts]) if with_z else None
    log_c = np.concatenate([p[2] for p in parts])
    return w, z, log_c


def draw_weighted_batch(poe: PoEDensity, B: int, rng=None, chunk_size: int = CHUNK_SIZE,
                        workers: int = 1) -> WeightedBatch:
    """B independent latent-variable draws with importance weights ``pi_b ∝ C_alpha(w_b)``."""
    w, z, log_c = _run_chunks(poe, int(B), rng, True, chunk_size, workers)
    if not np.all(np.isfinite(z)):
        bad = int(np.flatnonzero(~np.all(np.isfinite(z), axis=1))[0])
        raise NonFiniteError(f"non-finite draw at index {bad}", index=bad)
    return WeightedBatch.from_draws(w, z, log_c)


def estimate_log_normalizer(poe: PoEDensity, B: int, rng=None, return_stderr: bool = False,
                            chunk_size: int = 65536, workers: int = 1):
    """Log of the Dirichlet average of ``C_alpha(w)``, i.e. log of the PoE normalizer.

    The Gamma/pi factors live inside ``log C_alpha(w)`` already.  With
    ``return_stderr`` the delta-method standard error of the log estimate is
    returned as well.
    """
    _, _, log_c = _run_chunks(poe, int(B), rng, False, chunk_size, workers)
    est = float(logsumexp(log_c) - np.log(log_c.size))
    if not return_stderr:
        return est
    rel = np.exp(log_c - log_c.max())
    se = float(rel.std(ddof=1) / np.sqrt(rel.size) / rel.mean()) if rel.size > 1 else 0.0
    return est, se


def expectation(batch: WeightedBatch, h, vectorized: bool = False):
    """Self-normalized importance estimate ``sum_b pi_b h(z_b)``.

    ``h`` is called once per draw, or once on the whole (B, D) array when
    ``vectorized`` is set; scalar and vector-valued ``h`` are both fine.
    """
    if batch.size == 0:
        raise ValueError("expectation over an empty batch")
    if vectorized:
        vals = np.asarray(h(batch.z), dtype=float)
    else:
        vals = np.asarray([np.asarray(h(z), dtype=float) for z in batch.z])
    if vals.shape[0] != batch.size:
        raise DimensionError(f"h returned {vals.shape[0]} values for {batch.size} draws")
    flat = vals.reshape(batch.size, -1)
    finite = np.all(np.isfinite(flat), axis=1)
    if not np.all(finite):
        bad = int(np.flatnonzero(~finite)[0])
        raise NonFiniteError(f"h returned a non-finite value at sample {bad}", index=bad)
    out = np.tensordot(batch.pi, vals, axes=(0, 0))
    return float(out) if np.ndim(out) == 0 else out


def halton_points(M: int, D: int, seed=None) -> np.ndarray:
    """First M Halton points in bases 2, 3, 5, ... (the leading origin is skipped).

    ``seed=None`` gives the plain sequence; otherwise each dimension's digits
    are randomly permuted, keyed by ``seed``.
    """
    if D < 1 or D > MAX_HALTON_DIM:
        raise DimensionError(f"Halton dimension must be in [1, {MAX_HALTON_DIM}], got {D}")
    if seed is None:
        engine = qmc.Halton(d=D, scramble=False)
    else:
        engine = qmc.Halton(d=D, scramble=True, rng=np.random.default_rng(seed))
    engine.fast_forward(1)
    pts = engine.random(int(M))
    # float rounding of scrambled radical inverses can land on 1.0
    return np.minimum(pts, np.nextafter(1.0, 0.0))
