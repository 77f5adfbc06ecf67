"""Target densities: a small zoo, reference-sample ingestion, and external black boxes.

Every target exposes batched callables over (N, D) arrays.  The score is
always available; when a target only knows its log-density the score is
filled in by central differences.
"""

from __future__ import annotations

import csv
import json
import queue
import shlex
import subprocess
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .errors import DimensionError, NonFiniteError, ProtocolError, TransportError
from .poe_model import (
    Expert,
    PoEDensity,
    as_generator,
    poe_hessian,
    poe_score,
    poe_unnorm_log_density,
    require_normalizable,
)
from .simplex_sampling import draw_weighted_batch, estimate_log_normalizer

DEFAULT_FD_STEP = 1e-5
DEFAULT_NORMALIZER_BUDGET = 500_000


def _points(z, dim):
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    z2 = np.atleast_2d(z)
    if z2.shape[-1] != dim or z2.ndim != 2:
        raise DimensionError(f"point has dimension {z.shape[-1] if z.ndim else 0}, target has {dim}")
    return z2, single


class TargetModel:
    """A black-box density ``p`` known through its (possibly unnormalized) log and score.

    Parameters
    ----------
    dim : int
        Dimension D.
    log_density, score, hessian : callable, optional
        Batched functions of an (N, D) array returning (N,), (N, D) and
        (N, D, D) arrays.  At least one of ``log_density`` and ``score`` is needed.
    sampler : callable, optional
        ``sampler(n, rng) -> (n, D)`` exact draws from ``p``.
    normalized : bool
        True only when ``log_density`` includes the normalizing constant.
    """

    def __init__(self, dim, log_density=None, score=None, hessian=None, sampler=None,
                 normalized=False, name="target", fd_step=DEFAULT_FD_STEP, params=None):
        if log_density is None and score is None:
            raise ValueError("a target needs a log-density or a score")
        self.dim = int(dim)
        self._log_density = log_density
        self._score = score
        self._hessian = hessian
        self._sampler = sampler
        self.normalized = bool(normalized) and log_density is not None
        self.name = name
        self.fd_step = fd_step
        self.params = params or {}

    def __repr__(self):
        return f"TargetModel({self.name!r}, D={self.dim})"

    @property
    def capabilities(self) -> dict:
        return {
            "unnorm_log_density": self._log_density is not None,
            "score": True,
            "native_score": self._score is not None,
            "analytic_hessian": self._hessian is not None,
            "exact_sampler": self._sampler is not None,
            "normalized": self.normalized,
        }

    @property
    def has_log_density(self) -> bool:
        return self._log_density is not None

    @property
    def has_hessian(self) -> bool:
        return self._hessian is not None

    @property
    def has_sampler(self) -> bool:
        return self._sampler is not None

    def log_density(self, z):
        if self._log_density is None:
            raise NotImplementedError(f"{self.name} has no log-density")
        z2, single = _points(z, self.dim)
        out = np.asarray(self._log_density(z2), dtype=float)
        return float(out[0]) if single else out

    def score(self, z):
        z2, single = _points(z, self.dim)
        if self._score is not None:
            out = np.asarray(self._score(z2), dtype=float)
        else:
            out = finite_diff_score(self, z2, self.fd_step)
        return out[0] if single else out

    def hessian(self, z):
        if self._hessian is None:
            raise NotImplementedError(f"{self.name} has no analytic Hessian")
        z2, single = _points(z, self.dim)
        out = np.asarray(self._hessian(z2), dtype=float)
        return out[0] if single else out

    def sample(self, n, rng=None):
        if self._sampler is None:
            raise NotImplementedError(f"{self.name} has no exact sampler; ingest reference samples")
        return np.asarray(self._sampler(int(n), as_generator(rng)), dtype=float)

    def close(self):
        pass


def finite_diff_score(target: TargetModel, z, step: float = DEFAULT_FD_STEP) -> np.ndarray:
    """Central-difference gradient of ``target.log_density``, one coordinate at a time."""
    z2, single = _points(z, target.dim)
    n, d = z2.shape
    shifts = np.concatenate([np.eye(d) * step, -np.eye(d) * step])  # (2D, D)
    pts = (z2[:, None, :] + shifts[None, :, :]).reshape(-1, d)
    vals = np.asarray(target.log_density(pts), dtype=float).reshape(n, 2 * d)
    if not np.all(np.isfinite(vals)):
        bad = int(np.flatnonzero(~np.all(np.isfinite(vals), axis=1))[0])
        raise NonFiniteError(f"non-finite log-density near point {bad}", index=bad)
    grad = (vals[:, :d] - vals[:, d:]) / (2.0 * step)
    return grad[0] if single else grad


# ---------------------------------------------------------------------------
# zoo


def gaussian_mixture_target(weights, means, covariances, name="gaussian_mixture") -> TargetModel:
    """Normalized finite Gaussian mixture with analytic score and Hessian."""
    weights = np.asarray(weights, dtype=float).reshape(-1)
    means = np.atleast_2d(np.asarray(means, dtype=float))
    covs = np.asarray(covariances, dtype=float)
    m, d = means.shape
    if covs.shape != (m, d, d) or weights.shape != (m,):
        raise DimensionError("weights, means and covariances disagree in shape")
    if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-10:
        raise ValueError("mixture weights must lie on the simplex")
    try:
        chols = np.linalg.cholesky(covs)
    except np.linalg.LinAlgError as exc:
        raise ValueError(f"invalid covariance: {exc}") from exc
    precs = np.linalg.inv(covs)
    logdets = 2.0 * np.sum(np.log(np.diagonal(chols, axis1=1, axis2=2)), axis=1)
    with np.errstate(divide="ignore"):
        log_w = np.log(weights)
    consts = log_w - 0.5 * (d * np.log(2.0 * np.pi) + logdets)

    def comp_logs(z):
        diff = z[:, None, :] - means[None]
        maha = np.einsum("nmd,mde,nme->nm", diff, precs, diff)
        return consts[None] - 0.5 * maha, diff

    def log_density(z):
        lc, _ = comp_logs(z)
        return logsumexp(lc, axis=1)

    def parts(z):
        lc, diff = comp_logs(z)
        resp = np.exp(lc - logsumexp(lc, axis=1, keepdims=True))
        s = -np.einsum("mde,nme->nmd", precs, diff)
        return resp, s

    def score(z):
        resp, s = parts(z)
        return np.einsum("nm,nmd->nd", resp, s)

    def hessian(z):
        resp, s = parts(z)
        sbar = np.einsum("nm,nmd->nd", resp, s)
        h = np.einsum("nm,mde->nde", resp, -precs) + np.einsum("nm,nmd,nme->nde", resp, s, s)
        return h - sbar[:, :, None] * sbar[:, None, :]

    def sampler(n, rng):
        comp = rng.choice(m, size=n, p=weights)
        u = rng.standard_normal((n, d))
        return means[comp] + np.einsum("nde,ne->nd", chols[comp], u)

    params = {"weights": weights.tolist(), "means": means.tolist(), "covariances": covs.tolist()}
    return TargetModel(d, log_density, score, hessian, sampler, normalized=True, name=name, params=params)


def gaussian_target(mean, cov) -> TargetModel:
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    return gaussian_mixture_target([1.0], [mean], [np.asarray(cov, dtype=float)], name="gaussian")


def gaussian_mixture_example() -> TargetModel:
    """Three-component mixture with weights 0.3, 0.4, 0.3 in two dimensions."""
    return gaussian_mixture_target(
        [0.3, 0.4, 0.3],
        [[-1.0, 0.0], [1.0, 0.0], [0.0, 1.0]],
        [[[0.5, 0.0], [0.0, 0.5]], [[0.5, 0.0], [0.0, 0.5]], [[1.0, 0.5], [0.5, 1.0]]],
    )


def poe_target(poe: PoEDensity, normalizer_budget: int = DEFAULT_NORMALIZER_BUDGET, seed=0,
               name="poe") -> TargetModel:
    """A product of t-experts used as a target.

    The log-density is normalized with a Monte-Carlo estimate of the
    normalizer (``normalizer_budget`` Dirichlet draws, computed on first use);
    exact samples come from importance resampling of a weighted batch.
    """
    require_normalizable(poe)
    cache = {}

    def log_norm():
        if "c" not in cache:
            cache["c"] = estimate_log_normalizer(poe, normalizer_budget, seed)
        return cache["c"]

    def log_density(z):
        return poe_unnorm_log_density(poe, z) - log_norm()

    def sampler(n, rng):
        batch = draw_weighted_batch(poe, max(4 * n, 10_000), rng)
        return batch.resample(n, rng)

    t = TargetModel(poe.dim, log_density, lambda z: poe_score(poe, z), lambda z: poe_hessian(poe, z),
                    sampler, normalized=True, name=name, params={"normalizer_budget": normalizer_budget})
    t.poe = poe
    t.log_normalizer = log_norm
    t.unnorm_log_density = lambda z: poe_unnorm_log_density(poe, z)
    return t


def _sym(m):
    m = np.asarray(m, dtype=float)
    return 0.5 * (m + m.T)


def poe_example_density() -> PoEDensity:
    """Two-expert bimodal PoE at (-2,-2) and (2,2) with unit weights.

    The first inverse scale is given non-symmetrically; only its symmetric
    part enters the quadratic form, so that is what is stored.
    """
    return PoEDensity(
        [Expert([-2.0, -2.0], _sym([[1.0, 0.5], [0.2, 1.0]])),
         Expert([2.0, 2.0], _sym([[1.0, 0.1], [0.1, 1.0]]))],
        [1.0, 1.0],
    )


def diamond_density() -> PoEDensity:
    """Two co-located experts with crossed anisotropy and weights 1.2."""
    return PoEDensity(
        [Expert([0.0, 0.0], np.linalg.inv(np.diag([100.0, 1.0]))),
         Expert([0.0, 0.0], np.linalg.inv(np.diag([1.0, 100.0])))],
        [1.2, 1.2],
    )


def funnel_target(sigma2: float = 1.1, D: int = 2) -> TargetModel:
    """Funnel: ``z1 ~ N(0, sigma2)``, ``z_d | z1 ~ N(0, exp(z1/2))`` with exp(z1/2) a variance."""
    if not sigma2 > 0:
        raise ValueError("sigma2 must be positive")
    if D < 2:
        raise DimensionError("the funnel needs D >= 2")
    m = D - 1

    def log_density(z):
        z1, rest = z[:, 0], z[:, 1:]
        log_var = z1 / 2.0
        lp1 = -0.5 * (np.log(2 * np.pi * sigma2) + z1**2 / sigma2)
        lp2 = -0.5 * (m * (np.log(2 * np.pi) + log_var) + np.sum(rest**2, axis=1) * np.exp(-log_var))
        return lp1 + lp2

    def score(z):
        z1, rest = z[:, 0], z[:, 1:]
        inv_var = np.exp(-z1 / 2.0)
        g = np.empty_like(z)
        g[:, 0] = -z1 / sigma2 - m / 4.0 + 0.25 * np.sum(rest**2, axis=1) * inv_var
        g[:, 1:] = -rest * inv_var[:, None]
        return g

    def hessian(z):
        z1, rest = z[:, 0], z[:, 1:]
        inv_var = np.exp(-z1 / 2.0)
        h = np.zeros((z.shape[0], D, D))
        h[:, 0, 0] = -1.0 / sigma2 - 0.125 * np.sum(rest**2, axis=1) * inv_var
        h[:, 0, 1:] = 0.5 * rest * inv_var[:, None]
        h[:, 1:, 0] = h[:, 0, 1:]
        idx = np.arange(1, D)
        h[:, idx, idx] = -inv_var[:, None]
        return h

    def sampler(n, rng):
        z1 = np.sqrt(sigma2) * rng.standard_normal(n)
        rest = np.exp(z1 / 4.0)[:, None] * rng.standard_normal((n, m))
        return np.column_stack([z1, rest])

    return TargetModel(D, log_density, score, hessian, sampler, normalized=True, name="funnel",
                       params={"sigma2": sigma2, "D": D})


def sinh_arcsinh_target(epsilon, tau, D: int | None = None, base_cov=None) -> TargetModel:
    """Gaussian pushed through ``z_d = sinh((asinh(x_d) + epsilon_d) / tau_d)``, ``x ~ N(0, base_cov)``."""
    eps = np.atleast_1d(np.asarray(epsilon, dtype=float))
    tau = np.atleast_1d(np.asarray(tau, dtype=float))
    if D is None:
        D = max(eps.size, tau.size)
    eps = np.broadcast_to(eps, (D,)).copy()
    tau = np.broadcast_to(tau, (D,)).copy()
    if np.any(tau <= 0):
        raise ValueError("tau must be positive")
    cov = np.eye(D) if base_cov is None else np.asarray(base_cov, dtype=float)
    chol = np.linalg.cholesky(cov)
    prec = np.linalg.inv(cov)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))

    def inverse(z):
        return np.sinh(tau * np.arcsinh(z) - eps)

    def forward(x):
        return np.sinh((np.arcsinh(x) + eps) / tau)

    def log_density(z):
        a = tau * np.arcsinh(z) - eps
        x = np.sinh(a)
        base = -0.5 * (D * np.log(2 * np.pi) + logdet + np.einsum("nd,de,ne->n", x, prec, x))
        # log|dx/dz| = sum log(tau cosh(a) / sqrt(1 + z^2))
        jac = np.sum(np.log(tau) + _log_cosh(a) - 0.5 * np.log1p(z**2), axis=1)
        return base + jac

    def score(z):
        a = tau * np.arcsinh(z) - eps
        x = np.sinh(a)
        root = np.sqrt(1.0 + z**2)
        dx = tau * np.cosh(a) / root
        return -(x @ prec) * dx + tau * np.tanh(a) / root - z / (1.0 + z**2)

    def sampler(n, rng):
        x = rng.standard_normal((n, D)) @ chol.T
        return forward(x)

    t = TargetModel(D, log_density, score, None, sampler, normalized=True, name="sinh_arcsinh",
                    params={"epsilon": eps.tolist(), "tau": tau.tolist(), "D": D})
    t.forward = forward
    t.inverse = inverse
    return t


def _log_cosh(a):
    a = np.abs(a)
    return a + np.log1p(np.exp(-2.0 * a)) - np.log(2.0)


def rosenbrock_target(normalize: bool = False, grid_nodes: int = 2001, half_width: float = 6.0) -> TargetModel:
    """``log p(z) = -[(1 - z1)^2 + 2 (z2 - z1^2)^2]``, unnormalized unless ``normalize``.

    Normalization integrates over ``[-half_width, half_width]^2`` with the
    trapezoid rule on a ``grid_nodes``-per-axis grid.  No exact sampler.
    """

    def unnorm(z):
        return -((1.0 - z[:, 0]) ** 2 + 2.0 * (z[:, 1] - z[:, 0] ** 2) ** 2)

    def score(z):
        z1, z2 = z[:, 0], z[:, 1]
        r = z2 - z1**2
        return np.column_stack([2.0 * (1.0 - z1) + 8.0 * z1 * r, -4.0 * r])

    def hessian(z):
        z1, z2 = z[:, 0], z[:, 1]
        h = np.empty((z.shape[0], 2, 2))
        h[:, 0, 0] = -2.0 + 8.0 * (z2 - z1**2) - 16.0 * z1**2
        h[:, 0, 1] = h[:, 1, 0] = 8.0 * z1
        h[:, 1, 1] = -4.0
        return h

    log_density = unnorm
    log_z = None
    if normalize:
        xs = np.linspace(-half_width, half_width, grid_nodes)
        x1, x2 = np.meshgrid(xs, xs, indexing="ij")
        vals = np.exp(unnorm(np.column_stack([x1.ravel(), x2.ravel()]))).reshape(x1.shape)
        log_z = float(np.log(np.trapezoid(np.trapezoid(vals, xs, axis=1), xs)))

        def log_density(z):
            return unnorm(z) - log_z

    t = TargetModel(2, log_density, score, hessian, None, normalized=normalize, name="rosenbrock")
    t.log_normalizer = log_z
    return t


# ---------------------------------------------------------------------------
# reference samples


@dataclass(frozen=True, eq=False)
class ReferenceSamples:
    samples: np.ndarray
    source: str = ""

    def __post_init__(self):
        s = np.atleast_2d(np.asarray(self.samples, dtype=float))
        if s.shape[0] < 1:
            raise ValueError("reference samples must contain at least one row")
        if not np.all(np.isfinite(s)):
            raise ValueError("reference samples must be finite")
        object.__setattr__(self, "samples", s)

    @property
    def n(self) -> int:
        return self.samples.shape[0]

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    def check_dim(self, dim: int) -> None:
        if self.dim != dim:
            raise DimensionError(f"reference samples have D={self.dim}, target has D={dim}")


def load_reference_samples(path) -> ReferenceSamples:
    """Read a CSV with header ``z_1,...,z_D`` and one sample per row."""
    path = Path(path)
    rows = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValueError(f"{path}: empty file")
        names = [h.strip() for h in header]
        d = len(names)
        if names != [f"z_{i + 1}" for i in range(d)]:
            raise ValueError(f"{path}:1: header must be z_1..z_D, got {header}")
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                raise ValueError(f"{path}:{line}: blank row")
            if len(row) != d:
                raise ValueError(f"{path}:{line}: expected {d} fields, got {len(row)}")
            try:
                vals = [float(c) for c in row]
            except ValueError as exc:
                raise ValueError(f"{path}:{line}: {exc}") from exc
            if not all(np.isfinite(vals)):
                raise ValueError(f"{path}:{line}: non-finite value")
            rows.append(vals)
    if not rows:
        raise ValueError(f"{path}: no samples")
    return ReferenceSamples(np.array(rows), source=str(path))


def save_reference_samples(path, samples) -> Path:
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"z_{i + 1}" for i in range(samples.shape[1])])
        for row in samples:
            w.writerow([repr(float(v)) for v in row])
    return path


# ---------------------------------------------------------------------------
# external black-box targets


class ExternalTarget(TargetModel):
    """Target evaluated by a subprocess speaking newline-delimited JSON on stdin/stdout.

    The first exchange is ``{"op": "hello"}`` -> ``{"dim": D, "normalized": bool}``;
    then ``{"id": n, "op": "eval", "z": [[...], ...]}`` ->
    ``{"id": n, "logp": [...], "grad": [[...], ...]}``.  One subprocess is
    owned by one caller at a time (calls are serialized with a lock).
    """

    def __init__(self, command, dim: int | None = None, timeout: float = 30.0):
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        self.timeout = timeout
        self._lock = threading.Lock()
        self._next_id = 0
        try:
            self._proc = subprocess.Popen(self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                                          stderr=subprocess.PIPE, text=True, bufsize=1)
        except OSError as exc:
            raise TransportError(f"could not start external target {self.command}: {exc}") from exc
        self._lines: queue.Queue = queue.Queue()
        threading.Thread(target=self._pump, daemon=True).start()
        hello = self._exchange({"op": "hello"})
        try:
            remote_dim = int(hello["dim"])
            normalized = bool(hello.get("normalized", False))
        except (KeyError, TypeError, ValueError) as exc:
            self.close()
            raise ProtocolError(f"bad handshake reply: {exc}", payload=json.dumps(hello)) from exc
        if dim is not None and int(dim) != remote_dim:
            self.close()
            raise DimensionError(f"external target reports D={remote_dim}, expected {dim}")
        self._cache_key = None
        self._cache_val = None
        super().__init__(remote_dim, self._eval_logp, self._eval_grad, normalized=False, name="external",
                         params={"command": self.command})
        self.remote_normalized = normalized

    def _pump(self):
        for line in self._proc.stdout:
            self._lines.put(line)
        self._lines.put(None)

    def _exchange(self, msg: dict) -> dict:
        if self._proc.poll() is not None:
            raise TransportError(f"external target exited with code {self._proc.returncode}")
        try:
            self._proc.stdin.write(json.dumps(msg) + "\n")
            self._proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise TransportError(f"external target closed its input: {exc}") from exc
        try:
            line = self._lines.get(timeout=self.timeout)
        except queue.Empty:
            self.close()
            raise TransportError(f"external target timed out after {self.timeout} s") from None
        if line is None:
            err = self._proc.stderr.read() if self._proc.stderr else ""
            raise TransportError("external target exited mid-request", payload=err)
        try:
            reply = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ProtocolError(f"reply is not JSON: {exc}", payload=line) from exc
        if not isinstance(reply, dict):
            raise ProtocolError("reply is not a JSON object", payload=line)
        return reply

    def evaluate(self, z):
        """Log-density and score of a batch in one round trip."""
        z2, _ = _points(z, self.dim)
        key = z2.tobytes()
        if key == self._cache_key:
            return self._cache_val
        with self._lock:
            self._next_id += 1
            rid = self._next_id
            reply = self._exchange({"id": rid, "op": "eval", "z": z2.tolist()})
        raw = json.dumps(reply)
        if reply.get("id") != rid:
            raise ProtocolError(f"reply id {reply.get('id')!r} does not match request id {rid}", payload=raw)
        try:
            logp = np.asarray(reply["logp"], dtype=float)
            grad = np.asarray(reply["grad"], dtype=float)
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"malformed eval reply: {exc}", payload=raw) from exc
        if logp.shape != (z2.shape[0],) or grad.shape != z2.shape:
            raise ProtocolError(
                f"reply shapes logp{logp.shape}/grad{grad.shape} do not match a batch of {z2.shape[0]}",
                payload=raw)
        self._cache_key, self._cache_val = key, (logp, grad)
        return logp, grad

    def _eval_logp(self, z2):
        return self.evaluate(z2)[0]

    def _eval_grad(self, z2):
        return self.evaluate(z2)[1]

    def close(self):
        proc = getattr(self, "_proc", None)
        if proc is None or proc.poll() is not None:
            return
        try:
            proc.stdin.close()
        except OSError:
            pass
        try:
            proc.wait(timeout=2.0)
        except subprocess.TimeoutExpired:
            proc.kill()
            proc.wait()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def __del__(self):
        try:
            self.close()
        except Exception:
            pass


def external_target(command_line, D: int | None = None, timeout: float = 30.0) -> ExternalTarget:
    return ExternalTarget(command_line, D, timeout)


ZOO = {
    "gaussian": lambda mean, cov: gaussian_target(mean, cov),
    "gaussian_mixture": gaussian_mixture_target,
    "gaussian_mixture_example": gaussian_mixture_example,
    "funnel": funnel_target,
    "sinh_arcsinh": sinh_arcsinh_target,
    "rosenbrock": rosenbrock_target,
    "diamond": lambda normalizer_budget=DEFAULT_NORMALIZER_BUDGET, seed=0: poe_target(
        diamond_density(), normalizer_budget, seed, name="diamond"),
    "poe_example": lambda normalizer_budget=DEFAULT_NORMALIZER_BUDGET, seed=0: poe_target(
        poe_example_density(), normalizer_budget, seed, name="poe_example"),
}


def make_zoo_target(name: str, **params) -> TargetModel:
    try:
        factory = ZOO[name]
    except KeyError:
        raise ValueError(f"unknown target {name!r}; choose from {sorted(ZOO)}") from None
    return factory(**params)
