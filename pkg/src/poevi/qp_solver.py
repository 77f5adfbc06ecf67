"""Strongly convex QP over the integrability cone.

Each weight update solves::

    minimize   0.5 a^T G a - h^T a
    subject to a_k >= 0 for all k,   sum(a) >= D/2 + eps

with ``G`` symmetric positive definite.  :func:`solve_constrained` is a primal
active-set method on the K bound constraints plus the single half-space; a
projected-gradient reference solver (:func:`projected_gradient_oracle`) is
kept alongside for cross-checking.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, eigvalsh

from .errors import DimensionError, NonConvergenceError, SingularityError
from .poe_model import DEFAULT_EPSILON

DEFAULT_TOL = 1e-8


@dataclass(frozen=True, eq=False)
class QuadraticProgram:
    g_matrix: np.ndarray
    h_vector: np.ndarray

    def __post_init__(self):
        g = np.array(self.g_matrix, dtype=float)
        h = np.array(self.h_vector, dtype=float).reshape(-1)
        k = h.shape[0]
        if g.shape != (k, k):
            raise DimensionError(f"G has shape {g.shape}, h has length {k}")
        scale = max(1.0, float(np.max(np.abs(g))))
        if np.max(np.abs(g - g.T)) > 1e-10 * scale:
            raise ValueError("G must be symmetric")
        object.__setattr__(self, "g_matrix", 0.5 * (g + g.T))
        object.__setattr__(self, "h_vector", h)

    @property
    def size(self) -> int:
        return self.h_vector.shape[0]

    def objective(self, alpha) -> float:
        a = np.asarray(alpha, dtype=float)
        return float(0.5 * a @ self.g_matrix @ a - self.h_vector @ a)

    def dump(self, path, solution=None) -> None:
        """Write (G, h[, alpha]) as JSON for offline failure triage."""
        doc = {"G": self.g_matrix.tolist(), "h": self.h_vector.tolist()}
        if solution is not None:
            doc["alpha"] = np.asarray(solution, dtype=float).tolist()
        with open(path, "w") as fh:
            json.dump(doc, fh)


@dataclass(frozen=True)
class FeasibleSet:
    """``{a >= 0, sum(a) >= dim/2 + epsilon}``."""

    dim: int
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")

    @property
    def bound(self) -> float:
        return self.dim / 2.0 + self.epsilon

    def contains(self, alpha) -> bool:
        a = np.asarray(alpha, dtype=float)
        return bool(np.all(a >= 0) and a.sum() >= self.bound)


@dataclass
class QpSolution:
    alpha: np.ndarray
    kkt_residual: float
    active_set: list = field(default_factory=list)
    iterations: int = 0


def solve_unconstrained(qp: QuadraticProgram) -> np.ndarray:
    """``G^{-1} h`` via Cholesky."""
    try:
        c = cho_factor(qp.g_matrix)
    except np.linalg.LinAlgError as exc:
        raise SingularityError(f"G is not positive definite: {exc}") from exc
    return cho_solve(c, qp.h_vector)


def _sum_multiplier(grad: np.ndarray, alpha: np.ndarray) -> float:
    pos = alpha > 0
    if not np.any(pos):
        return 0.0
    return max(0.0, float(np.mean(grad[pos])))


def kkt_residual(qp: QuadraticProgram, c: FeasibleSet, alpha) -> float:
    """Infinity norm of the stacked KKT violations at ``alpha``.

    Stationarity uses the best of two multiplier guesses for the sum
    constraint (zero, or the mean gradient over the support), so the value is
    zero exactly at the optimum and equals ``||G a - h||_inf`` at interior points.
    """
    a = np.asarray(alpha, dtype=float)
    grad = qp.g_matrix @ a - qp.h_vector
    slack = float(a.sum() - c.bound)
    feas = max(float(np.max(np.maximum(-a, 0.0))), max(-slack, 0.0))
    comp_bounds_scale = np.maximum(a, 0.0)

    def violation(lam_s):
        r = grad - lam_s
        # a_k > 0 needs r_k = 0; a_k = 0 needs r_k >= 0 (its bound multiplier)
        stat = np.where(comp_bounds_scale > 0, np.abs(r), np.maximum(-r, 0.0))
        return max(float(np.max(stat)), lam_s * abs(slack))

    best = min(violation(0.0), violation(_sum_multiplier(grad, a)))
    return max(best, feas)


def project_feasible(v, c: FeasibleSet, iters: int = 200) -> np.ndarray:
    """Euclidean projection onto the cone: clip, then shift along 1 if the sum is short.

    The shift ``t`` solving ``sum(max(v + t, 0)) = bound`` is found by bisection.
    """
    v = np.asarray(v, dtype=float)
    p = np.maximum(v, 0.0)
    if p.sum() >= c.bound:
        return p
    lo = -float(np.max(v))  # sum is 0 here
    hi = c.bound - float(np.min(v))  # every coordinate >= bound here
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if np.maximum(v + mid, 0.0).sum() < c.bound:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-16 * max(1.0, abs(hi)):
            break
    return np.maximum(v + hi, 0.0)


def _feasible_start(c: FeasibleSet, k: int, warm_start) -> np.ndarray:
    if warm_start is None:
        return np.full(k, c.bound / k * (1.0 + 1e-9))
    a = np.maximum(np.asarray(warm_start, dtype=float).reshape(-1), 0.0)
    if a.shape != (k,):
        raise DimensionError(f"warm start has length {a.shape[0]}, expected {k}")
    if a.sum() < c.bound:
        a = project_feasible(a, c)
    return _cleanup(a, c)


def _cleanup(a: np.ndarray, c: FeasibleSet) -> np.ndarray:
    """Exact feasibility after roundoff: clip negatives, top up a short sum."""
    a = np.maximum(a, 0.0)
    s = a.sum()
    if s < c.bound:
        free = a > 0
        if not np.any(free):
            free[:] = True
        a[free] += (c.bound - s) / free.sum()
        j = int(np.argmax(a))
        while a.sum() < c.bound:
            a[j] = np.nextafter(a[j], np.inf)
    return a


def solve_constrained(qp: QuadraticProgram, c: FeasibleSet, tol: float = DEFAULT_TOL,
                      warm_start=None, max_iter: int | None = None, _refine_rounds: int = 3) -> QpSolution:
    """Primal active-set solve of the cone-constrained QP.

    Starts from ``warm_start`` (projected onto the cone) or a uniform feasible
    point.  Constraints with the most negative multiplier are released first;
    after ``3K`` iterations the rule switches to smallest-index (Bland) to
    rule out cycling.
    """
    g, h = qp.g_matrix, qp.h_vector
    k = qp.size
    max_iter = max_iter or 50 * (k + 1) + 100
    a = _feasible_start(c, k, warm_start)
    bound = c.bound
    scale = max(1.0, float(np.max(np.abs(g))), float(np.max(np.abs(h))))
    zero_tol = 1e-14 * max(1.0, bound)
    at_bound = a <= 0.0
    a[at_bound] = 0.0
    sum_active = abs(a.sum() - bound) <= zero_tol
    mult_tol = 1e-12 * scale
    it = 0
    for it in range(1, max_iter + 1):
        free = np.flatnonzero(~at_bound)
        grad = g @ a - h
        if it > 1 and kkt_residual(qp, c, np.where(at_bound, 0.0, a)) <= 1e-3 * tol * scale:
            break
        gf = g[np.ix_(free, free)]
        nf = free.size
        if sum_active:
            kkt = np.zeros((nf + 1, nf + 1))
            kkt[:nf, :nf] = gf
            kkt[:nf, nf] = 1.0
            kkt[nf, :nf] = 1.0
            rhs = np.concatenate([-grad[free], [0.0]])
            sol = np.linalg.solve(kkt, rhs)
            p_free, lam_s = sol[:nf], -sol[nf]
        else:
            p_free = np.linalg.solve(gf, -grad[free]) if nf else np.zeros(0)
            lam_s = 0.0
        p = np.zeros(k)
        p[free] = p_free
        step_norm = float(np.max(np.abs(p_free))) if nf else 0.0
        if step_norm <= 1e-13 * max(1.0, float(np.max(np.abs(a)))):
            # stationary on the working set: check multipliers
            # grad = lam_s * 1 + sum_k lam_k e_k over the working set
            lam_b = grad - lam_s
            cand = []
            bnd_idx = np.flatnonzero(at_bound)
            for j in bnd_idx:
                if lam_b[j] < -mult_tol:
                    cand.append((lam_b[j], j))
            if sum_active and lam_s < -mult_tol:
                cand.append((lam_s, k))
            if not cand:
                break
            if it > 3 * k:
                _, drop = min(cand, key=lambda t: t[1])
            else:
                _, drop = min(cand)
            if drop == k:
                sum_active = False
            else:
                at_bound[drop] = False
            continue
        # largest step keeping the blocking constraints satisfied
        step, block = 1.0, None
        neg = np.flatnonzero((p < 0) & ~at_bound)
        if neg.size:
            ratios = a[neg] / -p[neg]
            j = int(np.argmin(ratios))
            if ratios[j] < step:
                step, block = float(ratios[j]), int(neg[j])
        ps = p.sum()
        if not sum_active and ps < 0:
            r = max(a.sum() - bound, 0.0) / -ps
            if r < step:
                step, block = r, k
        a = a + step * p
        if block is None:
            continue
        if block == k:
            sum_active = True
        else:
            a[block] = 0.0
            at_bound[block] = True
    else:
        a = _cleanup(np.where(at_bound, 0.0, a), c)
        res = kkt_residual(qp, c, a)
        if res <= tol * scale:
            return QpSolution(alpha=a, kkt_residual=res, active_set=_active(a, c), iterations=it)
        raise NonConvergenceError(
            f"active-set QP did not converge in {max_iter} iterations (KKT residual {res:.3g})",
            best=a, residual=res)
    a[at_bound] = 0.0
    a = _cleanup(a, c)
    res = kkt_residual(qp, c, a)
    if res > tol * scale and _refine_rounds > 0:
        a, res, extra = _refine(qp, c, a, tol, _refine_rounds)
        it += extra
        if res > tol * scale:
            raise NonConvergenceError(
                f"active-set QP stalled with KKT residual {res:.3g} > {tol * scale:.3g}",
                best=a, residual=res)
    return QpSolution(alpha=a, kkt_residual=res, active_set=_active(a, c), iterations=it)


def _active(a: np.ndarray, c: FeasibleSet) -> list:
    """Indices of tight bounds; index K stands for the sum constraint."""
    active = [int(j) for j in np.flatnonzero(a == 0.0)]
    if abs(a.sum() - c.bound) <= 1e-12 * max(1.0, c.bound):
        active.append(a.size)
    return active


def _refine(qp, c, a, tol, rounds):
    """Re-run the active-set loop from its own answer to clean up roundoff drift."""
    res = kkt_residual(qp, c, a)
    done = 0
    for _ in range(rounds):
        try:
            sol = solve_constrained(qp, c, tol=tol, warm_start=a, _refine_rounds=0)
        except NonConvergenceError as exc:
            if exc.best is None:
                break
            sol = QpSolution(exc.best, exc.residual, [], 0)
        done += sol.iterations
        if sol.kkt_residual < res:
            a, res = sol.alpha, sol.kkt_residual
        else:
            break
    return a, res, done


def projected_gradient_oracle(qp: QuadraticProgram, c: FeasibleSet, max_iter: int = 1_000_000,
                              tol: float = 1e-14) -> np.ndarray:
    """Reference solver: accelerated projected gradient with step ``1 / lambda_max(G)``.

    Iterates until the iterate stops moving (relative change below ``tol``)
    or ``max_iter`` is reached.  Only meant for tests.
    """
    g, h = qp.g_matrix, qp.h_vector
    lmax = float(eigvalsh(g, subset_by_index=[qp.size - 1, qp.size - 1])[0])
    lmin = float(eigvalsh(g, subset_by_index=[0, 0])[0])
    step = 1.0 / lmax
    kappa = lmax / max(lmin, 1e-300)
    mom = (np.sqrt(kappa) - 1.0) / (np.sqrt(kappa) + 1.0)
    x = project_feasible(np.zeros(qp.size), c)
    y = x.copy()
    for _ in range(max_iter):
        x_new = project_feasible(y - step * (g @ y - h), c)
        moved = float(np.max(np.abs(x_new - x)))
        y = x_new + mom * (x_new - x)
        x = x_new
        if moved <= tol * max(1.0, float(np.max(np.abs(x)))):
            break
    return x
