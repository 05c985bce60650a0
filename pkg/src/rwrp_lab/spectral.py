"""Perron roots of transfer operators on periodic environments.

On a torus the quenched free energy is ``log rho(M)`` with
``M[x, x+z] += p(z) exp(V(T_x w, z) + lam . z)``; tilting by ``lam`` gives
the cumulant generating function whose Legendre transform is the level-1
rate function.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import linalg, optimize
from scipy.sparse.csgraph import breadth_first_order, connected_components

from . import report
from .env import PeriodicEnvironment, Potential, StepSet
from .transfer import _torus_tables

DENSE_CROSSCHECK_MAX = 64


class NotIrreducibleError(ValueError):
    """The step digraph on the torus is not strongly connected."""


class ConvergenceError(RuntimeError):
    pass


@dataclass
class TransferOperator:
    sites: np.ndarray
    matrix: np.ndarray
    tilt: np.ndarray
    strongly_connected: bool
    period: int
    neighbours: np.ndarray
    log_weights: np.ndarray  # (S, |R|): log p + V + tilt . z

    @property
    def size(self) -> int:
        return len(self.sites)


@dataclass
class PerronResult:
    log_rho: float
    eigvec: np.ndarray
    residual: float
    iterations: int
    period: int = 1
    method: str = "power"
    aitken_log_rho: float | None = None
    dense_log_rho: float | None = None


def _digraph_period(adj: np.ndarray) -> int:
    """gcd of cycle lengths of a strongly connected digraph (BFS-level method)."""
    order, _ = breadth_first_order(adj, 0, directed=True)
    level = np.full(adj.shape[0], -1)
    level[0] = 0
    for u in order:
        for v in np.nonzero(adj[u])[0]:
            if level[v] < 0:
                level[v] = level[u] + 1
    g = 0
    for u, v in zip(*np.nonzero(adj)):
        g = math.gcd(g, int(level[u] + 1 - level[v]))
    return abs(g) if g else 1


def build_operator(env: PeriodicEnvironment, pot: Potential, steps: StepSet,
                   tilt: Sequence[float] | None = None) -> TransferOperator:
    """Dense transfer matrix on the torus sites (C order)."""
    if not isinstance(env, PeriodicEnvironment):
        raise TypeError("transfer operators are built on periodic environments")
    if env.d != steps.d:
        raise ValueError("environment and step set dimensions differ")
    tilt = np.zeros(steps.d) if tilt is None else np.asarray(tilt, dtype=float)
    logw, nb = _torus_tables(env, pot, steps, tilt)
    S = env.n_sites
    M = np.zeros((S, S))
    rows = np.repeat(np.arange(S), steps.size)
    np.add.at(M, (rows, nb.ravel()), np.exp(logw).ravel())
    adj = np.zeros((S, S), dtype=bool)
    adj[rows, nb.ravel()] = True
    ncomp, _ = connected_components(adj, directed=True, connection="strong")
    strong = ncomp == 1
    period = _digraph_period(adj) if strong else 0
    return TransferOperator(env.sites(), M, tilt, strong, period, nb, logw)


def _aitken(seq: list[float]) -> float | None:
    if len(seq) < 3:
        return None
    a, b, c = seq[-3:]
    den = c - 2 * b + a
    if den == 0:
        return c
    return c - (c - b) ** 2 / den


def _dense_perron(M: np.ndarray) -> tuple[float, np.ndarray]:
    w, vecs = linalg.eig(M)
    i = int(np.argmax(w.real))
    g = np.abs(vecs[:, i].real)
    return math.log(float(w[i].real)), g / g.max()


def log_spectral_radius(op: TransferOperator, tol: float = 1e-13, max_iter: int = 100_000,
                        crosscheck: bool = True, accept_stalled: float = 1e-9) -> PerronResult:
    """Perron root by power iteration, robust to a periodic step digraph.

    Growth is averaged over one digraph period and the eigenvector is the
    period-average of the iterates, which removes the rotating peripheral
    components.  The reported ``log_rho`` is the midpoint of the
    Collatz--Wielandt bracket ``[min (Mg/g), max (Mg/g)]``; iteration stops
    once its relative width is below ``tol``.  For ``S <= 64`` the result is
    cross-checked against a dense eigendecomposition, which also serves as
    the fallback when the bracket stops shrinking (strong tilts push it onto
    roundoff) or the iteration cap is hit.  Larger operators accept a stalled
    bracket narrower than ``accept_stalled``.
    """
    if not op.strongly_connected:
        raise NotIrreducibleError("step digraph is not strongly connected on this torus")
    M = op.matrix
    S, p = op.size, max(op.period, 1)
    scale = float(M.max())
    Ms = M / scale
    v = np.ones(S)
    growth: list[float] = []
    estimates: list[float] = []
    g = v
    width = math.inf
    check_every = max(p, 8)
    small = S <= DENSE_CROSSCHECK_MAX
    best, since_best = math.inf, 0
    stalled = False
    it = 0
    for it in range(1, max_iter + 1):
        w = Ms @ v
        s = float(w.max())
        v = w / s
        growth.append(math.log(s))
        if it % check_every == 0 and it >= 2 * p:
            est = float(np.mean(growth[-p:]))
            estimates.append(est)
            rho = math.exp(est)
            g = v.copy()
            u = v
            for i in range(1, p):
                u = Ms @ u / rho
                g = g + u
            g = g / g.max()
            ratio = (Ms @ g) / g
            width = float(ratio.max() / ratio.min() - 1.0)
            if width < tol:
                break
            if width < 0.5 * best:
                best, since_best = width, 0
            else:
                since_best += 1
            if since_best >= (20 if small else 200):
                stalled = True
                break
    ratio = (Ms @ g) / g
    log_rho = 0.5 * (math.log(ratio.min()) + math.log(ratio.max())) + math.log(scale)
    rho = math.exp(log_rho)
    residual = float(np.max(np.abs(M @ g - rho * g)) / rho)
    aitken = _aitken(estimates)
    result = PerronResult(log_rho, g, residual, it, p, "power",
                          None if aitken is None else aitken + math.log(scale))

    if small and (crosscheck or width >= tol):
        dense, dvec = _dense_perron(M)
        result.dense_log_rho = dense
        if width >= tol:
            rho = math.exp(dense)
            result = PerronResult(dense, dvec, float(np.max(np.abs(M @ dvec - rho * dvec)) / rho), it, p,
                                  "dense", result.aitken_log_rho, dense)
        elif abs(dense - log_rho) > 1e-8:
            raise ConvergenceError(f"power iteration {log_rho} disagrees with dense {dense}")
    elif width >= tol and not (stalled and width < accept_stalled):
        raise ConvergenceError(f"no convergence after {max_iter} iterations (bracket width {width:.3g})")
    return result


def left_right_perron(op: TransferOperator, tol: float = 1e-13) -> tuple[PerronResult, np.ndarray]:
    """Right Perron result and the left Perron vector (normalised to max 1)."""
    right = log_spectral_radius(op, tol)
    left_op = TransferOperator(op.sites, op.matrix.T.copy(), op.tilt, op.strongly_connected, op.period,
                               op.neighbours, op.log_weights)
    left = log_spectral_radius(left_op, tol)
    return right, left.eigvec


def tilted_free_energy(env: PeriodicEnvironment, pot: Potential, steps: StepSet,
                       lam: Sequence[float] | None = None) -> float:
    """``Lambda_q(f_lam + V)`` with ``f_lam(w, z) = lam . z``."""
    return log_spectral_radius(build_operator(env, pot, steps, lam)).log_rho


def free_energy_gradient(env: PeriodicEnvironment, pot: Potential, steps: StepSet,
                         lam: Sequence[float] | None = None) -> np.ndarray:
    """Gradient in ``lam`` of the tilted free energy (first-order perturbation of rho)."""
    op = build_operator(env, pot, steps, lam)
    right, left = left_right_perron(op)
    r = right.eigvec
    W = np.exp(op.log_weights)  # (S, k)
    flux = left[:, None] * W * r[op.neighbours]
    rho = math.exp(right.log_rho)
    return (flux.sum(axis=0) @ steps.array) / (rho * float(left @ r))


def velocity(env: PeriodicEnvironment, pot: Potential, steps: StepSet) -> np.ndarray:
    """Law-of-large-numbers velocity of the quenched polymer, ``grad Lambda(0)``."""
    return free_energy_gradient(env, pot, steps, None)


# ---------------------------------------------------------------------------
# level-1 rate function
# ---------------------------------------------------------------------------


@dataclass
class RateFunctionResult:
    v: np.ndarray
    value: float
    argmax: np.ndarray
    converged: bool


def in_convex_hull(v: Sequence[float], steps: StepSet, tol: float = 1e-12) -> bool:
    a = steps.array.astype(float)
    k = len(a)
    A_eq = np.vstack([a.T, np.ones((1, k))])
    b_eq = np.concatenate([np.asarray(v, dtype=float), [1.0]])
    res = optimize.linprog(np.zeros(k), A_eq=A_eq, b_eq=b_eq, bounds=[(0, None)] * k, method="highs")
    return res.status == 0 and np.max(np.abs(A_eq @ res.x - b_eq)) <= max(tol, 1e-9)


def legendre_maximize(env: PeriodicEnvironment, pot: Potential, steps: StepSet, v: Sequence[float],
                      n_random_starts: int = 8, lam_bound: float = 20.0, seed: int = 0,
                      lambda_q: float | None = None) -> RateFunctionResult:
    """``I_q(v) = sup_lam {lam . v - Lambda(lam)} + Lambda(0)``.

    Multi-start L-BFGS-B on the box ``|lam_i| <= lam_bound`` (origin plus
    ``n_random_starts`` uniform starts).  Velocities outside the convex hull
    of the steps give ``+inf``.
    """
    v = np.asarray(v, dtype=float)
    if not in_convex_hull(v, steps):
        return RateFunctionResult(v, math.inf, np.full(steps.d, math.nan), True)
    lq = tilted_free_energy(env, pot, steps, None) if lambda_q is None else lambda_q

    def neg(lam):
        op = build_operator(env, pot, steps, lam)
        right, left = left_right_perron(op)
        r = right.eigvec
        flux = left[:, None] * np.exp(op.log_weights) * r[op.neighbours]
        grad = (flux.sum(axis=0) @ steps.array) / (math.exp(right.log_rho) * float(left @ r))
        return right.log_rho - lam @ v, grad - v

    rng = np.random.default_rng(seed)
    starts = [np.zeros(steps.d)] + [rng.uniform(-lam_bound, lam_bound, steps.d) for _ in range(n_random_starts)]
    best = None
    for x0 in starts:
        res = optimize.minimize(neg, x0, jac=True, method="L-BFGS-B",
                                bounds=[(-lam_bound, lam_bound)] * steps.d,
                                options={"ftol": 1e-15, "gtol": 1e-12, "maxiter": 2000})
        if best is None or res.fun < best.fun:
            best = res
    value = -float(best.fun) + lq
    return RateFunctionResult(v, value, np.asarray(best.x), bool(best.success))


def rate_function(env: PeriodicEnvironment, pot: Potential, steps: StepSet, v: Sequence[float], **kw) -> float:
    return legendre_maximize(env, pot, steps, v, **kw).value


def rate_function_sweep(env: PeriodicEnvironment, pot: Potential, steps: StepSet,
                        velocities: Sequence[Sequence[float]], threads: int | None = None, **kw) -> list[RateFunctionResult]:
    from .mc import parallel_map

    lq = tilted_free_energy(env, pot, steps, None)
    return parallel_map(lambda v: legendre_maximize(env, pot, steps, v, lambda_q=lq, **kw), velocities, threads)


def rate_sweep_columns(d: int) -> list[str]:
    return [f"v{i}" for i in range(d)] + ["I_q"] + [f"lambda{i}" for i in range(d)] + ["converged"]


def write_rate_sweep_csv(results: Sequence[RateFunctionResult], path, config_hash: str | None = None):
    d = len(results[0].v)
    rows = [list(r.v) + [r.value] + list(r.argmax) + [r.converged] for r in results]
    return report.write_csv(path, rate_sweep_columns(d), rows, config_hash=config_hash)
