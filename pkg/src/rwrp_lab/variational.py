"""Cocycle functionals on periodic environments and their minimization.

On a torus with sites ``x`` and one-step log-weights ``w(x, z) = log p + V(T_x w, z)``:

* ``K(V, F) = max_x log sum_z exp(w(x, z) + F(x, z))``
* ``K'(V, g) = K(V, grad* g)`` with ``(grad* g)(x, z) = u(x+z) - u(x)``, ``u = log g``.

The infimum of ``K'`` over positive ``g`` is the Perron root, which is used
to certify every numerical minimization.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import optimize
from scipy.special import logsumexp, softmax

from .env import Environment, PeriodicEnvironment, Potential, StepSet
from .spectral import build_operator, log_spectral_radius
from .transfer import _torus_tables, level_recursion


class CertificationError(RuntimeError):
    """The optimizer's value disagrees with the spectral oracle."""


class DivergenceError(ValueError):
    pass


@dataclass(frozen=True)
class CocycleField:
    """Values ``F(x, z)`` indexed by (torus site in C order, step index)."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2 or not np.all(np.isfinite(v)):
            raise ValueError("cocycle values must be a finite (sites, steps) array")
        object.__setattr__(self, "values", v)

    @property
    def centered_means(self) -> np.ndarray:
        return self.values.mean(axis=0)


@dataclass(frozen=True)
class PositiveField:
    """``u = log g`` per torus site, with optional certified bounds on ``g``."""

    log_g: np.ndarray
    floor: float | None = None
    ceiling: float | None = None

    def __post_init__(self):
        u = np.asarray(self.log_g, dtype=float).ravel()
        if not np.all(np.isfinite(u)):
            raise ValueError("log_g must be finite")
        g = np.exp(u)
        if self.floor is not None and np.any(g < self.floor):
            raise ValueError("g below its floor")
        if self.ceiling is not None and np.any(g > self.ceiling):
            raise ValueError("g above its ceiling")
        object.__setattr__(self, "log_g", u)

    @property
    def g(self) -> np.ndarray:
        return np.exp(self.log_g)

    def shifted(self, c: float) -> "PositiveField":
        return PositiveField(self.log_g + c)


def _tables(env: PeriodicEnvironment, pot: Potential, steps: StepSet):
    if not isinstance(env, PeriodicEnvironment):
        raise TypeError("variational functionals are evaluated on periodic environments")
    return _torus_tables(env, pot, steps, 0.0)


def log_gradient(g: PositiveField, env: PeriodicEnvironment, steps: StepSet) -> CocycleField:
    nb = env.site_index(env.sites()[:, None, :] + steps.array[None, :, :])
    u = g.log_g
    return CocycleField(u[nb] - u[:, None])


def site_values(env: PeriodicEnvironment, pot: Potential, steps: StepSet,
                arg: CocycleField | PositiveField) -> np.ndarray:
    """Per-site ``log sum_z p e^{V + F}``; ``K`` is their max."""
    logw, _ = _tables(env, pot, steps)
    F = log_gradient(arg, env, steps) if isinstance(arg, PositiveField) else arg
    if F.values.shape != logw.shape:
        raise ValueError(f"field shape {F.values.shape} does not match {logw.shape}")
    return logsumexp(logw + F.values, axis=1)


def k_functional(env: PeriodicEnvironment, pot: Potential, steps: StepSet,
                 arg: CocycleField | PositiveField) -> float:
    return float(site_values(env, pot, steps, arg).max())


# ---------------------------------------------------------------------------
# cocycle verification
# ---------------------------------------------------------------------------


@dataclass
class CocycleReport:
    ok: bool
    centering: np.ndarray
    centering_ok: bool
    # (site, step index, loop sum) for every non-tree edge whose fundamental cycle fails
    cycle_violations: list[tuple[int, int, float]] = field(default_factory=list)

    def __bool__(self) -> bool:
        return self.ok


def verify_cocycle(F: CocycleField, env: PeriodicEnvironment, steps: StepSet, tol: float = 1e-10) -> CocycleReport:
    """Centering per step plus zero loop sums on a cycle basis of the step graph.

    A spanning tree of the (undirected) step graph fixes a potential ``u``;
    each edge ``x -> x+z`` then closes exactly one fundamental cycle whose
    sum is ``F(x, z) - (u(x+z) - u(x))``.
    """
    S = env.n_sites
    nb = env.site_index(env.sites()[:, None, :] + steps.array[None, :, :])
    vals = F.values
    means = vals.mean(axis=0)
    centering_ok = bool(np.all(np.abs(means) <= tol))

    adj: list[list[tuple[int, float]]] = [[] for _ in range(S)]
    for x in range(S):
        for k in range(steps.size):
            y = int(nb[x, k])
            adj[x].append((y, vals[x, k]))
            adj[y].append((x, -vals[x, k]))
    u = np.full(S, np.nan)
    for root in range(S):
        if not np.isnan(u[root]):
            continue
        u[root] = 0.0
        stack = [root]
        while stack:
            x = stack.pop()
            for y, f in adj[x]:
                if np.isnan(u[y]):
                    u[y] = u[x] + f
                    stack.append(y)
    loop = vals - (u[nb] - u[:, None])
    bad = np.argwhere(np.abs(loop) > tol)
    violations = [(int(x), int(k), float(loop[x, k])) for x, k in bad]
    return CocycleReport(centering_ok and not violations, means, centering_ok, violations)


# ---------------------------------------------------------------------------
# minimization of K'
# ---------------------------------------------------------------------------


def smoothed_objective(u: np.ndarray, logw: np.ndarray, nb: np.ndarray, tau: float) -> tuple[float, np.ndarray]:
    """``tau * log sum_x exp(phi_x(u) / tau)`` and its gradient in ``u``."""
    a = logw + u[nb] - u[:, None]
    phi = logsumexp(a, axis=1)
    q = np.exp(a - phi[:, None])
    val = tau * logsumexp(phi / tau)
    pi = softmax(phi / tau)
    wq = pi[:, None] * q
    grad = np.zeros_like(u)
    np.add.at(grad, nb.ravel(), wq.ravel())
    grad -= pi
    return float(val), grad


def _phi_and_jac(u, logw, nb):
    a = logw + u[nb] - u[:, None]
    phi = logsumexp(a, axis=1)
    q = np.exp(a - phi[:, None])
    S = len(u)
    J = np.zeros((S, S))
    np.add.at(J, (np.repeat(np.arange(S), nb.shape[1]), nb.ravel()), q.ravel())
    J[np.arange(S), np.arange(S)] -= 1.0
    return phi, J


@dataclass
class KPrimeMinimum:
    field: PositiveField
    value: float
    slack: np.ndarray
    log_rho: float
    certification_delta: float
    taus: list[float]

    def __iter__(self):
        yield self.field
        yield self.value

    def to_dict(self) -> dict:
        return {
            "value": self.value,
            "u": self.field.log_g.tolist(),
            "slack": self.slack.tolist(),
            "log_rho": self.log_rho,
            "certification_delta": self.certification_delta,
            "tau_schedule": self.taus,
        }


def minimize_kprime(env: PeriodicEnvironment, pot: Potential, steps: StepSet, tol: float = 1e-6,
                    taus=None, u0=None, max_iter: int = 5000, certify: bool = True,
                    polish: bool = True) -> KPrimeMinimum:
    """Minimize ``u -> max_x log sum_z p e^{V(x,z) + u(x+z) - u(x)}``.

    A softmax over sites replaces the max; the temperature runs down the
    schedule ``taus`` (default 1 to 1e-4) with L-BFGS warm starts.  With
    ``polish`` the last stage solves the equalization system ``phi_x(u) = c``
    by Newton's method, then the exact max is taken.  ``u(site 0) = 0`` fixes the gauge.  The
    value is certified against the Perron root; a gap above ``tol`` raises
    :class:`CertificationError`.
    """
    logw, nb = _tables(env, pot, steps)
    S = env.n_sites
    taus = list(np.geomspace(1.0, 1e-4, 9)) if taus is None else [float(t) for t in taus]
    u = np.zeros(S) if u0 is None else np.asarray(u0, dtype=float).ravel().copy()
    u = u - u[0]

    for tau in taus:
        def f(v, tau=tau):
            full = np.concatenate([[0.0], v])
            val, g = smoothed_objective(full, logw, nb, tau)
            return val, g[1:]

        if S > 1:
            res = optimize.minimize(f, u[1:], jac=True, method="L-BFGS-B",
                                    options={"maxiter": max_iter, "ftol": 1e-16, "gtol": 1e-12})
            u = np.concatenate([[0.0], res.x])

    if polish and S > 1:
        def eqs(xc):
            full = np.concatenate([[0.0], xc[:-1]])
            phi, J = _phi_and_jac(full, logw, nb)
            jac = np.hstack([J[:, 1:], -np.ones((S, 1))])
            return phi - xc[-1], jac

        phi0 = logsumexp(logw + u[nb] - u[:, None], axis=1)
        sol = optimize.root(eqs, np.concatenate([u[1:], [phi0.max()]]), jac=True, method="hybr",
                            options={"xtol": 1e-15})
        cand = np.concatenate([[0.0], sol.x[:-1]])
        if np.all(np.isfinite(cand)):
            new = logsumexp(logw + cand[nb] - cand[:, None], axis=1).max()
            if new <= phi0.max():
                u = cand

    phi = logsumexp(logw + u[nb] - u[:, None], axis=1)
    value = float(phi.max())
    log_rho = log_spectral_radius(build_operator(env, pot, steps)).log_rho
    delta = value - log_rho
    result = KPrimeMinimum(PositiveField(u), value, phi - value, log_rho, delta, taus)
    if certify and abs(delta) > tol:
        raise CertificationError(f"K' minimum {value!r} differs from log rho {log_rho!r} by {delta:.3g}")
    return result


def dump_minimizer(result: KPrimeMinimum, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(result.to_dict(), indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------
# the series g_lambda and fixed-point residuals
# ---------------------------------------------------------------------------


def _h_terms(env, pot, steps, lam, N):
    """Yield ``h_n^lam`` per site for n = 0..N (linear scale)."""
    logw, nb = _torus_tables(env, pot, steps, lam)
    P = np.exp(logw)
    h = np.ones(env.n_sites)
    yield h
    for _ in range(N):
        h = (P * h[nb]).sum(axis=1)
        yield h


def _check_lambda(env, pot, steps, lam, lambda_q):
    if lambda_q is None:
        lambda_q = log_spectral_radius(build_operator(env, pot, steps)).log_rho
    if lam <= lambda_q:
        raise DivergenceError(f"lambda = {lam} does not exceed Lambda_q = {lambda_q}; the series diverges")
    return lambda_q


def g_lambda_truncated(env: PeriodicEnvironment, pot: Potential, steps: StepSet, lam: float, N: int,
                       lambda_q: float | None = None) -> PositiveField:
    """``g^(N)(x) = sum_{n=0}^N h_n^lam(T_x w)``, so ``g >= 1``.

    Raises :class:`DivergenceError` when ``lam <= Lambda_q`` or when the
    terms stop decaying (last term not below the midpoint term).
    """
    _check_lambda(env, pot, steps, lam, lambda_q)
    total = np.zeros(env.n_sites)
    mid = None
    last = None
    for n, h in enumerate(_h_terms(env, pot, steps, lam, N)):
        total += h
        if n == N // 2:
            mid = float(h.max())
        last = float(h.max())
        if not np.isfinite(last):
            raise DivergenceError("h_n overflowed")
    if N >= 4 and last >= mid:
        raise DivergenceError(f"tail ratio h_N/h_(N/2) = {last / mid:.3g} is not decaying")
    return PositiveField(np.log(total), floor=1.0)


def g_lambda_kprime_series(env: PeriodicEnvironment, pot: Potential, steps: StepSet, lam: float, N_max: int,
                           lambda_q: float | None = None) -> np.ndarray:
    """``K'(V, g^(N))`` for N = 0..N_max, in one pass over the terms."""
    _check_lambda(env, pot, steps, lam, lambda_q)
    logw, nb = _torus_tables(env, pot, steps, 0.0)
    out = np.empty(N_max + 1)
    total = np.zeros(env.n_sites)
    for n, h in enumerate(_h_terms(env, pot, steps, lam, N_max)):
        total += h
        u = np.log(total)
        out[n] = logsumexp(logw + u[nb] - u[:, None], axis=1).max()
    return out


def first_settled_index(kprime: np.ndarray, lam: float, slack: float = 0.0) -> int | None:
    """Smallest N0 with ``kprime[N] <= lam + slack`` for every N >= N0 in the array."""
    ok = kprime <= lam + slack
    if not ok[-1]:
        return None
    bad = np.nonzero(~ok)[0]
    return 0 if len(bad) == 0 else int(bad[-1] + 1)


def rearranged_lambda(g: PositiveField, env: PeriodicEnvironment, pot: Potential, steps: StepSet,
                      lam: float) -> np.ndarray:
    """Per-site ``log(e^lam / g + sum_z p e^V g(x+z) / g(x))``; equals ``lam`` for the full series."""
    logw, nb = _tables(env, pot, steps)
    u = g.log_g
    a = logsumexp(logw + u[nb] - u[:, None], axis=1)
    return np.logaddexp(lam - u, a)


def fixed_point_residual(g: PositiveField, env: PeriodicEnvironment, pot: Potential, steps: StepSet,
                         lam: float) -> float:
    """``max_x |sum_z p e^{V - lam} g(x+z) / g(x) - 1|``."""
    logw, nb = _torus_tables(env, pot, steps, lam)
    u = g.log_g
    return float(np.max(np.abs(np.expm1(logsumexp(logw + u[nb] - u[:, None], axis=1)))))


def w_recursion_residual(env: Environment, pot: Potential, steps: StepSet, n_max: int,
                         lam_a: float | None = None, start=None) -> np.ndarray:
    """Relative residual of ``W_n(x) = sum_z p e^{V(T_x w, z) - lam_a} W_{n-1}(x+z)`` for n = 1..n_max.

    ``W_n`` at ``start`` comes from one forward pass; ``W_{n-1}`` at each
    neighbour from its own pass.  Entry ``n-1`` of the result is the residual
    at step ``n``.
    """
    from .transfer import _annealed

    lam_a = _annealed(env, pot, steps, lam_a)
    start = np.zeros(steps.d, dtype=np.int64) if start is None else np.asarray(start, dtype=np.int64)
    here = level_recursion(env, pot, steps, n_max, lam=lam_a, start=start).level_log_totals
    V = pot(np.asarray([env.lookup(start)]))[0]
    nbr = np.stack([
        level_recursion(env, pot, steps, n_max - 1, lam=lam_a, start=start + z).level_log_totals
        for z in steps.array
    ])  # (k, n_max)
    rhs = logsumexp(V[:, None] + steps.log_p - lam_a + nbr, axis=0)
    return np.abs(np.expm1(rhs - here[1:]))
