"""Exact partition functions by forward dynamic programming over level sets.

The forward pass keeps, for every site ``x`` of the level set ``D_j``, the
point-to-point weight ``h_j^lam(w, x) = E_0[exp(sum V - j lam); X_j = x]``.
Each level is stored as a max-normalised vector plus a running log scale, so
nothing overflows however long the walk is.  Weights more than ~1e-308 below
the level maximum underflow to zero; they cannot move a total by more than
that relative amount.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.special import logsumexp

from .env import Environment, IidEnvironment, OutsideBoxError, PeriodicEnvironment, Potential, StepSet
from . import report

MAX_ORACLE_PATHS = 10**7


class HorizonError(OutsideBoxError):
    """The requested number of steps leaves the environment's box."""


# ---------------------------------------------------------------------------
# level-set geometry, shared between runs and cached per step set
# ---------------------------------------------------------------------------


class _Levels:
    def __init__(self, steps: StepSet):
        self.steps = steps
        self.coords = [np.zeros((1, steps.d), dtype=np.int64)]
        self.pred: list[np.ndarray | None] = [None]
        self.gather: list[list[np.ndarray] | None] = [None]
        self.lo = [np.zeros(steps.d, dtype=np.int64)]
        self.hi = [np.zeros(steps.d, dtype=np.int64)]
        self._lock = threading.Lock()

    def ensure(self, n: int) -> "_Levels":
        if len(self.coords) > n:
            return self
        with self._lock:
            while len(self.coords) <= n:
                self._extend()
        return self

    def _extend(self):
        cur = self.coords[-1]
        a = self.steps.array
        k, d = a.shape
        cand = (cur[:, None, :] + a[None, :, :]).reshape(-1, d)
        # lexicographic integer keys; coordinates are bounded by level * max|z|
        off = int(np.abs(cand).max()) + 1
        base = 2 * off + 1
        keys = np.zeros(len(cand), dtype=np.int64)
        for i in range(d):
            keys = keys * base + (cand[:, i] + off)
        uniq, first, inv = np.unique(keys, return_index=True, return_inverse=True)
        inv = inv.reshape(len(cur), k)
        pred = np.full((len(uniq), k), len(cur), dtype=np.int64)  # len(cur) -> zero sentinel row
        pred[inv, np.arange(k)[None, :]] = np.arange(len(cur))[:, None]
        nxt = cand[first]
        self.coords.append(nxt)
        self.pred.append(pred)
        # flat gather indices into the (len(cur) + 1, k) weight table, one array per step
        self.gather.append([np.ascontiguousarray(pred[:, c] * k + c) for c in range(k)])
        self.lo.append(np.minimum(self.lo[-1], nxt.min(axis=0)))
        self.hi.append(np.maximum(self.hi[-1], nxt.max(axis=0)))


_LEVELS: dict[StepSet, _Levels] = {}
_LEVELS_LOCK = threading.Lock()


def level_sets(steps: StepSet, n: int) -> _Levels:
    with _LEVELS_LOCK:
        lv = _LEVELS.get(steps)
        if lv is None:
            lv = _LEVELS[steps] = _Levels(steps)
    return lv.ensure(n)


# ---------------------------------------------------------------------------
# results
# ---------------------------------------------------------------------------


@dataclass
class LevelKernel:
    """``h_n^lam(w, x)`` on the level set reached from ``start`` in n steps.

    ``sites`` are absolute lattice sites; ``log_values[i]`` is
    ``log h_n^lam(w, sites[i])``.  ``level_log_totals[j] = log h_j^lam(w)`` and
    ``level_overlaps[j]`` is the replica overlap of the level-j endpoint law.
    """

    n: int
    lam: float
    start: tuple[int, ...]
    sites: np.ndarray
    log_values: np.ndarray
    log_total: float
    level_log_totals: np.ndarray
    level_overlaps: np.ndarray
    recorded: dict[int, float] = field(default_factory=dict)

    def as_dict(self) -> dict[tuple[int, ...], float]:
        return {tuple(int(c) for c in x): float(v) for x, v in zip(self.sites, self.log_values)}

    def log_value_at(self, x: Sequence[int]) -> float:
        hit = np.nonzero(np.all(self.sites == np.asarray(x, dtype=np.int64), axis=1))[0]
        if hit.size == 0:
            raise KeyError(f"site {tuple(x)} is not reachable in {self.n} steps from {self.start}")
        return float(self.log_values[hit[0]])


@dataclass
class PathWeightOracleResult:
    log_Z: float
    per_path: list[tuple[tuple[int, ...], float]] | None = None


@dataclass
class EndpointStats:
    sites: np.ndarray
    mu: np.ndarray
    overlap: float


# ---------------------------------------------------------------------------
# forward DP
# ---------------------------------------------------------------------------


def _check_horizon(env: Environment, start: np.ndarray, levels: _Levels, n: int) -> None:
    box = getattr(env, "box", None)
    if box is None or n == 0:
        return
    corners = np.stack([start + levels.lo[n - 1], start + levels.hi[n - 1]])
    if not box.contains(corners):
        raise HorizonError(f"a horizon of {n} steps from {tuple(start)} exceeds the environment "
                           f"box [{box.lo}, {box.hi})")


def level_recursion(env: Environment, pot: Potential, steps: StepSet, n: int, lam: float = 0.0,
                    start: Sequence[int] | None = None,
                    record: Mapping[int, Sequence[int]] | None = None) -> LevelKernel:
    """Forward DP for ``h_n^lam(w, x)`` over the level sets ``D_1, ..., D_n``.

    ``record`` maps a level j to an offset from ``start``; the log weight at
    that site after j steps is returned in ``LevelKernel.recorded[j]``.
    """
    if n < 0:
        raise ValueError("number of steps must be nonnegative")
    if pot.n_steps != steps.size:
        raise ValueError("potential and step set disagree on |R|")
    d, k = steps.d, steps.size
    start_arr = np.zeros(d, dtype=np.int64) if start is None else np.asarray(start, dtype=np.int64)
    levels = level_sets(steps, n)

    _check_horizon(env, start_arr, levels, n)
    A = np.ones(1)
    log_scale = 0.0
    totals = np.zeros(n + 1)
    overlaps = np.ones(n + 1)
    targets = {int(j): np.asarray(off, dtype=np.int64) for j, off in (record or {}).items()}
    recorded: dict[int, float] = {}
    if 0 in targets:
        recorded[0] = 0.0 if not np.any(targets[0]) else -math.inf
    for j in range(n):
        V = pot(env.lookup(start_arr + levels.coords[j], check=False))
        c = float(V.max())
        W = np.zeros((len(A) + 1, k))
        np.exp(V - c, out=W[:-1])
        W[:-1] *= A[:, None]
        flat = W.ravel()
        gather = levels.gather[j + 1]
        new = flat[gather[0]]
        for g in gather[1:]:
            new += flat[g]
        s = float(new.max())
        if not (s > 0 and math.isfinite(s)):
            raise FloatingPointError(f"level {j + 1} weights degenerated (max = {s})")
        A = new / s
        log_scale += c + steps.log_p - lam + math.log(s)
        tot = A.sum()
        totals[j + 1] = log_scale + math.log(tot)
        mu = A / tot
        overlaps[j + 1] = float(mu @ mu)
        if j + 1 in targets:
            hit = np.nonzero(np.all(levels.coords[j + 1] == targets[j + 1], axis=1))[0]
            recorded[j + 1] = log_scale + math.log(A[hit[0]]) if hit.size and A[hit[0]] > 0 else -math.inf

    with np.errstate(divide="ignore"):
        log_values = log_scale + np.log(A)
    return LevelKernel(n, float(lam), tuple(int(c) for c in start_arr), start_arr + levels.coords[n],
                       log_values, float(totals[n]), totals, overlaps, recorded)


def torus_log_partition(env: PeriodicEnvironment, pot: Potential, steps: StepSet, n: int,
                        lam: float | np.ndarray = 0.0) -> np.ndarray:
    """``log h_n^lam(T_x w)`` for every torus site x (C order).

    On a periodic environment the lattice recursion folds onto the torus:
    ``h_j(T_x w) = sum_z p e^{V(T_x w, z) - lam} h_{j-1}(T_{x+z} w)``.
    A vector ``lam`` is a tilt: the weight picks up ``exp(lam . z)`` instead.
    """
    P, nb = _torus_tables(env, pot, steps, lam)
    c = float(P.max())
    P = np.exp(P - c)
    z = np.ones(env.n_sites)
    log_scale = 0.0
    for _ in range(n):
        z = (P * z[nb]).sum(axis=1)
        s = float(z.max())
        z /= s
        log_scale += c + math.log(s)
    return log_scale + np.log(z)


def _torus_tables(env: PeriodicEnvironment, pot: Potential, steps: StepSet, lam=0.0):
    """Log one-step weights ``log p + V(T_x w, z) + tilt`` and neighbour indices."""
    sites = env.sites()
    V = pot(env.values.ravel())
    lam_arr = np.asarray(lam, dtype=float)
    if lam_arr.ndim == 0:
        tilt = -float(lam_arr) * np.ones(steps.size)
    else:
        tilt = steps.array @ lam_arr
    logw = V + steps.log_p + tilt[None, :]
    nb = env.site_index(sites[:, None, :] + steps.array[None, :, :])
    return logw, nb


def partition_function(env: Environment, pot: Potential, steps: StepSet, n: int,
                       start: Sequence[int] | None = None) -> float:
    """``log Z_n`` from ``start``; periodic environments use the torus fold."""
    if n == 0:
        return 0.0
    if isinstance(env, PeriodicEnvironment):
        idx = 0 if start is None else int(env.site_index(np.asarray(start)))
        return float(torus_log_partition(env, pot, steps, n)[idx])
    return level_recursion(env, pot, steps, n, 0.0, start).log_total


def _annealed(env, pot, steps, lam_a):
    if lam_a is not None:
        return float(lam_a)
    if not isinstance(env, IidEnvironment):
        raise ValueError("annealed free energy needs an i.i.d. environment or an explicit lam_a")
    from .freeenergy import annealed_free_energy

    est = annealed_free_energy(env.dist, pot, steps)
    if not math.isfinite(est.value):
        raise ValueError("annealed free energy is infinite; W_n is undefined")
    return est.value


def martingale_W(env: Environment, pot: Potential, steps: StepSet, n: int, lam_a: float | None = None,
                 start: Sequence[int] | None = None) -> float:
    """``W_n = Z_n / E[Z_n]``, i.e. ``h_n`` at ``lam = Lambda_a``."""
    if not steps.directed:
        raise ValueError("W_n is a martingale only for the directed step set")
    lam = _annealed(env, pot, steps, lam_a)
    return math.exp(level_recursion(env, pot, steps, n, lam, start).log_total)


def bridge_log_H(env: Environment, pot: Potential, steps: StepSet, n: int, lambda_q: float,
                 start: Sequence[int] | None = None) -> float:
    """``log H_n``: the weight pinned at ``start + (n/d, ..., n/d)``, tilted by ``-n lambda_q``.

    ``lambda_q`` is supplied by the caller (spectral on a torus, a Monte Carlo
    estimate on i.i.d. environments).
    """
    if not steps.directed:
        raise ValueError("the bridge is defined for the directed step set")
    if n % steps.d:
        raise ValueError(f"n = {n} is not divisible by d = {steps.d}")
    kern = level_recursion(env, pot, steps, n, lambda_q, start)
    target = np.asarray(kern.start) + n // steps.d
    val = kern.log_value_at(target)
    if val == -math.inf:
        raise FloatingPointError("bridge endpoint weight underflowed")
    return val


def endpoint_stats(env: Environment, pot: Potential, steps: StepSet, n: int,
                   start: Sequence[int] | None = None, lam: float = 0.0) -> EndpointStats:
    """Endpoint law ``mu_n(x) = h_n(w, x) / h_n(w)`` and overlap ``sum mu_n^2``."""
    kern = level_recursion(env, pot, steps, n, lam, start)
    mu = np.exp(kern.log_values - kern.log_total)
    mu /= mu.sum()
    return EndpointStats(kern.sites, mu, float(mu @ mu))


def enumerate_oracle(env: Environment, pot: Potential, steps: StepSet, n: int,
                     pin: Sequence[int] | None = None, start: Sequence[int] | None = None,
                     keep_paths: bool = False, max_paths: int = MAX_ORACLE_PATHS) -> PathWeightOracleResult:
    """Sum ``|R|^-n exp(sum V)`` over every path explicitly (no merging of paths)."""
    k, d = steps.size, steps.d
    if k**n > max_paths:
        raise ValueError(f"{k}^{n} paths exceed the oracle cap of {max_paths}")
    a = steps.array
    pos = (np.zeros((1, d), dtype=np.int64) if start is None
           else np.asarray(start, dtype=np.int64).reshape(1, d))
    logw = np.zeros(1)
    choices = np.zeros((1, 0), dtype=np.int64)
    for _ in range(n):
        V = pot(env.lookup(pos))
        logw = (logw[:, None] + V + steps.log_p).reshape(-1)
        pos = (pos[:, None, :] + a[None, :, :]).reshape(-1, d)
        if keep_paths:
            m = len(choices)
            choices = np.concatenate([np.repeat(choices, k, axis=0), np.tile(np.arange(k), m)[:, None]], axis=1)
    mask = np.ones(len(logw), dtype=bool)
    if pin is not None:
        mask = np.all(pos == np.asarray(pin, dtype=np.int64), axis=1)
    log_Z = float(logsumexp(logw[mask])) if mask.any() else -math.inf
    per_path = None
    if keep_paths:
        per_path = [(tuple(int(c) for c in ch), float(w)) for ch, w, keep in zip(choices, logw, mask) if keep]
    return PathWeightOracleResult(log_Z, per_path)


# ---------------------------------------------------------------------------
# batch CSV stream
# ---------------------------------------------------------------------------

BATCH_COLUMNS = ("seed", "n", "lambda", "log_h", "log_H", "W", "overlap")


def batch_row(env: Environment, pot: Potential, steps: StepSet, n: int, seed: int,
              lam: float, lambda_q: float | None = None, lam_a: float | None = None) -> dict:
    """One CSV row for an environment: ``log h_n^lam``, ``log H_n``, ``W_n``, overlap."""
    kern = level_recursion(env, pot, steps, n, lam)
    row = {"seed": seed, "n": n, "lambda": lam, "log_h": kern.log_total,
           "log_H": math.nan, "W": math.nan, "overlap": float(kern.level_overlaps[n])}
    if steps.directed and n % steps.d == 0:
        lq = lam if lambda_q is None else lambda_q
        row["log_H"] = kern.log_value_at(np.asarray(kern.start) + n // steps.d) + n * (lam - lq)
    if steps.directed and (lam_a is not None or isinstance(env, IidEnvironment)):
        try:
            la = _annealed(env, pot, steps, lam_a)
            row["W"] = math.exp(kern.log_total + n * (lam - la))
        except ValueError:
            pass
    return row


def write_batch_csv(rows: Iterable[dict], path, config_hash: str | None = None):
    return report.write_csv(path, BATCH_COLUMNS, rows, config_hash=config_hash)
