"""Finite-n diagnostics of the disorder regime.

Everything here is Monte Carlo over independent environments with seeds
derived from one master seed.  Labels such as ``"weak-like"`` are heuristics
with explicit thresholds; the raw trajectories are always kept so any label
can be recomputed.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .env import Environment, LogGamma, Model, PeriodicEnvironment, Potential, StepSet, directed_polymer
from .freeenergy import annealed_free_energy, bound_verdict, site_updates
from .mc import BudgetExceeded, derive_seeds, jackknife, parallel_map
from .transfer import _torus_tables, level_recursion

WEAK, STRONG, INCONCLUSIVE = "weak-like", "strong-like", "inconclusive"


def _check_budget(steps: StepSet, n: int, samples: int, budget: float | None) -> None:
    if budget is None:
        return
    work = samples * site_updates(steps, n)
    if work > budget:
        raise BudgetExceeded(f"{work:.3g} site updates exceed the budget of {budget:.3g}")


# ---------------------------------------------------------------------------
# W_n trajectories
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DisorderThresholds:
    """Compare ``median W`` at ``n_eval`` (default: last step) with ``n_ref``."""

    n_ref: int = 10
    n_eval: int | None = None
    decay_factor: float = 10.0
    stability_factor: float = 2.0


@dataclass
class DisorderReport:
    model: dict
    seeds: list[int]
    n: np.ndarray  # 0..n_max
    log_W: np.ndarray  # (samples, n_max + 1)
    lambda_a: float
    thresholds: DisorderThresholds
    classification: str
    median_ratio: float
    trend_slope: float
    quenched: dict = field(default_factory=dict)

    @property
    def n_max(self) -> int:
        return int(self.n[-1])

    def median_W(self, n: int) -> float:
        return float(np.median(np.exp(self.log_W[:, n])))

    def quantiles(self, n: int, qs=(0.1, 0.5, 0.9)) -> list[float]:
        return [float(v) for v in np.quantile(np.exp(self.log_W[:, n]), qs)]

    def mean_one(self, n: int) -> tuple[float, float, float]:
        """(mean W_n, standard error, z-score of the mean against 1)."""
        w = np.exp(self.log_W[:, n])
        mean, se = float(w.mean()), float(w.std(ddof=1) / math.sqrt(len(w)))
        z = (mean - 1.0) / se if se > 0 else (0.0 if mean == 1.0 else math.inf)
        return mean, se, z

    def csv_rows(self, checkpoints: Sequence[int] | None = None) -> list[list]:
        ns = self.n if checkpoints is None else checkpoints
        return [[seed, int(n), float(self.log_W[i, n])] for i, seed in enumerate(self.seeds) for n in ns]

    def summary(self, checkpoints: Sequence[int] | None = None) -> dict:
        ns = [int(c) for c in (self.n[1:] if checkpoints is None else checkpoints)]
        per_n = {}
        for n in ns:
            mean, se, z = self.mean_one(n)
            q10, q50, q90 = self.quantiles(n)
            per_n[str(n)] = {"median_W": q50, "q10_W": q10, "q90_W": q90, "mean_W": mean, "mean_W_se": se,
                             "mean_one_z": z}
        return {
            "model": self.model,
            "samples": len(self.seeds),
            "n_max": self.n_max,
            "lambda_a": self.lambda_a,
            "thresholds": asdict(self.thresholds),
            "classification": self.classification,
            "median_ratio": self.median_ratio,
            "trend_slope": self.trend_slope,
            "quenched": self.quenched,
            "per_n": per_n,
        }


def classify_trajectories(log_W: np.ndarray, thresholds: DisorderThresholds) -> tuple[str, float, float]:
    """Label from stored trajectories alone: (label, median ratio, trend slope).

    strong-like: median W at ``n_eval`` below ``median W(n_ref) / decay_factor``;
    weak-like: the two medians within ``stability_factor`` of each other.
    """
    n_max = log_W.shape[1] - 1
    n_eval = n_max if thresholds.n_eval is None else thresholds.n_eval
    if not 0 <= thresholds.n_ref < n_eval <= n_max:
        raise ValueError(f"need 0 <= n_ref < n_eval <= {n_max}")
    med = np.median(log_W, axis=0)  # median commutes with exp
    ratio = math.exp(med[n_eval] - med[thresholds.n_ref])
    ns = np.arange(1, n_max + 1)
    slope = float(np.polyfit(ns, med[1:], 1)[0]) if n_max >= 2 else 0.0
    if ratio < 1.0 / thresholds.decay_factor:
        label = STRONG
    elif 1.0 / thresholds.stability_factor <= ratio <= thresholds.stability_factor:
        label = WEAK
    else:
        label = INCONCLUSIVE
    return label, ratio, slope


def simulate_martingale(model: Model, n_max: int, samples: int, master_seed: int,
                        thresholds: DisorderThresholds | None = None, threads: int | None = None,
                        budget: float | None = None) -> DisorderReport:
    """``log W_n`` for n = 0..n_max along one forward pass per seed.

    The same runs give ``(1/n_max) log Z_{n_max} = lambda_a + log W_{n_max} / n_max``,
    reported under ``quenched`` with a jackknife error and the annealed gap.
    """
    if not model.steps.directed:
        raise ValueError("W_n needs the directed step set")
    thresholds = thresholds or DisorderThresholds()
    ann = annealed_free_energy(model.dist, model.potential, model.steps)
    if not math.isfinite(ann.value):
        raise ValueError("annealed free energy is infinite; W_n is undefined")
    _check_budget(model.steps, n_max, samples, budget)
    lam_a = ann.value
    seeds = derive_seeds(master_seed, samples)

    def one(seed):
        env = model.environment(seed, n_max)
        return level_recursion(env, model.potential, model.steps, n_max, lam=lam_a).level_log_totals

    log_W = np.array(parallel_map(one, seeds, threads))
    label, ratio, slope = classify_trajectories(log_W, thresholds)
    lq, ci = jackknife(log_W[:, n_max] / n_max) if samples >= 2 else (float(log_W[0, n_max] / n_max), math.nan)
    lq += lam_a
    gap = lam_a - lq
    _, resolved = bound_verdict(lq, ci, lam_a)
    quenched = {
        "estimator": "mean of (1/n) log Z_n over seeds at n = n_max, jackknife standard error",
        "value": lq, "ci": ci, "n": n_max, "gap": gap,
        "gap_note": "estimated gap (very strong disorder suspected)" if resolved else "no resolved gap",
    }
    return DisorderReport(model.describe(), seeds, np.arange(n_max + 1), log_W, lam_a, thresholds,
                          label, ratio, slope, quenched)


# ---------------------------------------------------------------------------
# replica overlap
# ---------------------------------------------------------------------------


@dataclass
class OverlapReport:
    n: np.ndarray  # 1..n_max
    mean_overlap: np.ndarray
    partial_sums: np.ndarray
    tail_fraction: float
    classification: str
    seeds: list[int]
    per_seed: np.ndarray


def overlap_series(model: Model, n_max: int, samples: int, master_seed: int, weak_below: float = 0.1,
                   strong_above: float = 0.4, threads: int | None = None,
                   budget: float | None = None) -> OverlapReport:
    """Mean replica overlap ``sum_x mu_n(x)^2`` and its partial sums.

    ``tail_fraction`` is the share of the partial sum at ``n_max`` picked up
    over ``(n_max/2, n_max]``: near 0 when the sums flatten (weak-like), 1/2
    when the overlap stays of order one (strong-like).
    """
    if n_max < 2:
        raise ValueError("n_max must be at least 2")
    _check_budget(model.steps, n_max, samples, budget)
    seeds = derive_seeds(master_seed, samples)

    def one(seed):
        env = model.environment(seed, n_max)
        return level_recursion(env, model.potential, model.steps, n_max).level_overlaps[1:]

    per_seed = np.array(parallel_map(one, seeds, threads))
    mean = per_seed.mean(axis=0)
    sums = np.cumsum(mean)
    tail = float((sums[-1] - sums[n_max // 2 - 1]) / sums[-1])
    label = WEAK if tail < weak_below else STRONG if tail > strong_above else INCONCLUSIVE
    return OverlapReport(np.arange(1, n_max + 1), mean, sums, tail, label, seeds, per_seed)


# ---------------------------------------------------------------------------
# h_n^lambda events
# ---------------------------------------------------------------------------


@dataclass
class HEventTally:
    lam: float
    n_max: int
    window: tuple[int, int]
    tail_min: np.ndarray
    tail_max: np.ndarray
    counts: dict[str, int]
    low: float
    high: float
    note: str = "finite-n proxies over the tail window, not limits"

    def fraction(self, key: str) -> float:
        return self.counts[key] / len(self.tail_min)


def _tally(log_h: np.ndarray, lam: float, n_max: int, low: float, high: float) -> HEventTally:
    lo_n = n_max // 2
    window = np.exp(log_h[:, lo_n:])
    tmin, tmax = window.min(axis=1), window.max(axis=1)
    counts = {
        "to_zero": int(np.sum(tmax < low)),
        "positive_finite": int(np.sum((tmin > low) & (tmax < high))),
        "to_infinity": int(np.sum(tmin > high)),
    }
    counts["unresolved"] = len(tmin) - sum(counts.values())
    return HEventTally(lam, n_max, (lo_n, n_max), tmin, tmax, counts, low, high)


def h_event_diagnostics(source: Model | PeriodicEnvironment, lam: float, n_max: int, samples: int,
                        master_seed: int = 0, pot: Potential | None = None, steps: StepSet | None = None,
                        low: float = 0.01, high: float = 100.0, threads: int | None = None) -> HEventTally:
    """Tail min/max of ``h_n^lam`` over ``[n_max/2, n_max]`` per seed, tallied into
    ``to_zero`` (max below ``low``), ``positive_finite`` and ``to_infinity`` (min above ``high``).

    ``source`` is an i.i.d. model, or a periodic environment together with
    ``pot`` and ``steps`` (seeds are then uniformly random torus sites).
    """
    if isinstance(source, PeriodicEnvironment):
        if pot is None or steps is None:
            raise ValueError("a periodic environment needs pot and steps")
        logw, nb = _torus_tables(source, pot, steps, lam)
        P = np.exp(logw)
        starts = np.random.default_rng(master_seed).integers(0, source.n_sites, size=samples)
        h = np.ones(source.n_sites)
        log_scale = 0.0
        traj = np.zeros((n_max + 1, source.n_sites))
        for j in range(1, n_max + 1):
            h = (P * h[nb]).sum(axis=1)
            s = float(h.max())
            h /= s
            log_scale += math.log(s)
            traj[j] = log_scale + np.log(h)
        return _tally(traj.T[starts], lam, n_max, low, high)

    model = source
    seeds = derive_seeds(master_seed, samples)

    def one(seed):
        env = model.environment(seed, n_max)
        return level_recursion(env, model.potential, model.steps, n_max, lam=lam).level_log_totals

    return _tally(np.array(parallel_map(one, seeds, threads)), lam, n_max, low, high)


# ---------------------------------------------------------------------------
# bridge fluctuations
# ---------------------------------------------------------------------------


@dataclass
class KpzProbeResult:
    n_grid: np.ndarray
    std: np.ndarray
    chi: float
    chi_se: float
    samples: int
    seeds: list[int]
    log_H: np.ndarray  # (samples, len(n_grid))
    lambda_q: float
    lambda_q_ci: float
    degenerate: bool
    estimator_note: str = ("lambda_q estimated once as the seed average of (1/n) log h_n at the largest n; "
                           "log H_n inherits its bias")

    def summary(self) -> dict:
        return {
            "n_grid": self.n_grid.tolist(), "std_log_H": self.std.tolist(), "chi": self.chi,
            "chi_se": self.chi_se, "samples": self.samples, "lambda_q": self.lambda_q,
            "lambda_q_ci": self.lambda_q_ci, "degenerate": self.degenerate, "estimator_note": self.estimator_note,
        }


MIN_KPZ_SAMPLES = 100
JACKKNIFE_GROUPS = 20


def spread(log_H: np.ndarray) -> np.ndarray:
    """Sample std per column; exactly 0 when a column is constant (no rounding residue)."""
    std = log_H.std(axis=0, ddof=1)
    std[np.ptp(log_H, axis=0) == 0] = 0.0
    return std


def _slope(n_grid: np.ndarray, log_H: np.ndarray) -> float:
    std = spread(log_H)
    if np.all(std == 0):
        return 0.0
    return float(np.polyfit(np.log(n_grid), np.log(std), 1)[0])


def fit_exponent(n_grid: Sequence[int], log_H: np.ndarray) -> tuple[float, float, bool]:
    """(slope of log std(log H_n) vs log n, grouped jackknife error, degenerate flag).

    Zero spread at every n (no disorder) is reported as exponent 0 with the
    degenerate flag set.
    """
    n_grid = np.asarray(n_grid, dtype=float)
    log_H = np.asarray(log_H, dtype=float)
    std = spread(log_H)
    if np.all(std == 0):
        return 0.0, 0.0, True
    if np.any(std == 0):
        raise FloatingPointError("zero spread at some but not all n")
    chi, se = jackknife(log_H, lambda a: _slope(n_grid, a), groups=JACKKNIFE_GROUPS)
    return chi, se, False


def bridge_fluctuations(model: Model, n_grid: Sequence[int], samples: int, master_seed: int,
                        threads: int | None = None, budget: float | None = None) -> KpzProbeResult:
    """Sample ``log H_n`` on ``n_grid`` (one forward pass per seed) and fit the growth exponent."""
    steps = model.steps
    if not steps.directed:
        raise ValueError("the bridge needs the directed step set")
    if samples < MIN_KPZ_SAMPLES:
        raise ValueError(f"{samples} samples are too few for a stable fit (need {MIN_KPZ_SAMPLES})")
    n_grid = np.asarray(sorted(int(n) for n in n_grid))
    if len(n_grid) < 2 or np.any(n_grid % steps.d) or n_grid[0] <= 0:
        raise ValueError("n_grid needs at least two positive values divisible by d")
    n_top = int(n_grid[-1])
    _check_budget(steps, n_top, samples, budget)
    seeds = derive_seeds(master_seed, samples)
    record = {int(n): [int(n) // steps.d] * steps.d for n in n_grid}

    def one(seed):
        env = model.environment(seed, n_top)
        kern = level_recursion(env, model.potential, steps, n_top, record=record)
        return [kern.recorded[int(n)] for n in n_grid], kern.log_total

    out = parallel_map(one, seeds, threads)
    pinned = np.array([o[0] for o in out])
    lq, lq_ci = jackknife(np.array([o[1] for o in out]) / n_top)
    log_H = pinned - n_grid[None, :] * lq
    chi, se, degenerate = fit_exponent(n_grid, log_H)
    return KpzProbeResult(n_grid, spread(log_H), chi, se, samples, seeds, log_H, lq, lq_ci, degenerate)


def kpz_probe(gamma: float, n_grid: Sequence[int], samples: int, master_seed: int, beta: float = 1.0,
              threads: int | None = None, budget: float | None = None) -> KpzProbeResult:
    """Bridge fluctuation exponent for the d=2 log-gamma polymer (site values ``-log G``)."""
    return bridge_fluctuations(directed_polymer(LogGamma(gamma), beta, 2), n_grid, samples, master_seed,
                               threads, budget)
