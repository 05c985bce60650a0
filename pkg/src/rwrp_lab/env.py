"""Step sets, environments, site distributions and local potentials.

Environments come in three flavours:

* ``PeriodicEnvironment`` -- values on a torus, looked up modulo the periods.
* ``BoxEnvironment`` -- explicit values on a half-open integer box.
* ``IidEnvironment`` -- i.i.d. values on a box, generated on demand by a
  counter-based hash of ``(seed, site)``.  Nothing is stored, so the box can
  be as large as the integer range allows and two environments built from the
  same ``(dist, box, seed)`` agree bit-for-bit on every site.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import special

DEFAULT_MAX_SITES = 2**31


class OutsideBoxError(LookupError):
    """A site was looked up outside the box on which an environment lives."""


# ---------------------------------------------------------------------------
# step sets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StepSet:
    """Finite admissible step set R with the uniform kernel p(z) = 1/|R|."""

    d: int
    steps: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        if self.d < 1:
            raise ValueError(f"lattice dimension must be positive, got {self.d}")
        if len(self.steps) < 2:
            raise ValueError("a step set needs at least two steps")
        for z in self.steps:
            if len(z) != self.d:
                raise ValueError(f"step {z} is not a vector in Z^{self.d}")
        if len(set(self.steps)) != len(self.steps):
            raise ValueError(f"duplicate steps in {self.steps}")

    @property
    def directed(self) -> bool:
        basis = tuple(tuple(int(i == j) for j in range(self.d)) for i in range(self.d))
        return self.steps == basis

    @property
    def size(self) -> int:
        return len(self.steps)

    @property
    def p(self) -> float:
        return 1.0 / len(self.steps)

    @property
    def log_p(self) -> float:
        return -math.log(len(self.steps))

    @cached_property
    def array(self) -> np.ndarray:
        a = np.array(self.steps, dtype=np.int64).reshape(len(self.steps), self.d)
        a.setflags(write=False)
        return a

    def index(self, z: Sequence[int]) -> int:
        return self.steps.index(tuple(int(c) for c in z))


def make_step_set(d: int, kind: str = "directed", custom: Sequence[Sequence[int]] | None = None) -> StepSet:
    """Build a step set.

    ``kind`` is ``"directed"`` (standard basis), ``"symmetric-nn"`` (``±e_i``)
    or ``"custom"`` (``custom`` gives the steps).
    """
    if d < 1:
        raise ValueError(f"lattice dimension must be positive, got {d}")
    if kind == "directed":
        steps = [tuple(int(i == j) for j in range(d)) for i in range(d)]
        if d == 1:
            raise ValueError("the directed step set needs d >= 2 (|R| >= 2)")
    elif kind == "symmetric-nn":
        steps = []
        for i in range(d):
            e = [0] * d
            e[i] = 1
            steps.append(tuple(e))
            e[i] = -1
            steps.append(tuple(e))
    elif kind == "custom":
        if not custom:
            raise ValueError("custom step set is empty")
        steps = [tuple(int(c) for c in z) for z in custom]
    else:
        raise ValueError(f"unknown step-set kind {kind!r}")
    return StepSet(d, tuple(steps))


# ---------------------------------------------------------------------------
# site distributions
# ---------------------------------------------------------------------------

# Extreme values of the uniforms produced by ``site_uniforms``.
_U_MIN = 0.5 * 2.0**-53
_U_MAX = 1.0 - 0.5 * 2.0**-53


@dataclass(frozen=True)
class Bernoulli:
    """Site value ``hi`` with probability ``p``, ``lo`` otherwise."""

    p: float = 0.5
    lo: float = 0.0
    hi: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"Bernoulli p must lie in [0, 1], got {self.p}")
        if not self.lo < self.hi:
            raise ValueError("Bernoulli needs lo < hi")
        object.__setattr__(self, "lo", float(self.lo))
        object.__setattr__(self, "hi", float(self.hi))
        object.__setattr__(self, "p", float(self.p))

    def from_uniform(self, u: np.ndarray) -> np.ndarray:
        return np.where(u < self.p, self.hi, self.lo)

    def support(self) -> tuple[float, float]:
        return (self.lo, self.hi)

    def atoms(self) -> list[tuple[float, float]]:
        """(value, probability) pairs."""
        return [(self.lo, 1.0 - self.p), (self.hi, self.p)]

    def to_dict(self) -> dict:
        return {"kind": "bernoulli", "p": self.p, "lo": self.lo, "hi": self.hi}


@dataclass(frozen=True)
class TruncatedGaussian:
    """Normal(mean, sd) conditioned on ``|x - mean| <= truncation * sd``."""

    mean: float = 0.0
    sd: float = 1.0
    truncation: float = 3.0

    def __post_init__(self):
        if not self.sd > 0:
            raise ValueError("Gaussian sd must be positive")
        if not (0 < self.truncation < math.inf):
            raise ValueError("Gaussian truncation must be finite and positive")

    def from_uniform(self, u: np.ndarray) -> np.ndarray:
        a, b = special.ndtr(-self.truncation), special.ndtr(self.truncation)
        z = special.ndtri(a + u * (b - a))
        z = np.clip(z, -self.truncation, self.truncation)
        return self.mean + self.sd * z

    def support(self) -> tuple[float, float]:
        w = self.truncation * self.sd
        return (self.mean - w, self.mean + w)

    def pdf(self, x):
        t = self.truncation
        mass = special.ndtr(t) - special.ndtr(-t)
        z = (np.asarray(x) - self.mean) / self.sd
        dens = np.exp(-0.5 * z * z) / (math.sqrt(2 * math.pi) * self.sd * mass)
        return np.where(np.abs(z) <= t, dens, 0.0)

    def to_dict(self) -> dict:
        return {"kind": "gaussian", "mean": self.mean, "sd": self.sd, "truncation": self.truncation}


@dataclass(frozen=True)
class LogGamma:
    """Site value ``-log G`` with ``G ~ Gamma(gamma, 1)``.

    The weight ``exp(omega)`` is then inverse-gamma distributed, which is the
    log-gamma polymer.  Values are stored already transformed.
    """

    gamma: float

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("LogGamma parameter must be positive")

    def from_uniform(self, u: np.ndarray) -> np.ndarray:
        return -np.log(special.gammaincinv(self.gamma, u))

    def support(self) -> tuple[float, float]:
        # Range reachable from the sampler's uniforms; finite by construction.
        lo = -math.log(special.gammaincinv(self.gamma, _U_MAX))
        hi = -math.log(special.gammaincinv(self.gamma, _U_MIN))
        return (lo, hi)

    def pdf(self, x):
        # density of -log G
        x = np.asarray(x, dtype=float)
        return np.exp(-self.gamma * x - np.exp(-x) - special.gammaln(self.gamma))

    def to_dict(self) -> dict:
        return {"kind": "loggamma", "gamma": self.gamma}


SiteDistribution = Bernoulli | TruncatedGaussian | LogGamma


def distribution_from_dict(data: Mapping) -> SiteDistribution:
    data = dict(data)
    kind = data.pop("kind")
    if kind == "bernoulli":
        return Bernoulli(**data)
    if kind == "gaussian":
        return TruncatedGaussian(**data)
    if kind == "loggamma":
        return LogGamma(**data)
    raise ValueError(f"unknown site distribution {kind!r}")


# ---------------------------------------------------------------------------
# counter-based per-site randomness
# ---------------------------------------------------------------------------

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_DIM_SALT = [np.uint64((0x9E3779B97F4A7C15 * (i + 1)) % 2**64) for i in range(64)]
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix64(x: np.ndarray) -> np.ndarray:
    # splitmix64 finaliser; uint64 arithmetic wraps mod 2**64
    x = np.atleast_1d(x)
    x = x ^ (x >> np.uint64(30))
    x = x * _M1
    x = x ^ (x >> np.uint64(27))
    x = x * _M2
    return x ^ (x >> np.uint64(31))


def site_uniforms(seed: int, coords: np.ndarray) -> np.ndarray:
    """Uniforms in (0, 1) keyed by ``(seed, site)``; shape ``coords.shape[:-1]``."""
    coords = np.asarray(coords, dtype=np.int64)
    key = _mix64(np.array([int(seed) & (2**64 - 1)], dtype=np.uint64) + _GOLDEN)[0]
    h = np.full(coords.shape[:-1], key, dtype=np.uint64).reshape(-1)
    flat = coords.reshape(-1, coords.shape[-1])
    for i in range(coords.shape[-1]):
        h = _mix64(h ^ (flat[:, i].astype(np.uint64) + _DIM_SALT[i]))
    h = h.reshape(coords.shape[:-1])
    return ((h >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53


# ---------------------------------------------------------------------------
# environments
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Box:
    """Half-open integer box ``[lo, hi)`` in Z^d."""

    lo: tuple[int, ...]
    hi: tuple[int, ...]

    def __post_init__(self):
        if len(self.lo) != len(self.hi):
            raise ValueError("box corners have different dimensions")
        if any(h <= l for l, h in zip(self.lo, self.hi)):
            raise ValueError(f"empty box [{self.lo}, {self.hi})")

    @classmethod
    def cube(cls, lo: int, hi: int, d: int) -> "Box":
        return cls((lo,) * d, (hi,) * d)

    @property
    def d(self) -> int:
        return len(self.lo)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(h - l for l, h in zip(self.lo, self.hi))

    @property
    def volume(self) -> int:
        return math.prod(self.shape)

    def contains(self, coords: np.ndarray) -> bool:
        coords = np.asarray(coords).reshape(-1, self.d)
        if coords.size == 0:
            return True
        return bool(np.all(coords.min(axis=0) >= self.lo) and np.all(coords.max(axis=0) < self.hi))

    def sites(self) -> np.ndarray:
        grids = np.meshgrid(*[np.arange(l, h) for l, h in zip(self.lo, self.hi)], indexing="ij")
        return np.stack(grids, axis=-1).reshape(-1, self.d)


class PeriodicEnvironment:
    """Environment on a torus: ``lookup(x) == values[x mod periods]``."""

    kind = "periodic"

    def __init__(self, values: np.ndarray):
        values = np.array(values, dtype=np.float64)
        if values.ndim < 1 or values.size == 0:
            raise ValueError("periodic environment needs at least one site")
        values.setflags(write=False)
        self.values = values

    @property
    def periods(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def d(self) -> int:
        return self.values.ndim

    @property
    def n_sites(self) -> int:
        return self.values.size

    def lookup(self, x, check: bool = True) -> np.ndarray | float:
        x = np.asarray(x, dtype=np.int64)
        idx = np.mod(x, self.periods)
        out = self.values[tuple(np.moveaxis(idx, -1, 0))]
        return float(out) if x.ndim == 1 else out

    def shift(self, y: Sequence[int]) -> "PeriodicEnvironment":
        """T_y: the environment seen from site y, ``(T_y w)_x = w_{x+y}``."""
        return PeriodicEnvironment(np.roll(self.values, [-int(c) for c in y], axis=tuple(range(self.d))))

    def sites(self) -> np.ndarray:
        """All torus sites in C order, shape (S, d)."""
        return np.stack(np.unravel_index(np.arange(self.n_sites), self.periods), axis=-1)

    def site_index(self, x) -> np.ndarray:
        x = np.mod(np.asarray(x, dtype=np.int64), self.periods)
        return np.ravel_multi_index(tuple(np.moveaxis(x, -1, 0)), self.periods)

    def __repr__(self):
        return f"PeriodicEnvironment(periods={self.periods})"


class BoxEnvironment:
    """Explicit site values on a box; lookups outside the box raise."""

    kind = "box"

    def __init__(self, box: Box, values: np.ndarray):
        values = np.array(values, dtype=np.float64).reshape(box.shape)
        values.setflags(write=False)
        self.box = box
        self.values = values

    @property
    def d(self) -> int:
        return self.box.d

    def lookup(self, x, check: bool = True):
        x = np.asarray(x, dtype=np.int64)
        if check and not self.box.contains(x):
            raise OutsideBoxError(f"site outside environment box [{self.box.lo}, {self.box.hi})")
        idx = x - np.asarray(self.box.lo)
        out = self.values[tuple(np.moveaxis(idx, -1, 0))]
        return float(out) if x.ndim == 1 else out


class IidEnvironment:
    """i.i.d. environment on a box, values generated from ``(seed, site)``."""

    kind = "iid"

    def __init__(self, dist: SiteDistribution, box: Box, seed: int):
        self.dist = dist
        self.box = box
        self.seed = int(seed)

    @property
    def d(self) -> int:
        return self.box.d

    def lookup(self, x, check: bool = True):
        x = np.asarray(x, dtype=np.int64)
        if check and not self.box.contains(x):
            raise OutsideBoxError(f"site outside environment box [{self.box.lo}, {self.box.hi})")
        out = self.dist.from_uniform(site_uniforms(self.seed, x))
        return float(out) if x.ndim == 1 else out

    def materialize(self, max_sites: int = 50_000_000) -> np.ndarray:
        """All box values as an array of shape ``box.shape``."""
        if self.box.volume > max_sites:
            raise MemoryError(f"box has {self.box.volume} sites, cap is {max_sites}")
        return self.lookup(self.box.sites()).reshape(self.box.shape)

    def __repr__(self):
        return f"IidEnvironment({self.dist}, {self.box}, seed={self.seed})"


Environment = PeriodicEnvironment | BoxEnvironment | IidEnvironment


def make_periodic_environment(values, periods: Sequence[int]) -> PeriodicEnvironment:
    periods = tuple(int(p) for p in periods)
    if any(p <= 0 for p in periods):
        raise ValueError(f"periods must be positive, got {periods}")
    flat = np.asarray(values, dtype=np.float64).ravel()
    if flat.size != math.prod(periods):
        raise ValueError(f"{flat.size} values do not fill a torus of periods {periods}")
    return PeriodicEnvironment(flat.reshape(periods))


def sample_iid_environment(dist: SiteDistribution, box, seed: int, max_sites: int = DEFAULT_MAX_SITES) -> IidEnvironment:
    """i.i.d. environment on ``box`` (a ``Box`` or a sequence of ``(lo, hi)`` pairs)."""
    if not isinstance(box, Box):
        box = Box(tuple(int(b[0]) for b in box), tuple(int(b[1]) for b in box))
    if box.volume > max_sites:
        raise MemoryError(f"box has {box.volume} sites, cap is {max_sites}")
    return IidEnvironment(dist, box, seed)


# ---------------------------------------------------------------------------
# potentials
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Potential:
    """Local potential ``V(w, z) = V_o(w_0, z)``.

    ``fn`` maps an array of site values of shape ``(m,)`` to the table
    ``V_o(w, z)`` of shape ``(m, n_steps)``.  ``beta``/``offsets`` are set for
    the affine family ``beta * w + offsets[z]``, which has closed-form moments.
    """

    fn: Callable[[np.ndarray], np.ndarray]
    n_steps: int
    bound: float = math.inf
    beta: float | None = None
    offsets: tuple[float, ...] | None = None
    label: str = "custom"

    def __call__(self, omega) -> np.ndarray:
        omega = np.asarray(omega, dtype=np.float64)
        out = np.asarray(self.fn(omega.reshape(-1)), dtype=np.float64)
        return out.reshape(omega.shape + (self.n_steps,))

    @property
    def is_affine(self) -> bool:
        return self.beta is not None

    def shifted(self, c: float) -> "Potential":
        """V + c."""
        fn = self.fn
        offsets = None if self.offsets is None else tuple(o + c for o in self.offsets)
        return Potential(lambda w: fn(w) + c, self.n_steps, self.bound + abs(c), self.beta, offsets, self.label)

    def describe(self) -> dict:
        out = {"label": self.label, "n_steps": self.n_steps, "bound": self.bound}
        if self.is_affine:
            out.update(beta=self.beta, offsets=list(self.offsets))
        return out


def linear_potential(beta: float, n_steps: int, offsets: Sequence[float] | None = None,
                     support: tuple[float, float] | None = None) -> Potential:
    """``V_o(w, z) = beta * w + offsets[z]``; bounded when ``support`` is given."""
    offsets = tuple(float(o) for o in (offsets if offsets is not None else [0.0] * n_steps))
    if len(offsets) != n_steps:
        raise ValueError("need one offset per step")
    off = np.array(offsets)
    bound = math.inf
    if support is not None:
        bound = abs(beta) * max(abs(support[0]), abs(support[1])) + float(np.max(np.abs(off)))
    elif beta == 0:
        bound = float(np.max(np.abs(off)))
    return Potential(lambda w: beta * w[:, None] + off[None, :], n_steps, bound, float(beta), offsets,
                     "zero" if beta == 0 and not off.any() else "linear")


def zero_potential(n_steps: int) -> Potential:
    return linear_potential(0.0, n_steps)


def step_potential(values: Sequence[float]) -> Potential:
    """Deterministic potential ``V(w, z) = v_z``."""
    return linear_potential(0.0, len(values), offsets=values)


def table_potential(table: Mapping[float, Sequence[float]]) -> Potential:
    """Potential defined on a finite set of site values; other values raise."""
    keys = np.array(sorted(table), dtype=np.float64)
    rows = np.array([table[k] for k in sorted(table)], dtype=np.float64)

    def fn(w):
        idx = np.searchsorted(keys, w)
        idx = np.clip(idx, 0, len(keys) - 1)
        if not np.all(keys[idx] == w):
            raise KeyError("site value not in potential table")
        return rows[idx]

    return Potential(fn, rows.shape[1], float(np.max(np.abs(rows))), label="table")


def potential_value(pot: Potential, env: Environment, x: Sequence[int], z: int) -> float:
    """Potential at the ordered pair ``(x, x + steps[z])``: ``V_o(w_x, z)``."""
    return float(pot(np.array([env.lookup(np.asarray(x))]))[0, z])


def rwre_to_potential(kernel) -> Potential:
    """Potential turning the uniform walk into the RWRE with kernel ``p_hat``.

    ``kernel`` is either a mapping from site value to the row of transition
    probabilities, or a callable taking an array of site values to an
    ``(m, |R|)`` array of probabilities.  The uniform-base path weight
    ``|R|^-n exp(sum V)`` equals the RWRE path probability when
    ``V(w, z) = log p_hat(w, z) + log |R|``.
    """
    if isinstance(kernel, Mapping):
        for w, row in kernel.items():
            _check_kernel_rows(np.asarray([row], dtype=float))
        table = {w: np.log(np.asarray(row, dtype=float)) + math.log(len(row)) for w, row in kernel.items()}
        pot = table_potential(table)
        return Potential(pot.fn, pot.n_steps, pot.bound, label="rwre")

    probe = np.asarray(kernel(np.zeros(1)), dtype=float)
    n_steps = probe.shape[-1]

    def fn(w):
        rows = np.asarray(kernel(w), dtype=float).reshape(len(w), n_steps)
        _check_kernel_rows(rows)
        return np.log(rows) + math.log(n_steps)

    return Potential(fn, n_steps, label="rwre")


def _check_kernel_rows(rows: np.ndarray) -> None:
    if np.any(rows <= 0):
        raise ValueError("RWRE kernel must be strictly positive on the step set")
    if np.any(np.abs(rows.sum(axis=-1) - 1.0) > 1e-12):
        raise ValueError("RWRE kernel rows must sum to 1")


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Model:
    """An i.i.d. RWRP model: site distribution, local potential, step set."""

    dist: SiteDistribution
    potential: Potential
    steps: StepSet
    meta: dict = field(default_factory=dict)

    def environment(self, seed: int, horizon: int) -> IidEnvironment:
        """Lazy environment large enough for any walk of ``horizon + 1`` steps
        started at the origin or one step away from it."""
        a = self.steps.array
        reach = horizon + 2
        lo = tuple(int(min(0, reach * a[:, i].min())) - 1 for i in range(self.steps.d))
        hi = tuple(int(max(0, reach * a[:, i].max())) + 2 for i in range(self.steps.d))
        return IidEnvironment(self.dist, Box(lo, hi), seed)

    def describe(self) -> dict:
        return {"dist": self.dist.to_dict(), "potential": self.potential.describe(),
                "steps": [list(z) for z in self.steps.steps], **self.meta}


@dataclass(frozen=True, eq=False)
class PeriodicModel:
    """A fixed periodic environment with its potential and step set."""

    env: PeriodicEnvironment
    potential: Potential
    steps: StepSet

    def describe(self) -> dict:
        return {"periods": list(self.env.periods), "values": self.env.values.ravel().tolist(),
                "potential": self.potential.describe(), "steps": [list(z) for z in self.steps.steps]}


def directed_polymer(dist: SiteDistribution, beta: float, d: int) -> Model:
    """Directed polymer ``V(w, z) = beta * w_0`` with bounded support."""
    steps = make_step_set(d, "directed")
    pot = linear_potential(beta, steps.size, support=dist.support())
    return Model(dist, pot, steps, {"beta": beta})


# ---------------------------------------------------------------------------
# serialisation: JSON header + little-endian float64 sidecar
# ---------------------------------------------------------------------------


def save_environment(env: Environment, path) -> tuple[Path, Path]:
    path = Path(path)
    sidecar = path.with_suffix(".bin")
    header: dict = {"kind": env.kind, "d": env.d, "dtype": "<f8", "sidecar": sidecar.name}
    if isinstance(env, PeriodicEnvironment):
        header["periods"] = list(env.periods)
        values = env.values
    elif isinstance(env, IidEnvironment):
        header.update(box={"lo": list(env.box.lo), "hi": list(env.box.hi)},
                      dist=env.dist.to_dict(), seed=env.seed)
        values = env.materialize()
    else:
        header["box"] = {"lo": list(env.box.lo), "hi": list(env.box.hi)}
        values = env.values
    header["n_values"] = int(values.size)
    path.write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    sidecar.write_bytes(np.ascontiguousarray(values, dtype="<f8").tobytes())
    return path, sidecar


def load_environment(path) -> Environment:
    path = Path(path)
    header = json.loads(path.read_text())
    values = np.frombuffer((path.parent / header["sidecar"]).read_bytes(), dtype="<f8")
    if values.size != header["n_values"]:
        raise ValueError("sidecar length does not match header")
    kind = header["kind"]
    if kind == "periodic":
        return make_periodic_environment(values, header["periods"])
    box = Box(tuple(header["box"]["lo"]), tuple(header["box"]["hi"]))
    if kind == "iid":
        env = IidEnvironment(distribution_from_dict(header["dist"]), box, header["seed"])
        if not np.array_equal(env.materialize().ravel(), values):
            raise ValueError("stored values do not match the regenerated i.i.d. environment")
        return env
    return BoxEnvironment(box, values)


def all_bernoulli_configurations(dist: Bernoulli, n_sites: int):
    """Yield ``(values, probability)`` over every two-valued configuration."""
    (lo, plo), (hi, phi) = dist.atoms()
    for bits in itertools.product((0, 1), repeat=n_sites):
        b = np.array(bits, dtype=bool)
        k = int(b.sum())
        yield np.where(b, hi, lo), (phi**k) * (plo ** (n_sites - k))
