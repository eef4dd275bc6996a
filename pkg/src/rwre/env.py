"""Random symmetric bond-rate environments on the centered box.

Each unordered nearest-neighbor bond gets one positive rate, so the symmetry
w_xy = w_yx holds by construction.  Rates are drawn independently per bond
from a configurable family, using a counter-based hash keyed by
(seed, direction, absolute tail coordinates).  Two consequences worth knowing:

* sampling is a pure function of (spec, seed) and reproduces bit-for-bit;
* environments with the same seed but different L agree on shared bonds, so
  an L-sweep sees nested restrictions of one infinite environment, which is
  the natural way to watch almost-sure convergence on a single realization.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import DimensionError, ParameterDomainError
from .lattice import Lattice, get_lattice

_FORMAT = "rwre.env/1"


@dataclass(frozen=True)
class Constant:
    rate: float = 1.0

    def validate(self):
        if not self.rate > 0:
            raise ParameterDomainError(f"constant rate must be positive, got {self.rate}")

    def draw(self, u: np.ndarray) -> np.ndarray:
        return np.full(u.shape, float(self.rate))

    def mean(self) -> float:
        return float(self.rate)


@dataclass(frozen=True)
class UniformInterval:
    a: float
    b: float

    def validate(self):
        if not (0 < self.a < self.b):
            raise ParameterDomainError(f"need 0 < a < b, got a={self.a}, b={self.b}")

    def draw(self, u: np.ndarray) -> np.ndarray:
        return self.a + (self.b - self.a) * u

    def mean(self) -> float:
        return 0.5 * (self.a + self.b)


@dataclass(frozen=True)
class BoundedPerturbation:
    """Rates w = mean*(1 + delta*eps) with eps uniform on [-1, 1).

    delta < 1/2 is the macroscopic homogeneity condition under which the walk
    homogenizes in any dimension; |w/mean - 1| <= delta is guaranteed.
    """

    mean: float
    delta: float

    def validate(self):
        if not self.mean > 0:
            raise ParameterDomainError(f"mean rate must be positive, got {self.mean}")
        if not (0 <= self.delta < 0.5):
            raise ParameterDomainError(f"need 0 <= delta < 1/2, got {self.delta}")

    def draw(self, u: np.ndarray) -> np.ndarray:
        return self.mean * (1.0 + self.delta * (2.0 * u - 1.0))


@dataclass(frozen=True)
class HeavyTailNearZero:
    """Rates w = cap * U^(1/gamma), so P(w <= x) = (x/cap)^gamma near zero.

    E[1/w] is finite iff gamma > 1; gamma <= 1 is the sub-diffusive probe.
    """

    gamma: float
    cap: float

    def validate(self):
        if not self.gamma > 0:
            raise ParameterDomainError(f"need gamma > 0, got {self.gamma}")
        if not self.cap > 0:
            raise ParameterDomainError(f"need cap > 0, got {self.cap}")

    def draw(self, u: np.ndarray) -> np.ndarray:
        # 1 - u lies in (0, 1], keeping rates strictly positive.
        return self.cap * (1.0 - u) ** (1.0 / self.gamma)

    def mean(self) -> float:
        return self.cap * self.gamma / (self.gamma + 1.0)


Family = Constant | UniformInterval | BoundedPerturbation | HeavyTailNearZero


def family_from_name(name: str, params: dict) -> Family:
    """Build a rate family from its serialized name and parameter dict."""
    if name not in _FAMILY_BY_NAME:
        raise ParameterDomainError(f"unknown rate family: {name!r}")
    return _FAMILY_BY_NAME[name](**params)


def family_mean(family: Family) -> float:
    """Expected bond rate of a family (BoundedPerturbation stores it as a field)."""
    m = family.mean
    return float(m() if callable(m) else m)

_FAMILY_NAMES = {
    Constant: "constant",
    UniformInterval: "uniform_interval",
    BoundedPerturbation: "bounded_perturbation",
    HeavyTailNearZero: "heavy_tail_near_zero",
}
_FAMILY_BY_NAME = {v: k for k, v in _FAMILY_NAMES.items()}


@dataclass(frozen=True)
class EnvironmentSpec:
    family: Family
    d: int
    L: int
    seed: int

    def validate(self):
        if self.d < 1:
            raise ParameterDomainError(f"dimension must be >= 1, got {self.d}")
        if self.L < 1:
            raise ParameterDomainError(f"half-size must be >= 1, got {self.L}")
        if not 0 <= int(self.seed) < 2**64:
            raise ParameterDomainError("seed must fit in 64 unsigned bits")
        self.family.validate()


@dataclass(frozen=True)
class Environment:
    d: int
    L: int
    rates: np.ndarray
    spec: EnvironmentSpec | None = None

    def __post_init__(self):
        rates = np.ascontiguousarray(self.rates, dtype=float)
        if rates.ndim != 1:
            raise ParameterDomainError("rates must be a flat array in canonical bond order")
        if not np.all(rates > 0):
            raise ParameterDomainError("every bond rate must be strictly positive")
        rates.setflags(write=False)
        object.__setattr__(self, "rates", rates)
        if len(rates) != self.lattice.n_bonds:
            raise ParameterDomainError(
                f"expected {self.lattice.n_bonds} bond rates for d={self.d}, L={self.L}, "
                f"got {len(rates)}"
            )

    @cached_property
    def lattice(self) -> Lattice:
        return get_lattice(self.d, self.L)

    @property
    def n_bonds(self) -> int:
        return len(self.rates)


# counter-based splittable stream: splitmix64 finalizer chained over key fields
_C1 = np.uint64(0x9E3779B97F4A7C15)
_C2 = np.uint64(0xBF58476D1CE4E5B9)
_C3 = np.uint64(0x94D049BB133111EB)
_COORD_OFFSET = np.uint64(2**31)


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z + _C1).astype(np.uint64)
    z = (z ^ (z >> np.uint64(30))) * _C2
    z = (z ^ (z >> np.uint64(27))) * _C3
    return z ^ (z >> np.uint64(31))


def bond_uniforms(spec: EnvironmentSpec, lat: Lattice) -> np.ndarray:
    """One uniform [0,1) variate per bond, keyed by (seed, direction, position)."""
    h = np.full(lat.n_bonds, np.uint64(int(spec.seed)), dtype=np.uint64)
    h = _mix64(h ^ lat.bond_dir.astype(np.uint64))
    for k in range(lat.d):
        field = lat.bond_tail_coords[:, k].astype(np.int64).astype(np.uint64)
        h = _mix64(h ^ (field + _COORD_OFFSET))
    return (h >> np.uint64(11)).astype(np.float64) * (2.0**-53)


def sample_environment(spec: EnvironmentSpec) -> Environment:
    """Draw an i.i.d. environment; pure function of the spec."""
    spec.validate()
    lat = get_lattice(spec.d, spec.L)
    u = bond_uniforms(spec, lat)
    rates = spec.family.draw(u)
    return Environment(d=spec.d, L=spec.L, rates=rates, spec=spec)


def partial_sum_s(env: Environment, x: int) -> float:
    """Average of 1/w over the first x bonds, left to right (d=1 only).

    These partial sums are the quantity whose almost-sure limit is 1/kappa;
    at x = 2L they use every bond of the box.
    """
    if env.d != 1:
        raise DimensionError(f"partial sums are one-dimensional, got d={env.d}")
    if not 1 <= x <= 2 * env.L:
        raise ParameterDomainError(f"need 1 <= x <= 2L = {2 * env.L}, got {x}")
    return float(np.mean(1.0 / env.rates[:x]))


def harmonic_kappa(env: Environment) -> float:
    """Finite-volume harmonic-mean diffusion estimate 1 / s_{2L} (d=1 only)."""
    return 1.0 / partial_sum_s(env, 2 * env.L)


def alpha_field(env: Environment, mean: float) -> np.ndarray:
    """Centered relative fluctuations w_b/mean - 1 per bond."""
    if not mean > 0:
        raise ParameterDomainError(f"reference mean must be positive, got {mean}")
    return env.rates / mean - 1.0


def environment_to_dict(env: Environment) -> dict:
    spec = env.spec
    header: dict = {"format": _FORMAT, "d": env.d, "L": env.L}
    if spec is not None:
        fam = spec.family
        header["family"] = _FAMILY_NAMES[type(fam)]
        header["params"] = {k: getattr(fam, k) for k in fam.__dataclass_fields__}
        header["seed"] = int(spec.seed)
    header["rates"] = env.rates.tolist()
    return header


def environment_from_dict(data: dict) -> Environment:
    if data.get("format") != _FORMAT:
        raise ParameterDomainError(f"unknown environment format: {data.get('format')!r}")
    spec = None
    if "family" in data:
        fam = _FAMILY_BY_NAME[data["family"]](**data["params"])
        spec = EnvironmentSpec(family=fam, d=data["d"], L=data["L"], seed=data["seed"])
    return Environment(d=data["d"], L=data["L"], rates=np.array(data["rates"]), spec=spec)


def save_environment(env: Environment, path) -> None:
    with open(path, "w") as fh:
        json.dump(environment_to_dict(env), fh)


def load_environment(path) -> Environment:
    with open(path) as fh:
        return environment_from_dict(json.load(fh))
