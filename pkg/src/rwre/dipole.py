"""Perturbation-expansion diagnostics for the effective diffusion matrix.

Everything here is desk-scale by design: the peeled operator
D = (-Delta_1)^{-1/2} Delta_alpha (-Delta_1)^{-1/2} and its Neumann series,
the bond-bond dipole projector Phi = grad (-Delta_1)^{-1} div together with
its infinite-volume integral and decay, the Schwarz upper bound and the
sample-average Theta estimate for the diffusion bounds, the set-partition
recursion feeding the series majorant, and exhaustive small-path enumeration
of the graph cancellation that removes bridged contributions.

Dense matrices are materialized only up to ``DENSE_CAP`` interior sites.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

from .env import Environment, EnvironmentSpec, alpha_field, family_mean, sample_environment
from .errors import (
    DenseCapError,
    DivergenceError,
    NumericalFailureError,
    ParameterDomainError,
)
from .lattice import build_delta_from_rates, get_lattice

DENSE_CAP = 4096
STAT_GROUPS = 20


# ---------------------------------------------------------------------------
# homogeneous functional calculus
# ---------------------------------------------------------------------------

@lru_cache(maxsize=8)
def _homogeneous_basis(d: int, L: int):
    """Orthonormal eigenbasis E and eigenvalues mu of -Delta_{L,1} (dense).

    Built per axis and combined with Kronecker products, matching the
    row-major flattening of sites and mode indices.
    """
    side = 2 * L - 1
    if side**d > DENSE_CAP:
        raise DenseCapError(f"(2L-1)^d = {side**d} exceeds dense cap {DENSE_CAP}")
    x = np.arange(-L + 1, L)
    n = np.arange(1, 2 * L)
    arg = 0.5 * np.pi * np.outer(x, n) / L
    P = np.where(n % 2 == 1, np.cos(arg), np.sin(arg)) / np.sqrt(L)
    mu1 = 4.0 * np.sin(np.pi * n / (4.0 * L)) ** 2
    E = P
    mu = mu1
    for _ in range(d - 1):
        E = np.kron(E, P)
        mu = (mu[:, None] + mu1[None, :]).ravel()
    return E, mu


def _apply_power(v: np.ndarray, L: int, d: int, power: float) -> np.ndarray:
    E, mu = _homogeneous_basis(d, L)
    return E @ (mu**power * (E.T @ v))


def inv_sqrt_homogeneous(v, L: int, d: int) -> np.ndarray:
    """Apply (-Delta_{L,1})^{-1/2} through the explicit eigenbasis."""
    v = np.asarray(v, dtype=float)
    return _apply_power(v, L, d, -0.5)


def _power_matrix(L: int, d: int, power: float) -> np.ndarray:
    E, mu = _homogeneous_basis(d, L)
    return (E * mu**power) @ E.T


def d_matrix(env: Environment, wbar: float) -> np.ndarray:
    """Peeled perturbation D = (-Delta_1)^{-1/2} Delta_alpha (-Delta_1)^{-1/2}.

    Symmetric with spectral norm bounded by sup|alpha| because the dipole
    operator it factors through is an orthogonal projector.
    """
    lat = env.lattice
    if lat.n_sites > DENSE_CAP:
        raise DenseCapError(f"{lat.n_sites} sites exceed dense cap {DENSE_CAP}")
    alpha = alpha_field(env, wbar)
    A = build_delta_from_rates(lat, alpha).toarray()
    S = _power_matrix(lat.L, lat.d, -0.5)
    D = S @ A @ S
    return 0.5 * (D + D.T)


def neumann_partial_sum(env: Environment, wbar: float, order: int, v) -> np.ndarray:
    """Partial sum sum_{k<=order} D^k v of the Neumann series for (I-D)^{-1} v."""
    if order < 0:
        raise ParameterDomainError(f"order must be >= 0, got {order}")
    v = np.asarray(v, dtype=float)
    D = d_matrix(env, wbar)
    out = v.copy()
    term = v.copy()
    for _ in range(order):
        term = D @ term
        out += term
    return out


# ---------------------------------------------------------------------------
# dipole projector
# ---------------------------------------------------------------------------

def dipole_phi_matrix(L: int, d: int) -> np.ndarray:
    """Full bond-bond dipole matrix Phi = grad (-Delta_1)^{-1} div.

    An orthogonal projector of rank equal to the interior site count (the
    gradient has trivial kernel under Dirichlet conditions).
    """
    lat = get_lattice(d, L)
    if lat.n_sites > DENSE_CAP:
        raise DenseCapError(f"{lat.n_sites} sites exceed dense cap {DENSE_CAP}")
    E, mu = _homogeneous_basis(d, L)
    G = lat.incidence @ E
    return (G / mu) @ G.T


def dipole_phi(L: int, d: int, b: int, b2: int) -> float:
    """Single entry of the dipole matrix through the spectral sum."""
    lat = get_lattice(d, L)
    E, mu = _homogeneous_basis(d, L)
    B = lat.incidence
    gb = (B[b] @ E).ravel()
    gb2 = (B[b2] @ E).ravel()
    return float(np.sum(gb * gb2 / mu))


def dipole_phi_infinite(d: int, offset, i: int, j: int, nodes: int = 192,
                        tol: float = 1e-7) -> float:
    """Infinite-volume dipole entry for bonds in directions i, j at a site offset.

    Evaluates the limiting Brillouin-zone integral with Gauss-Legendre
    quadrature, doubling the rule until two refinements agree within tol.
    """
    offset = np.atleast_1d(np.asarray(offset, dtype=np.int64))
    if len(offset) != d or not (0 <= i < d and 0 <= j < d):
        raise ParameterDomainError(f"bad offset/directions for d={d}")
    prev = None
    for n_nodes in (nodes, 2 * nodes, 4 * nodes):
        val = _phi_quadrature(d, offset, i, j, n_nodes)
        if prev is not None and abs(val - prev) <= tol * max(1.0, abs(val)):
            return val
        prev = val
    raise NumericalFailureError(
        f"dipole quadrature did not settle below {tol}", residual=abs(val - prev)
    )


def _phi_quadrature(d: int, offset, i: int, j: int, n_nodes: int) -> float:
    x, w = np.polynomial.legendre.leggauss(n_nodes)
    phi = 0.5 * np.pi * (x + 1.0)
    wphi = 0.5 * np.pi * w
    grids = np.meshgrid(*([phi] * d), indexing="ij")
    weights = wphi
    for _ in range(d - 1):
        weights = np.multiply.outer(weights, wphi)
    denom = sum(np.sin(g / 2.0) ** 2 for g in grids)

    def cos_product(z):
        out = np.ones_like(grids[0])
        for k in range(d):
            out = out * np.cos(grids[k] * z[k])
        return out

    ei = np.zeros(d, dtype=np.int64)
    ei[i] = 1
    ej = np.zeros(d, dtype=np.int64)
    ej[j] = 1
    num = (cos_product(offset + ei - ej) - cos_product(offset + ei)
           - cos_product(offset - ej) + cos_product(offset))
    integrand = num / denom
    value = float(np.sum(weights * integrand)) / (4.0 * np.pi**d)
    return value


# ---------------------------------------------------------------------------
# diffusion bounds from environment ensembles
# ---------------------------------------------------------------------------

def _replica(spec: EnvironmentSpec, r: int) -> Environment:
    return sample_environment(replace(spec, seed=int(spec.seed) + r))


@dataclass(frozen=True)
class SchwarzReport:
    n_env: int
    n_vectors: int
    worst_margin_sample: float
    worst_margin_population: float
    margins_sample: np.ndarray
    margins_population: np.ndarray

    def to_dict(self) -> dict:
        return {
            "n_env": self.n_env,
            "n_vectors": self.n_vectors,
            "worst_margin_sample": self.worst_margin_sample,
            "worst_margin_population": self.worst_margin_population,
        }


def schwarz_bound_check(spec: EnvironmentSpec, n_env: int, n_vectors: int,
                        rng_seed: int = 0) -> SchwarzReport:
    """Quadratic-form check of the upper-bound inequality on sample averages.

    For the empirical average of (-Delta_w)^{-1} over replicas, operator
    convexity of the matrix inverse makes
    [avg (-Delta)^{-1}]^{-1} <= avg(-Delta) exactly, so the sample margins are
    nonnegative to round-off; margins against the population mean rate carry
    O(1/sqrt(n_env)) statistical slack and are only reported.
    """
    spec.validate()
    lat = get_lattice(spec.d, spec.L)
    if lat.n_sites > DENSE_CAP:
        raise DenseCapError(f"{lat.n_sites} sites exceed dense cap {DENSE_CAP}")
    n = lat.n_sites
    avg_inv = np.zeros((n, n))
    avg_rates = np.zeros(lat.n_bonds)
    for r in range(n_env):
        env = _replica(spec, r)
        A = -build_delta_from_rates(lat, env.rates).toarray()
        avg_inv += np.linalg.inv(A)
        avg_rates += env.rates
    avg_inv /= n_env
    avg_rates /= n_env
    try:
        inv_of_avg = np.linalg.inv(avg_inv)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailureError(f"singular sample average: {exc}") from exc
    A_sample = -build_delta_from_rates(lat, avg_rates).toarray()
    wbar = family_mean(spec.family)
    A_pop = -build_delta_from_rates(lat, np.full(lat.n_bonds, wbar)).toarray()
    rng = np.random.default_rng(rng_seed)
    ms, mp = np.empty(n_vectors), np.empty(n_vectors)
    for k in range(n_vectors):
        u = rng.normal(size=n)
        u /= np.linalg.norm(u)
        q_inv = float(u @ inv_of_avg @ u)
        ms[k] = float(u @ A_sample @ u) - q_inv
        mp[k] = float(u @ A_pop @ u) - q_inv
    return SchwarzReport(n_env=n_env, n_vectors=n_vectors,
                         worst_margin_sample=float(ms.min()),
                         worst_margin_population=float(mp.min()),
                         margins_sample=ms, margins_population=mp)


@dataclass(frozen=True)
class ThetaReport:
    n_env: int
    order: int | None
    wbar: float
    theta: np.ndarray
    min_eigenvalue: float
    min_eigenvalue_sigma: float
    rho: float
    kappa: float

    def to_dict(self) -> dict:
        return {
            "n_env": self.n_env,
            "order": self.order,
            "wbar": self.wbar,
            "min_eigenvalue": self.min_eigenvalue,
            "min_eigenvalue_sigma": self.min_eigenvalue_sigma,
            "rho": self.rho,
            "kappa": self.kappa,
        }


def theta_estimate(spec: EnvironmentSpec, n_env: int, order: int | None = None) -> ThetaReport:
    """Sample-average estimate Theta = I - [avg (I-D)^{-1}]^{-1}.

    ``order`` truncates the Neumann series for each replica inverse; None uses
    exact inverses.  rho is the top eigenvalue of Theta, giving the lower
    bound kappa = wbar (1 - rho); positivity of Theta is reported with a
    batch-based sigma for its smallest eigenvalue.
    """
    spec.validate()
    lat = get_lattice(spec.d, spec.L)
    if lat.n_sites > DENSE_CAP:
        raise DenseCapError(f"{lat.n_sites} sites exceed dense cap {DENSE_CAP}")
    wbar = family_mean(spec.family)
    n = lat.n_sites
    ident = np.eye(n)
    groups = min(n_env, STAT_GROUPS)
    group_sum = np.zeros((groups, n, n))
    group_cnt = np.zeros(groups)
    for r in range(n_env):
        env = _replica(spec, r)
        D = d_matrix(env, wbar)
        if order is None:
            inv = np.linalg.inv(ident - D)
        else:
            inv = ident.copy()
            term = ident.copy()
            for _ in range(order):
                term = D @ term
                inv += term
        group_sum[r % groups] += inv
        group_cnt[r % groups] += 1
    avg_inv = group_sum.sum(axis=0) / n_env
    try:
        theta = ident - np.linalg.inv(avg_inv)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailureError(f"sample average not invertible: {exc}") from exc
    theta = 0.5 * (theta + theta.T)
    eigs = np.linalg.eigvalsh(theta)
    mins = []
    for g in range(groups):
        if group_cnt[g] == 0:
            continue
        th_g = ident - np.linalg.inv(group_sum[g] / group_cnt[g])
        mins.append(np.linalg.eigvalsh(0.5 * (th_g + th_g.T))[0])
    sigma = float(np.std(mins, ddof=1) / np.sqrt(len(mins))) if len(mins) > 1 else float("nan")
    rho = float(eigs[-1])
    return ThetaReport(n_env=n_env, order=order, wbar=wbar, theta=theta,
                       min_eigenvalue=float(eigs[0]), min_eigenvalue_sigma=sigma,
                       rho=rho, kappa=wbar * (1.0 - rho))


# ---------------------------------------------------------------------------
# combinatorics: set partitions and the series majorant
# ---------------------------------------------------------------------------

def stirling_pi(n: int, r: int) -> int:
    """Number of partitions of {1..n} into r nonempty blocks (exact integer).

    Defined through the recursion P(n,r) = P(n-1,r-1) + r P(n-1,r); n < r
    gives 0 by convention.
    """
    if n < 1 or r < 1:
        raise ParameterDomainError(f"need n >= 1 and r >= 1, got n={n}, r={r}")
    if n < r:
        return 0
    prev = [0] * (r + 1)
    prev[1] = 1
    for _ in range(2, n + 1):
        cur = [0] * (r + 1)
        for k in range(1, r + 1):
            cur[k] = prev[k - 1] + k * prev[k]
        prev = cur
    return prev[r]


@dataclass(frozen=True)
class SeriesBound:
    delta: float
    constant: float
    delta_prime: float
    kl_bound: float
    rho_bound: float

    def to_dict(self) -> dict:
        return {"delta": self.delta, "constant": self.constant,
                "delta_prime": self.delta_prime, "kl_bound": self.kl_bound,
                "rho_bound": self.rho_bound}


def kl_series_bound(delta: float, constant: float) -> SeriesBound:
    """Geometric majorant of the graph series and the resulting rho bound.

    Both closed forms are the same number C d'/(1-d') with d' = 4(1+C)delta;
    outside d' < 1 the bound is vacuous and a divergence error is raised.
    """
    if delta < 0 or constant <= 0:
        raise ParameterDomainError("need delta >= 0 and constant > 0")
    delta_prime = 4.0 * (1.0 + constant) * delta
    if delta_prime >= 1.0:
        raise DivergenceError(f"delta' = {delta_prime:.4g} >= 1: series bound diverges")
    kl = constant * delta_prime / (1.0 - delta_prime)
    rho = 4.0 * delta * constant * (1.0 + constant) / (1.0 - 4.0 * delta * (1.0 + constant))
    return SeriesBound(delta=delta, constant=constant, delta_prime=delta_prime,
                       kl_bound=kl, rho_bound=rho)


# ---------------------------------------------------------------------------
# graph cancellation on abstract bonds
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MomentModel:
    """Central moments m_k = E alpha^k, k = 1..len(moments).

    m_1 = 0 is the zero-mean hypothesis of the expansion; a nonzero first
    moment is only meant as a negative control for the cancellation tests.
    """

    moments: tuple

    def moment(self, k: int) -> float:
        if k < 1 or k > len(self.moments):
            raise ParameterDomainError(
                f"moment order {k} outside the model (have 1..{len(self.moments)})"
            )
        return float(self.moments[k - 1])

    @property
    def centered(self) -> bool:
        return self.moments[0] == 0.0

    @classmethod
    def uniform(cls, delta: float, k_max: int = 8) -> "MomentModel":
        """Moments of alpha uniform on [-delta, delta]."""
        ms = [0.0 if k % 2 else delta**k / (k + 1.0) for k in range(1, k_max + 1)]
        return cls(moments=tuple(ms))


@dataclass(frozen=True)
class AdmissibleGraphReport:
    vertices: tuple
    edges: tuple                # sorted multiset of undirected pairs
    start: int
    end: int
    a_value: float
    has_bridge: bool
    min_visits: int
    n_steps: int
    n_paths: int

    def to_dict(self) -> dict:
        return {"vertices": list(self.vertices),
                "edges": [list(e) for e in self.edges],
                "start": self.start, "end": self.end, "a_value": self.a_value,
                "has_bridge": self.has_bridge, "min_visits": self.min_visits,
                "n_steps": self.n_steps, "n_paths": self.n_paths}


def _alpha_bar(piece: tuple, moments: MomentModel) -> float:
    out = 1.0
    seen = {}
    for b in piece:
        seen[b] = seen.get(b, 0) + 1
    for mult in seen.values():
        out *= moments.moment(mult)
    return out


def _path_a_value(path: tuple, moments: MomentModel) -> float:
    """Signed sum over contiguous decompositions of the step sequence.

    Decompositions into s successive pieces carry sign (-1)^{s+1}; each piece
    contributes the product of moments of its bond multiplicities.
    """
    n = len(path)
    total = 0.0
    cache = {}
    for cuts_mask in range(2 ** (n - 1)):
        pieces = []
        start = 0
        for pos in range(n - 1):
            if cuts_mask >> pos & 1:
                pieces.append(path[start:pos + 1])
                start = pos + 1
        pieces.append(path[start:])
        prod = 1.0
        for piece in pieces:
            if piece not in cache:
                cache[piece] = _alpha_bar(piece, moments)
            prod *= cache[piece]
            if prod == 0.0:
                break
        total += (-1.0) ** (len(pieces) + 1) * prod
    return total


def _has_bridge(vertices: set, edges: list) -> bool:
    """Cut-edge search on the multigraph; loops and parallel pairs never bridge."""
    simple = {}
    for a, b in edges:
        if a == b:
            continue
        key = (min(a, b), max(a, b))
        simple[key] = simple.get(key, 0) + 1
    candidates = [e for e, mult in simple.items() if mult == 1]
    if not candidates or len(vertices) < 2:
        return False
    adj = {v: set() for v in vertices}
    for a, b in simple:
        adj[a].add(b)
        adj[b].add(a)
    for a, b in candidates:
        # BFS avoiding the candidate edge
        seen = {a}
        stack = [a]
        while stack:
            v = stack.pop()
            for w in adj[v]:
                if (min(v, w), max(v, w)) == (a, b) and {v, w} == {a, b}:
                    continue
                if w not in seen:
                    seen.add(w)
                    stack.append(w)
        if b not in seen:
            return True
    return False


def cancellation_check(n_max: int, n_bonds: int, moments: MomentModel,
                       include_single_visits: bool = True) -> list[AdmissibleGraphReport]:
    """Exhaustively enumerate paths over abstract bonds and group by graph.

    Paths of length 1..n_max over ``n_bonds`` labels are grouped by
    (edge multiset, start, end); each group's coefficient sums the signed
    decomposition values of all its paths.  Graphs whose non-loop skeleton
    has a cut edge must come out at exactly zero; graphs with a singly
    visited bond vanish only through the zero-mean hypothesis, so they react
    to the m_1 control.
    """
    if n_max > 8 or n_bonds > 4:
        raise ParameterDomainError(
            f"enumeration guard: need n_max <= 8 and bonds <= 4, got {n_max}, {n_bonds}"
        )
    groups: dict = {}
    for n in range(1, n_max + 1):
        for path in itertools.product(range(n_bonds), repeat=n):
            counts = {}
            for b in path:
                counts[b] = counts.get(b, 0) + 1
            min_visits = min(counts.values())
            if min_visits < 2 and not include_single_visits:
                continue
            edges = tuple(sorted(
                (min(a, b), max(a, b)) for a, b in zip(path[:-1], path[1:])
            ))
            key = (edges, path[0], path[-1], tuple(sorted(counts)))
            entry = groups.setdefault(
                key, {"a": 0.0, "paths": 0, "min_visits": min_visits, "n": n}
            )
            entry["a"] += _path_a_value(path, moments)
            entry["paths"] += 1
            entry["min_visits"] = min(entry["min_visits"], min_visits)
    reports = []
    for (edges, start, end, verts), entry in groups.items():
        reports.append(AdmissibleGraphReport(
            vertices=verts, edges=edges, start=start, end=end,
            a_value=entry["a"], has_bridge=_has_bridge(set(verts), list(edges)),
            min_visits=entry["min_visits"], n_steps=entry["n"],
            n_paths=entry["paths"],
        ))
    reports.sort(key=lambda r: (r.n_steps, r.edges, r.start, r.end))
    return reports


def save_report_json(path, payload: dict) -> None:
    """Serialize a diagnostics bundle (reports expose ``to_dict``)."""
    def default(obj):
        if hasattr(obj, "to_dict"):
            return obj.to_dict()
        if isinstance(obj, np.ndarray):
            return obj.tolist()
        if isinstance(obj, (np.floating, np.integer)):
            return obj.item()
        raise TypeError(f"cannot serialize {type(obj).__name__}")
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, default=default)
