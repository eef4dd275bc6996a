"""Continuous-time random walks in a bond-rate environment.

Simulation is event-driven and exact: the walker at site x holds for an
exponential time with rate equal to the sum of incident bond rates, then
jumps across a bond with probability proportional to its rate; stepping
outside the box absorbs the walker.

Randomness is counter-based: every variate is a hash of
(seed, walker, step, substream), so each walker owns a splittable stream and
ensemble results are bit-identical regardless of scheduling, thread count, or
how walkers are grouped.  The hot loop is a parallel numba kernel; the
single-trajectory path below consumes the same streams, so a walker's event
path can be cross-checked against the ensemble.

Times are the microscopic clock of the walk.  The diffusive rescaling
X_L(t) = X(L^2 t) / L happens only at the comparison interface
(:func:`marginal_vs_heat_kernel`).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

with warnings.catch_warnings():
    warnings.simplefilter("ignore")   # TBB version probe is noisy on some hosts
    from numba import njit, prange

from .env import Environment, EnvironmentSpec, sample_environment
from .errors import (
    EmptySampleError,
    FitQualityError,
    ParameterDomainError,
    ShapeError,
)
from .green import default_cutoff, heat_kernel_box_masses

STAT_GROUPS = 20
_SENTINEL = np.int32(np.iinfo(np.int32).min)


@dataclass(frozen=True)
class Trajectory:
    """One exact event path: site held from times[k] until times[k+1]."""

    times: np.ndarray
    sites: np.ndarray
    absorbed: bool
    t_final: float


@dataclass(frozen=True)
class EnsembleStats:
    d: int
    L: int
    t_grid: np.ndarray
    msd: np.ndarray
    msd_se: np.ndarray
    second_moments: np.ndarray          # (T, d, d) mean of X_i X_j over survivors
    survival: np.ndarray
    n_alive: np.ndarray
    ensemble: int
    seed: int
    occupancy: dict                     # t-grid index -> per-site survivor counts

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("t,msd,msd_se,survival,n_alive\n")
            for k in range(len(self.t_grid)):
                fh.write(f"{float(self.t_grid[k])!r},{float(self.msd[k])!r},"
                         f"{float(self.msd_se[k])!r},{float(self.survival[k])!r},"
                         f"{int(self.n_alive[k])}\n")

    def occupancy_to_csv(self, path, t_index: int) -> None:
        counts = self.occupancy[t_index]
        with open(path, "w") as fh:
            fh.write("cell,count\n")
            for cell, cnt in enumerate(counts):
                if cnt:
                    fh.write(f"{cell},{cnt}\n")


class WalkTables:
    """Per-site jump rates, cumulative jump probabilities, and neighbor ids."""

    def __init__(self, env: Environment):
        lat = env.lattice
        d, n = lat.d, lat.n_sites
        self.rate = np.zeros((n, 2 * d))
        self.neighbor = np.full((n, 2 * d), -1, dtype=np.int64)
        tail, head, w = lat.bond_tail, lat.bond_head, env.rates
        slot_fwd = 2 * lat.bond_dir
        slot_bwd = slot_fwd + 1
        mt = tail >= 0
        self.rate[tail[mt], slot_fwd[mt]] = w[mt]
        self.neighbor[tail[mt], slot_fwd[mt]] = head[mt]
        mh = head >= 0
        self.rate[head[mh], slot_bwd[mh]] = w[mh]
        self.neighbor[head[mh], slot_bwd[mh]] = tail[mh]
        self.total = self.rate.sum(axis=1)
        cum = np.cumsum(self.rate, axis=1) / self.total[:, None]
        cum[:, -1] = 1.0
        self.cum = cum
        steps = np.zeros((2 * d, d), dtype=np.int64)
        for i in range(d):
            steps[2 * i, i] = 1
            steps[2 * i + 1, i] = -1
        self.steps = steps


@njit(cache=True, inline="always")
def _mix64(z):
    z = z + np.uint64(0x9E3779B97F4A7C15)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@njit(cache=True, inline="always")
def _u01(seed, walker, step, sub):
    h = _mix64(np.uint64(seed) ^ _mix64(np.uint64(walker)))
    h = _mix64(h ^ np.uint64(step))
    h = _mix64(h ^ np.uint64(sub))
    return (h >> np.uint64(11)) * (2.0**-53)


@njit(cache=True, parallel=True)
def _walk_kernel(seed, total, cum, neighbor, steps, x0_idx, t_grid, out_disp):
    M = out_disp.shape[0]
    T = t_grid.shape[0]
    d = steps.shape[1]
    n_slots = steps.shape[0]
    for w in prange(M):
        pos = x0_idx
        c = np.zeros(d, dtype=np.int64)
        t = 0.0
        ptr = 0
        step = 0
        while ptr < T:
            u1 = _u01(seed, w, step, 0)
            t_new = t - math.log(1.0 - u1) / total[pos]
            while ptr < T and t_grid[ptr] <= t_new:
                for i in range(d):
                    out_disp[w, ptr, i] = np.int32(c[i])
                ptr += 1
            if ptr >= T:
                break
            u2 = _u01(seed, w, step, 1)
            slot = 0
            while slot < n_slots - 1 and cum[pos, slot] < u2:
                slot += 1
            newpos = neighbor[pos, slot]
            for i in range(d):
                c[i] += steps[slot, i]
            t = t_new
            step += 1
            if newpos < 0:
                break
            pos = newpos


def simulate_ctrw(env: Environment, x0, t_max: float, stream: int,
                  walker: int = 0) -> Trajectory:
    """One exact trajectory from x0 until absorption or t_max.

    Consumes the counter-based stream (stream, walker), so it reproduces the
    path of that walker inside :func:`run_ensemble` with seed = stream.
    """
    lat = env.lattice
    x0 = np.atleast_1d(np.asarray(x0, dtype=np.int64))
    site = int(lat.site_index(x0))
    if site < 0:
        raise ParameterDomainError(f"start site {tuple(x0)} is outside the box")
    tables = WalkTables(env)
    times = [0.0]
    sites = [x0.copy()]
    t, coords = 0.0, x0.copy()
    absorbed = False
    step = 0
    while True:
        u1 = float(_u01(np.uint64(stream), np.uint64(walker), np.uint64(step), np.uint64(0)))
        t_next = t - math.log(1.0 - u1) / tables.total[site]
        if t_next >= t_max:
            t = t_max
            break
        t = t_next
        u2 = float(_u01(np.uint64(stream), np.uint64(walker), np.uint64(step), np.uint64(1)))
        # first slot with cum >= u2, matching the ensemble kernel exactly
        slot = int(np.searchsorted(tables.cum[site], u2, side="left"))
        slot = min(slot, tables.cum.shape[1] - 1)
        coords = coords + tables.steps[slot]
        times.append(t)
        sites.append(coords.copy())
        step += 1
        site = tables.neighbor[site, slot]
        if site < 0:
            absorbed = True
            break
    return Trajectory(times=np.array(times), sites=np.array(sites),
                      absorbed=absorbed, t_final=t)


def run_ensemble(env: Environment, t_grid, ensemble: int, seed: int, x0=None,
                 occupancy_at=()) -> EnsembleStats:
    """Simulate an ensemble and aggregate displacement statistics.

    Surviving walkers enter the mean-square displacement; absorbed ones count
    only against survival (absorbing-kernel censoring).  Standard errors come
    from 20 statistical groups of walkers; aggregation is a fixed-order sum
    over per-walker records, so results do not depend on scheduling.
    """
    lat = env.lattice
    t_grid = np.asarray(t_grid, dtype=float)
    if len(t_grid) == 0 or np.any(np.diff(t_grid) <= 0):
        raise ParameterDomainError("t_grid must be nonempty and strictly increasing")
    if ensemble < 1:
        raise ParameterDomainError("ensemble size must be >= 1")
    if x0 is None:
        x0 = np.zeros(lat.d, dtype=np.int64)
    x0 = np.atleast_1d(np.asarray(x0, dtype=np.int64))
    x0_idx = int(lat.site_index(x0))
    if x0_idx < 0:
        raise ParameterDomainError(f"start site {tuple(x0)} is outside the box")
    T = len(t_grid)
    tables = WalkTables(env)
    disp = np.full((ensemble, T, lat.d), _SENTINEL, dtype=np.int32)
    _walk_kernel(np.uint64(int(seed)), tables.total, tables.cum, tables.neighbor,
                 tables.steps, x0_idx, t_grid, disp)
    alive = disp[:, :, 0] != _SENTINEL
    n_alive = alive.sum(axis=0)
    if np.any(n_alive == 0):
        k = int(np.argmax(n_alive == 0))
        raise EmptySampleError(
            f"all {ensemble} walkers were absorbed before t = {t_grid[k]}"
        )
    dispf = np.where(alive[:, :, None], disp, 0).astype(float)
    sq = np.einsum("wti,wti->wt", dispf, dispf)
    msd = sq.sum(axis=0) / n_alive
    second = np.einsum("wti,wtj->tij", dispf, dispf) / n_alive[:, None, None]
    groups = min(ensemble, STAT_GROUPS)
    gid = np.arange(ensemble) % groups
    if groups > 1:
        g_sum = np.zeros((groups, T))
        g_cnt = np.zeros((groups, T))
        np.add.at(g_sum, gid, sq)
        np.add.at(g_cnt, gid, alive.astype(float))
        means = g_sum / np.maximum(g_cnt, 1.0)
        msd_se = means.std(axis=0, ddof=1) / np.sqrt(groups)
    else:
        msd_se = np.full(T, np.nan)
    occupancy = {}
    for k in sorted(set(int(i) for i in occupancy_at)):
        live = alive[:, k]
        coords = x0[None, :] + disp[live, k, :].astype(np.int64)
        sids = lat.site_index(coords)
        occupancy[k] = np.bincount(sids[sids >= 0], minlength=lat.n_sites)
    return EnsembleStats(d=lat.d, L=lat.L, t_grid=t_grid, msd=msd, msd_se=msd_se,
                         second_moments=second, survival=n_alive / ensemble,
                         n_alive=n_alive, ensemble=ensemble, seed=int(seed),
                         occupancy=occupancy)


def msd_curve(spec: EnvironmentSpec, t_grid, ensemble: int, x0=None,
              occupancy_at=()) -> EnsembleStats:
    """Sample the environment of ``spec`` and run the ensemble on it.

    The same seed drives environment sampling (bond-keyed hash) and walker
    streams (walker-keyed hash with a different chaining), so the whole curve
    is a pure function of the spec.
    """
    env = sample_environment(spec)
    return run_ensemble(env, t_grid, ensemble, seed=spec.seed, x0=x0,
                        occupancy_at=occupancy_at)


@dataclass(frozen=True)
class DiffusionEstimate:
    kappa: float
    kappa_matrix: np.ndarray | None
    method: str
    stderr: float
    exponent: float
    r2: float
    window: tuple
    n_points: int


def fit_diffusion(stats: EnsembleStats, window=None) -> DiffusionEstimate:
    """Least-squares slope of the displacement curve; kappa = slope / 2.

    Also reports the log-log exponent over the same window, which is the
    sub-diffusion diagnostic.  ``window`` is a (t_lo, t_hi) pair; default is
    the whole grid.
    """
    t = stats.t_grid
    if window is None:
        window = (float(t[0]), float(t[-1]))
    mask = (t >= window[0]) & (t <= window[1])
    n_pts = int(mask.sum())
    if n_pts < 5:
        raise FitQualityError(f"fit window holds {n_pts} points, need >= 5",
                              diagnostics={"window": window})
    tw, mw = t[mask], stats.msd[mask]
    A = np.stack([tw, np.ones_like(tw)], axis=1)
    coef, _, rank, _ = np.linalg.lstsq(A, mw, rcond=None)
    if rank < 2 or not np.all(np.isfinite(coef)):
        raise FitQualityError("degenerate design matrix in diffusion fit",
                              diagnostics={"rank": int(rank)})
    slope, _ = coef
    fitted = A @ coef
    ss_tot = float(np.sum((mw - mw.mean()) ** 2))
    ss_res = float(np.sum((mw - fitted) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    dof = max(n_pts - 2, 1)
    var_slope = (ss_res / dof) / float(np.sum((tw - tw.mean()) ** 2))
    pos = (tw > 0) & (mw > 0)
    if pos.sum() >= 2:
        exponent = float(np.polyfit(np.log(tw[pos]), np.log(mw[pos]), 1)[0])
    else:
        exponent = float("nan")
    kappa_matrix = None
    if stats.d > 1:
        kappa_matrix = np.empty((stats.d, stats.d))
        for i in range(stats.d):
            for j in range(stats.d):
                kappa_matrix[i, j] = np.polyfit(
                    tw, stats.second_moments[mask, i, j], 1)[0] / 2.0
    return DiffusionEstimate(kappa=float(slope) / 2.0, kappa_matrix=kappa_matrix,
                             method="msd_fit", stderr=float(np.sqrt(var_slope)) / 2.0,
                             exponent=exponent, r2=r2, window=window, n_points=n_pts)


@dataclass(frozen=True)
class MarginalComparison:
    tv: float
    survival_empirical: float
    survival_theory: float

    @property
    def absorbed_gap(self) -> float:
        return abs(self.survival_empirical - self.survival_theory)


def marginal_vs_heat_kernel(stats: EnsembleStats, t: float, kappa,
                            n_max: int | None = None,
                            bins: int | None = None) -> MarginalComparison:
    """Total-variation distance between the rescaled walk law and the series.

    ``t`` is macroscopic time; the ensemble must hold an occupancy snapshot at
    the matching microscopic grid time L^2 t.  Both laws are conditioned on
    survival; the absorbed-mass mismatch is reported separately.

    ``bins`` aggregates the per-site cells into that many macroscopic bins
    per axis (identically on both laws), which keeps the sampling noise of
    the distance independent of L in convergence sweeps.
    """
    tau = float(stats.L) ** 2 * t
    matches = np.nonzero(np.isclose(stats.t_grid, tau, rtol=1e-9))[0]
    if len(matches) == 0:
        raise ShapeError(f"no grid time matches L^2 t = {tau}")
    k_idx = int(matches[0])
    if k_idx not in stats.occupancy:
        raise ShapeError(f"no occupancy snapshot stored at grid index {k_idx}")
    counts = stats.occupancy[k_idx].astype(float)
    if counts.sum() == 0:
        raise EmptySampleError(f"no surviving walkers at t = {tau}")
    if n_max is None:
        n_max = default_cutoff(t)
    masses = heat_kernel_box_masses(kappa, t, stats.L, n_max, d=stats.d)
    q = np.clip(masses, 0.0, None)
    if bins is not None:
        counts = _rebin(counts, stats.L, stats.d, bins)
        q = _rebin(q, stats.L, stats.d, bins)
    p = counts / counts.sum()
    q = q / q.sum()
    tv = 0.5 * float(np.abs(p - q).sum())
    return MarginalComparison(tv=tv,
                              survival_empirical=float(stats.occupancy[k_idx].sum()) / stats.ensemble,
                              survival_theory=float(np.clip(masses.sum(), 0.0, 1.0)))


def _rebin(cell_values: np.ndarray, L: int, d: int, bins: int) -> np.ndarray:
    """Aggregate per-site cells into macroscopic bins by cell midpoint."""
    side = 2 * L - 1
    mids = (np.arange(-L + 1, L) + 0.5) / L
    axis_bin = np.clip(((mids + 1.0) * bins / 2.0).astype(int), 0, bins - 1)
    grid = np.meshgrid(*([axis_bin] * d), indexing="ij")
    flat_bin = np.zeros(side**d, dtype=np.int64)
    for g in grid:
        flat_bin = flat_bin * bins + g.ravel()
    out = np.zeros(bins**d)
    np.add.at(out, flat_bin, cell_values.reshape(-1))
    return out
