"""Lattice geometry, 0/1-forms, and sparse operator assembly.

The box with half-size ``L`` holds the interior sites ``{x : sup_i |x_i| < L}``,
``(2L-1)**d`` of them.  Functions on sites (0-forms) are flat float arrays in
row-major coordinate order.  Bonds carry one stored value per unordered pair,
enumerated direction-major and then row-major over the base (tail) site; a
bond is kept whenever at least one endpoint is interior, so the boundary layer
is included.  The canonical orientation points along the increasing
coordinate.

All operators use absorbing (Dirichlet) boundary: a function is implicitly
zero outside the box.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
import scipy.sparse as sparse

from .errors import ShapeError


class Lattice:
    """Site/bond indexing for the centered box of half-size L in d dimensions."""

    def __init__(self, d: int, L: int):
        if d < 1 or L < 1:
            raise ValueError(f"need d >= 1 and L >= 1, got d={d}, L={L}")
        self.d = d
        self.L = L
        self.side = 2 * L - 1
        self.n_sites = self.side**d
        self.bonds_per_dir = 2 * L * self.side ** (d - 1)
        self.n_bonds = d * self.bonds_per_dir
        self._strides = self.side ** np.arange(d - 1, -1, -1)
        self._build_bonds()

    def _build_bonds(self):
        d, L = self.d, self.L
        tails = []
        dirs = []
        for i in range(d):
            axes = [np.arange(-L + 1, L)] * d
            axes[i] = np.arange(-L, L)
            grid = np.meshgrid(*axes, indexing="ij")
            base = np.stack([g.ravel() for g in grid], axis=-1)
            tails.append(base)
            dirs.append(np.full(len(base), i))
        self.bond_tail_coords = np.concatenate(tails, axis=0)
        self.bond_dir = np.concatenate(dirs, axis=0)
        head = self.bond_tail_coords.copy()
        head[np.arange(self.n_bonds), self.bond_dir] += 1
        self.bond_head_coords = head
        self.bond_tail = self.site_index(self.bond_tail_coords)
        self.bond_head = self.site_index(self.bond_head_coords)

    def site_index(self, coords) -> np.ndarray:
        """Map coordinates to flat site ids; -1 for sites outside the box."""
        coords = np.asarray(coords)
        inside = np.all(np.abs(coords) < self.L, axis=-1)
        shifted = coords + (self.L - 1)
        idx = shifted @ self._strides
        return np.where(inside, idx, -1)

    def site_coords(self, idx) -> np.ndarray:
        idx = np.asarray(idx)
        out = np.empty(idx.shape + (self.d,), dtype=np.int64)
        rem = idx
        for k, s in enumerate(self._strides):
            out[..., k], rem = np.divmod(rem, s)
        return out - (self.L - 1)

    @property
    def incidence(self) -> sparse.csr_matrix:
        """Oriented bond-site incidence B: (B u)_b = u_head - u_tail.

        Rows are bonds, columns interior sites; endpoints outside the box
        contribute nothing (Dirichlet zero).
        """
        return _incidence(self.d, self.L)

    def interior_bond_mask(self) -> np.ndarray:
        return (self.bond_tail >= 0) & (self.bond_head >= 0)


@lru_cache(maxsize=64)
def get_lattice(d: int, L: int) -> Lattice:
    """Shared Lattice instances; geometry is immutable so caching is safe."""
    return Lattice(d, L)


@lru_cache(maxsize=32)
def _incidence(d: int, L: int) -> sparse.csr_matrix:
    lat = get_lattice(d, L)
    rows = []
    cols = []
    vals = []
    for sites, sign in ((lat.bond_head, 1.0), (lat.bond_tail, -1.0)):
        keep = sites >= 0
        rows.append(np.nonzero(keep)[0])
        cols.append(sites[keep])
        vals.append(np.full(keep.sum(), sign))
    B = sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(lat.n_bonds, lat.n_sites),
    )
    return B.tocsr()


def build_delta(env) -> sparse.csr_matrix:
    """Assemble the weighted Dirichlet Laplacian of an environment.

    Row x reads sum_{|x-y|=1} w_xy (u_y - u_x) with u = 0 outside the box, so
    bonds into the boundary layer feed only the diagonal.  Returned as
    symmetric CSR; -Delta is positive semidefinite (definite, in fact, since
    every site connects to the boundary through positive rates).
    """
    return build_delta_from_rates(env.lattice, env.rates)


def build_delta_from_rates(lat: Lattice, rates) -> sparse.csr_matrix:
    rates = np.asarray(rates, dtype=float)
    if rates.shape != (lat.n_bonds,):
        raise ShapeError(f"expected {lat.n_bonds} bond rates, got {rates.shape}")
    B = lat.incidence
    W = sparse.diags(rates)
    delta = -(B.T @ (W @ B))
    return delta.tocsr()


def gradient(lat: Lattice, u) -> np.ndarray:
    """Finite difference of a 0-form along each canonical bond."""
    u = _check_zero_form(lat, u)
    return lat.incidence @ u


def divergence(lat: Lattice, omega) -> np.ndarray:
    """Adjoint of :func:`gradient`: (omega, grad u) = (div omega, u) exactly.

    With this sign convention div(grad u) = -Delta_{L,1} u, the positive
    operator; the weighted identity reads div(M_w grad u) = -Delta_{L,w} u.
    """
    omega = _check_one_form(lat, omega)
    return lat.incidence.T @ omega


def multiply_alpha(alpha, omega) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=float)
    omega = np.asarray(omega, dtype=float)
    if alpha.shape != omega.shape:
        raise ShapeError(f"bond field shapes differ: {alpha.shape} vs {omega.shape}")
    return alpha * omega


def quadratic_form(u, env) -> float:
    """Dirichlet energy (1/2) sum_{|x-y|=1} w_xy (u_y - u_x)^2 = (u, -Delta u).

    Computed bond-wise (each unordered bond once), which is exactly half the
    ordered-pair sum.
    """
    lat = env.lattice
    du = gradient(lat, u)
    return float(np.dot(env.rates, du * du))


def save_coo(op, path) -> None:
    """Write a sparse operator as text lines 'row col value', 0-based."""
    coo = sparse.coo_matrix(op)
    with open(path, "w") as fh:
        for r, c, v in zip(coo.row, coo.col, coo.data):
            fh.write(f"{r} {c} {float(v)!r}\n")


def _check_zero_form(lat: Lattice, u) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if u.shape != (lat.n_sites,):
        raise ShapeError(f"expected 0-form of length {lat.n_sites}, got {u.shape}")
    return u


def _check_one_form(lat: Lattice, omega) -> np.ndarray:
    omega = np.asarray(omega, dtype=float)
    if omega.shape != (lat.n_bonds,):
        raise ShapeError(f"expected 1-form of length {lat.n_bonds}, got {omega.shape}")
    return omega
