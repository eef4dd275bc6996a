"""Eigenpairs of scaled lattice operators and their continuum limits.

All spectral code works with the positive operator (-L^2 Delta)^{-1}, whose
eigenvalues decrease to 0; the continuum partner is the inverse Dirichlet
Laplacian on (-1,1)^d with eigenvalues 1 / ((pi/2)^2 n.kappa n).  Projectors
onto eigenspaces are compared after embedding step functions and continuum
eigenfunctions on a common midpoint evaluation grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse.linalg as spla

from .env import Environment
from .errors import DegeneracyError, DimensionError, NumericalFailureError, ShapeError
from .lattice import build_delta, get_lattice

DEGENERACY_TOL = 1e-9


@dataclass(frozen=True)
class EigenPair:
    value: float
    vector: np.ndarray | None = None
    index: tuple | None = None
    residual: float | None = None


def homogeneous_mode(L: int, d: int, index) -> np.ndarray:
    """Explicit eigenvector of the unit-rate box Laplacian, unit l2 norm.

    Per axis the profile is cos((pi/2L) n x) for odd n and sin(...) for even
    n; the squared sums telescope to L per axis, hence the L^{d/2} norm.
    """
    lat = get_lattice(d, L)
    coords = lat.site_coords(np.arange(lat.n_sites))
    vec = np.ones(lat.n_sites)
    for i, n_i in enumerate(index):
        arg = 0.5 * np.pi * n_i * coords[:, i] / L
        vec = vec * (np.cos(arg) if n_i % 2 == 1 else np.sin(arg))
    return vec / float(L) ** (d / 2.0)


def homogeneous_eigenvalue(L: int, index) -> float:
    """Closed-form eigenvalue of (-L^2 Delta_{L,1})^{-1} at a multi-index."""
    s = sum(np.sin(np.pi * n_i / (4 * L)) ** 2 for n_i in index)
    return 1.0 / (4.0 * L**2 * s)


def homogeneous_eigenpairs(L: int, d: int, n_max: int | None = None) -> list[EigenPair]:
    """All (or the first n_max per axis) closed-form pairs, sorted decreasing."""
    top = 2 * L - 1 if n_max is None else min(n_max, 2 * L - 1)
    indices = _multi_indices(top, d)
    pairs = [
        EigenPair(value=homogeneous_eigenvalue(L, idx),
                  vector=homogeneous_mode(L, d, idx), index=idx)
        for idx in indices
    ]
    pairs.sort(key=lambda p: -p.value)
    return pairs


def _multi_indices(top: int, d: int) -> list[tuple]:
    grids = np.meshgrid(*([np.arange(1, top + 1)] * d), indexing="ij")
    flat = np.stack([g.ravel() for g in grids], axis=-1)
    return [tuple(int(v) for v in row) for row in flat]


@dataclass(frozen=True)
class ContinuumMode:
    """Eigenfunction of the continuum inverse with its eigenvalue."""

    value: float
    index: tuple

    def __call__(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        out = np.ones(len(pts))
        for i, n_i in enumerate(self.index):
            arg = 0.5 * np.pi * n_i * pts[:, i]
            out = out * (np.cos(arg) if n_i % 2 == 1 else np.sin(arg))
        return out


def continuum_eigenpairs(kappa, n_max: int, d: int) -> list[ContinuumMode]:
    """Modes with max-norm index <= n_max, orthonormal in the box L2 product."""
    k = np.asarray(kappa, dtype=float)
    if k.ndim == 0:
        k = np.eye(d) * float(k)
    modes = []
    for idx in _multi_indices(n_max, d):
        n = np.asarray(idx, dtype=float)
        lam = 1.0 / ((np.pi / 2.0) ** 2 * float(n @ k @ n))
        modes.append(ContinuumMode(value=lam, index=idx))
    modes.sort(key=lambda m: -m.value)
    return modes


def scaled_inverse_operator(env: Environment):
    """The sparse SPD operator -L^2 Delta whose inverse is the object of study."""
    return (-float(env.L) ** 2) * build_delta(env)


def smallest_eigenpairs(op, k: int, residual_tol: float = 1e-8) -> list[EigenPair]:
    """Largest eigenvalues of op^{-1} from the k smallest of the SPD op.

    Dense below 600 unknowns, shift-invert Lanczos above; raises on residuals
    worse than residual_tol.
    """
    n = op.shape[0]
    if k > n:
        raise ShapeError(f"asked for {k} pairs from an operator of size {n}")
    if n <= 600 or k >= n - 1:
        dense = op.toarray() if hasattr(op, "toarray") else np.asarray(op)
        lam, vecs = np.linalg.eigh(dense)
        lam, vecs = lam[:k], vecs[:, :k]
    else:
        v0 = np.ones(n)
        try:
            lam, vecs = spla.eigsh(op.tocsc(), k=k, sigma=0.0, which="LM", v0=v0)
        except Exception as exc:  # arpack failures carry little structure
            raise NumericalFailureError(f"eigensolver failed: {exc}") from exc
        order = np.argsort(lam)
        lam, vecs = lam[order], vecs[:, order]
    pairs = []
    for j in range(k):
        v = vecs[:, j]
        res = float(np.linalg.norm(op @ v - lam[j] * v) / np.linalg.norm(v))
        if res > residual_tol:
            raise NumericalFailureError(
                f"eigen residual {res:.3e} above {residual_tol:.1e}", residual=res
            )
        pairs.append(EigenPair(value=1.0 / lam[j], vector=v, residual=res))
    pairs.sort(key=lambda p: -p.value)
    return pairs


# ---------------------------------------------------------------------------
# projectors on a shared evaluation grid
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Projector:
    """Orthogonal projector stored as an orthonormal basis of its range.

    Basis columns live on a midpoint evaluation grid with quadrature weights
    absorbed, so plain dot products realize the box L2 inner product.
    """

    basis: np.ndarray
    eval_cells: int
    d: int

    def __post_init__(self):
        gram = self.basis.T @ self.basis
        if not np.allclose(gram, np.eye(gram.shape[0]), atol=1e-12):
            raise ShapeError("projector basis is not orthonormal to 1e-12")

    @property
    def rank(self) -> int:
        return self.basis.shape[1]

    def matrix(self) -> np.ndarray:
        return self.basis @ self.basis.T


def _midpoints(eval_cells: int) -> np.ndarray:
    h = 2.0 / eval_cells
    return -1.0 + h * (np.arange(eval_cells) + 0.5)


def _eval_points(eval_cells: int, d: int) -> np.ndarray:
    mids = _midpoints(eval_cells)
    mesh = np.meshgrid(*([mids] * d), indexing="ij")
    return np.stack([g.ravel() for g in mesh], axis=-1)


def default_eval_cells(d: int) -> int:
    return 2048 if d == 1 else 48


def discrete_projector(env: Environment, vectors, eval_cells: int | None = None) -> Projector:
    """Embed lattice eigenvectors as step functions and orthonormalize."""
    lat = env.lattice
    if eval_cells is None:
        eval_cells = default_eval_cells(env.d)
    pts = _eval_points(eval_cells, env.d)
    sids = lat.site_index(np.floor(env.L * pts).astype(np.int64))
    V = np.asarray(vectors, dtype=float)
    if V.ndim == 1:
        V = V[:, None]
    h_half = (2.0 / eval_cells) ** (env.d / 2.0)
    cols = [np.where(sids >= 0, V[np.clip(sids, 0, None), j], 0.0) * h_half
            for j in range(V.shape[1])]
    Q, _ = np.linalg.qr(np.stack(cols, axis=1))
    return Projector(basis=Q, eval_cells=eval_cells, d=env.d)


def continuum_projector(modes, d: int, eval_cells: int | None = None) -> Projector:
    """Sample continuum eigenfunctions at midpoints and orthonormalize."""
    if eval_cells is None:
        eval_cells = default_eval_cells(d)
    pts = _eval_points(eval_cells, d)
    h_half = (2.0 / eval_cells) ** (d / 2.0)
    cols = [m(pts) * h_half for m in modes]
    Q, _ = np.linalg.qr(np.stack(cols, axis=1))
    return Projector(basis=Q, eval_cells=eval_cells, d=d)


def projection_distance(a: Projector, b: Projector) -> float:
    """Spectral-norm distance ||P_a - P_b|| from principal angles."""
    if a.basis.shape[0] != b.basis.shape[0]:
        raise ShapeError("projectors live on different evaluation grids")
    if a.rank != b.rank:
        return 1.0
    sigma = np.linalg.svd(a.basis.T @ b.basis, compute_uv=False)
    sigma = np.clip(sigma, 0.0, 1.0)
    return float(np.sqrt(1.0 - np.min(sigma) ** 2))


# ---------------------------------------------------------------------------
# invariance residual of Corollary-style eigenspace pairing
# ---------------------------------------------------------------------------

def invariance_residual(env: Environment, index, lam: float, multiplicity: int = 1,
                        k: int | None = None) -> float:
    """Residual ||E^L (Xi^{-1} - lam I) E^L|| for the eigenspace paired to index.

    The paired subspace is spanned by eigenvectors of the scaled inverse, so
    the compressed operator is diagonal on it and the norm collapses to the
    worst eigenvalue gap within the paired cluster.
    """
    index = tuple(int(v) for v in np.atleast_1d(index))
    if len(index) != env.d:
        raise DimensionError(f"index {index} has wrong length for d={env.d}")
    if k is None:
        k = min(env.lattice.n_sites, max(12, (max(index) + 3) ** env.d))
    op = scaled_inverse_operator(env)
    pairs = smallest_eigenpairs(op, k)
    lams = np.array([p.value for p in pairs])
    j = int(np.argmin(np.abs(lams - lam)))
    cluster = np.abs(lams - lams[j]) <= DEGENERACY_TOL
    outside = ~cluster
    if outside.any():
        gap_in = float(np.abs(lams[j] - lam))
        gap_out = float(np.min(np.abs(lams[outside] - lam)))
        if abs(gap_out - gap_in) <= DEGENERACY_TOL:
            raise DegeneracyError(
                f"target {lam:.6g} is equidistant from distinct eigenvalue clusters"
            )
    if int(cluster.sum()) != multiplicity:
        raise DegeneracyError(
            f"paired cluster has size {int(cluster.sum())}, expected multiplicity "
            f"{multiplicity}; eigenvalues within {DEGENERACY_TOL:g} are one cluster"
        )
    return float(np.max(np.abs(lams[cluster] - lam)))


def spectral_kappa(env: Environment) -> float:
    """Diffusion estimate from the ground mode: kappa = lam_1(-L^2 Delta) * 4/pi^2.

    d=1 only; inverts the continuum relation lam_1 = 4 / (pi^2 kappa).
    """
    if env.d != 1:
        raise DimensionError("spectral kappa estimator is one-dimensional")
    op = scaled_inverse_operator(env)
    ground = smallest_eigenpairs(op, 1)[0]
    return 4.0 / (np.pi**2 * ground.value)


def save_spectrum_csv(path, rows) -> None:
    """Rows: (index tuple, lam_discrete, lam_continuum, paired flag, residual)."""
    with open(path, "w") as fh:
        fh.write("index,lambda_discrete,lambda_continuum,paired,residual\n")
        for idx, ld, lc, flag, res in rows:
            tag = " ".join(str(i) for i in idx)
            fh.write(f"{tag},{float(ld)!r},{float(lc)!r},{int(flag)},{float(res)!r}\n")
