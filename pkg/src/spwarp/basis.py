"""Spatial proximity matrices and their Moran eigenvector bases.

A proximity matrix is built either from planar coordinates (exponential
distance-decay kernel with range set by the longest minimum-spanning-tree
edge) or from a user-supplied binary contiguity matrix.  Double-centering
the proximity matrix and keeping the dominant positive eigenpairs yields
a low-rank set of smooth, positively autocorrelated map patterns that the
estimator uses as random-effect basis functions.  Kernel-based bases can
be evaluated at new coordinates through a Nystrom extension.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse.csgraph import minimum_spanning_tree
from scipy.spatial.distance import cdist, squareform, pdist

from .errors import DataError, NumericError

KIND_KERNEL = "exponential_kernel"
KIND_CONTIGUITY = "binary_contiguity"
KIND_USER = "user_supplied"

DEFAULT_THRESHOLD = 0.25


def as_coords(sites) -> np.ndarray:
    """Validate and return planar coordinates as an (N, 2) float array."""
    coords = np.asarray(sites, dtype=float)
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise DataError(f"coordinates must be (N, 2), got shape {coords.shape}")
    if coords.shape[0] < 2:
        raise DataError("at least 2 sites are required")
    if not np.all(np.isfinite(coords)):
        bad = int(np.argwhere(~np.isfinite(coords).all(axis=1))[0, 0])
        raise DataError(f"non-finite coordinate at site index {bad}")
    return coords


@dataclass(frozen=True)
class ProximityMatrix:
    """Symmetric non-negative proximity among N sites with zero diagonal."""

    values: np.ndarray
    kind: str
    range_: float | None = None
    coords: np.ndarray | None = None
    site_ids: tuple | None = None

    def __post_init__(self):
        v = self.values
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise DataError(f"proximity matrix must be square, got {v.shape}")
        scale = max(np.abs(v).max(), 1.0)
        asym = np.abs(v - v.T)
        if asym.max() > 1e-12 * scale:
            i, j = np.unravel_index(np.argmax(asym), asym.shape)
            raise DataError(f"proximity matrix not symmetric at ({i}, {j})")
        if np.abs(np.diag(v)).max() > 0:
            i = int(np.argmax(np.abs(np.diag(v))))
            raise DataError(f"proximity matrix has nonzero diagonal at index {i}")
        if v.min() < 0:
            i, j = np.unravel_index(np.argmin(v), v.shape)
            raise DataError(f"negative proximity entry at ({i}, {j})")

    @property
    def n_sites(self) -> int:
        return self.values.shape[0]


def mst_longest_edge(coords: np.ndarray) -> float:
    """Length of the longest edge of the Euclidean minimum spanning tree."""
    dist = squareform(pdist(coords))
    tree = minimum_spanning_tree(dist)
    # A zero-length MST edge is dropped by the sparse representation, which
    # is harmless here: only the maximum edge length is needed.
    return float(tree.max())


def build_kernel_proximity(coords, site_ids=None) -> ProximityMatrix:
    """Exponential distance-decay proximity exp(-d/r) with zero diagonal.

    The range r is the longest edge of the Euclidean minimum spanning tree
    over the sites, so that every site keeps a non-negligible link to its
    nearest neighbour.  Duplicate coordinates are allowed (entry exp(0)=1);
    an all-identical coordinate set has no usable geometry and is rejected.
    """
    coords = as_coords(coords)
    r = mst_longest_edge(coords)
    if r <= 0.0:
        raise DataError("degenerate geometry: all sites share one location")
    dist = squareform(pdist(coords))
    values = np.exp(-dist / r)
    np.fill_diagonal(values, 0.0)
    return ProximityMatrix(
        values=values,
        kind=KIND_KERNEL,
        range_=r,
        coords=coords,
        site_ids=tuple(site_ids) if site_ids is not None else None,
    )


def build_contiguity_proximity(adjacency, site_ids=None) -> ProximityMatrix:
    """Validate a binary contiguity matrix and wrap it as a proximity matrix."""
    adj = np.asarray(adjacency, dtype=float)
    if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
        raise DataError(f"adjacency must be square, got {adj.shape}")
    bad = ~np.isin(adj, (0.0, 1.0))
    if bad.any():
        i, j = map(int, np.argwhere(bad)[0])
        raise DataError(f"adjacency entries must be 0/1, offending entry at ({i}, {j})")
    diag = np.diag(adj)
    if diag.max() > 0:
        i = int(np.argmax(diag))
        raise DataError(f"adjacency diagonal must be zero, offending index {i}")
    asym = adj != adj.T
    if asym.any():
        i, j = map(int, np.argwhere(asym)[0])
        raise DataError(f"adjacency not symmetric at ({i}, {j})")
    return ProximityMatrix(
        values=adj,
        kind=KIND_CONTIGUITY,
        range_=None,
        coords=None,
        site_ids=tuple(site_ids) if site_ids is not None else None,
    )


@dataclass(frozen=True)
class EigenBasis:
    """Moran eigenvectors of a doubly-centered proximity matrix.

    ``vectors`` holds the retained eigenvectors (columns, orthonormal,
    each summing to zero), ``eigenvalues`` the matching positive
    eigenvalues in non-increasing order.  Kernel-based bases carry the
    training coordinates, kernel range and the column means of the
    uncentered kernel, which the Nystrom extension needs.
    """

    vectors: np.ndarray
    eigenvalues: np.ndarray
    kind: str
    range_: float | None = None
    coords: np.ndarray | None = None
    col_means: np.ndarray | None = None
    site_ids: tuple | None = None
    threshold: float = DEFAULT_THRESHOLD

    @property
    def n_sites(self) -> int:
        return self.vectors.shape[0]

    @property
    def n_components(self) -> int:
        return self.vectors.shape[1]


@dataclass(frozen=True)
class ExtendedBasis:
    """Eigenvector values evaluated at prediction sites (Nystrom)."""

    vectors0: np.ndarray
    eigenvalues: np.ndarray

    @property
    def n_components(self) -> int:
        return self.vectors0.shape[1]


def _fix_signs(vectors: np.ndarray) -> np.ndarray:
    """Force the largest-magnitude component of each column positive."""
    if vectors.shape[1] == 0:
        return vectors
    idx = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[idx, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


def extract_basis(prox: ProximityMatrix, threshold: float = DEFAULT_THRESHOLD,
                  count: int | None = None) -> EigenBasis:
    """Extract the Moran eigenvector basis of a proximity matrix.

    Eigenpairs of M C M (M the centering projector) with eigenvalue
    lambda_l >= threshold * lambda_1 and lambda_l > 0 are retained in
    descending order.  ``count`` overrides the threshold rule and forces
    the leading ``count`` positive eigenpairs (useful for replicating a
    fit that used a different retention rule).
    """
    if not 0.0 <= threshold < 1.0:
        raise DataError(f"threshold must be in [0, 1), got {threshold}")
    c = prox.values
    n = c.shape[0]
    col_means = c.mean(axis=0)
    grand = c.mean()
    centered = c - col_means[None, :] - col_means[:, None] + grand
    eigval, eigvec = np.linalg.eigh(centered)
    order = np.argsort(eigval)[::-1]
    eigval, eigvec = eigval[order], eigvec[:, order]

    lam1 = eigval[0]
    spectrum_scale = max(abs(eigval[0]), abs(eigval[-1]))
    if lam1 <= 0.0 or lam1 <= 1e-10 * spectrum_scale:
        raise NumericError("no positive spatial dependence in proximity matrix")
    positive = eigval > 1e-12 * lam1
    if count is not None:
        if count < 0 or count > int(positive.sum()):
            raise DataError(
                f"count must be in [0, {int(positive.sum())}], got {count}")
        keep = np.zeros_like(positive)
        keep[:count] = True
    else:
        # >= keeps all pairs tied exactly at the cut.
        keep = positive & (eigval >= threshold * lam1)
    vectors = _fix_signs(np.ascontiguousarray(eigvec[:, keep]))
    return EigenBasis(
        vectors=vectors,
        eigenvalues=eigval[keep].copy(),
        kind=prox.kind,
        range_=prox.range_,
        coords=prox.coords,
        col_means=col_means,
        site_ids=prox.site_ids,
        threshold=threshold,
    )


def extend_basis(basis: EigenBasis, coords0) -> ExtendedBasis:
    """Evaluate a kernel-based eigenvector basis at new coordinates.

    Nystrom extension: the cross kernel between prediction and training
    sites (same range r) is centered with the training column means and
    projected on vectors / eigenvalues.  A prediction site that coincides
    exactly with a training site is treated as a revisit of that site
    (kernel entry 0, mirroring the zero diagonal), which makes the
    extension reproduce the training vectors at the training coordinates.
    """
    if basis.kind != KIND_KERNEL:
        raise DataError("extension requires kernel basis")
    coords0 = np.asarray(coords0, dtype=float)
    if coords0.ndim != 2 or coords0.shape[1] != 2:
        raise DataError(f"prediction coordinates must be (M, 2), got {coords0.shape}")
    if coords0.shape[0] == 0:
        raise DataError("no prediction sites supplied")
    if not np.all(np.isfinite(coords0)):
        raise DataError("non-finite prediction coordinate")

    dist = cdist(coords0, basis.coords)
    c0 = np.exp(-dist / basis.range_)
    c0[dist == 0.0] = 0.0
    centered = c0 - basis.col_means[None, :]
    vectors0 = centered @ basis.vectors / basis.eigenvalues[None, :]
    return ExtendedBasis(vectors0=vectors0, eigenvalues=basis.eigenvalues.copy())
