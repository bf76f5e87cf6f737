"""Spatial weight matrices and the machinery built on top of them.

Provides the row-stochastic k-nearest-neighbour weight matrix W, the
autoregressive operator A = I - rho*W, the quadratic form ||A theta||^2,
and a precomputed grid of ln|I - rho*W| values used when sampling the
autoregressive parameter on (-1, 1).
"""

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

EARTH_RADIUS_KM = 6371.0088


def great_circle_km(lon1, lat1, lon2, lat2):
    """Great-circle (haversine) distance in kilometres.

    Accepts scalars or broadcastable arrays of longitudes/latitudes in
    degrees.
    """
    lon1, lat1, lon2, lat2 = (np.radians(np.asarray(a, dtype=float))
                              for a in (lon1, lat1, lon2, lat2))
    dlon = lon2 - lon1
    dlat = lat2 - lat1
    h = np.sin(dlat / 2.0) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin(dlon / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))


def pairwise_great_circle(lon, lat):
    """n x n matrix of great-circle distances between coordinate arrays."""
    lon = np.asarray(lon, dtype=float)
    lat = np.asarray(lat, dtype=float)
    return great_circle_km(lon[:, None], lat[:, None], lon[None, :], lat[None, :])


@dataclass
class LogdetGrid:
    """Tabulated values of ln|I - rho*W| over a symmetric grid in (-1, 1)."""

    rho: np.ndarray
    logdet: np.ndarray
    method: str

    def __post_init__(self):
        self.rho = np.asarray(self.rho, dtype=float)
        self.logdet = np.asarray(self.logdet, dtype=float)
        if self.rho.shape != self.logdet.shape:
            raise ValueError("rho and logdet grids must have equal length")

    def __len__(self):
        return self.rho.size

    def interp(self, rho):
        """Linear interpolation of the tabulated log-determinant."""
        r = np.asarray(rho, dtype=float)
        if np.any(r < self.rho[0]) or np.any(r > self.rho[-1]):
            raise ValueError("rho outside the tabulated grid range")
        return np.interp(r, self.rho, self.logdet)


@dataclass
class SpatialSystem:
    """Row-stochastic weight matrix plus derived quantities.

    The matrix is fixed at construction; ``logdet_grid`` is attached once by
    :func:`build_logdet_grid` and the system is treated as immutable (and
    safe to share across workers) afterwards.
    """

    W: sp.csr_matrix
    k: int | None
    region_ids: list[str]
    min_neighbor_km: float = float("nan")
    max_neighbor_km: float = float("nan")
    logdet_grid: LogdetGrid | None = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return self.W.shape[0]

    def validate(self):
        """Check the row-stochastic invariants; raises ValueError on failure."""
        W = self.W
        if W.shape[0] != W.shape[1]:
            raise ValueError("W must be square")
        if W.nnz and W.data.min() < 0:
            raise ValueError("W must be non-negative")
        if np.abs(W.diagonal()).max(initial=0.0) != 0.0:
            raise ValueError("W must have an exactly zero diagonal")
        rowsums = np.asarray(W.sum(axis=1)).ravel()
        if np.abs(rowsums - 1.0).max() > 1e-12:
            raise ValueError("every row of W must sum to 1 within 1e-12")


def knn_weights(regions, k: int = 7) -> SpatialSystem:
    """Row-stochastic k-nearest-neighbour weights on great-circle distance.

    Each region is linked to its ``k`` closest other regions, every link
    weighted ``1/k``.  Ties in distance are broken by region id in
    lexicographic order, which makes the result deterministic across runs
    and platforms.

    Parameters
    ----------
    regions
        Object exposing ``region_ids`` (list of str), ``lon`` and ``lat``
        (degree arrays), e.g. a :class:`spgrav.data.RegionSet`.
    k
        Neighbour count; must satisfy 0 < k < n.
    """
    ids = list(regions.region_ids)
    n = len(ids)
    if k <= 0:
        raise ValueError("k must be positive")
    if k >= n:
        raise ValueError(f"k={k} must be smaller than the number of regions n={n}")
    if not (np.all(np.isfinite(regions.lon)) and np.all(np.isfinite(regions.lat))):
        raise ValueError("region coordinates must be finite")

    dist = pairwise_great_circle(regions.lon, regions.lat)
    np.fill_diagonal(dist, np.inf)
    # rank of each region id in lexicographic order; used as the tie key
    id_rank = np.argsort(np.argsort(np.asarray(ids, dtype=object), kind="stable"))

    indices = np.empty((n, k), dtype=np.int64)
    for i in range(n):
        order = np.lexsort((id_rank, dist[i]))
        indices[i] = order[:k]

    rows = np.repeat(np.arange(n), k)
    cols = indices.ravel()
    data = np.full(n * k, 1.0 / k)
    W = sp.csr_matrix((data, (rows, cols)), shape=(n, n))

    picked = dist[rows, cols]
    system = SpatialSystem(
        W=W,
        k=k,
        region_ids=ids,
        min_neighbor_km=float(picked.min()),
        max_neighbor_km=float(picked.max()),
    )
    system.validate()
    return system


def region_lag(system: SpatialSystem, x: np.ndarray) -> np.ndarray:
    """Spatial lag W @ x of region-level values (n-vector or n x p matrix)."""
    x = np.asarray(x, dtype=float)
    if x.shape[0] != system.n:
        raise ValueError(f"x has {x.shape[0]} rows, expected n={system.n}")
    return system.W @ x


@dataclass
class SarOperator:
    """The operator A = I - rho*W for an autoregressive parameter rho."""

    rho: float
    system: SpatialSystem

    def __post_init__(self):
        if not -1.0 < self.rho < 1.0:
            raise ValueError("rho must lie strictly inside (-1, 1)")

    def apply(self, v: np.ndarray) -> np.ndarray:
        """A @ v without forming the dense matrix."""
        return v - self.rho * (self.system.W @ v)

    def quadratic(self, v: np.ndarray) -> float:
        """theta' A'A theta, i.e. squared norm of A @ v."""
        u = self.apply(np.asarray(v, dtype=float))
        return float(u @ u)


def sar_quadratic(theta: np.ndarray, rho: float, system: SpatialSystem) -> float:
    """||(I - rho*W) theta||^2, computed with a single sparse matvec."""
    return SarOperator(rho, system).quadratic(theta)


def _logdet_lu(A: sp.csc_matrix) -> float:
    """ln|det A| from a sparse LU factorization."""
    lu = splu(A)
    du = lu.U.diagonal()
    if np.any(du == 0.0):
        raise RuntimeError("singular factorization")
    return float(np.sum(np.log(np.abs(du))))


def _rho_grid(resolution: int) -> np.ndarray:
    # odd point count so that rho = 0 is an exact grid point
    eps = 1.0 / resolution
    count = resolution if resolution % 2 == 1 else resolution + 1
    return np.linspace(-1.0 + eps, 1.0 - eps, count)


def _exact_grid(W: sp.csr_matrix, rho: np.ndarray) -> np.ndarray:
    n = W.shape[0]
    identity = sp.identity(n, format="csc")
    Wc = W.tocsc()
    out = np.empty(rho.size)
    for g, r in enumerate(rho):
        if r == 0.0:
            out[g] = 0.0
            continue
        try:
            out[g] = _logdet_lu((identity - r * Wc).tocsc())
        except RuntimeError:
            out[g] = np.nan
    bad = np.isnan(out)
    if bad.any():
        warnings.warn(
            f"log-determinant factorization failed at {int(bad.sum())} grid "
            "points; values interpolated from neighbours"
        )
        out[bad] = np.interp(rho[bad], rho[~bad], out[~bad])
    return out


def _approx_grid(W: sp.csr_matrix, rho: np.ndarray, n_moments: int = 200,
                 spectral_cut: float = 0.8, max_spectral: int = 32) -> np.ndarray:
    """Trace-moment series for ln|I - rho*W| with a spectral tail correction.

    ln|I - rho*W| = sum_i ln|1 - rho*mu_i|.  The plain power series
    -sum_k tr(W^k) rho^k / k converges too slowly near |rho| -> 1 because of
    eigenvalues close to the unit circle, so the largest-magnitude
    eigenvalues are handled exactly and only the residual moments are summed.
    """
    n = W.shape[0]
    k_eigs = min(max_spectral, n - 2)
    if n <= 400:
        mu = np.linalg.eigvals(W.toarray())
    else:
        from scipy.sparse.linalg import eigs

        v0 = np.full(n, 1.0 / np.sqrt(n))
        try:
            mu = eigs(W, k=k_eigs, which="LM", v0=v0,
                      return_eigenvectors=False, maxiter=5000, tol=1e-12)
        except Exception:
            mu = np.linalg.eigvals(W.toarray())
    order = np.argsort(-np.abs(mu), kind="stable")
    mu = mu[order]
    keep = np.abs(mu) >= spectral_cut
    keep[:1] = True  # always peel the dominant eigenvalue (== 1 for row-stochastic W)
    mu = mu[keep][:k_eigs]

    # exact traces tr(W^k); W^k is accumulated densely, fine for the
    # n <= a-few-thousand regime this method is meant for
    Wd = W.toarray()
    powers = np.empty(n_moments)
    P = np.eye(n)
    for k in range(1, n_moments + 1):
        P = P @ Wd
        powers[k - 1] = np.trace(P)

    ks = np.arange(1, n_moments + 1)
    mu_k = mu[None, :] ** ks[:, None]                   # (K, E) complex
    resid = powers - mu_k.sum(axis=1)                   # residual moments
    out = np.empty(rho.size)
    for g, r in enumerate(rho):
        if r == 0.0:
            out[g] = 0.0
            continue
        head = 0.5 * np.sum(np.log((1.0 - r * mu.real) ** 2 + (r * mu.imag) ** 2))
        tail = -np.sum((resid * r ** ks / ks).real)
        out[g] = head + tail
    return out


def _enforce_grid_shape(rho: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Clamp tiny numerical violations of concavity-induced monotonicity.

    ln|I - rho*W| is 0 at rho = 0, non-positive, non-decreasing on the
    negative branch and non-increasing on the positive one.
    """
    out = np.minimum(values, 0.0)
    zero = int(np.argmin(np.abs(rho)))
    out[zero] = 0.0
    right = np.minimum.accumulate(out[zero:])
    left = np.minimum.accumulate(out[zero::-1])[::-1]
    fixed = np.concatenate([left[:-1], right])
    if np.max(np.abs(fixed - values)) > 1e-9:
        warnings.warn("log-determinant grid violated monotonicity by more than 1e-9")
    return fixed


def build_logdet_grid(system: SpatialSystem, resolution: int = 2000,
                      method: str = "exact") -> LogdetGrid:
    """Tabulate ln|I - rho*W| over an equally spaced grid on (-1+eps, 1-eps).

    ``eps`` equals 1/resolution and the point count is rounded up to the next
    odd integer so that rho = 0 (where the value is exactly zero) lies on the
    grid.  ``method='exact'`` factorizes I - rho*W sparsely at every grid
    point and is the default for n up to a few thousand; ``'approximate'``
    uses a trace-moment expansion with a spectral tail correction.

    The grid is attached to ``system.logdet_grid`` and also returned.
    """
    if resolution < 100:
        raise ValueError("grid resolution must be at least 100")
    rho = _rho_grid(resolution)
    if method == "exact":
        values = _exact_grid(system.W, rho)
    elif method == "approximate":
        values = _approx_grid(system.W, rho)
    else:
        raise ValueError(f"unknown log-determinant method: {method!r}")
    values = _enforce_grid_shape(rho, values)
    grid = LogdetGrid(rho=rho, logdet=values, method=method)
    system.logdet_grid = grid
    return grid


def load_weights_triplet(path, region_ids: list[str]) -> SpatialSystem:
    """Load a weight-matrix override from a triplet CSV.

    Expected columns: ``row_id,col_id,weight``.  Rows are renormalized to
    sum to one; a warning is emitted if renormalization changes any row sum
    by more than 1e-9.
    """
    import csv

    index = {rid: i for i, rid in enumerate(region_ids)}
    n = len(region_ids)
    rows, cols, data = [], [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        required = {"row_id", "col_id", "weight"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise ValueError(f"weight file must have columns {sorted(required)}")
        for lineno, rec in enumerate(reader, start=2):
            try:
                i = index[rec["row_id"]]
                j = index[rec["col_id"]]
            except KeyError as exc:
                raise ValueError(f"row {lineno}: unknown region id {exc.args[0]!r}") from None
            w = float(rec["weight"])
            if w < 0:
                raise ValueError(f"row {lineno}: negative weight {w}")
            if i == j and w != 0.0:
                raise ValueError(f"row {lineno}: nonzero diagonal weight for {rec['row_id']!r}")
            rows.append(i)
            cols.append(j)
            data.append(w)
    W = sp.csr_matrix((data, (rows, cols)), shape=(n, n))
    rowsums = np.asarray(W.sum(axis=1)).ravel()
    if np.any(rowsums <= 0):
        empty = [region_ids[i] for i in np.flatnonzero(rowsums <= 0)]
        raise ValueError(f"weight rows with no mass cannot be renormalized: {empty}")
    if np.abs(rowsums - 1.0).max() > 1e-9:
        warnings.warn("weight rows renormalized to sum to one")
    W = sp.diags(1.0 / rowsums) @ W
    nnz_per_row = np.diff(W.tocsr().indptr)
    k = int(nnz_per_row[0]) if np.all(nnz_per_row == nnz_per_row[0]) else None
    system = SpatialSystem(W=W.tocsr(), k=k, region_ids=list(region_ids))
    system.validate()
    return system


def save_weights_triplet(system: SpatialSystem, path) -> None:
    """Write the weight matrix as a ``row_id,col_id,weight`` CSV."""
    coo = system.W.tocoo()
    order = np.lexsort((coo.col, coo.row))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write("row_id,col_id,weight\n")
        for idx in order:
            i, j, w = coo.row[idx], coo.col[idx], coo.data[idx]
            fh.write(f"{system.region_ids[i]},{system.region_ids[j]},{w!r}\n")
