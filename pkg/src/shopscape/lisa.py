"""Local Moran statistics with conditional-permutation inference, plus
significant-cluster extraction and the nested-cluster dendrogram.

The local statistic for cell ``i`` is ``I_i = (z_i / m2) * sum_j w_ij z_j``
with ``z`` the mean-deviations of the field and ``m2 = sum(z^2) / n``.
Pseudo p-values come from conditional randomisation: cell ``i`` keeps its
observed value while the remaining values are permuted among the remaining
cells. Because neither ``z_i`` nor ``m2`` changes under such a permutation,
only the values landing on ``i``'s neighbours matter, and the permutation
law restricted to those slots is plain sampling without replacement; that is
what gets simulated, one independent seeded stream per cell, so results do
not depend on how cells are scheduled across workers.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import ndimage, sparse

from .density import GridField, rank_order, top_cell_count
from .errors import DegenerateInputError, InvalidInputError
from .geometry import GridSpec, Point

__all__ = [
    "SpatialWeights",
    "LisaResult",
    "Cluster",
    "ClusterSet",
    "DendrogramNode",
    "Dendrogram",
    "build_weights",
    "local_moran",
    "extract_clusters",
    "build_dendrogram",
]

_SCHEMES = {
    "rook": ((-1, 0), (1, 0), (0, -1), (0, 1)),
    "queen": ((-1, 0), (1, 0), (0, -1), (0, 1), (-1, -1), (-1, 1), (1, -1), (1, 1)),
}

_QUEEN_STRUCTURE = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True, eq=False)
class SpatialWeights:
    """Per-cell neighbour lists in CSR form.

    ``indptr``/``indices``/``data`` follow the usual compressed-sparse-row
    layout over flat cell indices; neighbours within a row are sorted by
    flat index, which fixes the summation order of spatial lags.
    """

    grid: GridSpec
    scheme: str
    row_standardized: bool
    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray

    @property
    def n(self) -> int:
        return self.grid.n_cells

    def neighbors(self, i: int) -> np.ndarray:
        return self.indices[self.indptr[i] : self.indptr[i + 1]]

    def weights_row(self, i: int) -> np.ndarray:
        return self.data[self.indptr[i] : self.indptr[i + 1]]

    def cardinalities(self) -> np.ndarray:
        return np.diff(self.indptr)

    def to_sparse(self) -> sparse.csr_matrix:
        return sparse.csr_matrix((self.data, self.indices, self.indptr), shape=(self.n, self.n))

    def lag(self, values: np.ndarray) -> np.ndarray:
        """Spatial lag ``(W x)_i = sum_j w_ij x_j`` for a flat value array."""
        values = np.asarray(values, dtype=float).ravel()
        if values.size != self.n:
            raise InvalidInputError("value array does not match the weights' grid")
        return self.to_sparse() @ values


def build_weights(grid: GridSpec, scheme: str = "queen", row_standardize: bool = True) -> SpatialWeights:
    """Contiguity weights on the grid lattice.

    ``queen`` links the 8 surrounding cells, ``rook`` the 4 edge-sharing
    ones; neighbourhoods are clipped at the grid border. With
    ``row_standardize`` each row is rescaled to sum to one, making the lag a
    neighbourhood average (the usual choice for local Moran analysis).
    """
    if scheme not in _SCHEMES:
        raise InvalidInputError(f"scheme must be one of {tuple(_SCHEMES)}, got {scheme!r}")
    offsets = _SCHEMES[scheme]
    n_rows, n_cols = grid.n_rows, grid.n_cols
    rows_grid, cols_grid = np.divmod(np.arange(grid.n_cells), n_cols)

    src_list = []
    dst_list = []
    for dr, dc in offsets:
        r2 = rows_grid + dr
        c2 = cols_grid + dc
        ok = (r2 >= 0) & (r2 < n_rows) & (c2 >= 0) & (c2 < n_cols)
        src_list.append(np.flatnonzero(ok))
        dst_list.append(r2[ok] * n_cols + c2[ok])
    src = np.concatenate(src_list)
    dst = np.concatenate(dst_list)
    order = np.lexsort((dst, src))
    src, dst = src[order], dst[order]

    indptr = np.zeros(grid.n_cells + 1, dtype=np.int64)
    np.add.at(indptr, src + 1, 1)
    indptr = np.cumsum(indptr)
    weights = np.ones(dst.size)
    if row_standardize:
        card = np.diff(indptr)
        weights = weights / np.repeat(np.maximum(card, 1), card)
    return SpatialWeights(
        grid=grid,
        scheme=scheme,
        row_standardized=row_standardize,
        indptr=indptr,
        indices=dst,
        data=weights,
    )


@dataclass(frozen=True, eq=False)
class LisaResult:
    """Per-cell local Moran output.

    ``quadrant`` holds 'HH', 'LH', 'LL' or 'HL': the sign of the cell's
    deviation paired with the sign of its neighbours' average deviation.
    ``p_value`` is the one-sided conditional-permutation pseudo p-value
    ``(1 + extreme_count) / (1 + permutations)``, upper tail for HH/LL cells
    and lower tail for HL/LH cells.
    """

    grid: GridSpec
    local_i: np.ndarray
    p_value: np.ndarray
    quadrant: np.ndarray
    permutations: int
    seed: int


def _quadrants(z: np.ndarray, lag: np.ndarray) -> np.ndarray:
    zp = z > 0
    lp = lag > 0
    quad = np.empty(z.shape, dtype="<U2")
    quad[zp & lp] = "HH"
    quad[~zp & lp] = "LH"
    quad[~zp & ~lp] = "LL"
    quad[zp & ~lp] = "HL"
    return quad


def _draw_distinct(rng: np.random.Generator, n_perm: int, k: int, high: int) -> np.ndarray:
    """(n_perm, k) integers in [0, high), distinct within each row.

    Rejection sampling: redraw rows containing a duplicate until none do,
    which leaves exactly the law of sampling without replacement.
    """
    out = rng.integers(0, high, size=(n_perm, k))
    if k > 1:
        while True:
            srt = np.sort(out, axis=1)
            bad = np.flatnonzero((srt[:, 1:] == srt[:, :-1]).any(axis=1))
            if bad.size == 0:
                break
            out[bad] = rng.integers(0, high, size=(bad.size, k))
    return out


def _permute_cells(cells, z, m2, w, obs_i, upper_tail, permutations, seed_seqs, p_out):
    n = z.size
    for i in cells:
        k = int(w.indptr[i + 1] - w.indptr[i])
        if k == 0:
            p_out[i] = 1.0
            continue
        rng = np.random.default_rng(seed_seqs[i])
        draw = _draw_distinct(rng, permutations, k, n - 1)
        # index into "all cells but i" without materialising that array
        vals = z[np.where(draw < i, draw, draw + 1)]
        sim_i = (z[i] / m2) * (vals @ w.data[w.indptr[i] : w.indptr[i + 1]])
        if upper_tail[i]:
            extreme = np.count_nonzero(sim_i >= obs_i[i])
        else:
            extreme = np.count_nonzero(sim_i <= obs_i[i])
        p_out[i] = (1.0 + extreme) / (1.0 + permutations)


def local_moran(
    f: GridField,
    w: SpatialWeights,
    permutations: int = 999,
    seed: int = 0,
    workers: int = 1,
) -> LisaResult:
    """Local Moran statistics with conditional-permutation p-values.

    Parameters
    ----------
    f : GridField
        Field on the same grid as ``w``. All cells participate, including
        zero-density ones.
    w : SpatialWeights
    permutations : int
        Conditional permutations per cell, at least 99.
    seed : int
        Root seed; each cell draws from an independent substream spawned
        from it, so results are identical for any ``workers`` value.
    workers : int
        Thread count for the permutation sweep.

    Raises
    ------
    DegenerateInputError
        If the field is constant (no spatial variance to test).
    """
    if f.grid != w.grid:
        raise InvalidInputError("field and weights are on different grids")
    if permutations < 99:
        raise InvalidInputError(f"permutations must be >= 99, got {permutations}")
    if workers < 1:
        raise InvalidInputError(f"workers must be >= 1, got {workers}")

    x = f.flat
    n = x.size
    z = x - x.mean()
    m2 = float((z * z).sum()) / n
    if m2 == 0.0:
        raise DegenerateInputError("constant field: local Moran is undefined")

    lag = w.lag(z)
    obs_i = (z / m2) * lag
    quad = _quadrants(z, lag)
    upper_tail = (quad == "HH") | (quad == "LL")

    seed_seqs = np.random.SeedSequence(seed).spawn(n)
    p = np.empty(n)
    if workers == 1 or n < 2:
        _permute_cells(range(n), z, m2, w, obs_i, upper_tail, permutations, seed_seqs, p)
    else:
        chunks = np.array_split(np.arange(n), workers)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [
                pool.submit(_permute_cells, chunk, z, m2, w, obs_i, upper_tail, permutations, seed_seqs, p)
                for chunk in chunks
                if chunk.size
            ]
            for fut in futures:
                fut.result()

    for arr in (obs_i, p, quad):
        arr.flags.writeable = False
    return LisaResult(grid=f.grid, local_i=obs_i, p_value=p, quadrant=quad, permutations=permutations, seed=seed)


@dataclass(frozen=True, eq=False)
class Cluster:
    """A connected set of significant high-density cells."""

    label: str
    cells: np.ndarray
    centroid: Point
    mass: float

    def cell_set(self) -> frozenset:
        return frozenset(int(c) for c in self.cells)


@dataclass(frozen=True, eq=False)
class ClusterSet:
    """Disjoint clusters on one grid, ordered by descending mass."""

    grid: GridSpec
    density_percentile: float
    p_threshold: float
    clusters: tuple[Cluster, ...]

    def __len__(self) -> int:
        return len(self.clusters)

    def centroids(self) -> list[Point]:
        return [c.centroid for c in self.clusters]


def _eligible_mask(f: GridField, lisa: LisaResult, density_percentile: float, p_threshold: float) -> np.ndarray:
    if not 0 < density_percentile <= 1:
        raise InvalidInputError(f"density_percentile must be in (0, 1], got {density_percentile}")
    if not 0 < p_threshold < 1:
        raise InvalidInputError(f"p_threshold must be in (0, 1), got {p_threshold}")
    if f.grid != lisa.grid:
        raise InvalidInputError("field and LISA result are on different grids")
    order = rank_order(f.flat)
    k = top_cell_count(f.grid.n_cells, density_percentile)
    top = np.zeros(f.grid.n_cells, dtype=bool)
    top[order[:k]] = True
    return top & (lisa.p_value <= p_threshold) & (lisa.quadrant == "HH")


def _components(mask_flat: np.ndarray, grid: GridSpec) -> list[np.ndarray]:
    labels, n_comp = ndimage.label(mask_flat.reshape(grid.n_rows, grid.n_cols), structure=_QUEEN_STRUCTURE)
    flat_labels = labels.ravel()
    return [np.flatnonzero(flat_labels == c) for c in range(1, n_comp + 1)]


def _make_cluster(label: str, cells: np.ndarray, f: GridField) -> Cluster:
    cx, cy = f.grid.centers()
    vals = f.flat[cells]
    mass = float(vals.sum())
    if mass > 0:
        wx = float((cx[cells] * vals).sum() / mass)
        wy = float((cy[cells] * vals).sum() / mass)
    else:  # degenerate all-zero cluster; fall back to the unweighted centre
        wx = float(cx[cells].mean())
        wy = float(cy[cells].mean())
    cells = cells.copy()
    cells.flags.writeable = False
    return Cluster(label=label, cells=cells, centroid=Point(wx, wy), mass=mass)


def extract_clusters(
    f: GridField,
    lisa: LisaResult,
    density_percentile: float,
    p_threshold: float = 0.10,
) -> ClusterSet:
    """Group significant high-density cells into contiguous clusters.

    A cell qualifies when it ranks inside the top ``density_percentile``
    fraction of cells by field value (0.2 keeps the densest 20%), its pseudo
    p-value is at most ``p_threshold`` and its quadrant is HH. Qualifying
    cells are merged into queen-contiguous components; each cluster reports
    its density-weighted centroid and total mass. An empty result is valid.
    """
    mask = _eligible_mask(f, lisa, density_percentile, p_threshold)
    comps = _components(mask, f.grid)
    comps.sort(key=lambda cells: (-float(f.flat[cells].sum()), int(cells[0])))
    clusters = tuple(_make_cluster(f"C{i + 1}", cells, f) for i, cells in enumerate(comps))
    return ClusterSet(
        grid=f.grid,
        density_percentile=density_percentile,
        p_threshold=p_threshold,
        clusters=clusters,
    )


@dataclass(frozen=True, eq=False)
class DendrogramNode:
    """One cluster at one threshold level of the dendrogram."""

    level: int
    threshold: float
    cluster: Cluster
    parent_label: str | None


@dataclass(frozen=True, eq=False)
class Dendrogram:
    """Nested clusters across an ascending sweep of density thresholds.

    Thresholds are percentile ranks: 0.80 keeps the densest 20% of cells,
    0.99 the densest 1%, so later thresholds are stricter and their clusters
    nest inside earlier ones. Labels are stable: level-0 clusters are named
    by descending mass; a cluster that survives unsplit keeps its name, and
    one that fragments names its children ``<name>.1``, ``<name>.2``, ... by
    descending mass.
    """

    grid: GridSpec
    thresholds: tuple[float, ...]
    p_threshold: float
    nodes: tuple[DendrogramNode, ...]

    def level_nodes(self, level: int) -> list[DendrogramNode]:
        return [n for n in self.nodes if n.level == level]

    def branches(self) -> dict[str, tuple[float, float]]:
        """Per label, the loosest and strictest thresholds where it appears."""
        spans: dict[str, tuple[float, float]] = {}
        for node in self.nodes:
            first, _ = spans.get(node.cluster.label, (node.threshold, node.threshold))
            spans[node.cluster.label] = (first, node.threshold)
        return spans


def build_dendrogram(
    f: GridField,
    lisa: LisaResult,
    thresholds,
    p_threshold: float = 0.10,
) -> Dendrogram:
    """Extract clusters along a threshold sweep and link them by containment.

    ``thresholds`` must be strictly ascending percentile ranks in [0, 1);
    each level's clusters are matched to the unique previous-level cluster
    containing them (guaranteed to exist because stricter eligibility sets
    are subsets of looser ones).
    """
    thresholds = tuple(float(t) for t in thresholds)
    if not thresholds:
        raise InvalidInputError("at least one threshold is required")
    if any(not 0 <= t < 1 for t in thresholds):
        raise InvalidInputError("thresholds are percentile ranks and must lie in [0, 1)")
    if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
        raise InvalidInputError("thresholds must be strictly ascending")

    nodes: list[DendrogramNode] = []
    prev: list[Cluster] = []
    for level, t in enumerate(thresholds):
        cset = extract_clusters(f, lisa, density_percentile=1.0 - t, p_threshold=p_threshold)
        comps = list(cset.clusters)  # mass-ordered, provisional labels
        if level == 0:
            named = [(c, None) for c in comps]
        else:
            parent_of: list[str] = []
            children_per_parent: dict[str, int] = {}
            for c in comps:
                owners = [p.label for p in prev if c.cell_set() <= p.cell_set()]
                if len(owners) != 1:
                    raise AssertionError(
                        f"nesting violation at threshold {t}: cluster contained in {len(owners)} parents"
                    )
                parent_of.append(owners[0])
                children_per_parent[owners[0]] = children_per_parent.get(owners[0], 0) + 1
            named = []
            sibling_rank: dict[str, int] = {}
            for c, parent in zip(comps, parent_of):
                if children_per_parent[parent] == 1:
                    name = parent
                else:  # split: number the fragments by descending mass
                    sibling_rank[parent] = sibling_rank.get(parent, 0) + 1
                    name = f"{parent}.{sibling_rank[parent]}"
                named.append((Cluster(label=name, cells=c.cells, centroid=c.centroid, mass=c.mass), parent))
        level_clusters = []
        for cluster, parent in named:
            nodes.append(DendrogramNode(level=level, threshold=t, cluster=cluster, parent_label=parent))
            level_clusters.append(cluster)
        prev = level_clusters

    return Dendrogram(grid=f.grid, thresholds=thresholds, p_threshold=p_threshold, nodes=tuple(nodes))
