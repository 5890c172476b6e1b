"""Gridded density estimation and concentration statistics.

The central object is :class:`GridField`, one finite scalar per grid cell.
Fields of kind ``density`` are normalised to sum to one, so they read as the
spatial probability distribution of a firm sampled at random.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError
from .geometry import GridSpec, PointSet, points_to_cells

__all__ = [
    "GridField",
    "TopShare",
    "rasterize_counts",
    "kde",
    "coefficient_of_variation",
    "top_share",
    "rank_order",
    "top_cell_count",
]

FIELD_KINDS = ("count", "density", "delta", "statistic")

DENSITY_SUM_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class GridField:
    """One scalar per grid cell, stored as an ``(n_rows, n_cols)`` array.

    Parameters
    ----------
    grid : GridSpec
    values : array
        Finite scalars, shaped ``(n_rows, n_cols)`` (a flat array of length
        ``n_cells`` is accepted and reshaped).
    kind : {'count', 'density', 'delta', 'statistic'}
        ``density`` additionally requires non-negative values summing to one
        within 1e-9.
    """

    grid: GridSpec
    values: np.ndarray
    kind: str

    def __post_init__(self):
        if self.kind not in FIELD_KINDS:
            raise InvalidInputError(f"kind must be one of {FIELD_KINDS}, got {self.kind!r}")
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim == 1:
            vals = vals.reshape(self.grid.n_rows, self.grid.n_cols)
        if vals.shape != (self.grid.n_rows, self.grid.n_cols):
            raise InvalidInputError(
                f"values shape {vals.shape} does not match grid {self.grid.n_rows}x{self.grid.n_cols}"
            )
        if not np.isfinite(vals).all():
            raise InvalidInputError("field values must be finite")
        if self.kind == "density":
            if (vals < 0).any():
                raise InvalidInputError("density values must be non-negative")
            total = vals.sum()
            if abs(total - 1.0) > DENSITY_SUM_TOL:
                raise InvalidInputError(f"density values must sum to 1 (got {total!r})")
        vals = np.ascontiguousarray(vals)
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)

    @property
    def flat(self) -> np.ndarray:
        """Values in flat-index order (row-major)."""
        return self.values.ravel()

    def same_grid(self, other: "GridField") -> bool:
        return self.grid == other.grid


def rasterize_counts(points: PointSet, grid: GridSpec) -> GridField:
    """Sum point weights into grid cells.

    Points beyond the grid extent are dropped from the field; their count is
    reported through a :class:`UserWarning` so silent truncation cannot slip
    through a pipeline.
    """
    rows, cols, inside = points_to_cells(points, grid)
    n_out = int(np.count_nonzero(~inside))
    if n_out:
        warnings.warn(f"{n_out} points outside the grid extent were not rasterized", UserWarning, stacklevel=2)
    flat = rows[inside] * grid.n_cols + cols[inside]
    values = np.bincount(flat, weights=points.weight[inside], minlength=grid.n_cells)
    return GridField(grid=grid, values=values, kind="count")


def kde(
    points: PointSet,
    grid: GridSpec,
    bandwidth: float = 150.0,
    truncate: float | None = None,
    _chunk: int = 1024,
) -> GridField:
    """Gaussian kernel density estimate evaluated at cell centres.

    Each cell receives ``sum_p weight_p * exp(-d_p^2 / (2 * bandwidth^2))``
    with ``d_p`` the distance from the cell centre to point ``p``; the field
    is then rescaled to sum to one.

    Parameters
    ----------
    points : PointSet
        Must contain at least one in-grid point with positive weight. Points
        just outside the grid still contribute kernel mass to nearby cells.
    grid : GridSpec
    bandwidth : float
        Kernel scale in metres. The 150 m default is about two blocks of
        walking at the 200 m default cell size.
    truncate : float, optional
        When set, contributions beyond ``truncate * bandwidth`` are dropped.
        Off by default: exact evaluation is what the equivalence tests pin
        down, and truncation at fewer than ~9 bandwidths can perturb
        normalised values by more than 1e-10. Opt in only for very large
        inputs, and prefer radii >= 9.
    """
    if not (math.isfinite(bandwidth) and bandwidth > 0):
        raise InvalidInputError(f"bandwidth must be > 0, got {bandwidth}")
    _, _, inside = points_to_cells(points, grid)
    if not bool((inside & (points.weight > 0)).any()):
        raise InvalidInputError("kde requires at least one in-grid point with positive weight")

    cx, cy = grid.centers()
    acc = np.zeros(grid.n_cells)
    inv_two_h2 = 1.0 / (2.0 * bandwidth * bandwidth)
    cutoff2 = None if truncate is None else (truncate * bandwidth) ** 2
    # chunk over points: fixed chunk boundaries keep the per-cell summation
    # order deterministic
    for start in range(0, len(points), _chunk):
        px = points.x[start : start + _chunk]
        py = points.y[start : start + _chunk]
        pw = points.weight[start : start + _chunk]
        d2 = (cx[:, None] - px[None, :]) ** 2 + (cy[:, None] - py[None, :]) ** 2
        k = np.exp(-d2 * inv_two_h2)
        if cutoff2 is not None:
            k[d2 > cutoff2] = 0.0
        acc += k @ pw
    total = acc.sum()
    if total <= 0:
        raise InvalidInputError("kernel mass vanished on the grid; check bandwidth and extent")
    return GridField(grid=grid, values=acc / total, kind="density")


def coefficient_of_variation(f: GridField) -> float:
    """Population standard deviation over mean, across all grid cells.

    Higher values mean more spatial concentration. For orientation, the
    Medellin case study this toolkit was built around measured roughly 2.22
    for visible-firm density, 2.81 for registered firms and 3.03 for the
    registered-commercial subset.
    """
    vals = f.flat
    mean = vals.mean()
    if not mean > 0:
        raise InvalidInputError(f"coefficient of variation needs a positive mean, got {mean!r}")
    return float(vals.std() / mean)


def rank_order(values: np.ndarray) -> np.ndarray:
    """Cell order by descending value, ties broken by ascending flat index.

    The single ranking convention shared by :func:`top_share`, cluster
    extraction and the dendrogram, so threshold sweeps nest exactly.
    """
    flat = np.asarray(values, dtype=float).ravel()
    return np.argsort(-flat, kind="stable")


def top_cell_count(n_cells: int, fraction: float) -> int:
    """``ceil(fraction * n_cells)`` with a 1e-9 guard against float noise
    (``0.07 * 100`` is slightly above 7 in binary and must not round up)."""
    if not 0 < fraction <= 1:
        raise InvalidInputError(f"fraction must be in (0, 1], got {fraction}")
    return int(math.ceil(round(fraction * n_cells, 9)))


@dataclass(frozen=True, eq=False)
class TopShare:
    """Share of a count field captured by the densest cells.

    ``share`` is the headline number; ``rank_fraction``/``count_share`` give
    the whole curve (cumulative count share against the fraction of cells,
    ranked densest first).
    """

    share: float
    n_top: int
    percentile: float
    rank_fraction: np.ndarray
    count_share: np.ndarray


def top_share(density: GridField, counts: GridField, percentile: float) -> TopShare:
    """Fraction of total counts inside the top-``percentile`` densest cells.

    ``percentile`` is the included fraction of cells: 0.01 asks about the
    densest 1%. (The Medellin study found the top 1% of cells holding 19.8%
    of registered firms but only 13.7% of visible ones.)
    """
    if not density.same_grid(counts):
        raise InvalidInputError("density and counts must live on the same grid")
    order = rank_order(density.flat)
    n = density.grid.n_cells
    k = top_cell_count(n, percentile)
    total = counts.flat.sum()
    if not total > 0:
        raise InvalidInputError("counts field has zero total; shares are undefined")
    cum = np.cumsum(counts.flat[order]) / total
    return TopShare(
        share=float(cum[k - 1]),
        n_top=k,
        percentile=float(percentile),
        rank_fraction=np.arange(1, n + 1) / n,
        count_share=cum,
    )
