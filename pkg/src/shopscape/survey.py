"""Field-survey tooling: street-network sample planning, detector count
metrics and the omission-robustness check.

These mirror how a street-imagery census is actually run: pick camera points
along the road network with a minimum spacing, score the detector on held
out images by counts rather than boxes, and check that random omissions do
not distort the spatial picture.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError
from .geometry import PointSet

__all__ = [
    "StreetNetwork",
    "StreetEdge",
    "DetectorEval",
    "CountMetrics",
    "OmissionRobustness",
    "plan_sample_points",
    "count_metrics",
    "omission_robustness",
]

_GEOM_TOL = 1e-6


def _polyline_lengths(polyline: np.ndarray) -> np.ndarray:
    seg = np.diff(polyline, axis=0)
    return np.hypot(seg[:, 0], seg[:, 1])


@dataclass(frozen=True, eq=False)
class StreetEdge:
    """A road segment between two crossings, with its polyline geometry."""

    start: str
    end: str
    polyline: np.ndarray
    length: float = None

    def __post_init__(self):
        poly = np.ascontiguousarray(self.polyline, dtype=float)
        if poly.ndim != 2 or poly.shape[1] != 2 or poly.shape[0] < 2:
            raise InvalidInputError("edge polyline must be an (n>=2, 2) array")
        if not np.isfinite(poly).all():
            raise InvalidInputError("edge polyline coordinates must be finite")
        arclen = float(_polyline_lengths(poly).sum())
        if arclen <= 0:
            raise InvalidInputError(f"edge {self.start!r}-{self.end!r} has zero length")
        if self.length is not None and abs(float(self.length) - arclen) > _GEOM_TOL:
            raise InvalidInputError(
                f"edge {self.start!r}-{self.end!r}: declared length {self.length} "
                f"disagrees with geometry {arclen}"
            )
        poly.flags.writeable = False
        object.__setattr__(self, "polyline", poly)
        object.__setattr__(self, "length", arclen)

    def interpolate(self, arc: float) -> tuple[float, float]:
        """Point at a given arc length from the start of the polyline."""
        seg_len = _polyline_lengths(self.polyline)
        cum = np.concatenate([[0.0], np.cumsum(seg_len)])
        arc = min(max(arc, 0.0), cum[-1])
        k = int(np.searchsorted(cum, arc, side="right") - 1)
        k = min(k, seg_len.size - 1)
        t = (arc - cum[k]) / seg_len[k]
        p0, p1 = self.polyline[k], self.polyline[k + 1]
        return (float(p0[0] + t * (p1[0] - p0[0])), float(p0[1] + t * (p1[1] - p0[1])))


@dataclass(frozen=True, eq=False)
class StreetNetwork:
    """Crossing nodes plus the edges connecting them.

    ``nodes`` maps node id to ``(x, y)``; each edge's polyline must start
    and end on its declared nodes (within 1e-6 m).
    """

    nodes: dict
    edges: tuple

    def __post_init__(self):
        nodes = {str(k): (float(v[0]), float(v[1])) for k, v in dict(self.nodes).items()}
        edges = tuple(self.edges)
        for e in edges:
            for node_id, endpoint in ((e.start, e.polyline[0]), (e.end, e.polyline[-1])):
                if node_id not in nodes:
                    raise InvalidInputError(f"edge references unknown node {node_id!r}")
                nx, ny = nodes[node_id]
                if math.hypot(endpoint[0] - nx, endpoint[1] - ny) > _GEOM_TOL:
                    raise InvalidInputError(
                        f"edge endpoint {tuple(endpoint)} does not coincide with node {node_id!r}"
                    )
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "edges", edges)


def plan_sample_points(net: StreetNetwork, spacing: float = 20.0) -> PointSet:
    """Choose survey points: every crossing, plus evenly spaced extras.

    Every network crossing is included exactly once. Each edge of length
    ``L`` then receives the largest interior count ``k`` with
    ``L / (k + 1) >= spacing``, placed at arc lengths ``j * L / (k + 1)``;
    even placement realises the maximal count while keeping all along-edge
    gaps (interior-interior and interior-crossing) at least ``spacing``.
    Edges shorter than twice the spacing get no interior points; their end
    crossings still appear.

    Returns a PointSet labelled with ``kind`` ('crossing' or 'interior') and
    ``edge`` ('start-end' provenance, empty for crossings).
    """
    if not (math.isfinite(spacing) and spacing > 0):
        raise InvalidInputError(f"spacing must be > 0, got {spacing}")
    xs: list[float] = []
    ys: list[float] = []
    kinds: list[str] = []
    provenance: list[str] = []
    for node_id, (x, y) in net.nodes.items():
        xs.append(x)
        ys.append(y)
        kinds.append("crossing")
        provenance.append(node_id)
    for e in net.edges:
        n_interior = max(int(math.floor(e.length / spacing)) - 1, 0)
        step = e.length / (n_interior + 1)
        for j in range(1, n_interior + 1):
            px, py = e.interpolate(j * step)
            xs.append(px)
            ys.append(py)
            kinds.append("interior")
            provenance.append(f"{e.start}-{e.end}")
    return PointSet(
        x=np.array(xs, dtype=float),
        y=np.array(ys, dtype=float),
        labels={"kind": np.array(kinds), "edge": np.array(provenance)},
    )


def _as_count_vector(values, name: str) -> np.ndarray:
    arr = np.asarray(values)
    if arr.ndim != 1:
        raise InvalidInputError(f"{name} counts must be one-dimensional")
    if not np.issubdtype(arr.dtype, np.integer):
        as_int = arr.astype(np.int64)
        if not np.array_equal(as_int, arr):
            raise InvalidInputError(f"{name} counts must be integers")
        arr = as_int
    if (arr < 0).any():
        raise InvalidInputError(f"{name} counts must be >= 0")
    arr = np.ascontiguousarray(arr, dtype=np.int64)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class DetectorEval:
    """True and predicted per-image counts for a labelled image set."""

    true_counts: np.ndarray
    predicted_counts: np.ndarray

    def __post_init__(self):
        t = _as_count_vector(self.true_counts, "true")
        p = _as_count_vector(self.predicted_counts, "predicted")
        if t.shape != p.shape:
            raise InvalidInputError("count vectors must be equally long")
        object.__setattr__(self, "true_counts", t)
        object.__setattr__(self, "predicted_counts", p)

    @property
    def n_with_firms(self) -> int:
        return int(np.count_nonzero(self.true_counts > 0))

    @property
    def n_without_firms(self) -> int:
        return int(np.count_nonzero(self.true_counts == 0))


@dataclass(frozen=True)
class CountMetrics:
    """Count-based detector scores.

    ``detected_fraction`` averages predicted/true over images that contain
    firms (1.0 is perfect); ``empty_image_detections`` averages raw
    detections over firm-free images (0.0 is perfect). Either is ``None``
    when its image subset is empty. The reference detector behind this
    toolkit scored 0.955 and 0.200 respectively on its held-out test images.
    """

    detected_fraction: float | None
    empty_image_detections: float | None
    n_with_firms: int
    n_without_firms: int


def count_metrics(e: DetectorEval) -> CountMetrics:
    """Compute the two count metrics; undefined ones are flagged as None."""
    with_firms = e.true_counts > 0
    n_r = e.n_with_firms
    n_nr = e.n_without_firms
    detected = None
    if n_r:
        ratios = e.predicted_counts[with_firms] / e.true_counts[with_firms]
        detected = float(ratios.sum() / n_r)
    empty = None
    if n_nr:
        empty = float(e.predicted_counts[~with_firms].sum() / n_nr)
    return CountMetrics(
        detected_fraction=detected,
        empty_image_detections=empty,
        n_with_firms=n_r,
        n_without_firms=n_nr,
    )


@dataclass(frozen=True, eq=False)
class OmissionRobustness:
    """Distribution of regional detected-to-true ratios under thinning."""

    mean: float
    std: float
    samples: np.ndarray
    keep_prob: float
    resampled: int


def omission_robustness(
    points: PointSet,
    keep_prob: float,
    n_regions: int = 1000,
    radius_range: tuple[float, float] = (500.0, 1500.0),
    seed: int = 0,
    centers_from_points: bool = False,
) -> OmissionRobustness:
    """Check that random omissions leave the spatial distribution intact.

    Detections are simulated by thinning every unit of point weight
    independently with probability ``keep_prob``. Random disc regions are
    then drawn (centre uniform over the data bounding box, or on the points
    themselves with ``centers_from_points``; radius uniform in
    ``radius_range``) and each region reports detections over true firms.
    Regions that capture no firms are redrawn. A tight ratio distribution
    (the reference survey measured mean 0.91, s.d. 0.04 at its detector's
    recall) means omissions rescale the density without distorting it.
    """
    if not 0 < keep_prob <= 1:
        raise InvalidInputError(f"keep_prob must be in (0, 1], got {keep_prob}")
    if n_regions < 1:
        raise InvalidInputError(f"n_regions must be >= 1, got {n_regions}")
    r_lo, r_hi = (float(radius_range[0]), float(radius_range[1]))
    if not (math.isfinite(r_lo) and math.isfinite(r_hi) and 0 < r_lo <= r_hi):
        raise InvalidInputError(f"degenerate radius range {radius_range!r}")
    if len(points) == 0 or points.total_weight <= 0:
        raise InvalidInputError("omission robustness needs points with positive total weight")

    root = np.random.SeedSequence(seed)
    thin_seq, region_parent = root.spawn(2)
    thin_rng = np.random.default_rng(thin_seq)
    true_w = points.weight
    # integer weights thin binomially; fractional weights scale in expectation
    int_w = np.floor(true_w).astype(np.int64)
    detected_w = thin_rng.binomial(int_w, keep_prob).astype(float)
    frac = true_w - int_w
    has_frac = frac > 0
    if has_frac.any():
        detected_w[has_frac] += frac[has_frac] * (thin_rng.random(int(has_frac.sum())) < keep_prob)

    min_x, min_y, max_x, max_y = points.bbox()
    region_seqs = region_parent.spawn(n_regions)
    samples = np.empty(n_regions)
    resampled = 0
    max_attempts = 10_000
    for r in range(n_regions):
        rng = np.random.default_rng(region_seqs[r])
        for attempt in range(max_attempts):
            if centers_from_points:
                k = int(rng.integers(0, len(points)))
                cx, cy = float(points.x[k]), float(points.y[k])
            else:
                cx = rng.uniform(min_x, max_x)
                cy = rng.uniform(min_y, max_y)
            radius = rng.uniform(r_lo, r_hi)
            inside = (points.x - cx) ** 2 + (points.y - cy) ** 2 <= radius * radius
            true_total = float(true_w[inside].sum())
            if true_total > 0:
                samples[r] = float(detected_w[inside].sum()) / true_total
                break
            resampled += 1
        else:
            raise InvalidInputError("could not draw a region containing any firms")
    samples.flags.writeable = False
    return OmissionRobustness(
        mean=float(samples.mean()),
        std=float(samples.std()),
        samples=samples,
        keep_prob=keep_prob,
        resampled=resampled,
    )
