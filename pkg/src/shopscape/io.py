"""Data ingestion, serialisation, the synthetic-city generator and the
end-to-end pipeline.

File formats (all UTF-8, CSV with a header row, JSON for nested data):

* points: ``x,y[,weight[,<label columns>]]`` or ``lon,lat[,...]``, or the
  privacy-preserving ``row,col,count`` cell-count form with a JSON sidecar
  describing the grid;
* grid fields: ``row,col,value`` covering every cell, plus a JSON sidecar
  with the grid spec and field kind;
* firm tables: ``zone_id,industry_code,count`` long form;
* zone maps and street networks: JSON documents (see ``save_zones`` /
  ``load_network``).

Floats are serialised with 17 significant digits so a save/load round trip
is bit-identical.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import shutil
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import scipy

from . import __version__
from .compare import delta_density, radial_profile, zone_mean
from .density import GridField, coefficient_of_variation, kde, rasterize_counts, top_share
from .econ import FirmTable, diversity_by_zone, least_squares, rca, sector_association
from .errors import InvalidInputError, ParseError, PipelineStageError
from .geometry import (
    GridSpec,
    PointSet,
    Polygon,
    Zone,
    ZoneMap,
    build_grid,
    lonlat_to_local,
)
from .landuse import nonadherence_by_stratum, nonadherence_vs_distance
from .lisa import (
    ClusterSet,
    Dendrogram,
    LisaResult,
    build_dendrogram,
    build_weights,
    extract_clusters,
    local_moran,
)
from .survey import StreetEdge, StreetNetwork

__all__ = [
    "Dataset",
    "BlobSpec",
    "SyntheticCityConfig",
    "FilterReport",
    "load_points",
    "save_points",
    "load_field",
    "save_field",
    "load_firm_table",
    "save_firm_table",
    "load_zones",
    "save_zones",
    "load_network",
    "save_lisa",
    "load_lisa",
    "save_clusters",
    "save_dendrogram",
    "save_profile",
    "load_street_commerce_codes",
    "default_street_commerce_codes",
    "filter_commercial",
    "generate_synthetic_city",
    "save_dataset",
    "run_pipeline",
]

_FMT = "%.17g"  # decimal serialisation that round-trips float64 exactly


def _fnum(v) -> str:
    return _FMT % float(v)


def _sidecar_path(path: Path) -> Path:
    path = Path(path)
    if path.suffix == ".csv":
        return path.with_suffix(".json")
    return path.with_name(path.name + ".json")


# ---------------------------------------------------------------------------
# points

def _read_csv_rows(path: Path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", path=path) from None
        yield [h.strip() for h in header]
        yield from reader


def _require_columns(header, required, path):
    missing = [c for c in required if c not in header]
    if missing:
        raise ParseError(f"missing required column(s) {missing}", path=path)
    return {c: header.index(c) for c in header}


def load_points(path, format: str = "xy_csv", grid: GridSpec | None = None) -> PointSet:
    """Read a point set from one of the supported formats.

    ``xy_csv`` expects ``x,y`` columns; ``lonlat_csv`` expects ``lon,lat``
    and projects about the dataset centroid. Both take an optional
    ``weight`` column and keep any other columns as string labels.
    ``grid_counts_csv`` expects ``row,col,count`` and expands every cell to
    one point of that weight at the cell centre; the grid comes from the
    ``grid`` argument or from the JSON sidecar written by :func:`save_points`.
    """
    path = Path(path)
    if format not in ("xy_csv", "lonlat_csv", "grid_counts_csv"):
        raise InvalidInputError(f"unknown point format {format!r}")

    rows = _read_csv_rows(path)
    header = next(rows)

    if format == "grid_counts_csv":
        cols = _require_columns(header, ["row", "col", "count"], path)
        if grid is None:
            sidecar = _sidecar_path(path)
            if not sidecar.exists():
                raise InvalidInputError(
                    f"grid_counts_csv needs a grid: pass one or provide the sidecar {sidecar}"
                )
            grid = _grid_from_header(json.loads(sidecar.read_text(encoding="utf-8")))
        xs, ys, ws = [], [], []
        for lineno, row in enumerate(rows, start=2):
            if not row:
                continue
            try:
                r, c = int(row[cols["row"]]), int(row[cols["col"]])
                w = float(row[cols["count"]])
            except (ValueError, IndexError) as exc:
                raise ParseError(f"malformed row: {exc}", path=path, line=lineno) from None
            cx, cy = grid.cell_center(r, c)
            xs.append(cx)
            ys.append(cy)
            ws.append(w)
        return PointSet(x=np.array(xs), y=np.array(ys), weight=np.array(ws))

    coord_cols = ("x", "y") if format == "xy_csv" else ("lon", "lat")
    cols = _require_columns(header, list(coord_cols), path)
    label_names = [c for c in header if c not in (*coord_cols, "weight")]
    has_weight = "weight" in cols
    xs, ys, ws = [], [], []
    labels: dict[str, list] = {name: [] for name in label_names}
    for lineno, row in enumerate(rows, start=2):
        if not row:
            continue
        try:
            xs.append(float(row[cols[coord_cols[0]]]))
            ys.append(float(row[cols[coord_cols[1]]]))
            ws.append(float(row[cols["weight"]]) if has_weight else 1.0)
            for name in label_names:
                labels[name].append(row[cols[name]])
        except (ValueError, IndexError) as exc:
            raise ParseError(f"malformed row: {exc}", path=path, line=lineno) from None
    x = np.array(xs, dtype=float)
    y = np.array(ys, dtype=float)
    if format == "lonlat_csv":
        x, y = lonlat_to_local(x, y)
    return PointSet(
        x=x,
        y=y,
        weight=np.array(ws, dtype=float),
        labels={k: np.array(v) for k, v in labels.items()},
    )


def save_points(points: PointSet, path, privacy_grid: GridSpec | None = None) -> Path:
    """Write a point set as CSV.

    With ``privacy_grid`` the set is first aggregated to per-cell counts and
    written in the ``row,col,count`` form (plus grid sidecar), so exact
    locations never leave the machine.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if privacy_grid is not None:
        counts = rasterize_counts(points, privacy_grid)
        rows, cols = np.divmod(np.arange(privacy_grid.n_cells), privacy_grid.n_cols)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["row", "col", "count"])
            for r, c, v in zip(rows, cols, counts.flat):
                writer.writerow([r, c, _fnum(v)])
        _sidecar_path(path).write_text(
            json.dumps(_grid_header(privacy_grid, kind="count"), indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )
        return path
    label_names = sorted(points.labels)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "weight", *label_names])
        for i in range(len(points)):
            writer.writerow(
                [_fnum(points.x[i]), _fnum(points.y[i]), _fnum(points.weight[i])]
                + [str(points.labels[name][i]) for name in label_names]
            )
    return path


# ---------------------------------------------------------------------------
# grid fields

def _grid_header(grid: GridSpec, kind: str) -> dict:
    return {
        "origin_x": grid.origin_x,
        "origin_y": grid.origin_y,
        "cell_size": grid.cell_size,
        "n_cols": grid.n_cols,
        "n_rows": grid.n_rows,
        "kind": kind,
    }


def _grid_from_header(header: Mapping) -> GridSpec:
    return GridSpec(
        origin_x=float(header["origin_x"]),
        origin_y=float(header["origin_y"]),
        cell_size=float(header["cell_size"]),
        n_cols=int(header["n_cols"]),
        n_rows=int(header["n_rows"]),
    )


def save_field(f: GridField, path) -> Path:
    """Write a field as ``row,col,value`` CSV plus a JSON grid sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows, cols = np.divmod(np.arange(f.grid.n_cells), f.grid.n_cols)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["row", "col", "value"])
        for r, c, v in zip(rows, cols, f.flat):
            writer.writerow([r, c, _fnum(v)])
    _sidecar_path(path).write_text(
        json.dumps(_grid_header(f.grid, f.kind), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return path


def load_field(path) -> GridField:
    """Read a field written by :func:`save_field`."""
    path = Path(path)
    sidecar = _sidecar_path(path)
    if not sidecar.exists():
        raise InvalidInputError(f"missing field sidecar {sidecar}")
    header_doc = json.loads(sidecar.read_text(encoding="utf-8"))
    grid = _grid_from_header(header_doc)
    values = np.zeros(grid.n_cells)
    seen = np.zeros(grid.n_cells, dtype=bool)
    rows = _read_csv_rows(path)
    cols = _require_columns(next(rows), ["row", "col", "value"], path)
    for lineno, row in enumerate(rows, start=2):
        if not row:
            continue
        try:
            r, c = int(row[cols["row"]]), int(row[cols["col"]])
            flat = grid.flat_index(r, c)
            values[flat] = float(row[cols["value"]])
            seen[flat] = True
        except (ValueError, IndexError, InvalidInputError) as exc:
            raise ParseError(f"malformed row: {exc}", path=path, line=lineno) from None
    if not seen.all():
        raise ParseError(f"field file covers {int(seen.sum())} of {grid.n_cells} cells", path=path)
    return GridField(grid=grid, values=values, kind=str(header_doc.get("kind", "statistic")))


# ---------------------------------------------------------------------------
# firm tables

def save_firm_table(t: FirmTable, path) -> Path:
    """Write the long form ``zone_id,industry_code,count`` (all pairs)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["zone_id", "industry_code", "count"])
        for zi, zone_id in enumerate(t.zone_ids):
            for ci, code in enumerate(t.industry_codes):
                writer.writerow([zone_id, code, int(t.counts[zi, ci])])
    return path


def load_firm_table(path) -> FirmTable:
    path = Path(path)
    rows = _read_csv_rows(path)
    cols = _require_columns(next(rows), ["zone_id", "industry_code", "count"], path)
    records = []
    for lineno, row in enumerate(rows, start=2):
        if not row:
            continue
        try:
            records.append((row[cols["zone_id"]], row[cols["industry_code"]], int(row[cols["count"]])))
        except (ValueError, IndexError) as exc:
            raise ParseError(f"malformed row: {exc}", path=path, line=lineno) from None
    if not records:
        raise ParseError("firm table has no data rows", path=path)
    return FirmTable.from_records(records)


# ---------------------------------------------------------------------------
# zones and networks

def save_zones(zones: ZoneMap, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {"zones": []}
    for z in zones:
        entry = {
            "id": z.id,
            "outer": [[x, y] for x, y in z.polygon.outer[:-1]],
            "holes": [[[x, y] for x, y in h[:-1]] for h in z.polygon.holes],
        }
        for attr in ("stratum", "land_use", "population", "comuna_id"):
            value = getattr(z, attr)
            if value is not None:
                entry[attr] = value
        doc["zones"].append(entry)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_zones(path) -> ZoneMap:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc}", path=path) from None
    zones = []
    for entry in doc.get("zones", []):
        try:
            zones.append(
                Zone(
                    id=str(entry["id"]),
                    polygon=Polygon(outer=entry["outer"], holes=tuple(entry.get("holes", []))),
                    stratum=entry.get("stratum"),
                    land_use=entry.get("land_use"),
                    population=entry.get("population"),
                    comuna_id=entry.get("comuna_id"),
                )
            )
        except KeyError as exc:
            raise ParseError(f"zone entry missing key {exc}", path=path) from None
    return ZoneMap(zones=tuple(zones))


def load_network(path) -> StreetNetwork:
    """Read a street network: ``{"nodes": [{id,x,y}], "edges": [{from,to,polyline}]}``."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc}", path=path) from None
    try:
        nodes = {str(n["id"]): (float(n["x"]), float(n["y"])) for n in doc["nodes"]}
        edges = tuple(
            StreetEdge(start=str(e["from"]), end=str(e["to"]), polyline=np.asarray(e["polyline"], dtype=float))
            for e in doc["edges"]
        )
    except KeyError as exc:
        raise ParseError(f"network document missing key {exc}", path=path) from None
    return StreetNetwork(nodes=nodes, edges=edges)


# ---------------------------------------------------------------------------
# clusters, dendrograms, profiles

def save_clusters(cs: ClusterSet, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {
        "grid": _grid_header(cs.grid, kind="statistic"),
        "density_percentile": cs.density_percentile,
        "p_threshold": cs.p_threshold,
        "clusters": [
            {
                "label": c.label,
                "cells": [int(v) for v in np.sort(c.cells)],
                "centroid": {"x": c.centroid.x, "y": c.centroid.y},
                "mass": c.mass,
            }
            for c in cs.clusters
        ],
    }
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def save_dendrogram(d: Dendrogram, path, edges_csv=None) -> Path:
    """Write the dendrogram JSON and, optionally, a plot-ready edge list."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {
        "thresholds": list(d.thresholds),
        "p_threshold": d.p_threshold,
        "nodes": [
            {
                "level": n.level,
                "threshold": n.threshold,
                "label": n.cluster.label,
                "parent": n.parent_label,
                "mass": n.cluster.mass,
                "centroid": {"x": n.cluster.centroid.x, "y": n.cluster.centroid.y},
                "cells": [int(v) for v in np.sort(n.cluster.cells)],
            }
            for n in d.nodes
        ],
    }
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if edges_csv is not None:
        edges_csv = Path(edges_csv)
        with open(edges_csv, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["child_label", "child_threshold", "parent_label", "parent_threshold", "mass"])
            for n in d.nodes:
                if n.parent_label is None:
                    continue
                writer.writerow(
                    [n.cluster.label, _fnum(n.threshold), n.parent_label, _fnum(d.thresholds[n.level - 1]), _fnum(n.cluster.mass)]
                )
    return path


def save_profile(profile, path) -> Path:
    """Write a radial profile as ``bin_lo,bin_hi,mean,n_cells``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_lo", "bin_hi", "mean", "n_cells"])
        for b in range(profile.n_bins):
            mean = profile.mean[b]
            writer.writerow(
                [
                    _fnum(profile.edges[b]),
                    _fnum(profile.edges[b + 1]),
                    "" if math.isnan(mean) else _fnum(mean),
                    int(profile.count[b]),
                ]
            )
    return path


# ---------------------------------------------------------------------------
# street-commerce codes

_DEFAULT_CODES_PATH = Path(__file__).parent / "data" / "street_commerce_codes.txt"


def load_street_commerce_codes(path=None) -> tuple:
    """Load the street-commerce code list (the shipped default when no path
    is given); '#' comments and blank lines are ignored."""
    path = _DEFAULT_CODES_PATH if path is None else Path(path)
    codes = []
    for raw in path.read_text(encoding="utf-8").splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            codes.append(line)
    if not codes:
        raise InvalidInputError(f"no industry codes found in {path}")
    return tuple(codes)


def default_street_commerce_codes() -> tuple:
    return load_street_commerce_codes(None)


@dataclass(frozen=True, eq=False)
class FilterReport:
    """A filtered subset plus how much of the input survived."""

    subset: object
    kept: int
    total: int


def filter_commercial(data, code_list) -> FilterReport:
    """Restrict a firm table or industry-labelled point set to a code list.

    Firm tables are filtered by industry column; point sets need an
    ``industry`` label. ``kept``/``total`` count firms (weighted rows for
    tables, points for point sets).
    """
    codes = {str(c) for c in code_list}
    if not codes:
        raise InvalidInputError("the street-commerce code list is empty")
    if isinstance(data, FirmTable):
        subset = data.restrict_industries(codes)
        return FilterReport(subset=subset, kept=int(subset.total), total=int(data.total))
    if isinstance(data, PointSet):
        if "industry" not in data.labels:
            raise InvalidInputError("point set has no 'industry' label to filter on")
        mask = np.isin(data.labels["industry"].astype(str), sorted(codes))
        return FilterReport(subset=data.subset(mask), kept=int(mask.sum()), total=len(data))
    raise InvalidInputError(f"cannot filter a {type(data).__name__}")


# ---------------------------------------------------------------------------
# synthetic city

@dataclass(frozen=True)
class BlobSpec:
    """An isotropic Gaussian cluster of firms."""

    center: tuple[float, float]
    spread: float
    n_firms: int
    population: str = "both"  # visible | registered | both

    def __post_init__(self):
        if self.spread <= 0:
            raise InvalidInputError(f"blob spread must be > 0, got {self.spread}")
        if self.n_firms < 0:
            raise InvalidInputError("blob firm count must be >= 0")
        if self.population not in ("visible", "registered", "both"):
            raise InvalidInputError(f"blob population must be visible/registered/both, got {self.population!r}")


_DEFAULT_INDUSTRIES = (
    # street commerce
    "4711", "4771", "5611", "9602",
    # everything else
    "4100", "4923", "6201", "6910", "2410", "8411",
)


@dataclass(frozen=True, eq=False)
class SyntheticCityConfig:
    """Recipe for a synthetic city with known structure.

    Firms are drawn from Gaussian blobs plus a uniform background; zones are
    a ``zone_cols x zone_rows`` rectangular partition of the bounding box
    carrying strata, land use and population; registered firms draw an
    industry from their zone's mixture, and the firm table tallies those
    draws. Everything is deterministic under ``seed``.
    """

    bbox: tuple[float, float, float, float]
    cell_size: float = 200.0
    blobs: tuple = ()
    background_visible: int = 0
    background_registered: int = 0
    zone_cols: int = 4
    zone_rows: int = 4
    strata: Sequence[int] | None = None
    commercial_zone_indices: Sequence[int] | None = None
    population_per_zone: Sequence[float] | None = None
    industries: Sequence[str] = _DEFAULT_INDUSTRIES
    industry_mixture: Mapping[int, Sequence[float]] | Sequence[float] | None = None
    commercial_codes: Sequence[str] | None = None
    seed: int = 0


@dataclass(frozen=True, eq=False)
class Dataset:
    """Everything one analysis run consumes."""

    grid: GridSpec
    visible: PointSet
    registered: PointSet
    registered_commercial: PointSet
    firm_table: FirmTable | None = None
    zones: ZoneMap | None = None
    network: StreetNetwork | None = None

    def __post_init__(self):
        for name in ("visible", "registered", "registered_commercial"):
            points = getattr(self, name)
            if points is None or len(points) == 0:
                continue
            min_x, min_y, max_x, max_y = self.grid.extent
            outside = (
                (points.x < min_x) | (points.x >= max_x) | (points.y < min_y) | (points.y >= max_y)
            )
            n_out = int(outside.sum())
            if n_out:
                warnings.warn(f"{n_out} {name} points fall outside the grid extent", UserWarning, stacklevel=2)


def _partition_zones(cfg: SyntheticCityConfig) -> ZoneMap:
    min_x, min_y, max_x, max_y = cfg.bbox
    n = cfg.zone_cols * cfg.zone_rows
    strata = list(cfg.strata) if cfg.strata is not None else [(i % 6) + 1 for i in range(n)]
    if len(strata) != n:
        raise InvalidInputError(f"strata list must have {n} entries")
    if cfg.commercial_zone_indices is not None:
        commercial = set(int(i) for i in cfg.commercial_zone_indices)
    else:
        # checkerboard default keeps commercial land spread across strata
        commercial = {i for i in range(n) if (i // cfg.zone_cols + i % cfg.zone_cols) % 2 == 0}
    dx = (max_x - min_x) / cfg.zone_cols
    dy = (max_y - min_y) / cfg.zone_rows
    zones = []
    for i in range(n):
        zr, zc = divmod(i, cfg.zone_cols)
        x0, y0 = min_x + zc * dx, min_y + zr * dy
        poly = Polygon(outer=[[x0, y0], [x0 + dx, y0], [x0 + dx, y0 + dy], [x0, y0 + dy]])
        zones.append(
            Zone(
                id=f"Z{i:02d}",
                polygon=poly,
                stratum=strata[i],
                land_use="commercial_mixed" if i in commercial else "other",
                population=None if cfg.population_per_zone is None else float(cfg.population_per_zone[i]),
                comuna_id=f"Z{i:02d}",
            )
        )
    return ZoneMap(zones=tuple(zones))


def generate_synthetic_city(cfg: SyntheticCityConfig) -> Dataset:
    """Draw a full synthetic dataset from the config (see the class docs)."""
    min_x, min_y, max_x, max_y = cfg.bbox
    if not (max_x > min_x and max_y > min_y):
        raise InvalidInputError(f"degenerate bounding box {cfg.bbox!r}")
    total_firms = sum(b.n_firms for b in cfg.blobs) + cfg.background_visible + cfg.background_registered
    if total_firms <= 0:
        raise InvalidInputError("the synthetic city would contain no firms")

    grid = build_grid(cfg.bbox, cfg.cell_size)
    zones = _partition_zones(cfg)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))

    vis_x, vis_y = [], []
    reg_x, reg_y = [], []
    for blob in cfg.blobs:
        pts = rng.normal(loc=blob.center, scale=blob.spread, size=(blob.n_firms, 2))
        if blob.population in ("visible", "both"):
            vis_x.append(pts[:, 0])
            vis_y.append(pts[:, 1])
        if blob.population in ("registered", "both"):
            reg_x.append(pts[:, 0])
            reg_y.append(pts[:, 1])
    if cfg.background_visible:
        vis_x.append(rng.uniform(min_x, max_x, cfg.background_visible))
        vis_y.append(rng.uniform(min_y, max_y, cfg.background_visible))
    if cfg.background_registered:
        reg_x.append(rng.uniform(min_x, max_x, cfg.background_registered))
        reg_y.append(rng.uniform(min_y, max_y, cfg.background_registered))

    def _concat(parts):
        return np.concatenate(parts) if parts else np.empty(0)

    visible = PointSet(x=_concat(vis_x), y=_concat(vis_y))

    reg_xa, reg_ya = _concat(reg_x), _concat(reg_y)
    industries = tuple(str(c) for c in cfg.industries)
    zone_of = np.full(reg_xa.size, -1, dtype=int)
    if reg_xa.size:
        # zones partition the bbox; direct arithmetic beats polygon tests here
        dx = (max_x - min_x) / cfg.zone_cols
        dy = (max_y - min_y) / cfg.zone_rows
        zc = np.floor((reg_xa - min_x) / dx).astype(int)
        zr = np.floor((reg_ya - min_y) / dy).astype(int)
        ok = (zc >= 0) & (zc < cfg.zone_cols) & (zr >= 0) & (zr < cfg.zone_rows)
        zone_of[ok] = zr[ok] * cfg.zone_cols + zc[ok]

    def _mixture(zone_index: int) -> np.ndarray:
        mix = cfg.industry_mixture
        if mix is None:
            return np.full(len(industries), 1.0 / len(industries))
        if isinstance(mix, Mapping):
            weights = np.asarray(mix.get(zone_index, np.ones(len(industries))), dtype=float)
        else:
            weights = np.asarray(mix, dtype=float)
        if weights.size != len(industries) or (weights < 0).any() or weights.sum() <= 0:
            raise InvalidInputError("industry mixture must be non-negative weights, one per industry")
        return weights / weights.sum()

    industry_label = np.empty(reg_xa.size, dtype=object)
    for zi in range(-1, cfg.zone_cols * cfg.zone_rows):
        idx = np.flatnonzero(zone_of == zi)
        if idx.size == 0:
            continue
        probs = _mixture(max(zi, 0))
        industry_label[idx] = rng.choice(np.array(industries, dtype=object), size=idx.size, p=probs)

    registered = PointSet(
        x=reg_xa,
        y=reg_ya,
        labels={"industry": industry_label.astype(str)} if reg_xa.size else {},
    )

    codes = tuple(cfg.commercial_codes) if cfg.commercial_codes is not None else default_street_commerce_codes()
    commercial_set = {str(c) for c in codes} & set(industries)
    if not commercial_set:
        # keep the subset non-degenerate: treat the first industry as street commerce
        commercial_set = {industries[0]}
    registered_commercial = (
        filter_commercial(registered, commercial_set).subset if reg_xa.size else registered
    )

    records = []
    zone_ids = [z.id for z in zones]
    for k in np.flatnonzero(zone_of >= 0):
        records.append((zone_ids[zone_of[k]], industry_label[k], 1))
    firm_table = FirmTable.from_records(records) if records else None

    return Dataset(
        grid=grid,
        visible=visible,
        registered=registered,
        registered_commercial=registered_commercial,
        firm_table=firm_table,
        zones=zones,
    )


def save_dataset(ds: Dataset, out_dir) -> Path:
    """Write every dataset part; deterministic bytes for identical inputs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_points(ds.visible, out / "visible.csv")
    save_points(ds.registered, out / "registered.csv")
    save_points(ds.registered_commercial, out / "registered_commercial.csv")
    if ds.firm_table is not None:
        save_firm_table(ds.firm_table, out / "firms.csv")
    if ds.zones is not None:
        save_zones(ds.zones, out / "zones.json")
    (out / "grid.json").write_text(
        json.dumps(_grid_header(ds.grid, kind="count"), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return out


# ---------------------------------------------------------------------------
# pipeline

_DEFAULT_PARAMS = {
    "cell_size": 200.0,
    "bandwidth": 150.0,
    "p_threshold": 0.10,
    "density_percentile": 0.80,  # percentile rank: keep the densest 20%
    "permutations": 999,
    "dendrogram_thresholds": [0.80, 0.85, 0.90, 0.95, 0.99],
    "bin_width": 250.0,
    "max_dist": 10000.0,
    "top_share_percentile": 0.01,
    "rca_level": 2,
    "scheme": "queen",
}


def _load_dataset_from_config(cfg: Mapping, base: Path) -> Dataset:
    if "synthetic" in cfg:
        syn = dict(cfg["synthetic"])
        syn["bbox"] = tuple(syn["bbox"])
        if "blobs" in syn:
            syn["blobs"] = tuple(BlobSpec(**{**b, "center": tuple(b["center"])}) for b in syn["blobs"])
        return generate_synthetic_city(SyntheticCityConfig(**syn))
    if "inputs" not in cfg:
        raise InvalidInputError("pipeline config needs a 'synthetic' or 'inputs' section")
    inputs = cfg["inputs"]

    def _resolve(key):
        return (base / inputs[key]).resolve() if key in inputs else None

    fmt = inputs.get("format", "xy_csv")
    visible = load_points(_resolve("visible"), fmt)
    registered = load_points(_resolve("registered"), fmt) if "registered" in inputs else visible
    if "registered_commercial" in inputs:
        reg_c = load_points(_resolve("registered_commercial"), fmt)
    elif "industry" in registered.labels:
        codes = (
            load_street_commerce_codes(_resolve("street_commerce_codes"))
            if "street_commerce_codes" in inputs
            else default_street_commerce_codes()
        )
        reg_c = filter_commercial(registered, codes).subset
    else:
        reg_c = registered
    zones = load_zones(_resolve("zones")) if "zones" in inputs else None
    firm_table = load_firm_table(_resolve("firms")) if "firms" in inputs else None
    if "grid" in inputs:
        grid = _grid_from_header(json.loads(Path(_resolve("grid")).read_text(encoding="utf-8")))
    else:
        params = {**_DEFAULT_PARAMS, **cfg.get("params", {})}
        xs = np.concatenate([visible.x, registered.x])
        ys = np.concatenate([visible.y, registered.y])
        grid = build_grid(
            (float(xs.min()), float(ys.min()), float(xs.max()), float(ys.max())),
            params["cell_size"],
        )
    network = load_network(_resolve("network")) if "network" in inputs else None
    return Dataset(
        grid=grid,
        visible=visible,
        registered=registered,
        registered_commercial=reg_c,
        firm_table=firm_table,
        zones=zones,
        network=network,
    )


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    h.update(path.read_bytes())
    return h.hexdigest()


def save_lisa(res: LisaResult, path) -> Path:
    """Write per-cell local Moran output plus a JSON sidecar (grid, run info)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["row", "col", "local_i", "p_value", "quadrant"])
        for flat in range(res.grid.n_cells):
            r, c = divmod(flat, res.grid.n_cols)
            writer.writerow([r, c, _fnum(res.local_i[flat]), _fnum(res.p_value[flat]), res.quadrant[flat]])
    header = _grid_header(res.grid, kind="statistic")
    header.update({"permutations": res.permutations, "seed": res.seed})
    _sidecar_path(path).write_text(json.dumps(header, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_lisa(path) -> LisaResult:
    """Read local Moran output written by :func:`save_lisa`."""
    path = Path(path)
    sidecar = _sidecar_path(path)
    if not sidecar.exists():
        raise InvalidInputError(f"missing sidecar {sidecar}")
    header = json.loads(sidecar.read_text(encoding="utf-8"))
    grid = _grid_from_header(header)
    local_i = np.zeros(grid.n_cells)
    p = np.ones(grid.n_cells)
    quad = np.full(grid.n_cells, "LL", dtype="<U2")
    rows = _read_csv_rows(path)
    cols = _require_columns(next(rows), ["row", "col", "local_i", "p_value", "quadrant"], path)
    for lineno, row in enumerate(rows, start=2):
        if not row:
            continue
        try:
            flat = grid.flat_index(int(row[cols["row"]]), int(row[cols["col"]]))
            local_i[flat] = float(row[cols["local_i"]])
            p[flat] = float(row[cols["p_value"]])
            quad[flat] = row[cols["quadrant"]]
        except (ValueError, IndexError, InvalidInputError) as exc:
            raise ParseError(f"malformed row: {exc}", path=path, line=lineno) from None
    for arr in (local_i, p, quad):
        arr.flags.writeable = False
    return LisaResult(
        grid=grid,
        local_i=local_i,
        p_value=p,
        quadrant=quad,
        permutations=int(header.get("permutations", 0)),
        seed=int(header.get("seed", 0)),
    )


def run_pipeline(config, output_dir=None, workers: int = 1) -> Path:
    """Run the whole analysis and write a reproducible artifact directory.

    ``config`` is a path to a JSON document (or an equivalent mapping) with
    a ``synthetic`` or ``inputs`` section plus optional ``params``, ``seed``
    and ``output_dir``. Outputs include density fields, local Moran
    statistics, clusters, the dendrogram, the surplus field and its radial
    profile, concentration/diversity/regression tables, adherence tables and
    a ``manifest.json`` echoing parameters, seeds, versions and artifact
    hashes. Zone- or table-dependent stages are skipped (and the skip
    recorded) when their inputs are absent.

    Results are independent of ``workers``; a stage failure removes all
    partial outputs and raises :class:`PipelineStageError`.
    """
    if isinstance(config, (str, Path)):
        config_path = Path(config)
        cfg = json.loads(config_path.read_text(encoding="utf-8"))
        base = config_path.parent
    else:
        cfg = dict(config)
        base = Path.cwd()

    import os

    out = output_dir or cfg.get("output_dir") or os.environ.get("SHOPSCAPE_OUTPUT_DIR") or "shopscape_out"
    out = Path(out)
    staging = out.with_name(out.name + ".partial")
    if staging.exists():
        shutil.rmtree(staging)
    staging.mkdir(parents=True)

    params = {**_DEFAULT_PARAMS, **cfg.get("params", {})}
    seed = int(cfg.get("seed", 0))
    manifest: dict = {
        "parameters": params,
        "seed": seed,
        "versions": {"shopscape": __version__, "numpy": np.__version__, "scipy": scipy.__version__},
        "stages": [],
        "skipped": {},
        "summary": {},
    }

    stage = "load"
    try:
        ds = _load_dataset_from_config(cfg, base)
        manifest["stages"].append(stage)

        stage = "density"
        fields: dict[str, GridField] = {}
        populations = {
            "visible": ds.visible,
            "registered": ds.registered,
            "registered_commercial": ds.registered_commercial,
        }
        for name, points in populations.items():
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", UserWarning)
                counts = rasterize_counts(points, ds.grid)
                fields[name] = kde(points, ds.grid, params["bandwidth"])
            save_field(counts, staging / f"counts_{name}.csv")
            save_field(fields[name], staging / f"density_{name}.csv")
        concentration = {}
        for name in populations:
            shares = top_share(fields[name], rasterize_counts(populations[name], ds.grid), params["top_share_percentile"])
            concentration[name] = {
                "cv": coefficient_of_variation(fields[name]),
                "top_percentile": params["top_share_percentile"],
                "top_share": shares.share,
            }
        (staging / "concentration.json").write_text(
            json.dumps(concentration, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        manifest["summary"]["concentration"] = concentration
        manifest["stages"].append(stage)

        stage = "lisa"
        w = build_weights(ds.grid, scheme=params["scheme"], row_standardize=True)
        lisa_vis = local_moran(fields["visible"], w, permutations=params["permutations"], seed=seed, workers=workers)
        save_lisa(lisa_vis, staging / "lisa_visible.csv")
        lisa_reg_c = local_moran(
            fields["registered_commercial"], w, permutations=params["permutations"], seed=seed, workers=workers
        )
        save_lisa(lisa_reg_c, staging / "lisa_registered_commercial.csv")
        manifest["stages"].append(stage)

        stage = "clusters"
        top_fraction = 1.0 - params["density_percentile"]
        clusters_vis = extract_clusters(fields["visible"], lisa_vis, top_fraction, params["p_threshold"])
        save_clusters(clusters_vis, staging / "clusters_visible.json")
        clusters_formal = extract_clusters(
            fields["registered_commercial"], lisa_reg_c, top_fraction, params["p_threshold"]
        )
        save_clusters(clusters_formal, staging / "clusters_formal.json")
        manifest["summary"]["n_clusters_visible"] = len(clusters_vis)
        manifest["summary"]["n_clusters_formal"] = len(clusters_formal)
        manifest["stages"].append(stage)

        stage = "dendrogram"
        dend = build_dendrogram(fields["visible"], lisa_vis, params["dendrogram_thresholds"], params["p_threshold"])
        save_dendrogram(dend, staging / "dendrogram.json", staging / "dendrogram_edges.csv")
        manifest["stages"].append(stage)

        stage = "compare"
        surplus = delta_density(fields["visible"], fields["registered_commercial"])
        save_field(surplus, staging / "density_surplus.csv")
        zone_surplus = None
        if clusters_formal.clusters:
            profile = radial_profile(
                surplus, clusters_formal.centroids(), params["bin_width"], params["max_dist"]
            )
            save_profile(profile, staging / "surplus_profile.csv")
        if ds.zones is not None:
            zone_surplus = zone_mean(surplus, ds.zones)
            with open(staging / "surplus_by_zone.csv", "w", newline="", encoding="utf-8") as fh:
                writer = csv.writer(fh)
                writer.writerow(["zone_id", "mean_surplus", "n_cells"])
                for zid in zone_surplus.mean:
                    m = zone_surplus.mean[zid]
                    writer.writerow([zid, "" if math.isnan(m) else _fnum(m), zone_surplus.cell_count[zid]])
        manifest["stages"].append(stage)

        stage = "econ"
        if ds.firm_table is None or ds.zones is None or zone_surplus is None:
            manifest["skipped"][stage] = "needs a firm table and zones"
        else:
            table = ds.firm_table
            conc = rca(table)
            with open(staging / "rca.csv", "w", newline="", encoding="utf-8") as fh:
                writer = csv.writer(fh)
                writer.writerow(["zone_id", "industry_code", "rca"])
                for zi, zid in enumerate(table.zone_ids):
                    for ci, code in enumerate(table.industry_codes):
                        v = conc[zi, ci]
                        writer.writerow([zid, code, "" if math.isnan(v) else _fnum(v)])
            div = diversity_by_zone(table)
            with open(staging / "diversity.csv", "w", newline="", encoding="utf-8") as fh:
                writer = csv.writer(fh)
                writer.writerow(["zone_id", "diversity"])
                for zid, n in div.items():
                    writer.writerow([zid, n])

            zone_list = [z for z in ds.zones if not math.isnan(zone_surplus.mean.get(z.id, float("nan")))]
            y = [zone_surplus.mean[z.id] for z in zone_list]
            firm_w = []
            for z in zone_list:
                firm_w.append(float(table.counts[table.zone_ids.index(z.id)].sum()) if z.id in table.zone_ids else 0.0)
            regressions = {}
            covariates = {}
            if all(z.stratum is not None for z in zone_list):
                covariates["stratum"] = [float(z.stratum) for z in zone_list]
            if all(z.population is not None for z in zone_list):
                covariates["population_density"] = [z.population / z.polygon.area for z in zone_list]
            covariates["diversity"] = [float(div.get(z.id, 0)) for z in zone_list]
            for name, xs in covariates.items():
                for tag, wts in (("weighted", firm_w), ("unweighted", None)):
                    try:
                        rep = least_squares(xs, y, weights=wts)
                    except InvalidInputError as exc:
                        regressions[f"{name}_{tag}"] = {"skipped": str(exc)}
                        continue
                    regressions[f"{name}_{tag}"] = {
                        "slope": rep.slope,
                        "intercept": rep.intercept,
                        "stderr_slope": rep.stderr_slope,
                        "t_stat": rep.t_stat,
                        "p_value": rep.p_value,
                        "r_squared": rep.r_squared,
                        "n": rep.n,
                    }
            (staging / "regressions.json").write_text(
                json.dumps(regressions, indent=2, sort_keys=True) + "\n", encoding="utf-8"
            )

            assoc = sector_association(table, zone_surplus.mean, level=params["rca_level"])
            with open(staging / "sector_association.csv", "w", newline="", encoding="utf-8") as fh:
                writer = csv.writer(fh)
                writer.writerow(["industry_code", "slope", "p_value", "r_squared", "n"])
                for code, rep in assoc.results:
                    writer.writerow([code, _fnum(rep.slope), _fnum(rep.p_value), _fnum(rep.r_squared), rep.n])
            manifest["stages"].append(stage)

        stage = "adherence"
        if ds.zones is None or not any(z.land_use is not None for z in ds.zones):
            manifest["skipped"][stage] = "needs zones with land-use attributes"
        else:
            with open(staging / "adherence_by_stratum.csv", "w", newline="", encoding="utf-8") as fh:
                writer = csv.writer(fh)
                writer.writerow(["population", "stratum", "nonadherence", "firm_weight"])
                for name, points in populations.items():
                    with warnings.catch_warnings():
                        warnings.simplefilter("ignore", UserWarning)
                        adh = nonadherence_by_stratum(points, ds.zones)
                    for s in range(1, 7):
                        rate = adh.rate[s]
                        writer.writerow([name, s, "" if rate is None else _fnum(rate), _fnum(adh.firm_weight[s])])
                    writer.writerow(
                        [name, "unzoned", "" if adh.unzoned_rate is None else _fnum(adh.unzoned_rate), _fnum(adh.unzoned_weight)]
                    )
            center_sets = {}
            if clusters_formal.clusters:
                center_sets["formal"] = clusters_formal.centroids()
            if clusters_vis.clusters:
                center_sets["visible"] = clusters_vis.centroids()
            if center_sets:
                with open(staging / "adherence_profiles.csv", "w", newline="", encoding="utf-8") as fh:
                    writer = csv.writer(fh)
                    writer.writerow(["population", "center_set", "bin_lo", "bin_hi", "nonadherence", "n_firms"])
                    for name, points in populations.items():
                        for set_name, centers in center_sets.items():
                            with warnings.catch_warnings():
                                warnings.simplefilter("ignore", UserWarning)
                                prof = nonadherence_vs_distance(
                                    points, ds.zones, centers, params["bin_width"], params["max_dist"]
                                )
                            for b in range(prof.n_bins):
                                m = prof.mean[b]
                                writer.writerow(
                                    [
                                        name,
                                        set_name,
                                        _fnum(prof.edges[b]),
                                        _fnum(prof.edges[b + 1]),
                                        "" if math.isnan(m) else _fnum(m),
                                        int(prof.count[b]),
                                    ]
                                )
            manifest["stages"].append(stage)

        stage = "manifest"
        outputs = {}
        for artifact in sorted(staging.iterdir()):
            outputs[artifact.name] = _sha256(artifact)
        manifest["outputs"] = outputs
        (staging / "manifest.json").write_text(
            json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
    except Exception as exc:
        shutil.rmtree(staging, ignore_errors=True)
        raise PipelineStageError(stage, exc) from exc

    if out.exists():
        shutil.rmtree(out)
    staging.rename(out)
    return out
