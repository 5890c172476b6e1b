"""Command-line entry points.

Every analysis step is exposed as a subcommand so runs can be scripted and
composed through files. Exit codes: 0 on success, 2 for invalid input,
3 for a pipeline stage failure. When ``-o`` is omitted, outputs land in
``$SHOPSCAPE_OUTPUT_DIR`` (default: the working directory).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, io
from .compare import delta_density, radial_profile
from .density import kde
from .econ import least_squares
from .errors import InvalidInputError, PipelineStageError, ShopscapeError
from .geometry import build_grid
from .landuse import nonadherence_by_stratum, nonadherence_vs_distance
from .lisa import build_dendrogram, build_weights, extract_clusters, local_moran
from .survey import DetectorEval, count_metrics, omission_robustness, plan_sample_points


def _out_path(name_or_none, default_name):
    if name_or_none:
        return Path(name_or_none)
    return Path(os.environ.get("SHOPSCAPE_OUTPUT_DIR", ".")) / default_name


def _centers_from_clusters(path):
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    centers = [(c["centroid"]["x"], c["centroid"]["y"]) for c in doc["clusters"]]
    if not centers:
        raise InvalidInputError(f"{path} contains no clusters to use as centres")
    return centers


def _print_json(doc, path=None):
    text = json.dumps(doc, indent=2, sort_keys=True)
    if path is None:
        print(text)
    else:
        Path(path).write_text(text + "\n", encoding="utf-8")
        print(path)


def _cmd_density(args):
    points = io.load_points(args.points, args.format)
    if args.bbox:
        grid = build_grid(tuple(args.bbox), args.cell_size)
    else:
        min_x, min_y, max_x, max_y = points.bbox()
        grid = build_grid((min_x, min_y, max_x + 1e-9, max_y + 1e-9), args.cell_size)
    field = kde(points, grid, args.bandwidth)
    out = _out_path(args.output, "density.csv")
    io.save_field(field, out)
    print(out)


def _cmd_lisa(args):
    field = io.load_field(args.field)
    w = build_weights(field.grid, scheme=args.scheme, row_standardize=True)
    res = local_moran(field, w, permutations=args.permutations, seed=args.seed, workers=args.workers)
    out = _out_path(args.output, "lisa.csv")
    io.save_lisa(res, out)
    print(out)


def _cmd_clusters(args):
    field = io.load_field(args.field)
    res = io.load_lisa(args.lisa)
    cs = extract_clusters(field, res, 1.0 - args.density_percentile, args.p_threshold)
    out = _out_path(args.output, "clusters.json")
    io.save_clusters(cs, out)
    print(out)


def _cmd_dendrogram(args):
    field = io.load_field(args.field)
    res = io.load_lisa(args.lisa)
    dend = build_dendrogram(field, res, args.thresholds, args.p_threshold)
    out = _out_path(args.output, "dendrogram.json")
    edges = Path(args.edges_csv) if args.edges_csv else out.with_suffix(".edges.csv")
    io.save_dendrogram(dend, out, edges)
    print(out)


def _cmd_compare(args):
    a = io.load_field(args.a)
    b = io.load_field(args.b)
    delta = delta_density(a, b)
    out = _out_path(args.output, "density_surplus.csv")
    io.save_field(delta, out)
    print(out)
    if args.centers:
        centers = _centers_from_clusters(args.centers)
        profile = radial_profile(delta, centers, args.bin_width, args.max_dist)
        prof_out = Path(args.profile) if args.profile else out.with_suffix(".profile.csv")
        io.save_profile(profile, prof_out)
        print(prof_out)


def _cmd_rca(args):
    from .econ import rca as _rca

    table = io.load_firm_table(args.firms)
    if args.level:
        table = table.aggregate_to_level(args.level)
    matrix = _rca(table)
    out = _out_path(args.output, "rca.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    import csv as _csv

    with open(out, "w", newline="", encoding="utf-8") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["zone_id", "industry_code", "rca"])
        for zi, zid in enumerate(table.zone_ids):
            for ci, code in enumerate(table.industry_codes):
                v = matrix[zi, ci]
                writer.writerow([zid, code, "" if np.isnan(v) else "%.17g" % v])
    print(out)


def _cmd_diversity(args):
    from .econ import diversity_by_zone

    table = io.load_firm_table(args.firms)
    scores = diversity_by_zone(table)
    out = _out_path(args.output, "diversity.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    import csv as _csv

    with open(out, "w", newline="", encoding="utf-8") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["zone_id", "diversity"])
        for zid, n in scores.items():
            writer.writerow([zid, n])
    print(out)


def _cmd_regress(args):
    import csv as _csv

    with open(args.data, newline="", encoding="utf-8") as fh:
        rows = list(_csv.DictReader(fh))
    if not rows:
        raise InvalidInputError(f"{args.data} has no data rows")
    for col in (args.x_col, args.y_col, *((args.weight_col,) if args.weight_col else ())):
        if col not in rows[0]:
            raise InvalidInputError(f"column {col!r} not found in {args.data}")
    x = [float(r[args.x_col]) for r in rows]
    y = [float(r[args.y_col]) for r in rows]
    w = [float(r[args.weight_col]) for r in rows] if args.weight_col else None
    rep = least_squares(x, y, weights=w)
    _print_json(
        {
            "slope": rep.slope,
            "intercept": rep.intercept,
            "stderr_slope": rep.stderr_slope,
            "t_stat": rep.t_stat,
            "p_value": rep.p_value,
            "r_squared": rep.r_squared,
            "n": rep.n,
            "weighted": rep.weighted,
        },
        args.output,
    )


def _cmd_adherence(args):
    points = io.load_points(args.points, args.format)
    zones = io.load_zones(args.zones)
    adh = nonadherence_by_stratum(points, zones)
    out = _out_path(args.output, "adherence.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    import csv as _csv

    with open(out, "w", newline="", encoding="utf-8") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["stratum", "nonadherence", "firm_weight"])
        for s in range(1, 7):
            rate = adh.rate[s]
            writer.writerow([s, "" if rate is None else "%.17g" % rate, "%.17g" % adh.firm_weight[s]])
        writer.writerow(
            ["unzoned", "" if adh.unzoned_rate is None else "%.17g" % adh.unzoned_rate, "%.17g" % adh.unzoned_weight]
        )
    print(out)
    if args.centers:
        centers = _centers_from_clusters(args.centers)
        profile = nonadherence_vs_distance(points, zones, centers, args.bin_width, args.max_dist)
        prof_out = Path(args.profile) if args.profile else out.with_suffix(".profile.csv")
        io.save_profile(profile, prof_out)
        print(prof_out)


def _cmd_sample_points(args):
    net = io.load_network(args.network)
    plan = plan_sample_points(net, spacing=args.spacing)
    out = _out_path(args.output, "sample_points.csv")
    io.save_points(plan, out)
    print(out)


def _cmd_eval_detector(args):
    import csv as _csv

    with open(args.counts, newline="", encoding="utf-8") as fh:
        rows = list(_csv.DictReader(fh))
    if not rows or "true" not in rows[0] or "predicted" not in rows[0]:
        raise InvalidInputError(f"{args.counts} needs 'true' and 'predicted' columns")
    ev = DetectorEval(
        true_counts=np.array([int(r["true"]) for r in rows]),
        predicted_counts=np.array([int(r["predicted"]) for r in rows]),
    )
    m = count_metrics(ev)
    _print_json(
        {
            "detected_fraction": m.detected_fraction,
            "empty_image_detections": m.empty_image_detections,
            "n_with_firms": m.n_with_firms,
            "n_without_firms": m.n_without_firms,
        },
        args.output,
    )


def _cmd_robustness(args):
    points = io.load_points(args.points, args.format)
    res = omission_robustness(
        points,
        keep_prob=args.keep_prob,
        n_regions=args.regions,
        radius_range=(args.radius_min, args.radius_max),
        seed=args.seed,
        centers_from_points=args.centers_from_points,
    )
    _print_json(
        {
            "mean": res.mean,
            "std": res.std,
            "keep_prob": res.keep_prob,
            "n_regions": int(res.samples.size),
            "resampled": res.resampled,
        },
        args.output,
    )


def _cmd_synth(args):
    cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
    syn = cfg.get("synthetic", cfg)
    syn = dict(syn)
    syn["bbox"] = tuple(syn["bbox"])
    if "blobs" in syn:
        syn["blobs"] = tuple(io.BlobSpec(**{**b, "center": tuple(b["center"])}) for b in syn["blobs"])
    ds = io.generate_synthetic_city(io.SyntheticCityConfig(**syn))
    out = _out_path(args.output, "synthetic_city")
    io.save_dataset(ds, out)
    print(out)


def _cmd_pipeline(args):
    out = io.run_pipeline(args.config, output_dir=args.output, workers=args.workers)
    print(out)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shopscape", description=__doc__)
    parser.add_argument("--version", action="version", version=f"shopscape {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        return p

    p = add("density", _cmd_density, "kernel density field from a point file")
    p.add_argument("--points", required=True)
    p.add_argument("--format", default="xy_csv", choices=["xy_csv", "lonlat_csv", "grid_counts_csv"])
    p.add_argument("--cell-size", type=float, default=200.0)
    p.add_argument("--bandwidth", type=float, default=150.0)
    p.add_argument("--bbox", type=float, nargs=4, metavar=("MIN_X", "MIN_Y", "MAX_X", "MAX_Y"))
    p.add_argument("-o", "--output")

    p = add("lisa", _cmd_lisa, "local Moran statistics for a saved field")
    p.add_argument("--field", required=True)
    p.add_argument("--scheme", default="queen", choices=["queen", "rook"])
    p.add_argument("--permutations", type=int, default=999)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("-o", "--output")

    p = add("clusters", _cmd_clusters, "significant clusters from a field + LISA run")
    p.add_argument("--field", required=True)
    p.add_argument("--lisa", required=True)
    p.add_argument("--density-percentile", type=float, default=0.80, help="percentile rank; 0.80 keeps the densest 20%% of cells")
    p.add_argument("--p-threshold", type=float, default=0.10)
    p.add_argument("-o", "--output")

    p = add("dendrogram", _cmd_dendrogram, "nested clusters across density thresholds")
    p.add_argument("--field", required=True)
    p.add_argument("--lisa", required=True)
    p.add_argument("--thresholds", type=float, nargs="+", default=[0.80, 0.85, 0.90, 0.95, 0.99])
    p.add_argument("--p-threshold", type=float, default=0.10)
    p.add_argument("--edges-csv")
    p.add_argument("-o", "--output")

    p = add("compare", _cmd_compare, "difference of two density fields (+ optional radial profile)")
    p.add_argument("--a", required=True, help="minuend density field")
    p.add_argument("--b", required=True, help="subtrahend density field")
    p.add_argument("--centers", help="clusters.json supplying profile centres")
    p.add_argument("--bin-width", type=float, default=250.0)
    p.add_argument("--max-dist", type=float, default=10000.0)
    p.add_argument("--profile")
    p.add_argument("-o", "--output")

    p = add("rca", _cmd_rca, "concentration index per zone and industry")
    p.add_argument("--firms", required=True)
    p.add_argument("--level", type=int, choices=[2, 4])
    p.add_argument("-o", "--output")

    p = add("diversity", _cmd_diversity, "distinct-industry count per zone")
    p.add_argument("--firms", required=True)
    p.add_argument("-o", "--output")

    p = add("regress", _cmd_regress, "weighted least-squares line fit from CSV columns")
    p.add_argument("--data", required=True)
    p.add_argument("--x-col", required=True)
    p.add_argument("--y-col", required=True)
    p.add_argument("--weight-col")
    p.add_argument("-o", "--output")

    p = add("adherence", _cmd_adherence, "land-use non-adherence by stratum (+ distance profile)")
    p.add_argument("--points", required=True)
    p.add_argument("--format", default="xy_csv", choices=["xy_csv", "lonlat_csv", "grid_counts_csv"])
    p.add_argument("--zones", required=True)
    p.add_argument("--centers")
    p.add_argument("--bin-width", type=float, default=250.0)
    p.add_argument("--max-dist", type=float, default=10000.0)
    p.add_argument("--profile")
    p.add_argument("-o", "--output")

    p = add("sample-points", _cmd_sample_points, "survey point plan for a street network")
    p.add_argument("--network", required=True)
    p.add_argument("--spacing", type=float, default=20.0)
    p.add_argument("-o", "--output")

    p = add("eval-detector", _cmd_eval_detector, "count metrics from true/predicted per-image counts")
    p.add_argument("--counts", required=True)
    p.add_argument("-o", "--output")

    p = add("robustness", _cmd_robustness, "regional detection-ratio stability under thinning")
    p.add_argument("--points", required=True)
    p.add_argument("--format", default="xy_csv", choices=["xy_csv", "lonlat_csv", "grid_counts_csv"])
    p.add_argument("--keep-prob", type=float, required=True)
    p.add_argument("--regions", type=int, default=1000)
    p.add_argument("--radius-min", type=float, default=500.0)
    p.add_argument("--radius-max", type=float, default=1500.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--centers-from-points", action="store_true")
    p.add_argument("-o", "--output")

    p = add("synth", _cmd_synth, "generate a synthetic city dataset")
    p.add_argument("--config", required=True)
    p.add_argument("-o", "--output")

    p = add("pipeline", _cmd_pipeline, "run the full analysis from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("-o", "--output")

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except PipelineStageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (InvalidInputError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ShopscapeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
