"""Command-line entry point.

Commands: gen-network, gen-traj, train, match, eval, features. Values are
resolved as flags over config-file entries over defaults; the effective
config is echoed to stdout. Exit codes: 0 success, 1 usage error, 2 data or
validation error, 3 training stopped at the iteration cap without reaching
the gradient tolerance.
"""

from __future__ import annotations

import argparse
import json
import multiprocessing
import sys
from dataclasses import asdict, fields
from functools import partial
from pathlib import Path

from .crf_engine import (
    MatchResult,
    TrainConfig,
    load_model,
    match,
    match_result_to_dict,
    save_model,
    train,
)
from .evaluation import categorize_errors, error_rates
from .features import CATALOGS, FilterConfig
from .lattice import LatticeConfig, build_lattice, label_lattice
from .pipeline import downsample_with_truth, export_feature_matrices
from .road_network import NetworkFormatError, load_network
from .synthgen import GenConfig, gen_dataset, gen_network
from .trajectory_io import (
    TrajectoryFormatError,
    load_ground_truth_all,
    parse_observations,
    write_ground_truth,
    write_observations_csv,
)

_CONFIG_SECTIONS = {
    "gen": GenConfig,
    "lattice": LatticeConfig,
    "filter": FilterConfig,
    "train": TrainConfig,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise ValueError("config file must hold a JSON object")
    for section, body in doc.items():
        cls = _CONFIG_SECTIONS.get(section)
        if cls is None:
            raise ValueError(f"unknown config section {section!r}")
        if not isinstance(body, dict):
            raise ValueError(f"config section {section!r} must be an object")
        known = {f.name for f in fields(cls)}
        for key in body:
            if key not in known:
                raise ValueError(f"unknown config key {section}.{key}")
    return doc


def _merge(cls, section: dict, overrides: dict):
    merged = {f.name: getattr(cls(), f.name) for f in fields(cls)}
    merged.update(section)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    return cls(**merged)


def _build_gen_cfg(args, config) -> GenConfig:
    overrides = {
        "rows": args.rows,
        "cols": args.cols,
        "spacing_m": args.spacing,
        "jitter_m": args.jitter,
        "oneway_fraction": args.oneway_fraction,
        "speed_choices_kmh": tuple(float(s) for s in args.speeds.split(",")) if args.speeds else None,
        "noise_sigma_m": args.noise_sigma,
        "native_interval_s": args.interval,
        "heading_noise_deg": args.heading_noise,
        "low_speed_fraction": args.low_speed_fraction,
        "straight_bias": args.straight_bias,
        "seed": args.seed,
    }
    section = dict(config.get("gen", {}))
    if "speed_choices_kmh" in section:
        section["speed_choices_kmh"] = tuple(section["speed_choices_kmh"])
    return _merge(GenConfig, section, overrides)


def _build_lattice_cfg(args, config) -> LatticeConfig:
    overrides = {
        "radius_m": args.radius,
        "radius_max_m": args.radius_max,
        "max_candidates_k": args.max_candidates,
        "paths_per_pair_k": args.paths_per_pair,
        "length_cap_factor": args.cap_factor,
        "length_cap_floor_m": args.cap_floor,
        "speed_cap_kmh": args.speed_cap,
    }
    return _merge(LatticeConfig, config.get("lattice", {}), overrides)


def _build_filter_cfg(args, config) -> FilterConfig:
    overrides = {"v_min_kmh": args.v_min, "val_0": args.val0}
    return _merge(FilterConfig, config.get("filter", {}), overrides)


def _build_train_cfg(args, config) -> TrainConfig:
    overrides = {
        "regularizer": args.reg,
        "lambda_": args.lam,
        "grad_tolerance": args.grad_tolerance,
        "max_iterations": args.max_iterations,
        "lambda_grid": tuple(float(s) for s in args.lambda_grid.split(",")) if args.lambda_grid else None,
        "holdout_fraction": args.holdout_fraction,
        "seed": args.seed,
    }
    section = dict(config.get("train", {}))
    if "lambda_grid" in section:
        section["lambda_grid"] = tuple(section["lambda_grid"])
    return _merge(TrainConfig, section, overrides)


def _echo_config(name: str, **cfgs) -> None:
    doc = {}
    for key, cfg in cfgs.items():
        if cfg is None:
            continue
        body = asdict(cfg)
        for k, v in body.items():
            if isinstance(v, tuple):
                body[k] = list(v)
        doc[key] = body
    print(f"{name} effective-config {json.dumps(doc, sort_keys=True)}")


def _add_net_flags(p) -> None:
    p.add_argument("--net-nodes", required=True, help="nodes CSV path")
    p.add_argument("--net-edges", required=True, help="edges CSV path")


def _add_lattice_flags(p) -> None:
    p.add_argument("--radius", type=float, default=None, help="candidate search radius m (default 50)")
    p.add_argument("--radius-max", type=float, default=None, help="escalation limit m (default 200)")
    p.add_argument("--max-candidates", type=int, default=None, help="candidates per observation (default 5)")
    p.add_argument("--paths-per-pair", type=int, default=None, help="routes per candidate pair (default 3)")
    p.add_argument("--cap-factor", type=float, default=None, help="route cap x straight distance (default 2.0)")
    p.add_argument("--cap-floor", type=float, default=None, help="route cap floor m (default 500)")
    p.add_argument("--speed-cap", type=float, default=None, help="route cap speed km/h (default 180)")


def _add_filter_flags(p) -> None:
    p.add_argument("--v-min", type=float, default=None, help="heading filter threshold km/h (default 7.2)")
    p.add_argument("--val0", type=float, default=None, help="filtered bearing value (default 0)")


def _add_gen_flags(p) -> None:
    p.add_argument("--rows", type=int, default=None, help="grid rows (default 10)")
    p.add_argument("--cols", type=int, default=None, help="grid cols (default 10)")
    p.add_argument("--spacing", type=float, default=None, help="grid spacing m (default 200)")
    p.add_argument("--jitter", type=float, default=None, help="node jitter m (default 20)")
    p.add_argument("--oneway-fraction", type=float, default=None, help="one-way share (default 0.1)")
    p.add_argument("--speeds", default=None, help="speed choices km/h, comma-separated (default 30,50,80)")
    p.add_argument("--noise-sigma", type=float, default=None, help="position noise sigma m (default 15)")
    p.add_argument("--interval", type=int, default=None, help="native fix interval s (default 10)")
    p.add_argument("--heading-noise", type=float, default=None, help="heading noise deg (default 10)")
    p.add_argument("--low-speed-fraction", type=float, default=None, help="share of low-speed fixes (default 0.1)")
    p.add_argument("--straight-bias", type=float, default=None, help="straight-continuation probability (default 0.9)")


def build_parser() -> _Parser:
    parser = _Parser(prog="crfmatch", description="Road-route recovery from noisy GPS traces")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-network", parents=[], help="generate a synthetic road network")
    _add_gen_flags(p)
    p.add_argument("--seed", type=int, default=None, help="generator seed (default 0)")
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--out-nodes", required=True, help="output nodes CSV")
    p.add_argument("--out-edges", required=True, help="output edges CSV")
    p.set_defaults(func=cmd_gen_network)

    p = sub.add_parser("gen-traj", help="generate noisy trajectories with ground truth")
    _add_net_flags(p)
    _add_gen_flags(p)
    p.add_argument("--seed", type=int, default=None, help="generator seed (default 0)")
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--n-traj", type=int, default=60, help="trajectory count (default 60)")
    p.add_argument("--route-len", type=int, default=25, help="route length in edges (default 25)")
    p.add_argument("--out-obs", required=True, help="output observations CSV")
    p.add_argument("--out-truth", required=True, help="output ground-truth file")
    p.set_defaults(func=cmd_gen_traj)

    p = sub.add_parser("train", help="fit CRF weights from labeled trajectories")
    p.add_argument("--obs", required=True, help="observations CSV")
    _add_net_flags(p)
    p.add_argument("--truth", required=True, help="ground-truth file")
    p.add_argument("--reg", choices=["l1", "l2"], default=None, help="regularizer (default l2)")
    p.add_argument("--lambda", dest="lam", type=float, default=None, help="fixed lambda (default: holdout grid)")
    p.add_argument("--lambda-grid", default=None, help="holdout grid, comma-separated (default 0.01,0.1,1,10)")
    p.add_argument("--grad-tolerance", type=float, default=None, help="stop at grad inf-norm (default 1e-5)")
    p.add_argument("--max-iterations", type=int, default=None, help="iteration cap (default 500)")
    p.add_argument("--holdout-fraction", type=float, default=None, help="holdout share (default 0.2)")
    p.add_argument("--catalog", choices=sorted(CATALOGS), default="default", help="feature catalog")
    p.add_argument("--target-interval", type=float, default=None, help="downsample to this interval s")
    p.add_argument("--seed", type=int, default=None, help="holdout split seed (default 0)")
    p.add_argument("--config", default=None, help="JSON config file")
    _add_lattice_flags(p)
    _add_filter_flags(p)
    p.add_argument("--out", required=True, help="output model JSON")
    p.add_argument("--report", default=None, help="output training report JSON")
    p.add_argument("--no-figures", action="store_true", help="skip PNG figure output")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("match", help="decode routes for trajectories")
    p.add_argument("--obs", required=True, help="observations CSV")
    _add_net_flags(p)
    p.add_argument("--model", required=True, help="model JSON")
    p.add_argument("--target-interval", type=float, default=None, help="downsample to this interval s")
    p.add_argument("--jobs", type=int, default=1, help="worker processes (default 1)")
    p.add_argument("--config", default=None, help="JSON config file")
    _add_lattice_flags(p)
    p.add_argument("--out", required=True, help="output predictions JSON")
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--pred", required=True, help="predictions JSON from match")
    p.add_argument("--truth", required=True, help="ground-truth file")
    p.add_argument("--obs", default=None, help="observations CSV (required with --target-interval or --taxonomy)")
    p.add_argument("--net-nodes", default=None, help="nodes CSV (taxonomy only)")
    p.add_argument("--net-edges", default=None, help="edges CSV (taxonomy only)")
    p.add_argument("--model", default=None, help="model JSON (taxonomy only)")
    p.add_argument("--target-interval", type=float, default=None, help="downsample truth to this interval s")
    p.add_argument("--taxonomy", action="store_true", help="also categorize error causes")
    p.add_argument("--format", choices=["csv", "json"], default="csv", help="report format")
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--out", required=True, help="output report path")
    p.add_argument("--no-figures", action="store_true", help="skip PNG figure output")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("features", help="export raw feature matrices")
    p.add_argument("--obs", required=True, help="observations CSV")
    _add_net_flags(p)
    p.add_argument("--catalog", choices=sorted(CATALOGS), default="default", help="feature catalog")
    p.add_argument("--target-interval", type=float, default=None, help="downsample to this interval s")
    p.add_argument("--config", default=None, help="JSON config file")
    _add_lattice_flags(p)
    _add_filter_flags(p)
    p.add_argument("--out-points", required=True, help="output point-feature CSV")
    p.add_argument("--out-paths", required=True, help="output path-feature CSV")
    p.set_defaults(func=cmd_features)
    return parser


# ---------------------------------------------------------------------------
# commands

def cmd_gen_network(args) -> int:
    config = _load_config(args.config)
    cfg = _build_gen_cfg(args, config)
    _echo_config("gen-network", gen=cfg)
    net = gen_network(cfg, args.out_nodes, args.out_edges)
    print(f"wrote {len(net.nodes)} nodes, {len(net.edges)} directed edges")
    return 0


def cmd_gen_traj(args) -> int:
    config = _load_config(args.config)
    cfg = _build_gen_cfg(args, config)
    _echo_config("gen-traj", gen=cfg)
    net = load_network(args.net_nodes, args.net_edges)
    trajs, truths = gen_dataset(net, cfg, args.n_traj, args.route_len)
    write_observations_csv(args.out_obs, trajs)
    write_ground_truth(args.out_truth, [(t.car_id, truths[t.car_id]) for t in trajs])
    n_obs = sum(len(t) for t in trajs)
    print(f"wrote {len(trajs)} trajectories, {n_obs} observations")
    return 0


def _load_labeled_trajs(args, lattice_cfg):
    net = load_network(args.net_nodes, args.net_edges)
    trajs, report = parse_observations(args.obs)
    if report.dropped:
        print(f"cleaning dropped {sum(report.dropped.values())} rows: {report.dropped}")
    truths = load_ground_truth_all(args.truth)
    out = []
    for traj in trajs:
        truth = truths.get(traj.car_id)
        if truth is None:
            raise ValueError(f"no ground truth for trajectory {traj.car_id}")
        if len(truth.point_labels) != len(traj):
            raise ValueError(f"label count mismatch for trajectory {traj.car_id}")
        if args.target_interval is not None:
            traj, truth = downsample_with_truth(traj, truth, args.target_interval)
        out.append((traj, truth))
    return net, out


def cmd_train(args) -> int:
    config = _load_config(args.config)
    lattice_cfg = _build_lattice_cfg(args, config)
    filter_cfg = _build_filter_cfg(args, config)
    train_cfg = _build_train_cfg(args, config)
    _echo_config("train", lattice=lattice_cfg, filter=filter_cfg, train=train_cfg)
    net, labeled_trajs = _load_labeled_trajs(args, lattice_cfg)
    labeled = []
    for traj, truth in labeled_trajs:
        for piece in build_lattice(traj, net, lattice_cfg):
            labeled.append(label_lattice(piece, truth))
    catalog = CATALOGS[args.catalog](filter_cfg)
    model, report = train(labeled, net, catalog, train_cfg, lattice_cfg)
    save_model(model, args.out)
    print(
        f"trained {args.catalog}/{train_cfg.regularizer}: lambda={report.lambda_selected} "
        f"iterations={report.iterations} nonzero={report.nonzero_count} "
        f"objective={report.final_objective:.6f} converged={report.converged}"
    )
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(report.to_dict(), sort_keys=True, indent=2))
            fh.write("\n")
        if not args.no_figures:
            from .plots import plot_training_curve

            curve_path = Path(args.report).with_suffix(".curve.png")
            plot_training_curve(report.objective_history, curve_path)
            print(f"wrote figure {curve_path}")
    return 0 if report.converged else 3


def _match_one(traj, net=None, model=None, lattice_cfg=None):
    return match(traj, net, model, lattice_cfg)


def cmd_match(args) -> int:
    config = _load_config(args.config)
    model = load_model(args.model)
    lattice_cfg = (
        _build_lattice_cfg(args, config)
        if (config.get("lattice") or any(
            getattr(args, n) is not None
            for n in ("radius", "radius_max", "max_candidates", "paths_per_pair", "cap_factor", "cap_floor", "speed_cap")
        ))
        else model.lattice_cfg
    )
    _echo_config("match", lattice=lattice_cfg)
    net = load_network(args.net_nodes, args.net_edges)
    trajs, report = parse_observations(args.obs)
    if report.dropped:
        print(f"cleaning dropped {sum(report.dropped.values())} rows: {report.dropped}")
    if args.target_interval is not None:
        from .trajectory_io import downsample_even

        trajs = [downsample_even(t, args.target_interval) for t in trajs]
    if args.jobs > 1:
        with multiprocessing.Pool(args.jobs) as pool:
            results = pool.map(
                partial(_match_one, net=net, model=model, lattice_cfg=lattice_cfg), trajs
            )
    else:
        results = [match(t, net, model, lattice_cfg) for t in trajs]
    results.sort(key=lambda r: r.car_id)
    doc = {"version": 1, "results": [match_result_to_dict(r) for r in results]}
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(doc, sort_keys=True, indent=2))
        fh.write("\n")
    print(f"matched {len(results)} trajectories")
    return 0


def _results_from_pred_doc(doc) -> list[MatchResult]:
    results = []
    for entry in doc["results"]:
        gap_preds = {}
        for key, seq in entry["gap_preds"].items():
            a, b = key.split(",")
            gap_preds[(int(a), int(b))] = tuple(seq)
        results.append(
            MatchResult(
                car_id=entry["car_id"],
                n_obs=entry["n_obs"],
                point_edges=tuple(entry["point_edges"]),
                gap_preds=gap_preds,
                piece_log_scores=tuple(entry["piece_log_scores"]),
                dropped_observations=tuple(entry["dropped_observations"]),
                lattices=(),
                assignments=(),
            )
        )
    return results


def cmd_eval(args) -> int:
    _load_config(args.config)
    with open(args.pred, "r", encoding="utf-8") as fh:
        pred_doc = json.load(fh)
    results = _results_from_pred_doc(pred_doc)
    truths = load_ground_truth_all(args.truth)
    if args.target_interval is not None:
        if args.obs is None:
            raise ValueError("--target-interval for eval requires --obs to recover kept indices")
        trajs, _ = parse_observations(args.obs)
        downsampled = {}
        for traj in trajs:
            truth = truths.get(traj.car_id)
            if truth is None:
                continue
            _, dtruth = downsample_with_truth(traj, truth, args.target_interval)
            downsampled[traj.car_id] = dtruth
        truths = downsampled
    _echo_config("eval")
    report = error_rates(results, truths)
    out = Path(args.out)
    if args.format == "csv":
        cols = ["n_points", "n_point_errors", "n_paths", "n_path_errors", "n_dropped", "point_error_rate", "path_error_rate"]
        doc = report.to_dict()
        text = ",".join(cols) + "\n" + ",".join(repr(doc[c]) if isinstance(doc[c], float) else str(doc[c]) for c in cols) + "\n"
    else:
        text = json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n"
    with open(out, "w", encoding="utf-8") as fh:
        fh.write(text)
    print(
        f"point error {report.point_error_rate:.4f} ({report.n_point_errors}/{report.n_points}), "
        f"path error {report.path_error_rate:.4f} ({report.n_path_errors}/{report.n_paths})"
    )
    if not args.no_figures:
        from .plots import plot_single_rates

        fig_path = out.with_suffix(".rates.png")
        plot_single_rates(report.point_error_rate, report.path_error_rate, fig_path)
        print(f"wrote figure {fig_path}")
    if args.taxonomy:
        for flag in ("obs", "net_nodes", "net_edges", "model"):
            if getattr(args, flag) is None:
                raise ValueError("--taxonomy requires --obs, --net-nodes, --net-edges and --model")
        model = load_model(args.model)
        net = load_network(args.net_nodes, args.net_edges)
        trajs, _ = parse_observations(args.obs)
        if args.target_interval is not None:
            from .trajectory_io import downsample_even

            trajs = [downsample_even(t, args.target_interval) for t in trajs]
        full = [match(t, net, model) for t in trajs if t.car_id in truths]
        taxonomy = categorize_errors(full, truths, net, radius_m=model.lattice_cfg.radius_m)
        tax_path = out.with_suffix(".taxonomy.json")
        with open(tax_path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(taxonomy.to_dict(), sort_keys=True, indent=2))
            fh.write("\n")
        print(f"wrote taxonomy {tax_path}")
        if not args.no_figures:
            from .plots import plot_taxonomy

            fig_path = out.with_suffix(".taxonomy.png")
            plot_taxonomy(taxonomy, fig_path)
            print(f"wrote figure {fig_path}")
    return 0


def cmd_features(args) -> int:
    config = _load_config(args.config)
    lattice_cfg = _build_lattice_cfg(args, config)
    filter_cfg = _build_filter_cfg(args, config)
    _echo_config("features", lattice=lattice_cfg, filter=filter_cfg)
    net = load_network(args.net_nodes, args.net_edges)
    trajs, _ = parse_observations(args.obs)
    if args.target_interval is not None:
        from .trajectory_io import downsample_even

        trajs = [downsample_even(t, args.target_interval) for t in trajs]
    catalog = CATALOGS[args.catalog](filter_cfg)
    points_csv, paths_csv = export_feature_matrices(trajs, net, catalog, lattice_cfg)
    with open(args.out_points, "w", encoding="utf-8") as fh:
        fh.write(points_csv)
    with open(args.out_paths, "w", encoding="utf-8") as fh:
        fh.write(paths_csv)
    print(f"wrote {args.out_points} and {args.out_paths}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (NetworkFormatError, TrajectoryFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, OSError, json.JSONDecodeError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
