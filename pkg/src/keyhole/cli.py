"""Command-line front end: ``keyhole simulate|reconstruct|evaluate|estimate-trajectory|sweep``.

Exit codes: 0 success, 2 usage or configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

from . import __version__
from .evaluation import DisambiguationSearch, disambiguated_ssim, trajectory_rmse
from .experiment import ExperimentSpec, default_forward, load_object, run_experiment
from .forward import FalloffModel, ForwardModel, GridGeometry
from .io import read_image, read_kht, write_kht, write_pgm
from .reconstruction import EMConfig, em_reconstruct, estimate_trajectory, gd_reconstruct
from .simulator import (
    CandidateGrid,
    NoiseModel,
    TrajectorySet,
    default_candidate_grid,
    simulate_sequence,
    stack_histograms,
    trajectory_from_config,
)

CONFIG_VERSION = 1
EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3
REPORT_FIELDS = ("object", "trajectory", "snr", "method", "ssim", "rtf", "trajectory_rmse")
DIAGNOSTIC_FIELDS = ("iteration", "beta", "q", "data_term", "prior_term", "inner_steps")

logger = logging.getLogger("keyhole")


class ConfigError(Exception):
    """Bad configuration; the message starts with the offending field path."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _load_json(path, what="config") -> dict:
    if path is None:
        return {}
    if not os.path.exists(path):
        raise ConfigError(f"{what}: file not found: {path}")
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{what}: invalid JSON in {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{what}: top level must be an object")
    version = data.get("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"version: unsupported config version {version!r}")
    return data


def _field(cfg: dict, path: str, build):
    """Run ``build(cfg[path])`` and tag any validation error with ``path``."""
    try:
        return build(cfg[path]) if path in cfg else build(None)
    except ConfigError:
        raise
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _check_keys(cfg: dict, allowed, prefix=""):
    for k in cfg:
        if k not in allowed and k != "version":
            raise ConfigError(f"{prefix}{k}: unknown field")


def _forward_from(d, shape, physical_size=None) -> ForwardModel:
    d = {**default_forward(), **(d or {})}
    size = float(physical_size if physical_size is not None else d["physical_size"])
    geometry = GridGeometry(tuple(shape), size / max(shape), tuple(d.get("plane_offset", (0.0, 0.0, 0.0))))
    return ForwardModel(
        geometry, FalloffModel.from_dict(d["falloff"]), int(d["n_bins"]),
        float(d["bin_width"]), float(d["t0"]), float(d["gain"]),
    )


def _sidecar_path(path) -> str:
    root, _ = os.path.splitext(path)
    return root + ".json"


def _write_json(path, data):
    with open(path, "w") as fh:
        json.dump(data, fh, indent=1, sort_keys=True)
        fh.write("\n")


# -- subcommands ---------------------------------------------------------------


def cmd_simulate(args) -> int:
    cfg = _load_json(args.config)
    _check_keys(cfg, {"object", "trajectory", "noise", "forward", "physical_size", "seed"})
    if "object" not in cfg:
        raise ConfigError("object: required")
    if "trajectory" not in cfg:
        raise ConfigError("trajectory: required")
    size = float(cfg.get("physical_size", 0.5))
    obj = cfg["object"]
    if not obj.startswith("glyph:") and not os.path.exists(obj):
        raise ConfigError(f"object: image not found: {obj}")
    albedo = _field(cfg, "object", lambda v: load_object(v, size))
    traj = _field(cfg, "trajectory", trajectory_from_config)
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    noise_cfg = dict(cfg.get("noise", {"kind": "none"}))
    noise_cfg.setdefault("seed", seed)
    if args.seed is not None:
        noise_cfg["seed"] = args.seed
    noise = _field({"noise": noise_cfg}, "noise", lambda v: NoiseModel(**v))
    model = _field(cfg, "forward", lambda v: _forward_from(v, albedo.shape, size))

    y = stack_histograms(simulate_sequence(
        albedo, traj, model.falloff, model.n_bins, noise,
        bin_width=model.bin_width, t0=model.t0, gain=model.gain, n_jobs=args.threads,
    ))
    os.makedirs(args.out, exist_ok=True)
    meas = os.path.join(args.out, "measurements.kht")
    write_kht(meas, y)
    _write_json(_sidecar_path(meas), {
        "version": CONFIG_VERSION,
        "trajectory": traj.to_dict(),
        "forward": {**model.to_dict(), "physical_size": size},
        "noise": {"kind": noise.kind, "target_snr": noise.target_snr, "seed": noise.seed},
        "object": obj,
    })
    write_kht(os.path.join(args.out, "object.kht"), albedo.values)
    write_pgm(os.path.join(args.out, "object.pgm"), albedo.values)
    write_pgm(os.path.join(args.out, "measurements.pgm"), y)
    print(f"wrote {meas} ({y.shape[0]} x {y.shape[1]})")
    return EXIT_OK


def _recon_inputs(args):
    if not os.path.exists(args.measurements):
        raise ConfigError(f"measurements: file not found: {args.measurements}")
    y = read_kht(args.measurements).astype(float)
    if y.ndim != 2:
        raise ConfigError(f"measurements: expected a rank-2 L x T tensor, got rank {y.ndim}")
    side_path = args.sidecar or _sidecar_path(args.measurements)
    sidecar = _load_json(side_path, "sidecar") if os.path.exists(side_path) else {}
    cfg = _load_json(args.config)
    _check_keys(cfg, {"em", "candidate_grid", "gd_iterations", "forward"})
    config = _field(cfg, "em", lambda v: EMConfig.from_dict(v or {}))
    if args.seed is not None:
        config = EMConfig.from_dict({**config.to_dict(), "seed": args.seed})
    fwd = {**sidecar.get("forward", {}), **cfg.get("forward", {})}
    fwd.pop("shape", None)
    fwd.pop("pixel_pitch", None)
    model = _field({"forward": fwd}, "forward", lambda v: _forward_from(v, config.recon_shape))
    if model.n_bins != y.shape[1]:
        raise ConfigError(f"forward.n_bins: {model.n_bins} does not match measurement bins {y.shape[1]}")
    traj = TrajectorySet.from_dict(sidecar["trajectory"]) if "trajectory" in sidecar else None
    return y, cfg, config, model, traj


def cmd_reconstruct(args) -> int:
    y, cfg, config, model, traj = _recon_inputs(args)
    os.makedirs(args.out, exist_ok=True)
    method = args.method or "em"
    if method == "gd":
        if traj is None:
            raise ConfigError("trajectory: gd needs known poses (sidecar with a trajectory)")
        if len(traj) != y.shape[0]:
            raise ConfigError(f"trajectory: {len(traj)} poses for {y.shape[0]} measurements")
        iters = _field(cfg, "gd_iterations", lambda v: int(v) if v is not None else 200)
        albedo, trace = gd_reconstruct(y, traj.poses, model, config, iters, return_trace=True, n_jobs=args.threads)
        rows = [{"iteration": i, "beta": "", "q": t, "data_term": "", "prior_term": "", "inner_steps": 1}
                for i, t in enumerate(trace)]
    else:
        if "candidate_grid" in cfg:
            grid = _field(cfg, "candidate_grid", CandidateGrid.from_dict)
        elif traj is not None:
            grid = default_candidate_grid(traj.plane)
        else:
            raise ConfigError("candidate_grid: em needs a candidate grid (config or sidecar plane)")
        result = em_reconstruct(y, grid, model, config, n_jobs=args.threads)
        albedo = result.albedo
        rows = result.diagnostics
        write_kht(os.path.join(args.out, "weights.kht"), result.weights)
        _write_json(os.path.join(args.out, "candidates.json"), {"version": CONFIG_VERSION, **grid.to_dict()})
    write_kht(os.path.join(args.out, "albedo.kht"), albedo.values)
    write_pgm(os.path.join(args.out, "albedo.pgm"), albedo.values)
    with open(os.path.join(args.out, "diagnostics.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=DIAGNOSTIC_FIELDS, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    _write_json(os.path.join(args.out, "run.json"), {
        "version": CONFIG_VERSION, "method": method, "config": config.to_dict(), "forward": model.to_dict(),
    })
    print(f"wrote {os.path.join(args.out, 'albedo.kht')}")
    return EXIT_OK


def cmd_estimate_trajectory(args) -> int:
    if not os.path.exists(args.weights):
        raise ConfigError(f"weights: file not found: {args.weights}")
    cand_path = args.candidates or os.path.join(os.path.dirname(args.weights), "candidates.json")
    grid = _field({"candidates": _load_json(cand_path, "candidates")}, "candidates",
                  lambda v: CandidateGrid.from_dict({k: x for k, x in v.items() if k != "version"}))
    weights = read_kht(args.weights).astype(float)
    if weights.ndim != 2 or weights.shape[1] != len(grid):
        raise ConfigError(f"weights: shape {weights.shape} does not match {len(grid)} candidates")
    poses = estimate_trajectory(weights, grid)
    traj = TrajectorySet(tuple(poses), grid.plane, "estimated")
    out = args.out or os.path.join(os.path.dirname(args.weights), "trajectory.json")
    _write_json(out, {"version": CONFIG_VERSION, **traj.to_dict()})
    print(f"wrote {out} ({len(poses)} poses)")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    for name in ("truth", "recon"):
        if not os.path.exists(getattr(args, name)):
            raise ConfigError(f"{name}: file not found: {getattr(args, name)}")
    truth, recon = read_image(args.truth), read_image(args.recon)
    if truth.shape != recon.shape:
        raise ConfigError(f"recon: shape {recon.shape} differs from truth {truth.shape}")
    cfg = _load_json(args.config)
    _check_keys(cfg, {"search", "plane"})
    plane = cfg.get("plane", args.plane)
    search = _field(cfg, "search", lambda v: DisambiguationSearch.for_plane(plane, **(v or {})))
    score, rtf = disambiguated_ssim(truth, recon, search)
    rmse = ""
    if args.estimated and args.true_trajectory:
        est = TrajectorySet.from_dict(_load_json(args.estimated, "estimated"))
        true = _load_json(args.true_trajectory, "true_trajectory")
        true = TrajectorySet.from_dict(true.get("trajectory", true))
        rmse = "%.6f" % trajectory_rmse(est.poses, true.poses, allow_global_shift=True)
    row = {
        "object": args.object_id or os.path.basename(args.truth), "trajectory": args.trajectory_id or "",
        "snr": args.snr if args.snr is not None else "", "method": args.method or "",
        "ssim": "%.6f" % score, "rtf": " ".join(str(v) for v in rtf), "trajectory_rmse": rmse,
    }
    out = args.out or "report.csv"
    fresh = not os.path.exists(out) or os.path.getsize(out) == 0
    with open(out, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_FIELDS, lineterminator="\n")
        if fresh:
            w.writeheader()
        w.writerow(row)
    print(f"disambiguated SSIM {score:.4f} rtf {tuple(rtf)}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load_json(args.config)
    if args.out:
        cfg["output_dir"] = args.out
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.method:
        cfg["methods"] = [args.method]
    try:
        spec = ExperimentSpec.from_dict(cfg)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    table = run_experiment(spec, threads=args.threads)
    for row in table:
        print(",".join(row))
    return EXIT_OK


# -- entry point -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="keyhole", description="Keyhole imaging: simulate, reconstruct and evaluate.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out_help):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--out", help=out_help)
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--threads", type=int, default=1, help="worker threads (default 1)")
        sp.add_argument("--method", choices=("gd", "em"), help="reconstruction method")

    sp = sub.add_parser("simulate", help="render a noisy measurement sequence")
    common(sp, "output directory")
    sp.set_defaults(func=cmd_simulate, out_required=True)

    sp = sub.add_parser("reconstruct", help="reconstruct an albedo (gd: known poses, em: unknown)")
    sp.add_argument("measurements", help="L x T KHT1 tensor")
    sp.add_argument("--sidecar", help="pose/forward JSON (default: next to the measurements)")
    common(sp, "output directory")
    sp.set_defaults(func=cmd_reconstruct, out_required=True)

    sp = sub.add_parser("estimate-trajectory", help="most probable pose per measurement from EM weights")
    sp.add_argument("weights", help="L x K KHT1 weights written by reconstruct --method em")
    sp.add_argument("--candidates", help="candidate grid JSON (default: next to the weights)")
    common(sp, "output trajectory JSON")
    sp.set_defaults(func=cmd_estimate_trajectory)

    sp = sub.add_parser("evaluate", help="disambiguated SSIM of a reconstruction, appended to a CSV report")
    sp.add_argument("truth", help="ground-truth image (PGM or KHT1)")
    sp.add_argument("recon", help="reconstructed image (PGM or KHT1)")
    sp.add_argument("--plane", default="constant_z", help="trajectory plane; rotations are searched only for constant_z")
    sp.add_argument("--estimated", help="estimated trajectory JSON")
    sp.add_argument("--true-trajectory", help="true trajectory JSON or measurement sidecar")
    sp.add_argument("--object-id")
    sp.add_argument("--trajectory-id")
    sp.add_argument("--snr", type=float)
    common(sp, "report CSV (appended; default report.csv)")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("sweep", help="run a simulate/reconstruct/evaluate sweep")
    common(sp, "output directory (overrides output_dir)")
    sp.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if getattr(args, "out_required", False) and not args.out:
            raise ConfigError("--out: required for this command")
        if args.threads < 1:
            raise ConfigError("--threads: must be >= 1")
        return args.func(args)
    except ConfigError as exc:
        print(f"keyhole: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        logger.debug("runtime failure", exc_info=True)
        print(f"keyhole: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
