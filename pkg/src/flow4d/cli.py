"""Batch command line: synthesis, segmentation, reconstruction,
evaluation, and full pipeline runs.

Subcommands::

    flow4d synth       --out DIR [--config JSON] [--seed N]
    flow4d segment     --bundle DIR --out DIR [--config JSON] [overrides]
    flow4d reconstruct --bundle DIR --mask DIR --out DIR [--config JSON] [overrides]
    flow4d evaluate    --out DIR [--pred-mask DIR --true-mask DIR]
                       [--pred-velocity DIR --true-velocity DIR --eval-mask DIR]
    flow4d pipeline    --out DIR (--config JSON | --corpus DIR) [--seed N] [--threads N]

Every command writes a resolved-config snapshot into its output directory,
never mutates its inputs, and exits 0 on success (including flagged
non-convergence) and nonzero on validation or input errors.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import io as bundle_io
from .config import ConfigError, PipelineConfig, apply_overrides
from .metrics import divergence_residuals, overlap_scores, surface_distance, velocity_agreement
from .reconstruction import ReconstructionError, reconstruct
from .segmentation import SegmentationError, segment
from .synth import GeometryConfig, SweepConfig, generate_sweeps, load_manifest
from .volume import BundleFormatError, raw_velocity

DEFAULT_GEOMETRY = GeometryConfig(
    kind="vortex", dims=(24, 24, 24), spacing=(1.0, 1.0, 1.0), n_frames=13)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(int(value))
    return str(value)


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _load_config(args) -> PipelineConfig:
    config = PipelineConfig.load(args.config) if getattr(args, "config", None) \
        else PipelineConfig()
    overrides = {}
    for name in ("window", "k", "r", "tv_iterations", "max_iterations",
                 "alpha", "tau", "eps", "solver_tol", "max_outer_iterations",
                 "threads", "seed"):
        if hasattr(args, name):
            overrides[name] = getattr(args, name)
    if getattr(args, "ranks", None):
        overrides["ranks"] = tuple(int(r) for r in args.ranks.split(","))
    return apply_overrides(config, **overrides)


def _snapshot(config: PipelineConfig, out_dir: Path, extra: dict | None = None) -> None:
    data = config.to_dict()
    if extra:
        data["run"] = extra
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "resolved_config.json", "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(args) -> int:
    config = _load_config(args)
    sweep = config.sweep or SweepConfig(geometry=DEFAULT_GEOMETRY)
    if args.seed is not None:
        sweep = dataclasses.replace(sweep, base_seed=int(args.seed))
    config = dataclasses.replace(config, sweep=sweep)
    out_dir = Path(args.out)
    _snapshot(config, out_dir, {"command": "synth"})
    records = generate_sweeps(sweep, out_dir)
    print(f"wrote {len(records)} cases under {out_dir}")
    return 0


def _segmentation_log_rows(result):
    rows = []
    for it in result.history:
        rows.append([it.iteration, it.threshold_stat, it.flow_voxels,
                     it.tv_objective, it.fusion_converged,
                     result.converged and it.iteration == result.iterations])
    return rows


def _write_segmentation_outputs(result, out_dir: Path) -> None:
    bundle_io.save_mask(result.static_mask, out_dir / "static_mask")
    bundle_io.save_mask(result.phase_masks, out_dir / "phase_masks")
    _write_csv(out_dir / "segmentation_log.csv",
               ["iteration", "threshold_stat", "flow_voxels", "tv_objective",
                "fusion_converged", "converged"],
               _segmentation_log_rows(result))


def cmd_segment(args) -> int:
    config = _load_config(args)
    bundle = bundle_io.load_bundle(args.bundle)
    out_dir = Path(args.out)
    _snapshot(config, out_dir, {"command": "segment", "bundle": str(args.bundle)})
    result = segment(bundle, config.segmentation)
    _write_segmentation_outputs(result, out_dir)
    status = "converged" if result.converged else "non-converged"
    print(f"segmentation {status} after {result.iterations} iterations; "
          f"static mask has {int(result.static_mask.labels.sum())} voxels")
    return 0


def _recon_log_rows(result):
    return [[s.iteration, s.energy, s.stop_ratio, s.uod_flags,
             s.n_modes_selected, s.solver_residual, s.solver_converged,
             s.converged] for s in result.history]


def _write_recon_outputs(result, out_dir: Path) -> None:
    bundle_io.save_velocity(result.velocity, out_dir / "velocity")
    _write_csv(out_dir / "recon_log.csv",
               ["iteration", "energy", "stop_ratio", "uod_flags", "n_modes",
                "solver_residual", "solver_converged", "converged"],
               _recon_log_rows(result))


def cmd_reconstruct(args) -> int:
    config = _load_config(args)
    bundle = bundle_io.load_bundle(args.bundle)
    mask = bundle_io.load_mask(args.mask)
    out_dir = Path(args.out)
    _snapshot(config, out_dir, {"command": "reconstruct", "bundle": str(args.bundle),
                                "mask": str(args.mask)})
    result = reconstruct(bundle, mask, config.reconstruction)
    _write_recon_outputs(result, out_dir)
    status = "converged" if result.converged else "non-converged"
    print(f"reconstruction {status} after {result.iterations} iterations")
    return 0


def cmd_evaluate(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    wrote = []
    if args.pred_mask and args.true_mask:
        pred = bundle_io.load_mask(args.pred_mask)
        true = bundle_io.load_mask(args.true_mask)
        pred3 = pred.labels if pred.is_static else pred.labels.any(axis=3)
        true3 = true.labels if true.is_static else true.labels.any(axis=3)
        scores = overlap_scores(true3, pred3)
        surf = surface_distance(pred3, true3, pred.meta.spacing, symmetric=True)
        _write_csv(out_dir / "overlap.csv",
                   ["accuracy", "precision", "recall", "f1", "dice", "jaccard",
                    "mean_surface_distance", "q25", "q50", "q75"],
                   [[scores.accuracy, scores.precision, scores.recall, scores.f1,
                     scores.dice, scores.jaccard, surf.mean, *surf.quartiles]])
        wrote.append("overlap.csv")
    if args.pred_velocity and args.true_velocity:
        if not (args.eval_mask or args.true_mask):
            raise ConfigError("velocity evaluation needs --eval-mask or --true-mask")
        pred_vel = bundle_io.load_velocity(args.pred_velocity)
        true_vel = bundle_io.load_velocity(args.true_velocity)
        mask = bundle_io.load_mask(args.eval_mask or args.true_mask)
        agree = velocity_agreement(pred_vel, true_vel, mask)
        div = divergence_residuals(pred_vel, mask)
        _write_csv(out_dir / "velocity_metrics.csv",
                   ["rmse_cm_s", "ssim", "cosine", "divergence_mean",
                    "divergence_iqr"],
                   [[agree.rmse, agree.ssim, agree.cosine, div.mean, div.iqr]])
        wrote.append("velocity_metrics.csv")
    if not wrote:
        raise ConfigError("nothing to evaluate: provide mask and/or velocity pairs")
    print(f"wrote {', '.join(wrote)} under {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# full pipeline

def _run_case(case: dict, corpus_dir: Path, out_dir: Path, config: PipelineConfig):
    name = case["name"]
    case_dir = Path(case.get("path") or corpus_dir / name)
    case_out = out_dir / "cases" / name
    case_out.mkdir(parents=True, exist_ok=True)

    bundle = bundle_io.load_bundle(case_dir / "bundle")
    truth_velocity = bundle_io.load_velocity(case_dir / "truth_velocity")
    truth_mask = bundle_io.load_mask(case_dir / "truth_mask")

    t0 = time.perf_counter()
    seg = segment(bundle, config.segmentation)
    t_seg = time.perf_counter() - t0
    _write_segmentation_outputs(seg, case_out)

    t0 = time.perf_counter()
    recon = reconstruct(bundle, seg.static_mask, config.reconstruction)
    t_rec = time.perf_counter() - t0
    _write_recon_outputs(recon, case_out)
    bundle_io.export_vtk(recon.velocity, seg.static_mask, 0, case_out / "velocity.vtk")

    scores = overlap_scores(truth_mask.labels, seg.static_mask.labels)
    surf = surface_distance(seg.static_mask.labels, truth_mask.labels,
                            bundle.meta.spacing, symmetric=True)
    raw = raw_velocity(bundle)
    agree_raw = velocity_agreement(raw, truth_velocity, truth_mask)
    agree_rec = velocity_agreement(recon.velocity, truth_velocity, truth_mask)
    div_raw = divergence_residuals(raw, seg.static_mask)
    div_rec = divergence_residuals(recon.velocity, seg.static_mask)

    meta = {"snr": case.get("snr"), "venc_fraction": case.get("venc_fraction")}
    return {
        "name": name,
        "segmentation_row": [name, meta["snr"], meta["venc_fraction"],
                             scores.accuracy, scores.precision, scores.recall,
                             scores.f1, scores.dice, scores.jaccard, surf.mean,
                             *surf.quartiles, seg.iterations, seg.converged],
        "velocity_rows": [
            [name, meta["snr"], meta["venc_fraction"], "raw",
             agree_raw.rmse, agree_raw.ssim, agree_raw.cosine],
            [name, meta["snr"], meta["venc_fraction"], "reconstructed",
             agree_rec.rmse, agree_rec.ssim, agree_rec.cosine],
        ],
        "divergence_row": [name, meta["snr"], meta["venc_fraction"],
                           div_raw.mean, div_rec.mean,
                           div_rec.mean / div_raw.mean if div_raw.mean > 0 else None,
                           div_raw.iqr, div_rec.iqr],
        "timing_rows": [
            [name, "segmentation", t_seg, seg.iterations],
            [name, "reconstruction", t_rec, recon.iterations],
        ],
    }


def cmd_pipeline(args) -> int:
    config = _load_config(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.corpus:
        corpus_dir = Path(args.corpus)
        cases = [dict(row) for row in load_manifest(corpus_dir)]
    else:
        if config.sweep is None:
            raise ConfigError("pipeline needs --corpus or a config with a sweep section")
        sweep = config.sweep
        if args.seed is not None:
            sweep = dataclasses.replace(sweep, base_seed=int(args.seed))
            config = dataclasses.replace(config, sweep=sweep)
        corpus_dir = out_dir / "corpus"
        records = generate_sweeps(sweep, corpus_dir)
        cases = [dataclasses.asdict(rec) for rec in records]
    for case in cases:
        for key in ("snr", "venc_fraction"):
            if case.get(key) is not None:
                case[key] = float(case[key])
    _snapshot(config, out_dir, {"command": "pipeline", "corpus": str(corpus_dir),
                                "cases": [c["name"] for c in cases]})

    threads = args.threads if args.threads else config.resolved_threads()
    if threads > 1 and len(cases) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(
                lambda c: _run_case(c, corpus_dir, out_dir, config), cases))
    else:
        results = [_run_case(c, corpus_dir, out_dir, config) for c in cases]
    results.sort(key=lambda r: r["name"])

    report = out_dir / "report"
    _write_csv(report / "segmentation_metrics.csv",
               ["case", "snr", "venc_fraction", "accuracy", "precision",
                "recall", "f1", "dice", "jaccard", "mean_surface_distance",
                "q25", "q50", "q75", "iterations", "converged"],
               [r["segmentation_row"] for r in results])
    _write_csv(report / "velocity_metrics.csv",
               ["case", "snr", "venc_fraction", "field", "rmse_cm_s", "ssim",
                "cosine"],
               [row for r in results for row in r["velocity_rows"]])
    _write_csv(report / "divergence_metrics.csv",
               ["case", "snr", "venc_fraction", "raw_mean", "recon_mean",
                "ratio", "raw_iqr", "recon_iqr"],
               [r["divergence_row"] for r in results])
    _write_csv(report / "timings.csv",
               ["case", "stage", "seconds", "iterations"],
               [row for r in results for row in r["timing_rows"]])
    print(f"pipeline finished: {len(results)} cases, report under {report}")
    return 0


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flow4d",
        description="Synthetic 4D flow generation, vessel segmentation, "
                    "velocity reconstruction, and evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="JSON configuration file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=None)

    p = sub.add_parser("synth", help="generate the SNR/venc sweep corpus")
    add_common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("segment", help="segment one bundle")
    add_common(p)
    p.add_argument("--bundle", required=True)
    p.add_argument("--sauvola-window", dest="window", type=int, default=None)
    p.add_argument("--sauvola-k", dest="k", type=float, default=None)
    p.add_argument("--sauvola-r", dest="r", type=float, default=None)
    p.add_argument("--ranks", default=None, help="Tucker ranks rx,ry,rz,rt")
    p.add_argument("--tv-iterations", dest="tv_iterations", type=int, default=None)
    p.add_argument("--max-iterations", dest="max_iterations", type=int, default=None)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("reconstruct", help="reconstruct velocities in a mask")
    add_common(p)
    p.add_argument("--bundle", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--eps", type=float, default=None)
    p.add_argument("--solver-tol", dest="solver_tol", type=float, default=None)
    p.add_argument("--max-outer-iterations", dest="max_outer_iterations",
                   type=int, default=None)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("evaluate", help="compute metrics for saved outputs")
    p.add_argument("--out", required=True)
    p.add_argument("--pred-mask")
    p.add_argument("--true-mask")
    p.add_argument("--pred-velocity")
    p.add_argument("--true-velocity")
    p.add_argument("--eval-mask")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("pipeline", help="synth (optional) + segment + "
                                        "reconstruct + evaluate + report")
    add_common(p)
    p.add_argument("--corpus", help="existing corpus directory (skips synthesis)")
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, BundleFormatError, ValueError,
            SegmentationError, ReconstructionError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
