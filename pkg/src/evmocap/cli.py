"""Command-line surface: synth / capture / eval / overlay / ablate."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np


def _add_common(p):
    p.add_argument("--config", help="pipeline config file (TOML or JSON)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out-dir", default=".", help="output directory")


def _load_config(args):
    from .pipeline import PipelineConfig, load_config
    cfg = load_config(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def cmd_synth(args):
    from .synth import synthesize_dataset
    meta = synthesize_dataset(
        args.out_dir, seed=args.seed if args.seed is not None else 0,
        duration_s=args.duration, contrast_threshold=args.contrast,
        progress=lambda k, n: print(f"render {k}/{n}", file=sys.stderr))
    print(json.dumps(meta, indent=1, sort_keys=True))
    return 0


def _capture(data_dir, cfg, out_dir):
    from .pipeline import run_capture, save_motion, export_bvh
    from .body import load_model
    out = run_capture(data_dir, cfg, log=sys.stderr)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_motion(out_dir / "motion.json", out)
    with open(out_dir / "report.json", "w") as f:
        json.dump(out.report, f, indent=1, sort_keys=True)
    model, _, _ = load_model(Path(data_dir) / "model.json")
    export_bvh(out_dir / "motion.bvh", model, out)
    return out


def cmd_capture(args):
    cfg = _load_config(args)
    out = _capture(args.data_dir, cfg, args.out_dir)
    print(f"wrote {out.report['n_poses']} poses over "
          f"{out.report['n_batches']} batches to {args.out_dir}")
    return 0


def cmd_eval(args):
    from .body import load_model
    from .pipeline import load_motion
    from .synth import dataset_byte_size, evaluate, load_clip
    model, _, _ = load_model(Path(args.data_dir) / "model.json")
    clip = load_clip(Path(args.data_dir) / "ground_truth.json")
    out = load_motion(args.motion)
    rep = evaluate(out.timestamps_us, out.poses, clip, model,
                   stride=args.stride, data_bytes=dataset_byte_size(args.data_dir))
    print(f"{'AE mm':>8} {'STD mm':>8} {'frames':>7} {'MB/s':>7}")
    print(f"{rep.mean_ae_mm:8.1f} {rep.std_ae_mm:8.1f} "
          f"{len(rep.frame_times_us):7d} {rep.bytes_per_second / 1e6:7.2f}")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "eval.json", "w") as f:
        json.dump(rep.to_dict(), f, indent=1, sort_keys=True)
    return 0


def cmd_overlay(args):
    from .body import SkeletonPose, load_model
    from .events import load_events, render_event_overlay
    from .pipeline import load_motion
    from .refine import extract_boundary
    model, mesh, intr = load_model(Path(args.data_dir) / "model.json")
    with open(Path(args.data_dir) / "meta.json") as f:
        meta = json.load(f)
    stream = load_events(Path(args.data_dir) / "events.evb", meta["sensor_size"])
    out = load_motion(args.motion)
    i = int(np.argmin(np.abs(out.timestamps_us - args.time_us)))
    t_f = int(out.timestamps_us[i])
    bnd = extract_boundary(model, mesh, SkeletonPose.from_vector(out.poses[i]), intr)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"overlay_{t_f}.png"
    render_event_overlay(stream, (t_f - args.window_us // 2, t_f + args.window_us // 2),
                         bnd.positions, path)
    print(path)
    return 0


def cmd_ablate(args):
    from .body import load_model
    from .pipeline import PipelineConfig
    from .synth import dataset_byte_size, evaluate, format_comparison, load_clip
    model, _, _ = load_model(Path(args.data_dir) / "model.json")
    clip = load_clip(Path(args.data_dir) / "ground_truth.json")
    nbytes = dataset_byte_size(args.data_dir)
    variants = {
        "full": {},
        "w/o_refine": {"disable_refine": True},
        "w/o_batch": {"disable_batch": True, "disable_refine": True},
    }
    rows = {}
    for name, flags in variants.items():
        cfg = _load_config(args)
        for k, v in flags.items():
            setattr(cfg, k, v)
        print(f"running {name} ...", file=sys.stderr)
        safe = name.replace("/", "_")
        out = _capture(args.data_dir, cfg, Path(args.out_dir) / safe)
        rows[name] = evaluate(out.timestamps_us, out.poses, clip, model,
                              data_bytes=nbytes)
    table = format_comparison(rows)
    print(table)
    with open(Path(args.out_dir) / "ablation.json", "w") as f:
        json.dump({k: v.to_dict() for k, v in rows.items()}, f,
                  indent=1, sort_keys=True)
    return 0


def build_parser():
    ap = argparse.ArgumentParser(prog="evmocap",
                                 description="event-camera human motion capture")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic benchmark dataset")
    _add_common(p)
    p.add_argument("--duration", type=float, default=2.0, help="clip seconds")
    p.add_argument("--contrast", type=float, default=0.35, help="event threshold C")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("capture", help="run the capture pipeline on a dataset")
    _add_common(p)
    p.add_argument("data_dir")
    p.set_defaults(fn=cmd_capture)

    p = sub.add_parser("eval", help="score a motion file against ground truth")
    _add_common(p)
    p.add_argument("data_dir")
    p.add_argument("motion", help="motion.json from capture")
    p.add_argument("--stride", type=int, default=10)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("overlay", help="events + estimated boundary PNG")
    _add_common(p)
    p.add_argument("data_dir")
    p.add_argument("motion")
    p.add_argument("--time-us", type=int, required=True)
    p.add_argument("--window-us", type=int, default=10000)
    p.set_defaults(fn=cmd_overlay)

    p = sub.add_parser("ablate", help="run full / w/o_refine / w/o_batch and compare")
    _add_common(p)
    p.add_argument("data_dir")
    p.set_defaults(fn=cmd_ablate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except FileNotFoundError as e:
        print(f"error [missing-input]: {e}", file=sys.stderr)
        return 2
    except (ValueError, KeyError) as e:
        print(f"error [invalid-data]: {e}", file=sys.stderr)
        return 3
    except RuntimeError as e:
        print(f"error [runtime]: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
