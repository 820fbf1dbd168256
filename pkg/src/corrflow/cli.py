"""``corrflow`` command line: synth, train, propagate, evaluate, verify.

Exit codes: 0 success, 1 usage or input error, 2 non-finite loss during
training, 3 verification failure.  ``CORRFLOW_THREADS`` caps the BLAS
thread pool.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import config as runconfig
from . import fileio
from .checkpoint import Checkpoint, CheckpointError, encoder_config_from, load_checkpoint, save_checkpoint
from .metrics import davis_aggregate, pck_scores, score_sequence
from .propagation import propagate_video
from .synthetic import SyntheticSpec, write_dataset
from .training import NonFiniteLoss, TrainingData, train

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_VERIFY = 0, 1, 2, 3

log = logging.getLogger("corrflow")


class InputError(Exception):
    pass


def _thread_limit():
    n = os.environ.get("CORRFLOW_THREADS")
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    try:
        return threadpool_limits(limits=int(n))
    except ValueError:
        raise InputError(f"CORRFLOW_THREADS must be an integer, got {n!r}") from None


# ---------------------------------------------------------------------------
# synth


def _parse_velocities(text: str | None):
    if not text:
        return None
    try:
        return tuple(tuple(int(c) for c in v.split(",")) for v in text.split(";"))
    except ValueError:
        raise InputError(f"--velocities expects 'dy,dx;dy,dx', got {text!r}") from None


def cmd_synth(args) -> int:
    try:
        spec = SyntheticSpec(
            height=args.height,
            width=args.width,
            num_patches=args.num_patches,
            patch_size=args.patch_size,
            max_speed=args.max_speed,
            velocities=_parse_velocities(args.velocities),
            clip_length=args.clip_length,
            M=args.M,
        )
    except ValueError as e:
        raise InputError(str(e)) from None
    write_dataset(spec, Path(args.out), args.num_clips, args.seed)
    print(f"wrote {args.num_clips} clips (seed {args.seed}) to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def cmd_train(args, overrides: list[str]) -> int:
    try:
        cfg = runconfig.load(args.config, overrides)
    except (runconfig.ConfigError, OSError) as e:
        raise InputError(str(e)) from None
    if not cfg.data or not Path(cfg.data).is_dir():
        raise InputError(f"dataset directory not found: {cfg.data!r} (set --data)")
    try:
        seqs = fileio.read_dataset(Path(cfg.data))
    except (FileNotFoundError, fileio.FormatError) as e:
        raise InputError(str(e)) from None
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.echo())
    tcfg = cfg.to_train_config()

    t0 = time.perf_counter()
    try:
        data = TrainingData.fit([s.frames for s in seqs], tcfg.palette_sample, tcfg.seed)
    except ValueError as e:
        raise InputError(str(e)) from None
    snapshot = cfg.as_strings()
    try:
        result = train(data, tcfg, log_path=out / "log.jsonl", checkpoint_dir=out, config_snapshot=snapshot)
    except NonFiniteLoss as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    final = out / "final.cflw"
    save_checkpoint(final, Checkpoint(snapshot, result.palette, result.params, result.opt_state, tcfg.total_steps))
    last = result.reports[-1] if result.reports else None
    if last:
        print(f"step {last.step}: L={last.total:.4f} p={last.p:.3f} lr={last.lr:.3g}")
    print(f"trained {tcfg.total_steps} steps on {len(seqs)} sequences in {time.perf_counter() - t0:.1f}s")
    print(f"checkpoint: {final}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# propagate


def _load_ckpt(path: str) -> Checkpoint:
    try:
        return load_checkpoint(Path(path))
    except FileNotFoundError:
        raise InputError(f"checkpoint not found: {path}") from None
    except CheckpointError as e:
        raise InputError(f"{path}: {e}") from None


def cmd_propagate(args) -> int:
    ckpt = _load_ckpt(args.checkpoint)
    try:
        frames = fileio.read_frames(Path(args.frames))
    except (FileNotFoundError, fileio.FormatError, ValueError) as e:
        raise InputError(str(e)) from None
    M = args.M if args.M is not None else int(ckpt.config.get("M", 6))
    tau = args.tau if args.tau is not None else float(ckpt.config.get("tau", 1.0))
    normalize = ckpt.config.get("l2_normalize", "false") == "true"
    out = Path(args.out)
    H, W = frames.shape[1:3]
    try:
        if args.mode == "mask":
            ann = fileio.read_mask(Path(args.annotation))
            if ann.shape != (H, W):
                raise InputError(f"annotation extents {ann.shape[0]}x{ann.shape[1]} vs frames {H}x{W}")
            preds = propagate_video(frames, ann, ckpt.params, M, "mask", tau, normalize)
            for t, m in enumerate(preds):
                fileio.write_mask(out / f"{t:05d}.pgm", m)
        else:
            recs = [r for r in fileio.read_keypoints(Path(args.annotation)) if r.frame == 0]
            if not recs:
                raise InputError(f"{args.annotation}: no frame-0 keypoints")
            ann = fileio.keypoints_to_array(recs, 1)[0]
            preds = propagate_video(frames, ann, ckpt.params, M, "keypoint", tau, normalize)
            fileio.write_keypoints(out / "keypoints.csv", fileio.array_to_keypoints(np.stack(preds)))
    except (FileNotFoundError, fileio.FormatError) as e:
        raise InputError(str(e)) from None
    except ValueError as e:
        raise InputError(str(e)) from None
    print(f"propagated {len(preds)} frames ({args.mode}) to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate


def _mask_dir(path: Path) -> Path:
    return path / "masks" if (path / "masks").is_dir() else path


def _keypoint_file(path: Path) -> Path:
    return path / "keypoints.csv" if path.is_dir() else path


def _write_records(path: Path, records: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))


def cmd_evaluate(args) -> int:
    pred_root, gt_root = Path(args.pred), Path(args.gt)
    records: list[dict] = []
    try:
        if args.mode == "mask":
            preds = fileio.read_mask_sequence(_mask_dir(pred_root))
            gts = fileio.read_mask_sequence(_mask_dir(gt_root))
            if len(preds) != len(gts):
                raise InputError(f"frame count mismatch: {len(preds)} predicted vs {len(gts)} ground truth")
            if preds.shape != gts.shape:
                raise InputError(f"extent mismatch: predicted {preds.shape[1:]} vs ground truth {gts.shape[1:]}")
            J, F = score_sequence(preds, gts, args.tolerance)
            score = davis_aggregate(J, F)
            for obj, (j, f) in enumerate(zip(score.per_object_j, score.per_object_f), 1):
                records.append({"object": obj, "J": j.tolist(), "F": f.tolist(), "J_mean": float(j.mean()), "F_mean": float(f.mean())})
            records.append({"summary": True, "JF_mean": score.jf_mean, "J_mean": score.j_mean, "J_recall": score.j_recall,
                            "F_mean": score.f_mean, "F_recall": score.f_recall})
        else:
            pk = fileio.read_keypoints(_keypoint_file(pred_root))
            gk = fileio.read_keypoints(_keypoint_file(gt_root))
            gt = fileio.keypoints_to_array(gk)
            pred = fileio.keypoints_to_array(pk, num_keypoints=gt.shape[1])
            if len(pred) != len(gt):
                raise InputError(f"frame count mismatch: {len(pred)} predicted vs {len(gt)} ground truth")
            alphas = tuple(float(a) for a in args.alphas.split(","))
            score = pck_scores(pred[1:, :, :2], gt[1:], alphas)
            records.append({"summary": True, "PCK_instance": {str(a): v for a, v in score.instance.items()},
                            "PCK_max": {str(a): v for a, v in score.max.items()}})
    except (FileNotFoundError, fileio.FormatError) as e:
        raise InputError(str(e)) from None
    print(score.table())
    rec_path = Path(args.records) if args.records else (pred_root if pred_root.is_dir() else pred_root.parent) / "scores.jsonl"
    _write_records(rec_path, records)
    print(f"records: {rec_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# verify


def cmd_verify(args) -> int:
    from .verify import resource_table, run_suite

    params = _load_ckpt(args.checkpoint).params if args.checkpoint else None
    results = run_suite(params, args.seed)
    for r in results:
        print(r.line())
    print()
    print(resource_table())
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"\n{len(failed)} check(s) failed: " + "; ".join(failed))
        return EXIT_VERIFY
    print(f"\nall {len(results)} checks passed")
    return EXIT_OK


# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_INPUT)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="corrflow", description="Self-supervised correspondence flow: train, propagate, evaluate.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic translating-texture dataset")
    defaults = SyntheticSpec()
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--num_clips", type=int, default=100, help="clips to write (default 100)")
    s.add_argument("--seed", type=int, default=0, help="dataset seed (default 0)")
    s.add_argument("--height", type=int, default=defaults.height, help=f"frame height (default {defaults.height})")
    s.add_argument("--width", type=int, default=defaults.width, help=f"frame width (default {defaults.width})")
    s.add_argument("--num_patches", type=int, default=defaults.num_patches, help=f"moving patches (default {defaults.num_patches})")
    s.add_argument("--patch_size", type=int, default=defaults.patch_size, help=f"patch side in px (default {defaults.patch_size})")
    s.add_argument("--max_speed", type=int, default=defaults.max_speed, help=f"max px/frame per axis (default {defaults.max_speed})")
    s.add_argument("--velocities", help="explicit per-patch velocities 'dy,dx;dy,dx'")
    s.add_argument("--clip_length", type=int, default=defaults.clip_length, help=f"frames per clip (default {defaults.clip_length})")
    s.add_argument("--M", type=int, default=defaults.M, help=f"disparity bound in cells; speeds must be <= 4*M (default {defaults.M})")

    t = sub.add_parser(
        "train",
        help="train the encoder",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        description="Train from a key=value config file plus --key value overrides.",
        epilog="config keys:\n" + runconfig.help_text(),
    )
    t.add_argument("--config", help="key=value config file")

    pr = sub.add_parser("propagate", help="propagate a first-frame annotation through a video")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--frames", required=True, help="directory of numbered frames")
    pr.add_argument("--annotation", required=True, help="first-frame mask (PGM/PNG) or keypoints.csv")
    pr.add_argument("--mode", choices=("mask", "keypoint"), default="mask")
    pr.add_argument("--out", required=True)
    pr.add_argument("--M", type=int, help="disparity bound (default: checkpoint value)")
    pr.add_argument("--tau", type=float, help="affinity temperature (default: checkpoint value)")

    e = sub.add_parser("evaluate", help="score predictions against ground truth")
    e.add_argument("--pred", required=True, help="predicted masks directory or keypoints.csv")
    e.add_argument("--gt", required=True, help="ground-truth masks directory (or sequence) or keypoints.csv")
    e.add_argument("--mode", choices=("mask", "keypoint"), default="mask")
    e.add_argument("--alphas", default="0.1,0.2", help="PCK thresholds (default 0.1,0.2)")
    e.add_argument("--tolerance", type=int, help="boundary tolerance in px (default 0.8%% of the diagonal)")
    e.add_argument("--records", help="JSONL output path (default <pred>/scores.jsonl)")

    v = sub.add_parser("verify", help="run the built-in gradient and attention checks")
    v.add_argument("--checkpoint", help="also check this checkpoint's tensors")
    v.add_argument("--seed", type=int, default=0)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    if extra and args.command != "train":
        parser.error(f"unrecognized arguments: {' '.join(extra)}")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            if args.command == "synth":
                return cmd_synth(args)
            if args.command == "train":
                return cmd_train(args, extra)
            if args.command == "propagate":
                return cmd_propagate(args)
            if args.command == "evaluate":
                return cmd_evaluate(args)
            return cmd_verify(args)
    except InputError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
