"""Command-line entry point: synth, train, track, eval, overlay.

Every run writes a resolved-config snapshot beside its outputs. Exit codes:
0 success, 1 usage/config/file errors, 2 runtime failures.
"""

from __future__ import annotations

import argparse
import colorsys
import sys
from pathlib import Path

import numpy as np

from .data import (
    ParseError,
    list_sequences,
    load_image,
    parse_gt,
    parse_results,
    save_image,
    synth_dataset,
    write_results,
)
from .metrics import SequenceEval, UndefinedMetric, evaluate_sequences
from .model import CheckpointError, load_checkpoint
from .training import (
    ConfigError,
    RunConfig,
    SequenceData,
    load_run_config,
    load_sequences,
    run_inference,
    save_run_config,
    train_stage1,
    train_stage2,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); we map usage errors to 1
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="querytrack", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic train/eval dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train-sequences", type=int, default=12)
    p.add_argument("--eval-sequences", type=int, default=8)
    p.add_argument("--frames", type=int, default=60)
    p.add_argument("--width", type=int, default=640)
    p.add_argument("--height", type=int, default=640)

    p = sub.add_parser("train", help="train stage 1 (detection) or stage 2 (tracking)")
    p.add_argument("--data", required=True, help="directory of sequences")
    p.add_argument("--out", required=True)
    p.add_argument("--stage", type=int, choices=(1, 2), default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="SECTION.KEY=VALUE")
    p.add_argument("--stage1-checkpoint", default=None, help="required for stage 2")
    p.add_argument("--resume", default=None)

    p = sub.add_parser("track", help="run inference over sequences")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--set", dest="overrides", action="append", default=[])
    p.add_argument("--no-propagation", action="store_true",
                   help="ablation: clear the track set every frame")

    p = sub.add_parser("eval", help="score results files against ground truth")
    p.add_argument("--results", required=True, help="directory of <sequence>.txt files")
    p.add_argument("--gt", required=True, help="directory of sequences with gt/gt.txt")
    p.add_argument("--out", required=True)

    p = sub.add_parser("overlay", help="render frames with colored identity boxes")
    p.add_argument("--sequence", required=True, help="sequence directory (seqinfo.ini)")
    p.add_argument("--results", required=True, help="results file to draw")
    p.add_argument("--out", required=True)
    p.add_argument("--max-frames", type=int, default=None)
    return parser


def _snapshot(out_dir: Path, lines: list[str]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.ini").write_text("\n".join(lines) + "\n")


def _cmd_synth(args) -> int:
    out = Path(args.out)
    synth_dataset(out, args.seed, num_train=args.train_sequences, num_eval=args.eval_sequences,
                  width=args.width, height=args.height, num_frames=args.frames)
    _snapshot(out, [
        "[synth]",
        f"seed={args.seed}",
        f"train_sequences={args.train_sequences}",
        f"eval_sequences={args.eval_sequences}",
        f"frames={args.frames}",
        f"width={args.width}",
        f"height={args.height}",
    ])
    print(f"wrote {args.train_sequences} train + {args.eval_sequences} eval sequences under {out}")
    return 0


def _cmd_train(args) -> int:
    run = load_run_config(args.config, args.overrides)
    stage = args.stage if args.stage is not None else run.train.stage
    out = Path(args.out)
    sequences = load_sequences(args.data)
    resume = load_checkpoint(args.resume) if args.resume else None
    save_run_config(out / "config.ini", run)
    if stage == 1:
        path = train_stage1(sequences, run, out, resume=resume)
    else:
        if not args.stage1_checkpoint:
            raise UsageError("stage 2 requires --stage1-checkpoint")
        stage1 = load_checkpoint(args.stage1_checkpoint)
        path = train_stage2(sequences, run, out, stage1_ckpt=stage1, resume=resume)
    print(f"stage {stage} checkpoint: {path}")
    return 0


def _cmd_track(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    run = load_run_config(args.config, args.overrides)
    run = RunConfig(model=ckpt.config, train=run.train, thresholds=run.thresholds,
                    weights=run.weights)
    model = ckpt.build()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_run_config(out / "config.ini", run)
    for seq in load_sequences(args.data):
        results = run_inference(seq, model, run.thresholds,
                                disable_propagation=args.no_propagation)
        write_results(out / f"{seq.name}.txt", results)
        boxes = sum(len(v) for v in results.values())
        print(f"{seq.name}: {boxes} boxes")
    return 0


def _cmd_eval(args) -> int:
    results_dir = Path(args.results)
    gt_dir = Path(args.gt)
    out = Path(args.out)
    named = []
    skipped = []
    for desc in list_sequences(gt_dir):
        res_path = results_dir / f"{desc.name}.txt"
        if not res_path.exists():
            raise FileNotFoundError(f"no results file for sequence {desc.name}: {res_path}")
        gt = parse_gt((desc.root or gt_dir / desc.name) / "gt" / "gt.txt")
        pred = parse_results(res_path)
        if not any(gt.values()):
            skipped.append(desc.name)
            continue
        named.append((desc.name, SequenceEval.from_frame_dicts(gt, pred, desc.seq_length)))
    if not named:
        raise UndefinedMetric("no sequence has ground truth; metrics undefined")
    report = evaluate_sequences(named)
    out.mkdir(parents=True, exist_ok=True)
    text = report.as_text()
    for name in skipped:
        text += f"\n{name}: ERROR - empty ground truth, metrics undefined"
    (out / "report.txt").write_text(text + "\n")
    (out / "metrics.csv").write_text(report.as_csv())
    _snapshot(out, ["[eval]", f"results={results_dir}", f"gt={gt_dir}"])
    print(text)
    return 0


def _identity_color(identity: int) -> np.ndarray:
    r, g, b = colorsys.hsv_to_rgb((identity * 0.6180339887) % 1.0, 0.95, 1.0)
    return np.array([int(r * 255), int(g * 255), int(b * 255)], dtype=np.uint8)


def _draw_box(img: np.ndarray, ltwh, color: np.ndarray, thickness: int = 2) -> None:
    h, w = img.shape[:2]
    l, t, bw, bh = ltwh
    x1, y1 = int(round(l)), int(round(t))
    x2, y2 = int(round(l + bw)), int(round(t + bh))
    x1, x2 = max(x1, 0), min(x2, w)
    y1, y2 = max(y1, 0), min(y2, h)
    if x2 <= x1 or y2 <= y1:
        return
    for k in range(thickness):
        if y1 + k < h:
            img[min(y1 + k, h - 1), x1:x2] = color
        if y2 - 1 - k >= 0:
            img[max(y2 - 1 - k, 0), x1:x2] = color
        if x1 + k < w:
            img[y1:y2, min(x1 + k, w - 1)] = color
        if x2 - 1 - k >= 0:
            img[y1:y2, max(x2 - 1 - k, 0)] = color


def _cmd_overlay(args) -> int:
    from .data import parse_seqinfo

    desc = parse_seqinfo(Path(args.sequence) / "seqinfo.ini")
    results = parse_results(args.results)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        import PIL  # noqa: F401

        ext = ".png"
    except ImportError:
        ext = ".ppm"
    last = desc.seq_length if args.max_frames is None else min(desc.seq_length, args.max_frames)
    for frame in range(1, last + 1):
        img = load_image(desc.image_path(frame)).copy()
        for box in results.get(frame, []):
            _draw_box(img, box.ltwh, _identity_color(box.identity))
        save_image(out / f"{frame:06d}{ext}", img)
    _snapshot(out, ["[overlay]", f"sequence={args.sequence}", f"results={args.results}",
                    f"frames={last}"])
    print(f"wrote {last} overlay frames to {out}")
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "track": _cmd_track,
    "eval": _cmd_eval,
    "overlay": _cmd_overlay,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except (UsageError, ConfigError, ParseError, CheckpointError, UndefinedMetric,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
