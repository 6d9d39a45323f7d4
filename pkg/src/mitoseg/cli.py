"""Command-line entry points.

    mitoseg train   --config C --out-dir D [--resume CKPT]
    mitoseg infer   --ckpt K --in V --out O [--scores S]
    mitoseg eval    --pred P --gt G [--scores S] [--json PATH]
    mitoseg synth   [--spec S] --seed N --out BASE
    mitoseg selftest

Exit codes: 0 success, 1 validation error (bad arguments or config),
2 runtime error (IO, shape, or data problems).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, load_into
from .config import ConfigError, _build, config_from_dict, load_config
from .data import SynthSpec, VolumeIOError, load_label_volume, load_volume, save_label_volume, save_volume
from .infer import run_inference
from .metrics import evaluate
from .model import SegModel
from .selftest import run_selftest
from .tensor import ShapeError
from .train import Trainer


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _build_parser():
    p = _Parser(prog="mitoseg", description="Desk-scale 3D mitochondria instance segmentation")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train from an experiment config")
    t.add_argument("--config", required=True)
    t.add_argument("--out-dir", default="run")
    t.add_argument("--resume", default=None, help="checkpoint to continue from")

    i = sub.add_parser("infer", help="segment a volume with a trained checkpoint")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--in", dest="volume", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--scores", default=None, help="optional path for per-instance score JSON")

    e = sub.add_parser("eval", help="score a predicted label volume against ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--scores", default=None, help="per-instance score JSON (defaults to all ones)")
    e.add_argument("--json", dest="json_out", default=None)

    s = sub.add_parser("synth", help="generate a synthetic volume + labels")
    s.add_argument("--spec", default=None, help="JSON file of generator settings")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True, help="output base path")

    sub.add_parser("selftest", help="run the built-in oracle checks")
    return p


def cmd_train(args):
    cfg = load_config(args.config)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    trainer = Trainer(cfg, out_dir=out_dir)
    if args.resume:
        trainer.resume(args.resume)
    history = trainer.train(log_path=out_dir / "log.jsonl")
    last = history[-1] if history else {}
    print(json.dumps({"checkpoint": str(out_dir / "checkpoint.zip"), "final": last}))
    return 0


def load_model_from_checkpoint(path):
    arrays, extra = load_checkpoint(path)
    cfg = config_from_dict(extra["config"])
    model = SegModel(cfg.model, seed=0)
    load_into(model, arrays, prefix="model.")
    return model, cfg


def cmd_infer(args):
    model, cfg = load_model_from_checkpoint(args.ckpt)
    volume, _ = load_volume(args.volume)
    instances, scores, _, _ = run_inference(model, volume, cfg.post)
    save_label_volume(args.out, instances)
    if args.scores:
        Path(args.scores).write_text(json.dumps([float(s) for s in scores]) + "\n")
    print(json.dumps({"instances": instances.instance_count, "out": str(args.out)}))
    return 0


def cmd_eval(args):
    pred = load_label_volume(args.pred)
    gt = load_label_volume(args.gt)
    if pred.labels.shape != gt.labels.shape:
        raise VolumeIOError(f"label volumes disagree in shape: {pred.labels.shape} vs {gt.labels.shape}")
    scores = None
    if args.scores:
        scores = np.asarray(json.loads(Path(args.scores).read_text()), dtype=np.float64)
    report = evaluate(pred, gt, scores)
    if args.json_out:
        Path(args.json_out).write_text(report.to_json(indent=2) + "\n")
    print(f"{'metric':<10} value")
    for name in ("ap75", "jaccard", "dsc"):
        print(f"{name:<10} {getattr(report, name):.4f}")
    print(f"matches    {len(report.matches)} (pred={pred.instance_count}, gt={gt.instance_count})")
    return 0


def cmd_synth(args):
    spec = SynthSpec()
    if args.spec:
        raw = json.loads(Path(args.spec).read_text())
        spec = _build(SynthSpec, raw, "synth spec")
    from .data import generate_synthetic

    image, labels = generate_synthetic(spec, args.seed)
    base = Path(args.out)
    save_volume(f"{base}_image", image.astype(np.float32))
    save_label_volume(f"{base}_labels", labels)
    print(json.dumps({"image": f"{base}_image", "labels": f"{base}_labels", "instances": labels.instance_count}))
    return 0


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "train":
            return cmd_train(args)
        if args.command == "infer":
            return cmd_infer(args)
        if args.command == "eval":
            return cmd_eval(args)
        if args.command == "synth":
            return cmd_synth(args)
        if args.command == "selftest":
            return 0 if run_selftest() else 2
        return 1
    except (VolumeIOError, CheckpointError, ShapeError, OSError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (ConfigError, ValueError) as e:
        print(f"invalid configuration: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
