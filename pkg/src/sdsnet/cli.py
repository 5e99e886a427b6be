"""Command line entry point: ``sdsnet {train,eval,predict,synth,report,roc}``.

Settings resolve in order: built-in defaults, ``--config`` YAML file,
``--set key=value`` overrides (``model.<key>`` for architecture keys), then
explicit flags. ``SDSNET_OUTPUT_DIR`` only changes the default output directory.

Config file keys are the fields of :class:`sdsnet.train.RunConfig`, with the
architecture under ``model:`` (fields of :class:`sdsnet.config.ModelConfig`).
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from .checkpoint import load_checkpoint
from .complexity import summary
from .config import ModelConfig
from .data import SynthSpec, load_split, list_ids, load_record, materialize, split_ids, synthesize, write_image
from .errors import ConfigError, DataError, ShapeError
from .metrics import evaluate
from .model import SDSNet
from . import plotting
from .train import RunConfig, predict_records, train, write_report

ENV_OUTPUT = "SDSNET_OUTPUT_DIR"


def default_output(name):
    return str(Path(os.environ.get(ENV_OUTPUT, "runs")) / name)


def parse_assignment(text):
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    key, value = text.split("=", 1)
    return key.strip(), yaml.safe_load(value)


def apply_assignments(base: dict, pairs):
    out = dict(base)
    out["model"] = dict(out.get("model") or {})
    for key, value in pairs:
        if key.startswith("model."):
            out["model"][key[len("model."):]] = value
        elif key.startswith("synth."):
            out["synth"] = dict(out.get("synth") or {})
            out["synth"][key[len("synth."):]] = value
        else:
            out[key] = value
    return out


# -- argument groups -----------------------------------------------------------

def add_config_args(p):
    p.add_argument("--config", type=Path, help="YAML run config")
    p.add_argument("--set", dest="assign", action="append", default=[], type=parse_assignment,
                   metavar="KEY=VALUE", help="override any config key, e.g. model.heads=2")


def add_model_args(p):
    g = p.add_argument_group("architecture and ablation switches")
    g.add_argument("--shallow", type=int, choices=(1, 2, 3), help="number of shallow layers")
    g.add_argument("--deep", type=int, choices=(1, 2, 3), help="number of deep layers")
    g.add_argument("--input-size", type=int, nargs=2, metavar=("H", "W"))
    g.add_argument("--fusion", choices=("adsf", "concat"))
    g.add_argument("--multihead", type=int, metavar="N", help="attention heads (default 1)")
    g.add_argument("--no-pam", action="store_true", help="drop position attention from MDFA")
    g.add_argument("--no-lf", action="store_true", help="freeze the ADSF fusion weight")
    g.add_argument("--no-msm", action="store_true", help="replace multi-scale mapping by identity")
    g.add_argument("--no-rbs", action="store_true", help="plain conv stages instead of residual blocks")
    g.add_argument("--no-ds", action="store_true", help="single output head, no deep supervision")
    g.add_argument("--no-shallow-branch", action="store_true")
    g.add_argument("--no-deep-branch", action="store_true")


def model_overrides(args):
    o = {}
    if args.shallow is not None:
        o["shallow_layers"] = args.shallow
    if args.deep is not None:
        o["deep_layers"] = args.deep
    if args.shallow is not None or args.deep is not None:
        o["stage_channels"] = None
    if args.input_size is not None:
        o["input_size"] = list(args.input_size)
    if args.fusion is not None:
        o["fusion"] = args.fusion
    if args.multihead is not None:
        o["heads"] = args.multihead
    for flag, key in (("no_pam", "use_pam"), ("no_lf", "learnable_fusion"), ("no_msm", "use_msm"),
                      ("no_rbs", "residual_blocks"), ("no_ds", "deep_supervision"),
                      ("no_shallow_branch", "shallow_branch"), ("no_deep_branch", "deep_branch")):
        if getattr(args, flag):
            o[key] = False
    return o


def check_model_flags(parser, args):
    if args.no_lf and args.fusion == "concat":
        parser.error("--no-lf applies to ADSF fusion and contradicts --fusion concat")
    if args.no_shallow_branch and args.no_deep_branch:
        for flag in ("no_pam", "no_msm", "no_lf"):
            if getattr(args, flag):
                parser.error(f"--{flag.replace('_', '-')} has no effect with both branches disabled")
        if args.multihead is not None:
            parser.error("--multihead has no effect with both branches disabled")


def add_data_args(p):
    g = p.add_argument_group("data")
    g.add_argument("--data-root", type=Path, help="dataset root (images/, masks/, img_idx/)")
    g.add_argument("--split", choices=("train", "test", "all"), default="test")
    g.add_argument("--synth-count", type=int, help="use N synthetic samples instead of a dataset")
    g.add_argument("--synth-seed", type=int, default=0)


def add_metric_args(p):
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--match-radius", type=float, default=3.0, help="centroid distance in pixels")
    p.add_argument("--roc", type=int, default=0, metavar="N", help="ROC over N thresholds")


def resolve_run(parser, args, name):
    base = {}
    if args.config is not None:
        if not args.config.is_file():
            parser.error(f"config file {args.config} not found")
        base = yaml.safe_load(args.config.read_text()) or {}
        if not isinstance(base, dict):
            parser.error(f"{args.config}: expected a mapping at top level")
    d = apply_assignments(base, args.assign)
    check_model_flags(parser, args)
    d["model"].update(model_overrides(args))
    for flag, key in (("epochs", "epochs"), ("batch_size", "batch_size"), ("lr", "lr"),
                      ("min_lr", "min_lr"), ("seed", "seed"), ("loss", "loss"),
                      ("eval_every", "eval_every"), ("synth_count", "synth_count"),
                      ("threshold", "threshold"), ("match_radius", "match_radius")):
        v = getattr(args, flag, None)
        if v is not None:
            d[key] = v
    if getattr(args, "data_root", None) is not None:
        d["data_root"] = str(args.data_root)
    if getattr(args, "overfit", False):
        d["overfit"] = True
    if getattr(args, "flip", False):
        d["flip"] = True
    if getattr(args, "output_dir", None) is not None:
        d["output_dir"] = str(args.output_dir)
    d.setdefault("output_dir", default_output(name))
    try:
        return RunConfig.from_dict(d)
    except (ConfigError, TypeError) as e:
        parser.error(str(e))


def roc_thresholds(n):
    if n < 2:
        raise ValueError("--roc needs at least 2 thresholds")
    return [float(t) for t in np.linspace(0.95, 0.05, n)]


# -- data selection ------------------------------------------------------------

def select_records(args, input_size):
    if args.data_root is not None:
        if args.split == "all":
            return [load_record(args.data_root, s) for s in list_ids(args.data_root)]
        train, test = load_split(args.data_root)
        return train if args.split == "train" else test
    if args.synth_count:
        return synthesize(SynthSpec(image_size=tuple(input_size), seed=args.synth_seed), args.synth_count)
    raise DataError("no data given: pass --data-root or --synth-count")


def check_shapes(records, config: ModelConfig):
    expected = tuple(config.input_size)
    for r in records:
        if r.mask.shape != expected:
            raise ShapeError(f"sample {r.id} is {r.mask.shape}, checkpoint expects {expected}")


# -- commands ------------------------------------------------------------------

def cmd_train(parser, args):
    run = resolve_run(parser, args, "train")
    out = Path(run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(run.to_yaml())

    def progress(row):
        if not args.quiet:
            miou = "" if row.get("miou") is None else f" miou={row['miou']:.4f}"
            print(f"epoch {row['epoch']:4d} lr={row['lr']:.2e} loss={row['loss']:.5f}{miou}", flush=True)

    res = train(run, progress=progress)
    print(json.dumps({"output_dir": res["output_dir"], "steps": res["steps"],
                      "best_miou": res["best_miou"], "final_loss": res["history"][-1]["loss"]}))
    return 0


def _eval_predictions(args, probs, records, out):
    thr = roc_thresholds(args.roc) if args.roc else None
    report = evaluate(probs, [r.mask for r in records], args.threshold, args.match_radius, thr)
    write_report(report, out)
    d = report.to_dict()
    d.pop("roc")
    print(json.dumps(d, sort_keys=True))
    return report


def load_pred_dir(pred_dir, records):
    probs = []
    for r in records:
        p = Path(pred_dir) / f"{r.id}.npy"
        if not p.exists():
            raise DataError(f"no saved prediction for id {r.id!r} in {pred_dir}")
        arr = np.load(p)
        if arr.shape != r.mask.shape:
            raise ShapeError(f"prediction {p.name} is {arr.shape}, mask is {r.mask.shape}")
        probs.append(arr)
    return probs


def cmd_eval(parser, args):
    out = Path(args.output_dir or default_output("eval"))
    if args.pred_dir is not None:
        if args.data_root is None and not args.synth_count:
            parser.error("--pred-dir needs --data-root or --synth-count for the masks")
        size = args.input_size or (256, 256)
        records = select_records(args, size)
        _eval_predictions(args, load_pred_dir(args.pred_dir, records), records, out)
        return 0
    if args.checkpoint is None:
        parser.error("eval needs --checkpoint or --pred-dir")
    model, _ = load_checkpoint(args.checkpoint)
    records = select_records(args, model.config.input_size)
    check_shapes(records, model.config)
    _eval_predictions(args, predict_records(model, records), records, out)
    return 0


def cmd_predict(parser, args):
    model, _ = load_checkpoint(args.checkpoint)
    records = select_records(args, model.config.input_size)
    check_shapes(records, model.config)
    out = Path(args.output_dir or default_output("predict"))
    out.mkdir(parents=True, exist_ok=True)
    for r, prob in zip(records, predict_records(model, records)):
        np.save(out / f"{r.id}.npy", prob.astype(np.float32))
        if args.png:
            write_image(prob, out / f"{r.id}.png")
    print(json.dumps({"output_dir": str(out), "count": len(records)}))
    return 0


def cmd_synth(parser, args):
    kw = {}
    if args.config is not None:
        kw.update(yaml.safe_load(args.config.read_text()) or {})
    # a run config's "synth." prefix is accepted here too
    kw.update((k[len("synth."):] if k.startswith("synth.") else k, v) for k, v in args.assign)
    kw.setdefault("image_size", list(args.size))
    kw["seed"] = args.seed if args.seed is not None else kw.get("seed", 0)
    try:
        spec = SynthSpec(**kw)
    except (ConfigError, TypeError) as e:
        parser.error(str(e))
    records = synthesize(spec, args.count)
    train_ids, test_ids = split_ids([r.id for r in records], args.ratio, spec.seed)
    root = Path(args.output_dir or default_output("synth"))
    materialize(records, root, train_ids, test_ids)
    (root / "synth.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
    print(json.dumps({"root": str(root), "train": len(train_ids), "test": len(test_ids)}))
    return 0


def cmd_report(parser, args):
    run = resolve_run(parser, args, "report")
    try:
        model = SDSNet(run.model)
    except ConfigError as e:
        parser.error(str(e))
    s = summary(model)
    out = Path(args.output_dir or default_output("report"))
    out.mkdir(parents=True, exist_ok=True)
    s["config"] = run.model.to_dict()
    (out / "structure.json").write_text(json.dumps(s, indent=2, sort_keys=True) + "\n")
    with open(out / "structure.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["module", "params", "macs"])
        for r in s["breakdown"]:
            w.writerow([r["module"], r["params"], r["macs"]])
        w.writerow(["total", s["params"], s["macs"]])
    plotting.plot_breakdown(s["breakdown"], out / "structure.png")
    print(f"params {s['params']} ({s['params'] / 1e6:.3f} M)")
    print(f"macs   {s['macs']} ({s['macs'] / 1e9:.3f} G) at {s['input_size'][0]}x{s['input_size'][1]}")
    for r in s["breakdown"]:
        print(f"  {r['module']:<10} params {r['params']:>10}  macs {r['macs']:>13}")
    return 0


def cmd_roc(parser, args):
    if args.roc < 2:
        args.roc = 10
    return cmd_eval(parser, args)


def build_parser():
    parser = argparse.ArgumentParser(prog="sdsnet", description="Infrared small target segmentation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model")
    add_config_args(p)
    add_model_args(p)
    p.add_argument("--data-root", type=Path)
    p.add_argument("--synth-count", type=int, help="synthetic samples when no --data-root")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--min-lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--loss", choices=("bce", "mse"))
    p.add_argument("--eval-every", type=int)
    p.add_argument("--overfit", action="store_true", help="validate on the training records")
    p.add_argument("--flip", action="store_true", help="random flip augmentation")
    p.add_argument("--threshold", type=float)
    p.add_argument("--match-radius", type=float)
    p.add_argument("--output-dir", type=Path)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    for name, func, help_ in (("eval", cmd_eval, "evaluate a checkpoint or saved predictions"),
                              ("roc", cmd_roc, "Pd/Fa curve over fixed thresholds")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--checkpoint", type=Path)
        p.add_argument("--pred-dir", type=Path, help="directory of <id>.npy probability maps")
        p.add_argument("--input-size", type=int, nargs=2, metavar=("H", "W"),
                       help="synthetic image size with --pred-dir")
        add_data_args(p)
        add_metric_args(p)
        p.add_argument("--output-dir", type=Path)
        p.set_defaults(func=func)

    p = sub.add_parser("predict", help="write probability maps")
    p.add_argument("--checkpoint", type=Path, required=True)
    add_data_args(p)
    p.add_argument("--png", action="store_true", help="also write 8-bit PNG previews")
    p.add_argument("--output-dir", type=Path)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("synth", help="materialize a synthetic dataset")
    add_config_args(p)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--size", type=int, nargs=2, default=(256, 256), metavar=("H", "W"))
    p.add_argument("--seed", type=int)
    p.add_argument("--ratio", type=float, default=0.8, help="train fraction of the split index")
    p.add_argument("--output-dir", type=Path)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("report", help="parameter and multiply-add summary")
    add_config_args(p)
    add_model_args(p)
    p.add_argument("--output-dir", type=Path)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(parser, args)
    except (ConfigError, DataError, ShapeError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
