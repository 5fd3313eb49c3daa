"""``grouplane`` command line: gen, train, eval, infer, gradcheck."""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import gradcheck
from .scenes import SceneSpec, SplitRule, read_dataset, write_dataset
from .train import (
    CONFIG_FILE,
    ConfigError,
    RunConfig,
    Trainer,
    evaluate_predictions,
    load_model,
    predictions_document,
    split_indices,
    stage_timings,
    write_json,
)


class CommandError(RuntimeError):
    pass


def _on_off(value: str) -> bool:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return value == "on"


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise CommandError(f"file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise CommandError(f"{path} is not valid JSON: {exc}") from exc


def _emit(doc) -> None:
    print(json.dumps(doc, indent=2, sort_keys=True))


def cmd_gen(args) -> int:
    spec = SceneSpec.from_dict(_read_json(args.spec)) if args.spec else SceneSpec()
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    if args.horizontal_prob is not None:
        spec = replace(spec, horizontal_prob=args.horizontal_prob)
    manifest = write_dataset(spec, args.count, args.out, SplitRule(args.val_modulus, args.val_residue))
    _emit({k: manifest[k] for k in ("count", "n_train", "n_val", "split", "version")})
    return 0


def _run_config(args) -> RunConfig:
    cfg = RunConfig.from_json(Path(args.config).read_text()) if args.config else RunConfig()
    overrides = {}
    for key in ("epochs", "seed", "matcher", "max_steps", "batch_size"):
        value = getattr(args, key)
        if value is not None:
            overrides[key] = value
    overrides["data"] = str(args.data)
    cfg = replace(cfg, **overrides)
    flags = {
        "horizontal_group_enabled": args.horizontal_group,
        "category_guidance_enabled": args.category_guidance,
        "group_conv_enabled": args.group_conv,
    }
    flags = {k: v for k, v in flags.items() if v is not None}
    return cfg.with_network(**flags) if flags else cfg


def cmd_train(args) -> int:
    cfg = _run_config(args)
    trainer = Trainer(cfg, read_dataset(args.data), args.out)
    report = trainer.fit(resume=args.resume)
    _emit({"out": str(args.out), "epochs": trainer.state.epoch, "steps": trainer.state.step,
           "f1": report.f1, "category_accuracy": report.category_accuracy})
    return 0


def cmd_eval(args) -> int:
    doc = _read_json(args.preds)
    report = evaluate_predictions(doc, read_dataset(args.data))
    write_json(args.out, report.to_dict())
    _emit({"f1": report.f1, "precision": report.precision, "recall": report.recall})
    return 0


def cmd_infer(args) -> int:
    config_path = Path(args.config) if args.config else Path(args.checkpoint).parent / CONFIG_FILE
    if not config_path.is_file():
        raise CommandError(f"no run config at {config_path}; pass --config")
    cfg = RunConfig.from_json(config_path.read_text())
    dataset = read_dataset(args.data)
    try:
        model = load_model(cfg.network, args.checkpoint)
    except (KeyError, ValueError) as exc:
        raise CommandError(f"checkpoint does not match the network config: {exc}") from exc
    indices = split_indices(dataset, args.split)
    exist_thr = cfg.exist_thr if args.exist_thr is None else args.exist_thr
    vis_thr = cfg.vis_thr if args.vis_thr is None else args.vis_thr
    preds, timings = stage_timings(model, dataset, indices, cfg.batch_size, exist_thr, vis_thr)
    write_json(args.out, predictions_document(indices, preds, cfg.eval, str(args.data)))
    if args.timings:
        write_json(args.timings, timings)
    _emit({"scenes": len(indices), "lanes": sum(len(p) for p in preds), "timings_s": timings})
    return 0


def cmd_gradcheck(args) -> int:
    report = gradcheck.run_suite(seed=args.seed, n_seeds=args.seeds, ops=args.ops,
                                 negate=args.negate_op)
    doc = report.to_dict()
    if args.out:
        write_json(args.out, doc)
    _emit(doc)
    if not report.passed:
        raise CommandError(f"gradient check failed for: {', '.join(report.failed_ops)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="grouplane", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--spec", help="scene spec JSON (defaults when omitted)")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--horizontal-prob", type=float)
    g.add_argument("--val-modulus", type=int, default=2)
    g.add_argument("--val-residue", type=int, default=1)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train and evaluate every epoch")
    t.add_argument("--config", help="run config JSON (defaults when omitted)")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--max-steps", type=int)
    t.add_argument("--matcher", choices=("som", "index"))
    t.add_argument("--horizontal-group", type=_on_off, metavar="on|off")
    t.add_argument("--category-guidance", type=_on_off, metavar="on|off")
    t.add_argument("--group-conv", type=_on_off, metavar="on|off")
    t.add_argument("--resume", action="store_true", help="continue the run stored in --out")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="re-evaluate a predictions file offline")
    e.add_argument("--preds", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="decode lanes with a trained checkpoint")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--config", help="run config (default: config.json beside the checkpoint)")
    i.add_argument("--data", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--split", choices=("train", "val", "all"), default="val")
    i.add_argument("--exist-thr", type=float)
    i.add_argument("--vis-thr", type=float)
    i.add_argument("--timings", help="also write stage timings to this JSON file")
    i.set_defaults(func=cmd_infer)

    c = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--seeds", type=int, default=gradcheck.DEFAULT_SEEDS)
    c.add_argument("--ops", nargs="+", choices=sorted(gradcheck.CASES))
    c.add_argument("--negate-op", choices=sorted(gradcheck.CASES),
                   help="negate this op's backward (negative control)")
    c.add_argument("--out", help="write the report JSON here")
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CommandError, ConfigError, OSError, ValueError, KeyError, RuntimeError) as exc:
        err = {"error": type(exc).__name__, "command": args.command, "message": str(exc)}
        print(json.dumps(err, sort_keys=True), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
