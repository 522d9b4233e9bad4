"""Command-line entry point: ``depsnet <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_meta, load_supernet, save_standalone, save_supernet
from .config import RunConfig, output_root
from .data import load_dataset
from .diagnostics import (class_correlation_heatmap, grad_compare, grad_magnitude_trace,
                          gradients_csv, onset_drop, trace_csv)
from .errors import (CalibrationRequiredError, ContractError, DepsError, FormatError,
                     ValidationError)
from .evaluation import bn_calibrate, evaluate_subnet, pareto_frontier
from .rng import substream
from .supernet import ArchConfig, extract_standalone, sample_uniform, select_subnet, validate_config
from .training import (MetricsLog, NesterovSGD, config_gradient, run_training)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_MISSING_FILE = 3
EXIT_VALIDATION = 4
EXIT_FORMAT = 5
EXIT_CALIBRATION = 6
EXIT_CONTRACT = 7
EXIT_INTERNAL = 8

EPILOG = f"""exit codes:
  {EXIT_OK}  success
  {EXIT_USAGE}  usage error (unknown flag, missing argument)
  {EXIT_MISSING_FILE}  input file not found
  {EXIT_VALIDATION}  config or architecture validation failure
  {EXIT_FORMAT}  malformed checkpoint, IDX or metrics file
  {EXIT_CALIBRATION}  BN statistics missing for the requested config
  {EXIT_CONTRACT}  other contract violation (shape, numeric, empty data)
  {EXIT_INTERNAL}  internal error

Errors are printed to stderr as one JSON line:
  {{"code": 4, "error": "validation", "dimension": "...", "message": "..."}}

Outputs go to --output-dir, or to $DEPSNET_OUTPUT_DIR/<name> (default root ./depsnet-out).
"""


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


class OutputDir:
    """All files the CLI writes go through here; paths may not escape the root."""

    def __init__(self, root):
        self.root = Path(root).resolve()

    def path(self, name) -> Path:
        p = (self.root / name).resolve()
        if p != self.root and self.root not in p.parents:
            raise ValidationError("output", f"{name!r} escapes the output directory")
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def write_text(self, name, text):
        p = self.path(name)
        p.write_text(text)
        return p


def _out(args, default_name) -> OutputDir:
    root = Path(args.output_dir) if args.output_dir else output_root() / default_name
    return OutputDir(root)


def _existing(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(str(p))
    return p


def _run_config(args, checkpoint=None) -> RunConfig:
    """--config wins; otherwise the run config stored in the checkpoint meta."""
    if getattr(args, "config", None):
        return RunConfig.load(_existing(args.config))
    if checkpoint is not None:
        meta = load_meta(checkpoint)
        if "run_config" in meta:
            return RunConfig.from_dict(meta["run_config"])
    raise ValidationError("config", "pass --config (checkpoint carries no run config)")


def parse_arch(text, space) -> ArchConfig:
    """An ArchConfig from a JSON stanza or a path to a JSON file."""
    if not text.lstrip().startswith("{"):
        text = _existing(text).read_text()
    try:
        d = json.loads(text)
        cfg = ArchConfig.from_dict(d)
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise ValidationError("arch", f"cannot parse architecture stanza: {e}") from None
    validate_config(space, cfg)
    return cfg


def _resolve_config(args, weights) -> ArchConfig:
    space = weights.space
    if getattr(args, "arch", None):
        return parse_arch(args.arch, space)
    digest = getattr(args, "config_digest", None)
    if digest:
        for cfg in space.enumerate():
            if cfg.digest == digest:
                return cfg
        raise ValidationError("config_digest", f"no config in the space has digest {digest}")
    return space.full()


# -- subcommands -------------------------------------------------------------------


def cmd_train(args):
    cfg = RunConfig.load(_existing(args.config))
    if args.seed is not None:
        cfg.seed = args.seed
    out = _out(args, cfg.output_dir)
    ds = load_dataset(cfg.dataset)
    out.write_text("config.toml", cfg.dumps())
    weights, log = run_training(cfg.arch, ds, cfg.effective_plan(), cfg.lr, cfg.seed,
                                checkpoint_dir=out.path("checkpoints"))
    out.write_text("metrics.csv", log.to_csv())
    out.write_text("metrics.jsonl", log.to_jsonl())
    save_supernet(out.path("final.ckpt"), weights, meta={"run_config": cfg.to_dict()})
    print(json.dumps({"output_dir": str(out.root), "epochs": len(log.epochs),
                      "final_eval_acc_full": log.epochs[-1]["eval_acc_full"]}, sort_keys=True))


def cmd_eval(args):
    ckpt = _existing(args.checkpoint)
    weights = load_supernet(ckpt)
    cfg = _run_config(args, ckpt)
    ds = load_dataset(cfg.dataset)
    arch = _resolve_config(args, weights)
    stats = bn_calibrate(weights, arch, ds.train, args.calibration_batches, store=False)
    rec = evaluate_subnet(weights, arch, ds.test, bn_stats=stats)
    line = json.dumps({"config_digest": rec.config_digest, "macs": rec.macs, "top1": rec.top1,
                       "split": rec.split, "calibrated": rec.calibrated,
                       "config": arch.to_dict()}, sort_keys=True)
    _out(args, "eval").write_text("eval.json", line + "\n")
    print(line)


def cmd_pareto(args):
    ckpt = _existing(args.checkpoint)
    weights = load_supernet(ckpt)
    cfg = _run_config(args, ckpt)
    ds = load_dataset(cfg.dataset)
    frontier = pareto_frontier(weights, weights.space, ds.test, args.buckets, args.samples,
                               substream(args.seed, "pareto"), ds.train, args.calibration_batches)
    p = _out(args, "pareto").write_text("pareto.csv", frontier.to_csv())
    print(json.dumps({"pareto_csv": str(p), "mean_pareto_accuracy": frontier.mean_pareto_accuracy,
                      "empty_buckets": frontier.empty_buckets}, sort_keys=True))


def cmd_diagnose(args):
    out = _out(args, "diagnose")
    if args.what in ("trace", "onset"):
        log = _read_metrics(args.metrics)
        if args.what == "trace":
            reps = [r for r in log.steps if r["forward_count"] > 1][:args.steps]
            if not reps:
                raise ValidationError("metrics", "no shrink-phase step records; train with log_every_steps = 1")
            pts = grad_magnitude_trace(reps)
            p = out.write_text("trace.csv", trace_csv(pts))
            defined = [q for q in pts if q.defined]
            summary = {"trace_csv": str(p), "points": len(pts),
                       "mean_ratio_eps_shrink": float(np.mean([q.ratio_eps_shrink for q in defined])) if defined else None,
                       "mean_ratio_shrink": float(np.mean([q.ratio_shrink for q in defined])) if defined else None}
        else:
            onset = args.onset_epoch if args.onset_epoch is not None else log.meta.get("onset_epoch")
            if onset is None:
                raise ValidationError("onset_epoch", "not in metrics meta; pass --onset-epoch")
            drop = onset_drop(log, int(onset))
            p = out.write_text("onset.csv", f"onset_epoch,onset_drop\n{int(onset)},{drop!r}\n")
            summary = {"onset_csv": str(p), "onset_drop": drop}
        print(json.dumps(summary, sort_keys=True))
        return
    ckpt = _existing(args.checkpoint)
    weights = load_supernet(ckpt)
    cfg = _run_config(args, ckpt)
    ds = load_dataset(cfg.dataset)
    if args.what == "grads":
        rng = substream(args.seed, "diagnose/grads")
        recs = []
        for i, batch in enumerate(ds.train_batches(0, args.seed, cfg.plan.batch_size)):
            if i >= args.batches:
                break
            recs += grad_compare(weights, batch, args.epsilon, cfg.plan.k, rng, cfg.plan.distill,
                                 cfg.plan.label_smoothing, step=i)
            rng.random()  # advance so each batch samples fresh configs
        p = out.write_text("gradients.csv", gradients_csv(recs))
        print(json.dumps({"gradients_csv": str(p), "rows": len(recs)}, sort_keys=True))
    else:
        arch = _resolve_config(args, weights)
        stats = bn_calibrate(weights, arch, ds.train, args.calibration_batches, store=False)
        weights.bn_stats[arch.digest] = stats
        hm = class_correlation_heatmap(select_subnet(weights, arch), ds.test, ds.num_classes)
        p = out.write_text("heatmap.csv", hm.to_csv())
        print(json.dumps({"heatmap_csv": str(p), "mean_off_diagonal": hm.mean_off_diagonal(),
                          "absent_classes": [int(i) for i in np.flatnonzero(~hm.present)]},
                         sort_keys=True))


def cmd_extract(args):
    ckpt = _existing(args.checkpoint)
    weights = load_supernet(ckpt)
    cfg = _run_config(args, ckpt)
    arch = parse_arch(args.arch, weights.space)
    if arch.digest not in weights.calibrated:
        ds = load_dataset(cfg.dataset)
        bn_calibrate(weights, arch, ds.train, args.calibration_batches)
    model = extract_standalone(weights, arch)
    p = _out(args, "extract").path(f"subnet-{arch.digest}.model")
    save_standalone(p, model)
    print(json.dumps({"model": str(p), "config_digest": arch.digest,
                      "parameters": int(model.num_parameters())}, sort_keys=True))


def finetune_and_evaluate(weights, arch, ds, steps, lr, batch_size, seed, calibration_batches):
    """Fine-tune one subnet in place for ``steps`` SGD steps, then calibrate and evaluate."""
    opt = NesterovSGD(weights)
    step = 0
    epoch = 0
    while step < steps:
        for batch in ds.train_batches(epoch, seed, batch_size):
            if step >= steps:
                break
            term = config_gradient(weights, arch, batch)
            opt.step(term.grads, lr)
            step += 1
        epoch += 1
    stats = bn_calibrate(weights, arch, ds.train, calibration_batches, store=False)
    return evaluate_subnet(weights, arch, ds.test, bn_stats=stats)


def cmd_init_compare(args):
    ckpt_a, ckpt_b = _existing(args.checkpoint_a), _existing(args.checkpoint_b)
    wa, wb = load_supernet(ckpt_a), load_supernet(ckpt_b)
    if wa.space.to_dict() != wb.space.to_dict():
        raise ValidationError("checkpoint_b", "architecture spaces of the two checkpoints differ")
    try:
        cfg = _run_config(args, ckpt_a)
    except ValidationError:
        cfg = _run_config(args, ckpt_b)  # onset checkpoints written mid-training carry no run config
    ds = load_dataset(cfg.dataset)
    configs = sample_uniform(wa.space, args.samples, substream(args.seed, "init-compare"))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["config_digest", "macs", "top1_a", "top1_b"])
    for arch in configs:
        ra = finetune_and_evaluate(wa.copy(), arch, ds, args.finetune_steps, args.lr,
                                   cfg.plan.batch_size, args.seed, args.calibration_batches)
        rb = finetune_and_evaluate(wb.copy(), arch, ds, args.finetune_steps, args.lr,
                                   cfg.plan.batch_size, args.seed, args.calibration_batches)
        w.writerow([arch.digest, ra.macs, repr(ra.top1), repr(rb.top1)])
    p = _out(args, "init-compare").write_text("init_compare.csv", buf.getvalue())
    print(json.dumps({"init_compare_csv": str(p), "rows": len(configs)}, sort_keys=True))


def _read_metrics(path):
    p = _existing(path)
    try:
        return MetricsLog.read_jsonl(p)
    except (json.JSONDecodeError, KeyError) as e:
        raise FormatError(f"{p}: not a metrics JSONL file ({e})") from None


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="depsnet", description="Delayed epsilon-shrinking supernet training kit.",
                 epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--version", action="version", version=f"depsnet {__version__}")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, checkpoint=True):
        p.add_argument("--output-dir", help="directory for outputs (created if missing)")
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="supernet checkpoint")
            p.add_argument("--config", help="run config TOML (default: stored in the checkpoint)")
            p.add_argument("--calibration-batches", type=int, default=4)

    p = sub.add_parser("train", help="train a supernet from a run config",
                       epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--config", required=True, help="run config TOML")
    p.add_argument("--seed", type=int, help="override the config seed")
    common(p, checkpoint=False)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="calibrate and evaluate one subnet")
    common(p)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--config-digest", help="12-hex digest of a config in the space")
    g.add_argument("--arch", help="JSON stanza or JSON file: {depths, widths, kernels, resolution}")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("pareto", help="bucketed pareto frontier -> pareto.csv")
    common(p)
    p.add_argument("--buckets", type=int, default=6)
    p.add_argument("--samples", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_pareto)

    p = sub.add_parser("diagnose", help="gradient / trace / onset / heatmap diagnostics")
    dsub = p.add_subparsers(dest="what", required=True, parser_class=_Parser)
    q = dsub.add_parser("grads", help="per-layer gradient comparison -> gradients.csv")
    common(q)
    q.add_argument("--epsilon", type=float, default=1e-4)
    q.add_argument("--batches", type=int, default=1)
    q.add_argument("--seed", type=int, default=0)
    q.set_defaults(func=cmd_diagnose)
    q = dsub.add_parser("trace", help="gradient magnitude trace from step metrics -> trace.csv")
    q.add_argument("--metrics", required=True, help="metrics.jsonl with step records")
    q.add_argument("--steps", type=int, default=100, help="first N shrink steps")
    q.add_argument("--output-dir")
    q.set_defaults(func=cmd_diagnose)
    q = dsub.add_parser("onset", help="max accuracy drop after shrink onset -> onset.csv")
    q.add_argument("--metrics", required=True)
    q.add_argument("--onset-epoch", type=int)
    q.add_argument("--output-dir")
    q.set_defaults(func=cmd_diagnose)
    q = dsub.add_parser("heatmap", help="class-correlation heatmap -> heatmap.csv")
    common(q)
    g = q.add_mutually_exclusive_group()
    g.add_argument("--config-digest")
    g.add_argument("--arch")
    q.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("extract", help="write a standalone subnet model container")
    common(p)
    p.add_argument("--arch", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("init-compare", help="fine-tune sampled subnets from two initializations")
    p.add_argument("--checkpoint-a", required=True)
    p.add_argument("--checkpoint-b", required=True)
    p.add_argument("--config", help="run config TOML (default: stored in checkpoint a or b)")
    p.add_argument("--samples", type=int, default=8)
    p.add_argument("--finetune-steps", type=int, default=20)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--calibration-batches", type=int, default=4)
    p.add_argument("--output-dir")
    p.set_defaults(func=cmd_init_compare)
    return ap


def _fail(code, kind, message, **extra):
    payload = {"code": code, "error": kind, "message": " ".join(str(message).split()), **extra}
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        args.func(args)
        return EXIT_OK
    except UsageError as e:
        return _fail(EXIT_USAGE, "usage", e)
    except FileNotFoundError as e:
        return _fail(EXIT_MISSING_FILE, "missing_file", f"no such file: {e.filename or e}")
    except ValidationError as e:
        return _fail(EXIT_VALIDATION, "validation", e, dimension=e.dimension)
    except FormatError as e:
        return _fail(EXIT_FORMAT, "format", e, offset=e.offset)
    except CalibrationRequiredError as e:
        return _fail(EXIT_CALIBRATION, "calibration", e)
    except (ContractError, DepsError) as e:
        if e.kind == "internal":
            return _fail(EXIT_INTERNAL, "internal", e)
        return _fail(EXIT_CONTRACT, e.kind, e)
    except Exception as e:  # noqa: BLE001 - last-resort one-line report
        return _fail(EXIT_INTERNAL, "internal", f"{type(e).__name__}: {e}")


if __name__ == "__main__":
    sys.exit(main())
