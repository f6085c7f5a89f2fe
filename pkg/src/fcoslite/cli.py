"""``fcoslite`` command line: data generation, training, distillation,
evaluation, quantization, ablation and loss curves.

Exit codes: 0 ok, 2 config error, 3 I/O error, 4 numerical failure,
5 acceptance-gate failure.  Failures print a readable message and a one-line
JSON error record on stderr.
"""
from __future__ import annotations

import argparse
import json
import secrets
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from . import config as config_mod
from .config import ConfigError, RunConfig
from .synthcorpus import CorpusError

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_GATE = 0, 2, 3, 4, 5


class GateError(Exception):
    pass


# run directories ----------------------------------------------------------------

def _run_dir(cfg: RunConfig, out: Optional[str], force: bool) -> Path:
    if out:
        path = Path(out)
        if path.exists() and any(path.iterdir()):
            if not force:
                raise FileExistsError(f"{path} exists and is not empty (use --force)")
        path.mkdir(parents=True, exist_ok=True)
        return path
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = Path(cfg.paths.runs) / f"{cfg.name}-{stamp}"
    path, k = base, 1
    while path.exists():  # never reuse a previous run directory
        path = base.with_name(f"{base.name}-{k}")
        k += 1
    path.mkdir(parents=True)
    return path


def _write_config(cfg: RunConfig, run: Path) -> None:
    (run / "config.resolved.toml").write_text(cfg.dumps())


def _resolve(args) -> RunConfig:
    cfg = config_mod.load(Path(args.config) if args.config else None)
    cfg = config_mod.apply_overrides(cfg, args.set or [])
    if getattr(args, "name", None):
        cfg = replace(cfg, name=args.name)
    if getattr(args, "corpus", None):
        cfg = replace(cfg, paths=replace(cfg.paths, corpus=args.corpus))
    if getattr(args, "runs", None):
        cfg = replace(cfg, paths=replace(cfg.paths, runs=args.runs))
    if getattr(args, "deterministic", False):
        cfg = replace(cfg, train=replace(cfg.train, deterministic=True))
    seed = args.seed if args.seed is not None else cfg.seed
    if seed is None:
        seed = secrets.randbelow(2**31)
    return cfg.with_seed(seed)


def _print(msg: str) -> None:
    print(msg, flush=True)


# subcommands --------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    from .synthcorpus import generate

    cfg = _resolve(args)
    out = Path(args.out or cfg.paths.corpus)
    d = cfg.data
    generate(cfg.scene, d.n_train, d.n_val, d.n_test, out, force=args.force, workers=d.workers)
    (out / "config.resolved.toml").write_text(cfg.dumps())
    manifest = json.loads((out / "manifest.json").read_text())
    c, o = manifest["counts"], manifest["objects"]
    _print(f"corpus {out}: seed {manifest['seed']}")
    _print(f"images train {c['train']}  val {c['val']}  test {c['test']}")
    _print(f"objects class0 {o['0']}  class1 {o['1']}")
    return EXIT_OK


def _epoch_printer(rec: dict) -> None:
    _print(f"epoch {rec['epoch']:3d}  mAP {rec['map']:.3f}  F1 {rec['f1']:.3f}")


def cmd_train(args) -> int:
    from .trainer import train

    cfg = _resolve(args)
    run = _run_dir(cfg, args.out, args.force)
    _write_config(cfg, run)
    _print(f"run directory {run} (seed {cfg.seed})")
    res = train(cfg.train, cfg.paths.corpus, cfg.detector, out_dir=run, on_epoch=_epoch_printer)
    _print(f"best epoch {res.best_epoch}: {res.best_report.summary_line()}")
    return EXIT_OK


def cmd_train_kd(args) -> int:
    from .trainer import train_kd

    cfg = _resolve(args)
    if not Path(args.teacher).exists():
        raise FileNotFoundError(f"teacher checkpoint {args.teacher} not found")
    run = _run_dir(cfg, args.out, args.force)
    _write_config(cfg, run)
    _print(f"run directory {run} (seed {cfg.seed})")
    res = train_kd(cfg.train, args.teacher, cfg.paths.corpus, cfg.kd, cfg.detector, out_dir=run, on_epoch=_epoch_printer)
    _print(f"best epoch {res.best_epoch}: {res.best_report.summary_line()}")
    return EXIT_OK


def _split_pairs(cfg: RunConfig, split: str):
    from .synthcorpus import load

    return list(load(cfg.paths.corpus, split).pairs())


def _delta_table(float_rep, int8_rep) -> str:
    rows = [("mAP@0.5", float_rep.map, int8_rep.map), ("F1", float_rep.f1, int8_rep.f1)]
    for k, name in enumerate(("healthy", "sick")):
        rows.append((f"AP {name}", float_rep.classes[k].ap or 0.0, int8_rep.classes[k].ap or 0.0))
    lines = [f"{'metric':<12}{'float':>9}{'int8':>9}{'diff':>9}"]
    for name, a, b in rows:
        lines.append(f"{name:<12}{a:>9.4f}{b:>9.4f}{a - b:>9.4f}")
    return "\n".join(lines)


def cmd_eval(args) -> int:
    from .detector import load_checkpoint
    from .evaluation import evaluate, evaluate_detections, gt_replay, predictor_for
    from .quant import load_specs, quantized_predictor

    cfg = _resolve(args)
    run = _run_dir(cfg, args.out, args.force)
    _write_config(cfg, run)
    pairs = _split_pairs(cfg, args.split)
    ev = dict(iou_threshold=cfg.eval.iou_threshold, conf_threshold=cfg.eval.conf_threshold, ap_method=cfg.eval.ap_method)
    if args.oracle:
        gts = [g for _, g in pairs]
        report = evaluate_detections(gt_replay(gts), gts, **ev)
        report.extra["pipeline"] = "gt-replay"
    else:
        if not args.checkpoint:
            raise ConfigError("eval needs --checkpoint (or --oracle)")
        net, _ = load_checkpoint(args.checkpoint)
        report = evaluate(pairs, predictor_for(net), **ev)
        report.extra["pipeline"] = "float"
        if args.quantized:
            qpath = Path(args.quantspec) if args.quantspec else Path(args.checkpoint).with_name("quantspec.json")
            if not qpath.exists():
                raise FileNotFoundError(f"quantization spec {qpath} not found (run quantize first)")
            qrep = evaluate(pairs, quantized_predictor(net, load_specs(qpath)), **ev)
            report.extra["int8"] = qrep.to_dict()
            report.extra["map_diff"] = report.map - qrep.map
            qrep.to_json(run / "report_int8.json")
            _print(_delta_table(report, qrep))
    report.to_json(run / "report.json")
    report.write_pr_csv(run / "pr_curves.csv")
    _print(f"{args.split}: {report.summary_line()}")
    if args.min_map is not None and report.map < args.min_map:
        raise GateError(f"mAP {report.map:.4f} below gate {args.min_map}")
    if args.max_diff is not None and report.extra.get("map_diff", 0.0) > args.max_diff:
        raise GateError(f"int8 mAP drop {report.extra['map_diff']:.4f} above gate {args.max_diff}")
    return EXIT_OK


def cmd_quantize(args) -> int:
    from .detector import load_checkpoint
    from .quant import calibrate, save_specs, size_audit
    from .synthcorpus import load

    cfg = _resolve(args)
    run = _run_dir(cfg, args.out, args.force)
    _write_config(cfg, run)
    net, _ = load_checkpoint(args.checkpoint)
    corpus = load(cfg.paths.corpus, "train")
    n = min(cfg.quant.calibration_images, len(corpus))
    images = [corpus[i].image for i in range(n)]
    specs = calibrate(net, images, cfg.quant.percentile, bits=cfg.quant.bits)
    save_specs(specs, run / "quantspec.json")
    audit = size_audit(net)
    (run / "report.json").write_text(json.dumps({"schema": 1, "size_audit": audit.to_dict(), "tensors": len(specs)}, indent=1))
    _print(f"calibrated {len(specs)} tensors on {n} images -> {run / 'quantspec.json'}")
    _print(audit.summary_line())
    if args.gate and not audit.passed:
        raise GateError("model exceeds the int8 size budget")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .trainer import MU_SWEEP, run_ablation_grid

    cfg = _resolve(args)
    run = _run_dir(cfg, args.out, args.force)
    _write_config(cfg, run)

    def progress(row):
        _print(f"{row['cls_loss']:>4}+{row['reg_loss']:<5} mu={row['mu']!s:<4} mAP {row['map']!s:.6} {row['error']}")

    mus = tuple(float(m) for m in args.mu.split(",")) if args.mu else MU_SWEEP
    run_ablation_grid(cfg.paths.corpus, cfg.train, cfg.detector, out_dir=run, mus=mus, progress=progress)
    _print(f"wrote {run / 'ablation_grid.csv'} and {run / 'mu_sweep.csv'}")
    return EXIT_OK


def cmd_curves(args) -> int:
    from .losses import emit_loss_curves

    try:
        mus = [float(m) for m in args.mu.split(",")]
    except ValueError:
        raise ConfigError(f"--mu must be a comma-separated list of numbers, got {args.mu!r}") from None
    out = Path(args.out)
    if out.exists() and not args.force:
        raise FileExistsError(f"{out} exists (use --force)")
    try:
        emit_loss_curves(mus, out)
    except ValueError as e:  # invalid mu
        raise ConfigError(str(e)) from None
    _print(f"wrote {out} ({len(mus)} mu values)")
    return EXIT_OK


# parser -------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser, corpus: bool = True, out_help: str = "run directory (default runs/<name>-<timestamp>)"):
    p.add_argument("--config", help="TOML run configuration")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value (repeatable)")
    p.add_argument("--seed", type=int, help="seed for every stochastic component (random and recorded if omitted)")
    p.add_argument("--name", help="run name")
    p.add_argument("--out", help=out_help)
    p.add_argument("--runs", help="parent directory for run directories")
    p.add_argument("--force", action="store_true", help="allow writing into a non-empty --out")
    p.add_argument("--deterministic", action="store_true", help="single-threaded bit-reproducible mode")
    if corpus:
        p.add_argument("--corpus", help="corpus directory")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fcoslite", description=__doc__.split("\n\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render the synthetic corpus")
    _common(p, corpus=False, out_help="corpus directory (default paths.corpus)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a student or teacher")
    _common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("train-kd", help="distil a frozen teacher into a student")
    _common(p)
    p.add_argument("--teacher", required=True, help="teacher checkpoint.bin")
    p.set_defaults(func=cmd_train_kd)

    p = sub.add_parser("eval", help="evaluate a checkpoint (float, or float and int8)")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--quantized", action="store_true", help="also run the int8 pipeline and print the delta")
    p.add_argument("--quantspec", help="quantspec.json (default: next to the checkpoint)")
    p.add_argument("--oracle", action="store_true", help="evaluate the gt-replay oracle instead of a network")
    p.add_argument("--min-map", type=float, help="exit 5 if mAP falls below this")
    p.add_argument("--max-diff", type=float, help="exit 5 if the int8 mAP drop exceeds this")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("quantize", help="calibrate int8 specs and audit the size budget")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--gate", action="store_true", help="exit 5 if the size budget fails")
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("ablate", help="loss-function grid and mu sweep")
    _common(p)
    p.add_argument("--mu", help="comma-separated mu values for the sweep")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("curves", help="emit weight and normalised loss curves as CSV")
    p.add_argument("--mu", default="0.4,0.5,0.6,0.7,0.8")
    p.add_argument("--out", default="loss_curves.csv")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_curves)
    return ap


def _fail(code: int, exc: BaseException) -> int:
    msg = str(exc) or type(exc).__name__
    print(f"error: {msg}", file=sys.stderr)
    print(json.dumps({"error": type(exc).__name__, "message": msg, "exit_code": code}), file=sys.stderr)
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        return _fail(EXIT_CONFIG, e)
    except GateError as e:
        return _fail(EXIT_GATE, e)
    except FloatingPointError as e:
        return _fail(EXIT_NUMERIC, e)
    except (OSError, CorpusError) as e:
        return _fail(EXIT_IO, e)


if __name__ == "__main__":
    sys.exit(main())
