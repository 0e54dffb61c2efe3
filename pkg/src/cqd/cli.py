"""Command-line entry point: ``cqd <subcommand> ...`` (or ``python3 -m cqd``).

Exit codes: 0 success, 1 partial failure (some run or sample failed),
2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from . import harness as H
from .analysis import tau_scatter, write_tau_csv, write_tau_summary
from .data import ShapesConfig, gen_shapes, load_image_dir, load_labeled, save_labeled
from .degrade import TRANSFORM_KINDS, load_paired, make_paired, save_paired, transform_descriptor
from .distill import METHODS, TrainConfig, evaluate, train
from .errors import CQDError, CheckpointError, ConfigError
from .nets import load_checkpoint, save_checkpoint

log = logging.getLogger("cqd")

EXIT_OK, EXIT_PARTIAL, EXIT_CONFIG = 0, 1, 2


def _read_json(path) -> dict:
    try:
        d = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read {path}: {e}") from e
    if not isinstance(d, dict):
        raise ConfigError(f"{path} must hold a JSON object")
    return d


def _out(args) -> Path:
    if not args.out:
        raise ConfigError("--out is required")
    p = Path(args.out)
    p.mkdir(parents=True, exist_ok=True)
    return p


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    d = _read_json(args.config) if args.config else {}
    if "scale_range" in d:
        d["scale_range"] = tuple(d["scale_range"])
    for k in ("per_class", "side", "num_classes"):
        v = getattr(args, k)
        if v is not None:
            d[k] = v
    if args.seed is not None:
        d["seed"] = args.seed
    try:
        cfg = ShapesConfig(**d)
    except TypeError as e:
        raise ConfigError(str(e)) from e
    out = _out(args)
    ds = gen_shapes(cfg)
    save_labeled(ds, out, fmt=args.format)
    H.write_provenance(out, "gen-data", asdict(cfg), [out / "manifest.json"])
    print(f"wrote {len(ds)} images to {out}")
    return EXIT_OK


def cmd_degrade(args) -> int:
    if args.config:
        desc = _read_json(args.config)
    else:
        params = {}
        if args.size is not None:
            params["size"] = args.size
        if args.out_size is not None:
            params["out_size"] = args.out_size
        if args.crop:
            params["crop"] = True
        desc = transform_descriptor(args.transform, **params)
    if args.images:
        ds, errors = load_image_dir(args.images, args.labels, args.boxes, args.size_in)
    else:
        ds, errors = load_labeled(args.data), []
    out = _out(args)
    paired = make_paired(ds.images, ds.labels, desc, args.seed or 0, boxes=ds.boxes,
                         num_classes=ds.num_classes)
    save_paired(paired, out, fmt=args.format)
    H.write_provenance(out, "degrade", {"descriptor": paired.descriptor, "seed": args.seed or 0},
                       [out / "manifest.json"], {"skipped": paired.skipped, "ingest_errors": errors})
    print(f"wrote {len(paired)} pairs to {out}; skipped {len(paired.skipped)}")
    return EXIT_PARTIAL if paired.skipped or errors else EXIT_OK


def cmd_train(args) -> int:
    d = _read_json(args.config) if args.config else {}
    if args.method:
        d["method"] = args.method
    if args.seed is not None:
        d["seed"] = args.seed
    if args.teacher:
        d["teacher_checkpoint"] = args.teacher
    cfg = TrainConfig.from_dict(d).validate()
    paired = load_paired(args.data)
    eval_set = load_paired(args.eval_data) if args.eval_data else None
    out = _out(args)
    model, report = train(cfg, paired, eval_set=eval_set)
    save_checkpoint(model, out / "model.ckpt")
    H.atomic_write(out / "report.json", report.to_json())
    H.write_provenance(out, "train", cfg.to_dict(), [out / "model.ckpt", out / "report.json"])
    print(json.dumps({"method": cfg.method, "seed": cfg.seed,
                      "final_accuracy": report.final_accuracy, "wall_time": report.wall_time}))
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_checkpoint(args.model)
    paired = load_paired(args.data)
    views = ["HQ", "LQ"] if args.view == "both" else [args.view]
    res = {v: evaluate(model, paired, v) for v in views}
    print(json.dumps(res))
    if args.out:
        out = _out(args)
        H.atomic_write(out / "eval.json", json.dumps(res, indent=1, sort_keys=True))
        H.write_provenance(out, "eval", {"model": str(args.model), "data": str(args.data)},
                           [out / "eval.json", Path(args.model)])
    return EXIT_OK


def _experiment_from_args(args) -> H.ExperimentConfig:
    cfg = H.ExperimentConfig.load(args.config) if args.config else H.default_experiment()
    if args.seed is not None:
        cfg.seeds = [args.seed]
    if args.method:
        cfg.methods = [args.method]
    return cfg.validate()


def cmd_run(args) -> int:
    cfg = _experiment_from_args(args)
    res = H.run_experiment(cfg, args.out or cfg.out, jobs=args.jobs)
    print(res.table.to_text(), end="")
    if res.tau is not None:
        print(json.dumps({k: v for k, v in res.tau.items() if k != "per_seed"}))
    if res.failures:
        for f in res.failures:
            log.error("%s seed %s failed: %s", f["method"], f["seed"], f.get("error"))
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_report(args) -> int:
    if not args.out:
        raise ConfigError("--out (the results directory) is required")
    table, tau = H.report(args.out)
    print(table.to_text(), end="")
    if tau is not None:
        print(json.dumps({k: v for k, v in tau.items() if k != "per_seed"}))
    return EXIT_OK if all(r.status == "ok" for r in table.rows) else EXIT_PARTIAL


def cmd_analyze_tau(args) -> int:
    mb, mc = load_checkpoint(args.model_b), load_checkpoint(args.model_cqd)
    paired = load_paired(args.data)
    if paired.boxes is None:
        raise ConfigError("the dataset has no bounding boxes")
    images = paired.zs if args.view == "LQ" else paired.xs
    recs, summ = tau_scatter(mb, mc, images, paired.labels, paired.boxes, n=args.n)
    out = _out(args)
    write_tau_csv(out / "tau.csv", recs)
    write_tau_summary(out / "tau_summary.json", summ)
    H.write_provenance(out, "analyze-tau", {"model_b": str(args.model_b), "model_cqd": str(args.model_cqd),
                                            "data": str(args.data), "n": args.n, "view": args.view},
                       [out / "tau.csv", out / "tau_summary.json"])
    print(json.dumps({k: v for k, v in summ.to_dict().items() if k != "skipped"}))
    return EXIT_PARTIAL if summ.skipped else EXIT_OK


def cmd_config(args) -> int:
    if not args.print_defaults:
        if not args.config:
            raise ConfigError("give --print-defaults or --config to validate")
        cfg = H.ExperimentConfig.load(args.config)
        print(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))
        return EXIT_OK
    if args.kind == "experiment":
        d = H.default_experiment().to_dict()
    elif args.kind == "train":
        d = TrainConfig().to_dict()
    else:
        d = asdict(ShapesConfig())
    print(json.dumps(d, indent=1, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration file")
    common.add_argument("--seed", type=int, help="random seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--method", choices=METHODS, help="training method")
    common.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="cqd", description="Cross-quality distillation experiments")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="render a synthetic shapes dataset")
    g.add_argument("--per-class", type=int)
    g.add_argument("--side", type=int)
    g.add_argument("--num-classes", type=int)
    g.add_argument("--format", choices=("f32", "png"), default="f32")
    g.set_defaults(func=cmd_gen_data)

    d = sub.add_parser("degrade", parents=[common], help="build a paired dataset")
    src = d.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", help="dataset directory written by gen-data")
    src.add_argument("--images", help="directory of image files")
    d.add_argument("--labels", help="CSV of file,label (with --images)")
    d.add_argument("--boxes", help="CSV of file,x0,y0,x1,y1 (with --images)")
    d.add_argument("--size-in", type=int, default=64, help="resize ingested images to this side")
    d.add_argument("--transform", choices=TRANSFORM_KINDS, default="lowres")
    d.add_argument("--size", type=int, help="low-resolution size")
    d.add_argument("--out-size", type=int, help="side of both output views")
    d.add_argument("--crop", action="store_true", help="crop to the box before degrading")
    d.add_argument("--format", choices=("f32", "png"), default="f32")
    d.set_defaults(func=cmd_degrade)

    t = sub.add_parser("train", parents=[common], help="train one model on a paired dataset")
    t.add_argument("--data", required=True, help="paired dataset directory")
    t.add_argument("--eval-data", help="paired dataset scored after every epoch")
    t.add_argument("--teacher", help="teacher checkpoint (CQD, Staged)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="accuracy of a checkpoint")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--view", choices=("LQ", "HQ", "both"), default="LQ")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("run", parents=[common], help="run an experiment (all methods x seeds)")
    r.set_defaults(func=cmd_run)

    rp = sub.add_parser("report", parents=[common], help="render the results table")
    rp.set_defaults(func=cmd_report)

    a = sub.add_parser("analyze-tau", parents=[common], help="in-box input-gradient fractions")
    a.add_argument("--model-b", required=True)
    a.add_argument("--model-cqd", required=True)
    a.add_argument("--data", required=True, help="paired dataset with boxes")
    a.add_argument("--n", type=int, default=1000)
    a.add_argument("--view", choices=("LQ", "HQ"), default="LQ")
    a.set_defaults(func=cmd_analyze_tau)

    c = sub.add_parser("config", parents=[common], help="print or validate configuration")
    c.add_argument("--print-defaults", action="store_true")
    c.add_argument("--kind", choices=("experiment", "train", "shapes"), default="experiment")
    c.set_defaults(func=cmd_config)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse exits 2 on usage errors
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.jobs < 1:
        print("error: --jobs must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (CQDError, CheckpointError, OSError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_PARTIAL


if __name__ == "__main__":
    sys.exit(main())
