"""``dualbind`` command line.

Exit codes: 0 success, 1 I/O failure, 2 usage or configuration error,
3 numerical abort during training.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from pathlib import Path

from .data import DataError, load_dir, validate_manifest
from .energy import CheckpointError, EnergyModel
from .metrics import rank_fit, write_eval_json, write_rankfit_csv
from .synth import GenConfig, GenerationError, generate_dataset, label_summary
from .trainer import (
    CHECKPOINT_NAME,
    NonFiniteLossError,
    TrainConfig,
    evaluate_model,
    fit,
    predict_affinity,
    run_experiment,
    split_data,
)

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3
SEED_ENV = "DUALBIND_SEED"


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _read_json(path, what: str) -> dict:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"{what} not found: {p}", EXIT_CONFIG)
    try:
        obj = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise CliError(f"{what} {p} is not valid JSON: {exc.msg} (line {exc.lineno})", EXIT_CONFIG) from None
    except OSError as exc:
        raise CliError(f"cannot read {what} {p}: {exc}", EXIT_IO) from None
    if not isinstance(obj, dict):
        raise CliError(f"{what} {p} must hold a JSON object", EXIT_CONFIG)
    return obj


def _seed_override(obj: dict) -> dict:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return obj
    try:
        return {**obj, "seed": int(raw)}
    except ValueError:
        raise CliError(f"{SEED_ENV} must be an integer, got {raw!r}", EXIT_CONFIG) from None


def _load_data(path):
    p = Path(path)
    if not p.is_dir():
        raise CliError(f"data directory not found: {p}", EXIT_CONFIG)
    try:
        complexes, manifest = load_dir(p)
    except FileNotFoundError as exc:
        raise CliError(f"missing dataset file: {exc.filename}", EXIT_CONFIG) from None
    except KeyError as exc:
        raise CliError(f"manifest refers to unknown complex {exc}", EXIT_CONFIG) from None
    except (DataError, ValueError) as exc:
        raise CliError(str(exc), EXIT_CONFIG) from None
    try:
        problems = validate_manifest(manifest, complexes)
    except KeyError as exc:
        raise CliError(f"manifest refers to unknown complex {exc}", EXIT_CONFIG) from None
    if problems:
        raise CliError("invalid manifest: " + "; ".join(problems), EXIT_CONFIG)
    return {c.id: c for c in complexes}, manifest


def _load_ckpt(path):
    p = Path(path)
    if not p.is_file():
        raise CliError(f"checkpoint not found: {p}", EXIT_CONFIG)
    try:
        return EnergyModel.load(p)
    except CheckpointError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from None


def _train_config(args) -> TrainConfig:
    obj = _read_json(args.config, "train config") if args.config else {}
    for flag, key in (("mode", "mode"), ("lam", "lambda"), ("epochs", "epochs")):
        v = getattr(args, flag, None)
        if v is not None:
            obj[key] = v
    obj = _seed_override(obj)
    try:
        return TrainConfig.from_json(obj)
    except (TypeError, ValueError) as exc:
        raise CliError(f"bad train config: {exc}", EXIT_CONFIG) from None


# -- subcommands -----------------------------------------------------------


def cmd_gen(args) -> int:
    obj = _seed_override(_read_json(args.config, "generation config"))
    try:
        gcfg = GenConfig.from_json(obj)
    except (TypeError, ValueError) as exc:
        raise CliError(f"bad generation config: {exc}", EXIT_CONFIG) from None
    try:
        complexes, manifest = generate_dataset(gcfg, args.out)
    except GenerationError as exc:
        raise CliError(str(exc), EXIT_NUMERIC) from None
    except OSError as exc:
        raise CliError(f"cannot write to {args.out}: {exc}", EXIT_IO) from None
    counts = {s: len(manifest.ids(s)) for s in ("train", "val", "test")}
    print(json.dumps({"splits": counts, "labels": label_summary(complexes)}, sort_keys=True))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _train_config(args)
    data, manifest = _load_data(args.data)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create {out}: {exc}", EXIT_IO) from None
    cfg = cfg.replace(checkpoint_dir=str(out))

    def log(m):
        if not args.quiet:
            print(f"epoch {m.epoch} total {m.total:.6f} val_pearson {m.val_pearson:.6f}", file=sys.stderr)

    try:
        state = fit(cfg, manifest, data, out_dir=out, log=log)
    except NonFiniteLossError as exc:
        (out / "abort.json").write_text(json.dumps(exc.to_json(), indent=1) + "\n")
        raise CliError(str(exc), EXIT_NUMERIC) from None
    except ValueError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from None
    except OSError as exc:
        raise CliError(f"I/O failure during training: {exc}", EXIT_IO) from None
    if state.best_checkpoint_path is None:
        # no finite validation Pearson: keep the last parameters so eval still works
        state.model.save(out / CHECKPOINT_NAME, {"mode": cfg.mode, "epoch": state.epoch, "val_pearson": None,
                                                  "target_sign": cfg.target_sign, "seed": cfg.seed,
                                                  "train_config": cfg.to_json()})
    summary = {
        "mode": cfg.mode,
        "epochs": state.epoch,
        "best_val_pearson": None if state.best_val_pearson == float("-inf") else state.best_val_pearson,
        "checkpoint_epochs": state.checkpoint_epochs,
        "checkpoint": str(out / CHECKPOINT_NAME),
        "final": {
            "l_mse": state.history[-1].l_mse if state.history else None,
            "l_dsm": state.history[-1].l_dsm if state.history else None,
            "total": state.history[-1].total if state.history else None,
        },
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def _split_or_fail(manifest, data, split):
    if split not in ("train", "val", "test"):
        raise CliError(f"unknown split {split!r}", EXIT_CONFIG)
    return split_data(manifest, data, split)


def cmd_eval(args) -> int:
    model, meta = _load_ckpt(args.ckpt)
    data, manifest = _load_data(args.data)
    cs = [c for c in _split_or_fail(manifest, data, args.split) if c.affinity is not None]
    if len(cs) < 2:
        raise CliError(f"split {args.split!r} has {len(cs)} labeled sample(s); need ≥ 2 for correlations", EXIT_CONFIG)
    mode = meta.get("mode", "dual")
    report = evaluate_model(model, cs, mode, float(meta.get("target_sign", 1.0)))
    extra = {"split": args.split, "mode": mode}
    if args.out:
        write_eval_json(report, args.out, extra)
    print(json.dumps({**report.to_json(), **extra}, sort_keys=True))
    return EXIT_OK


def cmd_predict(args) -> int:
    model, meta = _load_ckpt(args.ckpt)
    data, manifest = _load_data(args.data)
    cs = _split_or_fail(manifest, data, args.split)
    pred = predict_affinity(model, cs, float(meta.get("target_sign", 1.0)))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "prediction"])
    for c, p in zip(cs, pred):
        w.writerow([c.id, f"{p:.6f}"])
    if args.out:
        Path(args.out).write_text(buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())
    return EXIT_OK


def cmd_rankfit(args) -> int:
    model, meta = _load_ckpt(args.ckpt)
    data, manifest = _load_data(args.data)
    cs = [c for c in _split_or_fail(manifest, data, args.split) if c.affinity is not None]
    if len(cs) < 2:
        raise CliError("need ≥ 2 labeled samples for a rank fit", EXIT_CONFIG)
    fit_ = rank_fit(model, cs, float(meta.get("target_sign", 1.0)))
    write_rankfit_csv(fit_, args.out)
    print(json.dumps({"spearman": fit_.spearman, "n": len(cs), "csv": str(args.out)}))
    return EXIT_OK


RECIPES = {
    "ablation": [("dual", "dual", 1.0), ("mse_only", "mse_only", 1.0), ("dsm_only", "dsm_only", 1.0)],
    "semi_supervised": [
        ("mse_only@50%", "mse_only", 0.5),
        ("dual@50%+50%unlabeled", "dual", 0.5),
        ("mse_only@100%", "mse_only", 1.0),
    ],
}
TABLE_HEADER = ("method", "mode", "labeled_fraction", "pearson_mean", "pearson_std", "rmse_mean", "rmse_std",
                "spearman_mean", "spearman_std")


def experiment_table(recipe: str, base: TrainConfig, manifest, data, log=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TABLE_HEADER)
    for label, mode, frac in RECIPES[recipe]:
        rep = run_experiment(base.replace(mode=mode, labeled_fraction=frac), manifest, data, log=log)
        row = [label, mode, f"{frac:.2f}"]
        for name in ("pearson", "rmse", "spearman"):
            ms = rep.mean_std(name)
            row += ["N/A", "N/A"] if ms is None else [f"{ms[0]:.6f}", f"{ms[1]:.6f}"]
        w.writerow(row)
    return buf.getvalue()


def cmd_experiment(args) -> int:
    if args.recipe not in RECIPES:
        raise CliError(f"unknown recipe {args.recipe!r}; choose from {sorted(RECIPES)}", EXIT_CONFIG)
    base = _train_config(args)
    data, manifest = _load_data(args.data)
    try:
        table = experiment_table(args.recipe, base, manifest, data)
    except NonFiniteLossError as exc:
        raise CliError(str(exc), EXIT_NUMERIC) from None
    except ValueError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from None
    if args.out:
        try:
            Path(args.out).write_text(table)
        except OSError as exc:
            raise CliError(f"cannot write {args.out}: {exc}", EXIT_IO) from None
    sys.stdout.write(table)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dualbind", description="Binding energy models trained with dual losses.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic benchmark")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    def train_flags(p):
        p.add_argument("--config", help="train config JSON")
        p.add_argument("--data", required=True)
        p.add_argument("--mode", choices=["dual", "mse_only", "dsm_only"])
        p.add_argument("--lambda", dest="lam", type=float)
        p.add_argument("--epochs", type=int)

    p = sub.add_parser("train", help="train one model")
    train_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    for name, func, help_, default_split in (
        ("eval", cmd_eval, "evaluate a checkpoint", "test"),
        ("predict", cmd_predict, "predict affinities", "test"),
        ("rankfit", cmd_rankfit, "rank-fit diagnostic", "train"),
    ):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--ckpt", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--split", default=default_split)
        p.add_argument("--out", required=name == "rankfit")
        p.set_defaults(func=func)

    p = sub.add_parser("experiment", help="run a named comparison recipe")
    p.add_argument("--recipe", required=True)
    train_flags(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_experiment)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        return args.func(args)
    except CliError as exc:
        print(f"dualbind {args.command}: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
