"""Command-line entry point: ``chunkmix <command> [flags]``.

Exit codes: 0 ok, 1 check failure, 2 usage/config/I-O error, 3 numerical abort.

Training settings come from built-in defaults, then the ``--config`` file,
then explicit flags; a later source overrides an earlier one.
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dataset, evaluation, gradcheck, trainer
from .autodiff import ShapeError
from .dataset import DataFormatError
from .models import CheckpointError, load_checkpoint

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_ABORT = 0, 1, 2, 3


class UsageError(Exception):
    """Bad flags, config or inputs; reported on stderr with exit code 2."""


# ---------------------------------------------------------------------------
# run configuration file

def _tuple_of_str(text: str) -> tuple:
    return tuple(t.strip() for t in text.split(",") if t.strip())


CONFIG_KEYS = {
    "lambda_m": float, "lambda_g": float, "lambda_c": float,
    "toggles": _tuple_of_str,
    "chunks": int, "chunk_dim": int, "epochs": int, "batch": int,
    "lr": float, "beta1": float, "seed": int, "precision": str,
    "data": str, "out": str,
}
RUN_DEFAULTS = {"data": "data", "out": "run"}


@dataclass
class RunConfig:
    train: trainer.TrainConfig = field(default_factory=trainer.TrainConfig)
    data: str = RUN_DEFAULTS["data"]
    out: str = RUN_DEFAULTS["out"]
    raw: dict = field(default_factory=dict)   # key -> value text as written in the file

    def metadata(self) -> dict:
        meta = {"run.data": self.data, "run.out": self.out}
        meta.update({f"file.{k}": v for k, v in self.raw.items()})
        return meta


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """``key = value`` lines to ``{key: (parsed, raw)}``; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise UsageError(f"{source}:{lineno}: expected 'key = value', got {line.strip()!r}")
        key, raw = (s.strip() for s in body.split("=", 1))
        if key not in CONFIG_KEYS:
            raise UsageError(f"{source}:{lineno}: unknown key {key!r}; allowed keys: {', '.join(CONFIG_KEYS)}")
        if key in values:
            raise UsageError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            values[key] = (CONFIG_KEYS[key](raw), raw)
        except ValueError:
            raise UsageError(f"{source}:{lineno}: bad value {raw!r} for key {key!r}") from None
    return values


def build_run_config(config_path=None, overrides: dict | None = None) -> RunConfig:
    values = {}
    raw = {}
    if config_path is not None:
        try:
            text = Path(config_path).read_text(encoding="utf-8")
        except OSError as exc:
            raise UsageError(f"cannot read config {config_path}: {exc.strerror}") from None
        parsed = parse_config_text(text, str(config_path))
        values = {k: v for k, (v, _) in parsed.items()}
        raw = {k: r for k, (_, r) in parsed.items()}
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    run = {k: values.pop(k, RUN_DEFAULTS[k]) for k in ("data", "out")}
    try:
        cfg = trainer.TrainConfig(**values)
    except ValueError as exc:
        raise UsageError(f"invalid training config: {exc}") from None
    if cfg.precision not in ("f64", "f32"):
        raise UsageError(f"invalid training config: precision must be f64 or f32, got {cfg.precision!r}")
    return RunConfig(cfg, run["data"], run["out"], raw)


# ---------------------------------------------------------------------------
# helpers

def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _load_split(data: str, split: str):
    try:
        return dataset.load(data, split)
    except (OSError, DataFormatError) as exc:
        raise UsageError(str(exc)) from None


def _load_model(path: str):
    try:
        return load_checkpoint(path)
    except (OSError, CheckpointError, KeyError, ValueError) as exc:
        raise UsageError(f"cannot load checkpoint {path}: {exc}") from None


def _emit(text: str, out_dir, name: str):
    sys.stdout.write(text)
    if out_dir is not None:
        path = Path(out_dir) / name
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(text)
        except OSError as exc:
            raise UsageError(f"cannot write {path}: {exc.strerror}") from None


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(args) -> int:
    try:
        manifest = dataset.generate(args.out, seed=args.seed, copies_per_combo=args.copies)
    except OSError as exc:
        raise UsageError(str(exc)) from None
    total = sum(manifest.counts.values())
    print(f"wrote {total} images to {args.out}")
    sys.stdout.write(manifest.to_text())
    return EXIT_OK


def cmd_train(args) -> int:
    overrides = {k: getattr(args, k) for k in CONFIG_KEYS}
    run = build_run_config(args.config, overrides)
    images, _, _ = _load_split(run.data, "train")
    meta = run.metadata()
    try:
        result = trainer.train(run.train, images, out_dir=run.out, metadata=meta)
    except trainer.TrainingAborted as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except OSError as exc:
        raise UsageError(f"cannot write run outputs: {exc}") from None
    log = result.log
    last = log.rows[-(len(images) // min(run.train.batch, len(images))):] if log.rows else []
    print(f"wrote {Path(run.out) / 'model.ckpt'} and {Path(run.out) / 'train_log.tsv'}")
    for key in ("L_M", "g_loss", "d_loss", "L_C", "cls_acc"):
        vals = [r[key] for r in last if r.get(key) is not None]
        print(f"{key}\t{np.mean(vals):.6f}" if vals else f"{key}\t-")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, _ = _load_model(args.checkpoint)
    test_x, test_y, manifest = _load_split(args.data, "test")
    selected = [k for k in ("retrieval", "probe", "shortcut") if getattr(args, k)] or ["retrieval", "probe", "shortcut"]
    try:
        feats = evaluation.encode_images(model, test_x) if {"retrieval", "probe"} & set(selected) else None
    except ShapeError as exc:
        raise UsageError(f"checkpoint does not match the data format: {exc}") from None
    names = manifest.factor_names
    if "retrieval" in selected:
        table = evaluation.best_chunk_table(feats, test_y, model.n, model.d)
        _emit(table.to_tsv(names), args.out, "retrieval.tsv")
    if "probe" in selected:
        train_x, train_y, _ = _load_split(args.data, "train")
        train_f = evaluation.encode_images(model, train_x)
        lines = ["factor\taccuracy"]
        for i, name in enumerate(names):
            acc = evaluation.probe_factor(train_f, train_y[:, i], feats, test_y[:, i])
            lines.append(f"{name}\t{acc:.4f}")
        _emit("\n".join(lines) + "\n", args.out, "probe.tsv")
    if "shortcut" in selected:
        rep = evaluation.shortcut_report(model, test_x, pairs=args.pairs, seed=args.seed, mode=args.mode)
        _emit(rep.to_tsv(), args.out, "shortcut.tsv")
    return EXIT_OK


def _select_sources(count: int, rows: int, cols: int, seed: int, row_idx, col_idx):
    if row_idx is None or col_idx is None:
        if rows + cols > count:
            raise UsageError(f"need {rows + cols} distinct source images but the split has {count}")
        picks = np.random.default_rng(seed).choice(count, size=rows + cols, replace=False)
        row_idx = row_idx if row_idx is not None else picks[:rows].tolist()
        col_idx = col_idx if col_idx is not None else picks[rows:].tolist()
    for i in list(row_idx) + list(col_idx):
        if not 0 <= i < count:
            raise UsageError(f"source index {i} out of range for a split of {count} images")
    return list(row_idx), list(col_idx)


def cmd_grid(args) -> int:
    model, _ = _load_model(args.checkpoint)
    images, _, _ = _load_split(args.data, args.split)
    chunks = args.chunk
    bad = [c for c in chunks if not 0 <= c < model.n]
    if bad or not chunks:
        raise UsageError(f"chunk index {bad or chunks} out of range: the checkpoint has n={model.n} chunks")
    if args.rows < 1 or args.cols < 1:
        raise UsageError("--rows and --cols must be at least 1")
    rows, cols = _select_sources(len(images), args.rows, args.cols, args.seed, args.row_indices, args.col_indices)
    grid = evaluation.transfer_grid(model, images[rows], images[cols], chunks)
    try:
        evaluation.write_ppm(args.out, grid)
    except OSError as exc:
        raise UsageError(f"cannot write {args.out}: {exc.strerror}") from None
    print(f"wrote {args.out} ({grid.shape[2]}x{grid.shape[1]}) rows={rows} cols={cols} chunks={chunks}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    run = build_run_config(args.config, {"epochs": args.epochs})
    train_x, _, _ = _load_split(args.data, "train")
    test_x, test_y, manifest = _load_split(args.data, "test")
    methods = tuple(args.methods) if args.methods else trainer.TABLE_ROWS
    unknown = [m for m in methods if m not in trainer.METHODS]
    if unknown:
        raise UsageError(f"unknown methods {unknown}; choose from {', '.join(trainer.METHODS)}")
    if not args.seeds:
        raise UsageError("--seeds must list at least one seed")

    def progress(method, seed, table):
        print(f"# {method} seed={seed} average={table.average:.4f}", file=sys.stderr)

    try:
        report = trainer.ablation_suite(train_x, test_x, test_y, args.seeds, run.train, methods,
                                        manifest.factor_names, progress)
    except trainer.TrainingAborted as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    text = trainer.ablation_tsv(report)
    sys.stdout.write(text)
    if args.out:
        try:
            Path(args.out).write_text(text)
        except OSError as exc:
            raise UsageError(f"cannot write {args.out}: {exc.strerror}") from None
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    tol = gradcheck.TOLERANCE[args.precision]
    results = gradcheck.run_suite(range(args.seeds), args.precision)
    failed = 0
    print(f"op\tmax_rel_err\tstatus\t(tolerance {tol:g}, {args.precision}, {args.seeds} seeds)")
    for name, err in results.items():
        ok = err < tol
        failed += not ok
        print(f"{name}\t{err:.3e}\t{'PASS' if ok else 'FAIL'}")
    print(f"{len(results) - failed}/{len(results)} passed")
    return EXIT_OK if failed == 0 else EXIT_CHECK


# ---------------------------------------------------------------------------
# parser

class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    """Show defaults, except for optional flags whose absence means 'not set'."""

    def _get_help_string(self, action):
        if action.default is None:
            return action.help
        return super()._get_help_string(action)


def build_parser() -> argparse.ArgumentParser:
    fmt = _HelpFormatter
    parser = argparse.ArgumentParser(prog="chunkmix", formatter_class=fmt,
                                     description="Chunked-feature mixing autoencoder experiments.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gen-data", formatter_class=fmt, help="render the synthetic shapes dataset")
    p.add_argument("--out", default="data", help="output directory")
    p.add_argument("--seed", type=int, default=0, help="generator seed")
    p.add_argument("--copies", type=int, default=25, help="jittered copies per factor combination")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", formatter_class=fmt, help="train one model from a config file",
                       description="Train one model. Flags override values from --config.")
    p.add_argument("--config", default=None, help="'key = value' run config file (optional)")
    defaults = trainer.TrainConfig()
    for key, kind in CONFIG_KEYS.items():
        default = RUN_DEFAULTS.get(key, getattr(defaults, key, None))
        shown = ",".join(default) if isinstance(default, tuple) else default
        p.add_argument(f"--{key.replace('_', '-')}", dest=key, type=kind, default=None,
                       help=f"override config key {key} (built-in default: {shown})")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", formatter_class=fmt, help="retrieval, probe and shortcut reports",
                       description="Evaluate a checkpoint; with no report flag all three reports run.")
    p.add_argument("--checkpoint", required=True, help="model checkpoint file")
    p.add_argument("--data", default="data", help="dataset directory")
    p.add_argument("--retrieval", action="store_true", help="best-chunk retrieval mAP table")
    p.add_argument("--probe", action="store_true", help="linear probe accuracy per factor")
    p.add_argument("--shortcut", action="store_true", help="per-chunk shortcut diagnostics")
    p.add_argument("--pairs", type=int, default=256, help="image pairs for the shortcut report")
    p.add_argument("--mode", choices=("infer", "train"), default="infer",
                   help="batch-norm mode for the shortcut report")
    p.add_argument("--seed", type=int, default=0, help="seed for shortcut pair sampling")
    p.add_argument("--out", default=None, help="also write the TSV reports into this directory (optional)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grid", formatter_class=fmt, help="attribute-transfer grid as a PPM image")
    p.add_argument("--checkpoint", required=True, help="model checkpoint file")
    p.add_argument("--data", default="data", help="dataset directory")
    p.add_argument("--split", choices=("train", "test"), default="test", help="source split")
    p.add_argument("--chunk", type=_int_list, default="0", help="chunk index (comma list to swap several)")
    p.add_argument("--rows", type=int, default=8, help="number of left-column source images")
    p.add_argument("--cols", type=int, default=8, help="number of top-row source images")
    p.add_argument("--row-indices", type=_int_list, default=None, help="explicit left-column image indices (default: seeded choice)")
    p.add_argument("--col-indices", type=_int_list, default=None, help="explicit top-row image indices (default: seeded choice)")
    p.add_argument("--seed", type=int, default=0, help="seed for source selection")
    p.add_argument("--out", default="grid.ppm", help="output PPM path")
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("ablate", formatter_class=fmt, help="train every ablation row and tabulate mAP")
    p.add_argument("--data", default="data", help="dataset directory")
    p.add_argument("--seeds", type=_int_list, default="1,2,3", help="comma-separated seeds")
    p.add_argument("--config", default=None, help="base run config file (optional)")
    p.add_argument("--epochs", type=int, default=None, help="override epochs from the config")
    p.add_argument("--methods", type=lambda s: _tuple_of_str(s), default=None,
                   help=f"comma list of rows (default: {','.join(trainer.TABLE_ROWS)})")
    p.add_argument("--out", default=None, help="also write the TSV here (optional)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", formatter_class=fmt, help="finite-difference check of every op")
    p.add_argument("--precision", choices=("f64", "f32"), default="f64",
                   help="precision of the backward pass (tolerance 1e-4 for f64, 1e-2 for f32)")
    p.add_argument("--seeds", type=int, default=20, help="random instances per op")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
