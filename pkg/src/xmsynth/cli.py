"""``xms`` command-line entry point.

Exit codes: 0 success, 1 usage or validation, 2 data or I/O, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import datetime as dt
import hashlib
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import gradcheck
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    PhantomSpec,
    load_paired_dataset,
    make_phantom_dataset,
    preprocess,
    read_png,
    write_png,
)
from .errors import DataError, TrainingDivergedError, ValidationError, XmsError
from .metrics import SSIMParams, denormalize, evaluate, read_reports, render_report
from .models import MODEL_KINDS
from .training import TrainConfig, train

logger = logging.getLogger("xmsynth")

CONFIG_NAME = "config.resolved.txt"
HISTORY_NAME = "history.csv"
MANIFEST_NAME = "run_manifest.txt"
GRID_GAP = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _atomic_write(path: Path, text: str):
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _digest_path(path: Path) -> str:
    h = hashlib.blake2b(digest_size=16)
    files = sorted(p for p in path.rglob("*") if p.is_file()) if path.is_dir() else [path]
    for f in files:
        h.update(str(f.relative_to(path) if path.is_dir() else f.name).encode())
        h.update(f.read_bytes())
    return h.hexdigest()


class Run:
    """Collects inputs and artifacts of one invocation; writes the manifest."""

    def __init__(self, subcommand: str, run_dir: Optional[Path]):
        self.subcommand = subcommand
        self.run_dir = run_dir
        self.started = dt.datetime.now(dt.timezone.utc)
        self.inputs: Dict[str, str] = {}
        self.artifacts: List[Path] = []

    def input(self, name: str, path: Path):
        self.inputs[name] = _digest_path(Path(path))

    def artifact(self, path: Path) -> Path:
        self.artifacts.append(Path(path))
        return Path(path)

    def finish(self, exit_code: int):
        if self.run_dir is None or not self.run_dir.is_dir():
            return
        ended = dt.datetime.now(dt.timezone.utc)
        lines = [
            f"run_id={self.started.strftime('%Y%m%dT%H%M%S%fZ')}-{self.subcommand}",
            f"subcommand={self.subcommand}",
            f"started={self.started.isoformat()}",
            f"finished={ended.isoformat()}",
            f"status={'success' if exit_code == 0 else 'failed'}",
            f"exit_code={exit_code}",
        ]
        lines += [f"input.{k}={v}" for k, v in sorted(self.inputs.items())]
        lines += [f"artifact={p}" for p in self.artifacts]
        _atomic_write(self.run_dir / MANIFEST_NAME, "\n".join(lines) + "\n")


# -- config ------------------------------------------------------------------


def read_config_file(path) -> Dict[str, str]:
    """Parse ``key=value`` lines; ``#`` starts a comment."""
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DataError(f"cannot read config file {path}: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValidationError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        out[key.strip()] = value.strip()
    return out


def _env_deterministic() -> bool:
    raw = os.environ.get("XMS_DETERMINISTIC", "1").strip()
    if raw not in ("0", "1"):
        raise ValidationError(f"XMS_DETERMINISTIC must be 0 or 1, got {raw!r}")
    return raw == "1"


_FLAG_KEYS = {
    "epochs": "epochs",
    "batch": "batch_size",
    "lr": "lr",
    "image_size": "image_size",
    "channels": "in_channels",
    "base_channels": "base_channels",
    "latent_dim": "latent_dim",
    "lambda_l1": "lambda_l1",
    "lambda_cyc": "lambda_cyc",
    "lambda_id": "lambda_id",
    "kl_weight": "kl_weight",
    "seed": "seed",
}


def resolve_train_config(args) -> TrainConfig:
    """Defaults, then the config file, then explicit flags."""
    base = TrainConfig.desk(args.model) if args.profile == "desk" else TrainConfig(kind=args.model)
    values = base.as_dict()
    values["deterministic"] = _env_deterministic()
    explicit = set()
    if args.config:
        from_file = read_config_file(args.config)
        values.update(from_file)
        explicit.update(from_file)
    for flag, key in _FLAG_KEYS.items():
        v = getattr(args, flag)
        if v is not None:
            values[key] = v
            explicit.add(key)
    values["kind"] = args.model
    cfg = TrainConfig.from_dict(values)
    if args.profile == "desk" and "kl_weight" not in explicit:
        cfg = replace(cfg, kl_weight=1.0 / cfg.image_size**2)
    return cfg.validate()


def render_config(cfg: TrainConfig) -> str:
    return "".join(f"{k}={v!r}\n" if isinstance(v, float) else f"{k}={v}\n" for k, v in sorted(cfg.as_dict().items()))


# -- subcommands ---------------------------------------------------------------


def cmd_phantom(args, run: Run) -> int:
    spec = PhantomSpec(count=args.count, size=args.size, seed=args.seed)
    spec.validate()
    manifest = make_phantom_dataset(spec, args.out, split=args.split)
    run.artifact(manifest.root / "manifest.csv")
    print(f"wrote {manifest.count} phantom pairs ({spec.size}x{spec.size}, seed {spec.seed}) to {manifest.root}")
    return 0


def cmd_train(args, run: Run) -> int:
    cfg = resolve_train_config(args)
    out = Path(args.out)
    run_dir = run.run_dir
    data = load_paired_dataset(args.data, cfg.image_size, cfg.in_channels)
    run.input("data", Path(args.data))
    run_dir.mkdir(parents=True, exist_ok=True)
    _atomic_write(run.artifact(run_dir / CONFIG_NAME), render_config(cfg))
    try:
        bundle, history = train(data, cfg)
    except TrainingDivergedError as exc:
        if exc.bundle is not None:
            last = run.artifact(out.with_name(out.name + ".last-good"))
            save_checkpoint(exc.bundle, last)
            print(f"last finite checkpoint: {last}", file=sys.stderr)
        if exc.history is not None:
            exc.history.to_csv(run.artifact(run_dir / HISTORY_NAME))
        print(f"offending batch indices: {exc.batch_indices}", file=sys.stderr)
        raise
    save_checkpoint(bundle, run.artifact(out))
    history.to_csv(run.artifact(run_dir / HISTORY_NAME))
    print(f"trained {cfg.kind} for {cfg.epochs} epochs ({len(history)} steps); checkpoint {out}")
    return 0


def _model_images(paths: List[Path], image_size: int, in_channels: int) -> np.ndarray:
    return np.stack([preprocess(read_png(p), image_size, in_channels) for p in paths])


def _to_gray01(img: np.ndarray) -> np.ndarray:
    return denormalize(img).mean(axis=0)


def render_grid(rows: List[List[np.ndarray]], gap: int = GRID_GAP) -> np.ndarray:
    """Tile equal-size [0, 1] images row-major with white separators."""
    s = rows[0][0].shape[0]
    cols = max(len(r) for r in rows)
    h = len(rows) * s + (len(rows) - 1) * gap
    w = cols * s + (cols - 1) * gap
    grid = np.ones((h, w))
    for i, row in enumerate(rows):
        for j, img in enumerate(row):
            y, x = i * (s + gap), j * (s + gap)
            grid[y : y + s, x : x + s] = img
    return grid


def cmd_synthesize(args, run: Run) -> int:
    bundle = load_checkpoint(args.ckpt, expect_kind=args.model)
    run.input("ckpt", Path(args.ckpt))
    src_dir = Path(args.input) / "t1"
    if not src_dir.is_dir():
        raise DataError(f"missing source directory {src_dir}")
    paths = sorted(src_dir.glob("*.png"))
    if not paths:
        raise DataError(f"no PNG slices under {src_dir}")
    run.input("input", src_dir)
    if args.grid_rows < 2 or args.grid_rows % 2:
        raise ValidationError("--grid-rows must be an even number >= 2 (original/generated row pairs)")
    x = _model_images(paths, bundle.image_size, bundle.in_channels)
    pred = bundle.translate(x)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for p, y in zip(paths, pred):
        write_png(run.artifact(out / p.name), _to_gray01(y))
    if args.grid:
        cols = args.grid_cols
        rows = []
        for k in range(args.grid_rows // 2):
            chunk = range(k * cols, min((k + 1) * cols, len(x)))
            if not len(chunk):
                break
            rows.append([_to_gray01(x[i]) for i in chunk])
            rows.append([_to_gray01(pred[i]) for i in chunk])
        write_png(run.artifact(Path(args.grid)), render_grid(rows))
    print(f"synthesized {len(pred)} images into {out}")
    return 0


def _identity_oracle(data):
    """Debug model that returns the ground-truth target for each source."""
    src, tgt = data.arrays()
    lookup = {src[i].tobytes(): tgt[i] for i in range(len(src))}
    return lambda batch: np.stack([lookup[b.tobytes()] for b in np.asarray(batch)])


def cmd_evaluate(args, run: Run) -> int:
    if args.oracle is None and args.ckpt is None:
        raise ValidationError("evaluate needs --ckpt (or --oracle identity for debugging)")
    root = Path(args.data)
    if not (root / "t2").is_dir():
        raise DataError(f"missing target directory {root / 't2'}")
    if args.oracle == "identity":
        size = args.image_size
        if size is None:
            first = sorted((root / "t1").glob("*.png"))
            if not first:
                raise DataError(f"no PNG slices under {root / 't1'}")
            size = read_png(first[0]).shape[0]
        data = load_paired_dataset(root, size, args.channels or 1)
        model, seed, name = _identity_oracle(data), 0, args.name or "identity-oracle"
    else:
        bundle = load_checkpoint(args.ckpt, expect_kind=args.model)
        run.input("ckpt", Path(args.ckpt))
        data = load_paired_dataset(root, bundle.image_size, bundle.in_channels)
        model, seed, name = bundle, bundle.seed, args.name
    run.input("data", root)
    src, tgt = data.arrays()
    report = evaluate(model, src, tgt, SSIMParams(), name=name, seed=seed)
    out = Path(args.report)
    out.parent.mkdir(parents=True, exist_ok=True)
    _atomic_write(run.artifact(out), render_report([report], "csv"))
    print(render_report([report], "markdown"), end="")
    return 0


def cmd_compare(args, run: Run) -> int:
    reports = []
    for path in args.reports:
        reports.extend(read_reports(path))
        run.input(Path(path).name, Path(path))
    table = render_report(reports, "markdown")
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        _atomic_write(run.artifact(out), table)
    print(table, end="")
    return 0


def cmd_gradcheck(args, run: Run) -> int:
    seeds = [args.seed] if args.seed is not None else range(5)
    try:
        reports = gradcheck.run_suite(args.op, args.tol, seeds)
    except KeyError as exc:
        raise ValidationError(str(exc.args[0])) from None
    worst: Dict[str, float] = {}
    for r in reports:
        worst[r.op] = max(worst.get(r.op, 0.0), r.worst)
    failing = [op for op, err in worst.items() if err > args.tol]
    for op, err in worst.items():
        print(f"{op:20s} max_rel_err={err:.3e} {'FAIL' if op in failing else 'ok'}")
    if failing:
        print(f"gradient check failed for: {', '.join(failing)}", file=sys.stderr)
        return 3
    print(f"all {len(worst)} ops pass at tolerance {args.tol:g}")
    return 0


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="xms", description="T1-to-T2 slice synthesis with Pix2Pix, CycleGAN, and a VAE.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch losses")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    ph = sub.add_parser("phantom", help="generate a procedural paired dataset")
    ph.add_argument("--out", required=True)
    ph.add_argument("--count", type=int, default=200)
    ph.add_argument("--size", type=int, default=64)
    ph.add_argument("--seed", type=int, default=0)
    ph.add_argument("--split", default="train")

    tr = sub.add_parser("train", help="train a model and write a checkpoint")
    tr.add_argument("--model", required=True, help=f"one of {', '.join(MODEL_KINDS)}")
    tr.add_argument("--data", required=True)
    tr.add_argument("--out", required=True, help="checkpoint path")
    tr.add_argument("--run-dir", help="directory for history and resolved config (default: checkpoint's directory)")
    tr.add_argument("--config", help="key=value config file")
    tr.add_argument("--profile", choices=("desk", "full"), default="desk", help="default hyperparameter set")
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--batch", type=int)
    tr.add_argument("--lr", type=float)
    tr.add_argument("--image-size", type=int)
    tr.add_argument("--channels", type=int)
    tr.add_argument("--base-channels", type=int)
    tr.add_argument("--latent-dim", type=int)
    tr.add_argument("--lambda-l1", type=float)
    tr.add_argument("--lambda-cyc", type=float)
    tr.add_argument("--lambda-id", type=float)
    tr.add_argument("--kl-weight", type=float)
    tr.add_argument("--seed", type=int)

    sy = sub.add_parser("synthesize", help="translate t1/ slices with a checkpoint")
    sy.add_argument("--ckpt", required=True)
    sy.add_argument("--input", required=True)
    sy.add_argument("--out", required=True)
    sy.add_argument("--model", choices=MODEL_KINDS, help="require this checkpoint kind")
    sy.add_argument("--grid", help="write an originals-over-outputs comparison grid here")
    sy.add_argument("--grid-rows", type=int, default=2)
    sy.add_argument("--grid-cols", type=int, default=8)

    ev = sub.add_parser("evaluate", help="score a checkpoint on a paired test set")
    ev.add_argument("--ckpt")
    ev.add_argument("--data", required=True)
    ev.add_argument("--report", required=True)
    ev.add_argument("--model", choices=MODEL_KINDS, help="require this checkpoint kind")
    ev.add_argument("--name", help="model name in the report")
    ev.add_argument("--oracle", choices=("identity",), help="debug: predict the ground truth instead of a checkpoint")
    ev.add_argument("--image-size", type=int, help="oracle mode only")
    ev.add_argument("--channels", type=int, help="oracle mode only")

    co = sub.add_parser("compare", help="render report CSVs as one comparison table")
    co.add_argument("--reports", nargs="+", required=True)
    co.add_argument("--out")

    gc = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    gc.add_argument("--op", action="append", help="op name (repeatable); default all")
    gc.add_argument("--tol", type=float, default=1e-4)
    gc.add_argument("--seed", type=int)
    return p


def _run_dir(args) -> Optional[Path]:
    if args.command == "phantom":
        return Path(args.out)
    if args.command == "train":
        return Path(args.run_dir) if args.run_dir else Path(args.out).parent
    if args.command == "synthesize":
        return Path(args.out)
    if args.command == "evaluate":
        return Path(args.report).parent
    if args.command == "compare" and args.out:
        return Path(args.out).parent
    return None


COMMANDS = {
    "phantom": cmd_phantom,
    "train": cmd_train,
    "synthesize": cmd_synthesize,
    "evaluate": cmd_evaluate,
    "compare": cmd_compare,
    "gradcheck": cmd_gradcheck,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.command == "train" and args.model not in MODEL_KINDS:
        print(f"xms: error: unknown model {args.model!r}; supported: {', '.join(MODEL_KINDS)}", file=sys.stderr)
        return 1
    run = Run(args.command, _run_dir(args))
    code = 1
    try:
        code = COMMANDS[args.command](args, run)
    except XmsError as exc:
        print(f"xms: error: {exc}", file=sys.stderr)
        code = exc.exit_code
    except OSError as exc:
        print(f"xms: error: {exc}", file=sys.stderr)
        code = 2
    finally:
        run.finish(code)
    return code


if __name__ == "__main__":
    sys.exit(main())
