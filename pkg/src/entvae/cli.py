"""Command-line entry point: gen-data, train, evaluate, sweep, reproduce.

Every command resolves its settings as flags > ``--config`` JSON > defaults,
computes all outputs in memory, and only then writes them (each file through
a temporary name and an atomic rename), so a failed run leaves no partial
artifacts behind. Each successful run also writes ``<command>.manifest.json``
with the resolved configuration and SHA-256 checksums of inputs and outputs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (
    SWEEP_RATIOS,
    beta_sweep,
    fit_latent_rule,
    latent_csv_text,
    latent_rule_accuracy,
    train_and_score,
)
from .bvae import BetaVAE
from .dataset import LabeledDataset, Subset, generate_split, load_csv, project, to_csv_text
from .trainer import TrainConfig, evaluate

log = logging.getLogger("entvae")

DEFAULTS = {
    "seed": 0,
    "subset": None,
    "n_train": 5000,
    "n_test": 3000,
    "balanced": True,
    "epochs": 100,
    "lr": TrainConfig.lr,
    "rcat": TrainConfig.r_cat,
    "beta": TrainConfig.beta,
    "batch": TrainConfig.batch_size,
    "ratios": list(SWEEP_RATIOS),
    "n_seeds": 1,
    "jobs": 1,
}

# Published accuracies (model, latent rule) the reproduction is compared against.
REFERENCE_ACCURACY = {
    "full": (0.88, 0.84),
    "correlated": (0.83, 0.80),
    "local": (0.61, 0.61),
}

SUMMARY_COLUMNS = ("subset", "model_acc", "latent_acc", "ref_model_acc", "ref_latent_acc")


class CliError(Exception):
    """A user-facing failure; the message is printed and the exit code is 1."""


# --------------------------------------------------------------------------
# argument handling


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected true or false, got {text!r}")


def parse_ratios(text) -> list[float]:
    """Comma-separated positive floats (a JSON list is accepted from a config file)."""
    items = text if isinstance(text, list) else [t for t in str(text).split(",")]
    try:
        ratios = [float(t) for t in items]
    except (TypeError, ValueError):
        raise argparse.ArgumentTypeError(f"malformed ratio list {text!r}") from None
    if not ratios or any(not np.isfinite(r) or r <= 0 for r in ratios):
        raise argparse.ArgumentTypeError(f"ratios must be positive numbers, got {text!r}")
    return ratios


def _subset_name(text: str) -> str:
    try:
        return Subset.parse(text).value
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _add_common(p: argparse.ArgumentParser, *names: str) -> None:
    # defaults stay None so that the config file can fill the gaps
    spec = {
        "seed": dict(type=int, help="master seed for every random stream"),
        "subset": dict(type=_subset_name, help="full | correlated | local"),
        "n_train": dict(type=int, help="training samples (default 5000)"),
        "n_test": dict(type=int, help="held-out samples (default 3000)"),
        "balanced": dict(type=_parse_bool, help="equal class counts: true | false (default true)"),
        "epochs": dict(type=int, help="training epochs (default 100)"),
        "lr": dict(type=float, help=f"initial learning rate (default {DEFAULTS['lr']})"),
        "rcat": dict(type=float, help="cross-entropy weight (default 500)"),
        "beta": dict(type=float, help="KL weight (default 1)"),
        "batch": dict(type=int, help="minibatch size (default 32)"),
        "ratios": dict(type=parse_ratios, help="comma-separated beta/r_cat ratios"),
        "n_seeds": dict(type=int, help="seeds per sweep ratio, counting up from --seed (default 1)"),
        "jobs": dict(type=int, help="parallel fits (default 1)"),
    }
    for name in names:
        p.add_argument("--" + name.replace("_", "-"), dest=name, default=None, **spec[name])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="entvae", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-q", "--quiet", action="store_true", help="only print errors and results")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help_text, *common):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", type=Path, help="JSON file of defaults (flags override it)")
        _add_common(p, *common)
        return p

    p = command("gen-data", "Generate labeled train/test CSVs with JSON sidecars.",
                "seed", "subset", "n_train", "n_test", "balanced")
    p.add_argument("--out", type=Path, required=True, help="output directory")

    p = command("train", "Train a model on <data>/train.csv, validating on <data>/test.csv.",
                "seed", "subset", "epochs", "lr", "rcat", "beta", "batch")
    p.add_argument("--data", type=Path, required=True, help="directory holding train.csv and test.csv")
    p.add_argument("--out", type=Path, required=True, help="output directory")

    p = command("evaluate", "Score a checkpoint and fit the latent sign rule.", "subset")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True, help="directory holding train.csv and test.csv")
    p.add_argument("--out", type=Path, help="output directory (default: the checkpoint's)")

    p = command("sweep", "Accuracy against beta/r_cat.",
                "seed", "subset", "epochs", "lr", "rcat", "batch", "ratios", "n_seeds", "jobs")
    p.add_argument("--data", type=Path, required=True, help="directory holding train.csv and test.csv")
    p.add_argument("--out", type=Path, required=True, help="output directory")

    p = command("reproduce", "Generate data, train and score all three measurement subsets.",
                "seed", "n_train", "n_test", "balanced", "epochs", "lr", "rcat", "beta", "batch", "jobs")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    return parser


_COMMON_KEYS = set(DEFAULTS)


def resolve(args: argparse.Namespace) -> dict:
    """Merge flags over the config file over built-in defaults."""
    file_cfg = {}
    if args.config is not None:
        try:
            file_cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(file_cfg, dict):
            raise CliError("config file must hold a JSON object")
    known = {k for k in _COMMON_KEYS if hasattr(args, k)}
    unknown = set(file_cfg) - known
    if unknown:
        raise CliError(f"unknown config keys for {args.command}: {', '.join(sorted(unknown))}")
    cfg = {}
    for key in sorted(known):
        value = getattr(args, key)
        if value is None and key in file_cfg:
            value = file_cfg[key]
            try:
                value = _coerce(key, value)
            except (argparse.ArgumentTypeError, TypeError, ValueError) as exc:
                raise CliError(f"config key {key!r}: {exc}") from None
        cfg[key] = DEFAULTS[key] if value is None else value
    for key in ("n_train", "n_test", "epochs", "batch", "n_seeds", "jobs"):
        if key in cfg and cfg[key] < 1:
            raise CliError(f"--{key.replace('_', '-')} must be >= 1")
    if "seed" in cfg and cfg["seed"] < 0:
        raise CliError("--seed must be non-negative")
    return cfg


def _coerce(key, value):
    if key == "ratios":
        return parse_ratios(value)
    if key == "subset":
        return _subset_name(value)
    if key == "balanced":
        return value if isinstance(value, bool) else _parse_bool(str(value))
    if key in ("lr", "rcat", "beta"):
        return float(value)
    if isinstance(value, bool) or int(value) != value:
        raise ValueError(f"expected an integer, got {value!r}")
    return int(value)


# --------------------------------------------------------------------------
# output staging


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


class Staged:
    """Collects text outputs and writes them all-or-nothing."""

    def __init__(self, root: Path):
        self.root = Path(root)
        self.files: dict[str, str] = {}

    def add(self, relpath: str, text: str) -> None:
        self.files[relpath] = text

    def commit(self) -> list[Path]:
        temps = []
        try:
            for rel, text in self.files.items():
                final = self.root / rel
                final.parent.mkdir(parents=True, exist_ok=True)
                tmp = final.with_name(final.name + ".tmp")
                with open(tmp, "w", encoding="utf-8", newline="") as fh:
                    fh.write(text)
                temps.append((tmp, final))
        except OSError:
            for tmp, _ in temps:
                tmp.unlink(missing_ok=True)
            raise
        for tmp, final in temps:
            os.replace(tmp, final)
        return [final for _, final in temps]


def _dataset_files(ds: LabeledDataset, stem: str, staged: Staged) -> None:
    staged.add(f"{stem}.csv", to_csv_text(ds))
    staged.add(f"{stem}.json", json.dumps(ds.metadata, indent=2, sort_keys=True) + "\n")


def write_with_manifest(command: str, cfg: dict, staged: Staged, inputs: dict[str, Path],
                        argv: list[str]) -> Path:
    written = staged.commit()
    manifest = {
        "command": command,
        "argv": argv,
        "version": __version__,
        "seed": cfg.get("seed"),
        "config": cfg,
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": [str(p) for p in written],
        "checksums": {str(p): sha256_file(p) for p in [*inputs.values(), *written]},
        "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    path = staged.root / f"{command}.manifest.json"
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    os.replace(tmp, path)
    return path


# --------------------------------------------------------------------------
# shared helpers


def load_pair(data_dir: Path, subset: str | None) -> tuple[LabeledDataset, LabeledDataset, dict]:
    """Load train/test CSVs; a full-width file is projected down to ``subset``."""
    paths = {"train": Path(data_dir) / "train.csv", "test": Path(data_dir) / "test.csv"}
    for p in paths.values():
        if not p.is_file():
            raise CliError(f"dataset file not found: {p}")
    out = []
    for p in paths.values():
        ds = load_csv(p)
        if subset is not None and ds.subset.value != subset:
            if ds.subset is not Subset.FULL:
                raise CliError(f"{p} holds the {ds.subset.value!r} subset, not {subset!r}")
            ds = project(ds, subset)
        out.append(ds)
    train, test = out
    if train.subset is not test.subset:
        raise CliError("train.csv and test.csv hold different measurement subsets")
    return train, test, paths


def train_config(cfg: dict, **override) -> TrainConfig:
    return TrainConfig(epochs=cfg["epochs"], lr=cfg["lr"], batch_size=cfg["batch"],
                       r_cat=cfg["rcat"], beta=override.get("beta", cfg.get("beta", 1.0)),
                       seed=cfg["seed"])


def _progress(tag: str):
    def report(rec):
        log.info("%s epoch %3d  lr %.1e  loss %.3f  acc %.4f  val_loss %.3f  val_acc %.4f",
                 tag, rec.epoch, rec.lr, rec.train_loss, rec.train_acc, rec.val_loss, rec.val_acc)
    return report


def metrics_for(model: BetaVAE, train: LabeledDataset, test: LabeledDataset) -> dict:
    ev = evaluate(model, test)
    rule, _ = fit_latent_rule(model.latent_mean(train.features), train.labels)
    latent_acc = latent_rule_accuracy(rule, model.latent_mean(test.features), test.labels)
    return {
        "model_accuracy": ev.accuracy,
        "latent_rule": {"axis": rule.axis,
                        "separable_side": "positive" if rule.separable_positive else "negative"},
        "latent_accuracy": latent_acc,
        "confusion": ev.confusion.tolist(),
    }


def _fit_subset(job):
    """Train one subset; returns plain data so it can cross a process boundary."""
    subset, train, test, tcfg = job
    res = train_and_score(train, test, tcfg, progress=_progress(subset))
    return subset, res.model.to_dict(), res.log.to_csv_text()


# --------------------------------------------------------------------------
# commands


def cmd_gen_data(args, cfg, argv) -> int:
    subset = cfg["subset"] or Subset.FULL.value
    cfg["subset"] = subset
    train, test = generate_split(cfg["n_train"], cfg["n_test"], cfg["seed"], cfg["balanced"])
    staged = Staged(args.out)
    _dataset_files(project(train, subset), "train", staged)
    _dataset_files(project(test, subset), "test", staged)
    write_with_manifest("gen-data", cfg, staged, {}, argv)
    log.info("wrote %d train and %d test rows (%s) to %s", len(train), len(test), subset, args.out)
    return 0


def cmd_train(args, cfg, argv) -> int:
    train, test, inputs = load_pair(args.data, cfg["subset"])
    cfg["subset"] = train.subset.value
    res = train_and_score(train, test, train_config(cfg), progress=_progress("train"))
    staged = Staged(args.out)
    staged.add("checkpoint.json", json.dumps(res.model.to_dict()))
    staged.add("trainlog.csv", res.log.to_csv_text())
    write_with_manifest("train", cfg, staged, inputs, argv)
    print(f"final val_acc {res.log[-1].val_acc:.4f}  latent_acc {res.latent_acc:.4f}")
    return 0


def cmd_evaluate(args, cfg, argv) -> int:
    model = BetaVAE.load(args.checkpoint)
    subset = cfg["subset"]
    if subset is None:
        subset = {15: "full", 9: "correlated", 6: "local"}[model.config.input_dim]
    cfg["subset"] = subset
    train, test, inputs = load_pair(args.data, subset)
    if train.features.shape[1] != model.config.input_dim:
        raise CliError(f"checkpoint expects {model.config.input_dim} features; "
                       f"the {subset!r} subset has {train.features.shape[1]}")
    metrics = metrics_for(model, train, test)
    out = args.out or Path(args.checkpoint).parent
    staged = Staged(out)
    text = json.dumps(metrics, indent=2) + "\n"
    staged.add("metrics.json", text)
    staged.add("latent_test.csv", latent_csv_text(model, test))
    write_with_manifest("evaluate", cfg, staged, {**inputs, "checkpoint": Path(args.checkpoint)}, argv)
    print(text, end="")
    return 0


def cmd_sweep(args, cfg, argv) -> int:
    train, test, inputs = load_pair(args.data, cfg["subset"])
    cfg["subset"] = train.subset.value
    seeds = [cfg["seed"] + k for k in range(cfg["n_seeds"])]
    base = train_config(cfg, beta=1.0)

    def report(row):
        log.info("ratio %g seed %d: model %.4f latent %.4f", row.ratio, row.seed, row.model_acc, row.latent_acc)

    result = beta_sweep(base, train, test, cfg["ratios"], seeds, progress=report, jobs=cfg["jobs"])
    staged = Staged(args.out)
    staged.add("sweep.csv", result.to_csv_text())
    write_with_manifest("sweep", cfg, staged, inputs, argv)
    print(result.to_csv_text(), end="")
    return 0


def summary_text(rows: list[dict]) -> str:
    lines = [",".join(SUMMARY_COLUMNS)]
    for r in rows:
        lines.append(",".join([r["subset"]] + [f"{r[c]:.4f}" for c in SUMMARY_COLUMNS[1:]]))
    return "\n".join(lines) + "\n"


def cmd_reproduce(args, cfg, argv) -> int:
    stage = "generate"
    try:
        train, test = generate_split(cfg["n_train"], cfg["n_test"], cfg["seed"], cfg["balanced"])
        staged = Staged(args.out)
        _dataset_files(train, "data/train", staged)
        _dataset_files(test, "data/test", staged)
        subsets = [s.value for s in Subset]
        jobs = [(s, project(train, s), project(test, s), train_config(cfg)) for s in subsets]

        stage = "train"
        if cfg["jobs"] > 1:
            with ProcessPoolExecutor(max_workers=min(cfg["jobs"], len(jobs))) as pool:
                fitted = list(pool.map(_fit_subset, jobs))
        else:
            fitted = [_fit_subset(j) for j in jobs]

        rows = []
        for (subset, tr, te, _), (_, doc, log_text) in zip(jobs, fitted):
            stage = f"evaluate-{subset}"
            model = BetaVAE.from_dict(doc)
            metrics = metrics_for(model, tr, te)
            staged.add(f"{subset}/checkpoint.json", json.dumps(doc))
            staged.add(f"{subset}/trainlog.csv", log_text)
            staged.add(f"{subset}/metrics.json", json.dumps(metrics, indent=2) + "\n")
            staged.add(f"{subset}/latent_test.csv", latent_csv_text(model, te))
            ref_model, ref_latent = REFERENCE_ACCURACY[subset]
            rows.append({"subset": subset, "model_acc": metrics["model_accuracy"],
                         "latent_acc": metrics["latent_accuracy"],
                         "ref_model_acc": ref_model, "ref_latent_acc": ref_latent})
        summary = summary_text(rows)
        staged.add("summary.csv", summary)

        stage = "write"
        write_with_manifest("reproduce", cfg, staged, {}, argv)
    except CliError:
        raise
    except Exception as exc:
        raise CliError(f"stage {stage!r} failed: {exc}") from exc
    print(summary, end="")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "reproduce": cmd_reproduce,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    try:
        cfg = resolve(args)
        return COMMANDS[args.command](args, cfg, argv)
    except CliError as exc:
        print(f"entvae {args.command}: error: {exc}", file=sys.stderr)
    except (OSError, ValueError, FloatingPointError) as exc:
        # DatasetError, CheckpointError and TrainingDiagnostic land here too
        print(f"entvae {args.command}: error: {type(exc).__name__}: {exc}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
