"""Latent-space sign rules, the beta / r_cat sweep, and CSV exports for plotting."""

from __future__ import annotations

import csv
import io
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .bvae import BetaVAE, BvaeConfig, build_model
from .dataset import LabeledDataset
from .trainer import TrainConfig, TrainLog, evaluate, fit, substream

SWEEP_RATIOS = (2e-4, 1e-3, 1e-2, 0.1, 0.3, 0.5, 1.0)
SWEEP_COLUMNS = ("ratio", "seed", "model_acc", "latent_acc")


@dataclass(frozen=True)
class LatentRule:
    """Threshold one latent axis at zero.

    With ``separable_positive`` a point is called separable when its
    coordinate is > 0 and entangled otherwise; the opposite polarity is the
    exact complement.
    """

    axis: int = 1
    separable_positive: bool = True

    def __post_init__(self):
        if self.axis not in (0, 1):
            raise ValueError(f"axis must be 0 or 1, got {self.axis}")

    def predict(self, latents: np.ndarray) -> np.ndarray:
        positive = np.asarray(latents)[:, self.axis] > 0
        separable = positive if self.separable_positive else ~positive
        return (~separable).astype(np.int64)


def latent_rule_accuracy(rule: LatentRule, latents, labels) -> float:
    labels = np.asarray(labels)
    if labels.size == 0:
        return 0.0
    return float(np.mean(rule.predict(latents) == labels))


def fit_latent_rule(latents, labels) -> tuple[LatentRule, float]:
    """Best of the four (axis, polarity) rules; ties keep the earlier candidate."""
    latents = np.atleast_2d(np.asarray(latents, dtype=float))
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("need at least one sample")
    best, best_acc = None, -1.0
    for axis in (0, 1):
        for positive in (True, False):
            rule = LatentRule(axis, positive)
            acc = latent_rule_accuracy(rule, latents, labels)
            if acc > best_acc:
                best, best_acc = rule, acc
    return best, best_acc


@dataclass
class RunResult:
    """One trained model with its held-out metrics."""

    model: BetaVAE
    log: TrainLog
    model_acc: float
    rule: LatentRule
    rule_train_acc: float
    latent_acc: float
    confusion: np.ndarray


def train_and_score(train: LabeledDataset, test: LabeledDataset, config: TrainConfig,
                    model_config: BvaeConfig | None = None, progress=None) -> RunResult:
    """Build, fit, evaluate, and fit the latent rule on the training latents."""
    model_config = model_config or BvaeConfig()
    model_config = replace(model_config, input_dim=train.features.shape[1],
                           r_cat=config.r_cat, beta=config.beta)
    model = build_model(model_config, substream(config.seed, "init"), seed=config.seed)
    log = fit(model, train, test, config, progress=progress)
    ev = evaluate(model, test)
    rule, rule_train_acc = fit_latent_rule(model.latent_mean(train.features), train.labels)
    latent_acc = latent_rule_accuracy(rule, model.latent_mean(test.features), test.labels)
    return RunResult(model, log, ev.accuracy, rule, rule_train_acc, latent_acc, ev.confusion)


@dataclass(frozen=True)
class SweepRow:
    ratio: float
    seed: int
    model_acc: float
    latent_acc: float


@dataclass
class SweepResult:
    rows: list[SweepRow]

    def __len__(self) -> int:
        return len(self.rows)

    def accuracy(self, ratio: float, column: str = "model_acc") -> float:
        """Mean over seeds at one ratio."""
        vals = [getattr(r, column) for r in self.rows if r.ratio == ratio]
        if not vals:
            raise KeyError(ratio)
        return float(np.mean(vals))

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(SWEEP_COLUMNS)
        for r in self.rows:
            writer.writerow([repr(r.ratio), r.seed, repr(r.model_acc), repr(r.latent_acc)])
        return buf.getvalue()


def _sweep_point(args) -> SweepRow:
    cfg, train, test, model_config, ratio = args
    res = train_and_score(train, test, cfg, model_config)
    return SweepRow(ratio, cfg.seed, res.model_acc, res.latent_acc)


def beta_sweep(base_config: TrainConfig, train: LabeledDataset, test: LabeledDataset,
               ratios: Iterable[float], seeds: Sequence[int] | None = None,
               model_config: BvaeConfig | None = None, progress=None, jobs: int = 1) -> SweepResult:
    """Fit one model per (ratio, seed) with beta = ratio * r_cat.

    Rows come back ordered by ratio, then seed, whatever ``jobs`` is; each
    point is deterministic on its own so parallel runs give the same table.
    ``progress`` is called with each finished row.
    """
    ratios = sorted(set(float(r) for r in ratios))
    if any(r <= 0 for r in ratios):
        raise ValueError("ratios must be positive")
    if jobs < 1:
        raise ValueError("jobs must be >= 1")
    seeds = list(seeds) if seeds is not None else [base_config.seed]
    tasks = [(replace(base_config, beta=ratio * base_config.r_cat, seed=seed), train, test, model_config, ratio)
             for ratio in ratios for seed in seeds]
    if jobs == 1 or len(tasks) <= 1:
        rows = []
        for task in tasks:
            rows.append(_sweep_point(task))
            if progress is not None:
                progress(rows[-1])
        return SweepResult(rows)
    with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as pool:
        rows = list(pool.map(_sweep_point, tasks))
    if progress is not None:
        for row in rows:
            progress(row)
    return SweepResult(rows)


def latent_csv_text(model: BetaVAE, ds: LabeledDataset) -> str:
    mu = model.latent_mean(ds.features)
    lines = ["z0,z1,label"]
    lines += [f"{a!r},{b!r},{int(y)}" for (a, b), y in zip(mu.tolist(), ds.labels)]
    return "\n".join(lines) + "\n"


def export_latent_csv(model: BetaVAE, ds: LabeledDataset, path: str | os.PathLike) -> None:
    """Write the mean latent embedding of ``ds`` with its labels."""
    if ds.features.shape[1] != model.config.input_dim:
        raise ValueError("dataset subset does not match the model input")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(latent_csv_text(model, ds), encoding="utf-8")
    os.replace(tmp, path)
