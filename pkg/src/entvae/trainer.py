"""Adam, reduce-on-plateau scheduling, the epoch loop and evaluation."""

from __future__ import annotations

import csv
import io
import logging
import math
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from .bvae import BetaVAE, TrainingDiagnostic
from .dataset import LabeledDataset

log = logging.getLogger(__name__)

TRAINLOG_COLUMNS = ("epoch", "lr", "train_loss", "train_cat", "train_kl", "train_acc", "val_loss", "val_acc")


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named purpose (init, shuffle, dropout, latent, ...)."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(zlib.crc32(name.encode()),)))


class AdamState:
    def __init__(self, size: int, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self._tmp = np.empty(size)
        self._tmp2 = np.empty(size)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, lr: float) -> None:
    """One in-place Adam update of the flat parameter vector."""
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ValueError(f"shape mismatch: params {params.shape}, grads {grads.shape}, state {state.m.shape}")
    b1, b2 = state.beta1, state.beta2
    state.t += 1
    tmp, tmp2 = state._tmp, state._tmp2
    state.m *= b1
    np.multiply(grads, 1.0 - b1, out=tmp)
    state.m += tmp
    state.v *= b2
    np.multiply(grads, grads, out=tmp)
    tmp *= 1.0 - b2
    state.v += tmp
    # p -= lr * m_hat / (sqrt(v_hat) + eps)
    np.divide(state.v, 1.0 - b2 ** state.t, out=tmp)
    np.sqrt(tmp, out=tmp)
    tmp += state.eps
    np.divide(state.m, tmp, out=tmp2)
    tmp2 *= lr / (1.0 - b1 ** state.t)
    params -= tmp2


@dataclass
class PlateauSchedule:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs without improvement."""

    factor: float = 0.1
    patience: int = 10
    min_delta: float = 1e-4
    min_lr: float = 1e-6
    best: float = math.inf
    wait: int = 0

    def __post_init__(self):
        if not 0.0 < self.factor < 1.0:
            raise ValueError("factor must be in (0, 1)")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")

    def update(self, val_loss: float, lr: float) -> float:
        if val_loss < self.best - self.min_delta:
            self.best = val_loss
            self.wait = 0
            return lr
        self.wait += 1
        if self.wait >= self.patience:
            self.wait = 0
            return max(lr * self.factor, self.min_lr)
        return lr


def plateau_update(schedule: PlateauSchedule, validation_loss: float, current_lr: float) -> float:
    return schedule.update(validation_loss, current_lr)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    lr: float = 0.001
    batch_size: int = 32
    r_cat: float = 500.0
    beta: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.r_cat <= 0 or self.beta < 0:
            raise ValueError("need r_cat > 0 and beta >= 0")


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    train_cat: float
    train_kl: float
    train_acc: float
    val_loss: float
    val_acc: float


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, i) -> EpochRecord:
        return self.records[i]

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(TRAINLOG_COLUMNS)
        for r in self.records:
            row = asdict(r)
            writer.writerow([r.epoch] + [repr(float(row[c])) for c in TRAINLOG_COLUMNS[1:]])
        return buf.getvalue()

    @classmethod
    def from_csv_text(cls, text: str) -> "TrainLog":
        rows = list(csv.DictReader(io.StringIO(text)))
        return cls([EpochRecord(int(r["epoch"]), *(float(r[c]) for c in TRAINLOG_COLUMNS[1:])) for r in rows])


@dataclass
class Evaluation:
    accuracy: float
    confusion: np.ndarray  # rows: true label, cols: predicted label


def _check_subset(model: BetaVAE, ds: LabeledDataset) -> None:
    if ds.features.shape[1] != model.config.input_dim:
        raise ValueError(
            f"dataset subset {ds.subset.value!r} has {ds.features.shape[1]} features; "
            f"model expects {model.config.input_dim}")


def evaluate(model: BetaVAE, ds: LabeledDataset) -> Evaluation:
    """Deterministic accuracy: argmax of decode(mu), ties to class 0."""
    _check_subset(model, ds)
    pred = model.predict(ds.features)
    confusion = np.zeros((2, 2), dtype=np.int64)
    np.add.at(confusion, (ds.labels, pred), 1)
    acc = float(np.trace(confusion) / len(ds)) if len(ds) else 0.0
    return Evaluation(acc, confusion)


def validation_loss(model: BetaVAE, ds: LabeledDataset, r_cat: float, beta: float) -> float:
    """Total loss on the mean latent path (no dropout, zero latent noise)."""
    eps = np.zeros((len(ds), model.config.latent_dim))
    return model.loss_total(ds.features, ds.labels, r_cat=r_cat, beta=beta, epsilon=eps).total


def fit(model: BetaVAE, train: LabeledDataset, val: LabeledDataset, config: TrainConfig,
        schedule: PlateauSchedule | None = None, progress=None) -> TrainLog:
    """Train ``model`` in place and return the per-epoch log."""
    _check_subset(model, train)
    _check_subset(model, val)
    schedule = schedule or PlateauSchedule()
    shuffle_rng = substream(config.seed, "shuffle")
    dropout_rng = substream(config.seed, "dropout")
    latent_rng = substream(config.seed, "latent")
    state = AdamState(model.n_parameters)
    lr = config.lr
    n = len(train)
    x_all, y_all = train.features, train.labels
    history = TrainLog()

    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(n)
        sums = np.zeros(4)
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            x, y = x_all[idx], y_all[idx]
            eps = latent_rng.standard_normal((len(idx), model.config.latent_dim))
            try:
                terms, _ = model.backward(x, y, config.r_cat, config.beta, epsilon=eps,
                                          training=True, rng=dropout_rng)
            except (TrainingDiagnostic, FloatingPointError) as exc:
                raise TrainingDiagnostic(f"epoch {epoch}, batch {b}: {exc}") from None
            if not np.all(np.isfinite(model.grad_flat)):
                raise TrainingDiagnostic(f"epoch {epoch}, batch {b}: non-finite gradient")
            adam_step(model.buffer.flat, model.grad_flat, state, lr)
            batch_acc = float(np.mean(np.argmax(model.last_output, axis=1) == y))
            sums += len(idx) * np.array([terms.total, terms.cat, terms.kl, batch_acc])
        train_loss, train_cat, train_kl, train_acc = sums / n
        val_loss = validation_loss(model, val, config.r_cat, config.beta)
        if not np.isfinite(val_loss):
            raise TrainingDiagnostic(f"epoch {epoch}: validation loss is {val_loss}")
        val_acc = evaluate(model, val).accuracy
        history.records.append(EpochRecord(epoch, lr, float(train_loss), float(train_cat),
                                           float(train_kl), float(train_acc), val_loss, val_acc))
        log.debug("epoch %d lr %.2g loss %.4f acc %.4f val_loss %.4f val_acc %.4f",
                  epoch, lr, train_loss, train_acc, val_loss, val_acc)
        if progress is not None:
            progress(history.records[-1])
        lr = schedule.update(val_loss, lr)
    return history
