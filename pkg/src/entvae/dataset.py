"""Labeled measurement datasets: generation, subset projection, CSV I/O."""

from __future__ import annotations

import csv
import enum
import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .qstate import MEASUREMENT_LABELS, pauli_expectations, ppt_label, random_density_matrices

ENSEMBLE = "hilbert-schmidt"
TEST_SEED_XOR = 0x5EED_7E57
_CHUNK = 512


class DatasetError(ValueError):
    """Malformed dataset file or invalid dataset operation."""

    def __init__(self, message: str, row: int | None = None, column: str | None = None):
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column!r}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)
        self.row = row
        self.column = column


class Subset(enum.Enum):
    FULL = "full"
    CORRELATED = "correlated"
    LOCAL = "local"

    @property
    def columns(self) -> slice:
        return {"full": slice(0, 15), "correlated": slice(6, 15), "local": slice(0, 6)}[self.value]

    @property
    def names(self) -> tuple[str, ...]:
        return MEASUREMENT_LABELS[self.columns]

    @property
    def width(self) -> int:
        return len(self.names)

    @classmethod
    def parse(cls, value: "Subset | str") -> "Subset":
        if isinstance(value, Subset):
            return value
        try:
            return cls(value)
        except ValueError:
            choices = ", ".join(s.value for s in cls)
            raise ValueError(f"unknown subset {value!r}; expected one of {choices}") from None


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    subset: Subset = Subset.FULL
    seed: int | None = None
    ensemble: str = ENSEMBLE
    balanced: bool = False
    created: str | None = field(default=None, compare=False)

    def __post_init__(self):
        features = np.asarray(self.features, dtype=float).reshape(-1, self.subset.width)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if features.shape[0] != labels.shape[0]:
            raise DatasetError(f"{features.shape[0]} feature rows but {labels.shape[0]} labels")
        if not np.all(np.isin(labels, (0, 1))):
            raise DatasetError("labels must be 0 or 1")
        features.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.labels.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, LabeledDataset):
            return NotImplemented
        return (
            self.subset is other.subset
            and self.seed == other.seed
            and self.ensemble == other.ensemble
            and self.balanced == other.balanced
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
        )

    @property
    def metadata(self) -> dict:
        return {
            "seed": self.seed,
            "ensemble": self.ensemble,
            "balanced": self.balanced,
            "subset": self.subset.value,
            "n": len(self),
            "generator_version": __version__,
        }


def sample_states(seed: int, start: int, stop: int) -> np.ndarray:
    """Density matrices for sample indices [start, stop), one substream per index."""
    return np.concatenate([
        random_density_matrices(1, np.random.default_rng([seed, i])) for i in range(start, stop)
    ]) if stop > start else np.empty((0, 4, 4), dtype=complex)


def generate(n: int, seed: int, balanced: bool = True) -> LabeledDataset:
    """Draw n labeled Hilbert-Schmidt states with full tomographic features.

    Sample i always comes from the stream keyed by (seed, i), so the output
    does not depend on chunking. In balanced mode candidates are scanned in
    index order and a candidate is dropped once its class quota is full.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if seed < 0:
        raise ValueError("seed must be non-negative")
    quota = {1: (n + 1) // 2, 0: n // 2}
    feats, labels = [], []
    counts = {0: 0, 1: 0}
    index = 0
    while len(labels) < n:
        stop = index + (_CHUNK if balanced else n - len(labels))
        rho = sample_states(seed, index, stop)
        lab = ppt_label(rho)
        m = pauli_expectations(rho)
        for k in range(rho.shape[0]):
            y = int(lab[k])
            if balanced and counts[y] >= quota[y]:
                continue
            counts[y] += 1
            feats.append(m[k])
            labels.append(y)
            if len(labels) == n:
                break
        index = stop
    return LabeledDataset(np.array(feats), np.array(labels), Subset.FULL, seed, ENSEMBLE, balanced)


def heldout_seed(seed: int) -> int:
    return seed ^ TEST_SEED_XOR


def generate_split(n_train: int, n_test: int, seed: int, balanced: bool = True):
    """Train and test sets from disjoint seed streams."""
    return generate(n_train, seed, balanced), generate(n_test, heldout_seed(seed), balanced)


def project(ds: LabeledDataset, subset: Subset | str) -> LabeledDataset:
    subset = Subset.parse(subset)
    if ds.subset is not Subset.FULL:
        raise DatasetError(f"cannot project a {ds.subset.value!r} dataset; projection needs all 15 columns")
    return replace(ds, features=ds.features[:, subset.columns], subset=subset)


def class_counts(ds: LabeledDataset) -> tuple[int, int]:
    """(separable, entangled)."""
    entangled = int(np.sum(ds.labels))
    return len(ds) - entangled, entangled


def sidecar_path(path: str | os.PathLike) -> Path:
    path = Path(path)
    return path.with_suffix(".json")


def _atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def to_csv_text(ds: LabeledDataset) -> str:
    lines = [",".join(("label",) + ds.subset.names)]
    for y, row in zip(ds.labels, ds.features):
        lines.append(",".join([str(int(y))] + ["%.17g" % v for v in row]))
    return "\n".join(lines) + "\n"


def save_csv(ds: LabeledDataset, path: str | os.PathLike) -> None:
    """Write the CSV and its JSON sidecar descriptor."""
    path = Path(path)
    _atomic_write_text(path, to_csv_text(ds))
    _atomic_write_text(sidecar_path(path), json.dumps(ds.metadata, indent=2, sort_keys=True) + "\n")


def _subset_from_header(header: list[str]) -> Subset:
    if not header or header[0] != "label":
        raise DatasetError("first column must be 'label'", row=1, column=header[0] if header else None)
    names = tuple(header[1:])
    for s in Subset:
        if names == s.names:
            return s
    raise DatasetError(f"{len(names)} feature columns do not match any measurement subset", row=1)


def load_csv(path: str | os.PathLike, subset: Subset | str | None = None) -> LabeledDataset:
    """Read a dataset CSV; metadata comes from the sidecar when present.

    Rows are numbered from 1 at the header line.
    """
    path = Path(path)
    meta = {}
    side = sidecar_path(path)
    if side.exists():
        try:
            meta = json.loads(side.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise DatasetError(f"malformed sidecar {side}: {exc}") from None
    if subset is None and "subset" in meta:
        subset = meta["subset"]

    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DatasetError("empty file", row=1)
    found = _subset_from_header(rows[0])
    if subset is not None and Subset.parse(subset) is not found:
        raise DatasetError(
            f"header has {found.width} feature columns, expected {Subset.parse(subset).width} "
            f"for subset {Subset.parse(subset).value!r}", row=1)

    names = rows[0]
    feats = np.empty((len(rows) - 1, found.width))
    labels = np.empty(len(rows) - 1, dtype=np.int64)
    for r, row in enumerate(rows[1:]):
        lineno = r + 2
        if len(row) != len(names):
            raise DatasetError(f"expected {len(names)} cells, got {len(row)}", row=lineno)
        if row[0] not in ("0", "1"):
            raise DatasetError(f"label must be 0 or 1, got {row[0]!r}", row=lineno, column="label")
        labels[r] = int(row[0])
        for c, cell in enumerate(row[1:]):
            try:
                v = float(cell)
            except ValueError:
                raise DatasetError(f"non-numeric value {cell!r}", row=lineno, column=names[c + 1]) from None
            if not np.isfinite(v):
                raise DatasetError(f"non-finite value {cell!r}", row=lineno, column=names[c + 1])
            feats[r, c] = v

    return LabeledDataset(
        feats, labels, found,
        seed=meta.get("seed"),
        ensemble=meta.get("ensemble", ENSEMBLE),
        balanced=bool(meta.get("balanced", False)),
    )
