"""Flow-feature datasets: file I/O, experiment splits, synthetic generators.

Flow records are opaque fixed-length numeric feature vectors with an
optional ground-truth class label used only for evaluation and for
simulating expert feedback.

File format: UTF-8, comma-delimited, header ``id,label,f0..f{d-1}``.
An empty label field means the record is unlabeled.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class SchemaError(ValueError):
    """Raised when a flow-feature file does not match the expected layout."""


class ConfigError(ValueError):
    """Raised when an experiment setting is inconsistent with the data."""


@dataclass(frozen=True, eq=False)
class FlowRecord:
    """One flow: a d-dimensional feature vector plus an optional true label."""

    id: int
    features: np.ndarray
    true_label: str | None = None

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 1:
            raise ValueError(f"record {self.id}: features must be 1-d, got shape {feats.shape}")
        if not np.all(np.isfinite(feats)):
            raise ValueError(f"record {self.id}: non-finite feature value")
        feats.flags.writeable = False
        object.__setattr__(self, "features", feats)

    @property
    def dim(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True)
class LabelSet:
    """Ordered set of known class identifiers with a version counter.

    The version increases by one every time a class is added; ordering is
    stable, so class index i always refers to the same identifier for a
    given version.
    """

    classes: tuple[str, ...]
    version: int = 0

    def __post_init__(self):
        if len(set(self.classes)) != len(self.classes):
            raise ValueError("duplicate class identifiers")

    def __len__(self) -> int:
        return len(self.classes)

    def __contains__(self, name: str) -> bool:
        return name in self.classes

    def index(self, name: str) -> int:
        return self.classes.index(name)

    def add(self, name: str) -> "LabelSet":
        """Return a new LabelSet with `name` appended and version bumped."""
        if name in self.classes:
            raise ValueError(f"class {name!r} already present")
        return LabelSet(self.classes + (name,), self.version + 1)


@dataclass(frozen=True)
class ExperimentSetting:
    """Known/unknown class partition and sampling knobs for one experiment."""

    known_classes: tuple[str, ...]
    unknown_classes: tuple[str, ...] = ()
    known_fraction: float = 0.30
    split_ratio: tuple[float, float, float] = (0.6, 0.2, 0.2)
    expert_mode: str = "no-expert"  # "no-expert" | "with-expert"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "known_classes", tuple(self.known_classes))
        object.__setattr__(self, "unknown_classes", tuple(self.unknown_classes))
        if set(self.known_classes) & set(self.unknown_classes):
            raise ConfigError("known and unknown classes overlap")
        if not self.known_classes:
            raise ConfigError("at least one known class required")
        if not (0.0 < self.known_fraction <= 1.0):
            raise ConfigError(f"known_fraction must be in (0, 1], got {self.known_fraction}")
        if len(self.split_ratio) != 3 or any(r <= 0 for r in self.split_ratio):
            raise ConfigError(f"split_ratio must be three positive values, got {self.split_ratio}")
        if abs(sum(self.split_ratio) - 1.0) > 1e-9:
            raise ConfigError(f"split_ratio must sum to 1, got {sum(self.split_ratio)}")
        if self.expert_mode not in ("no-expert", "with-expert"):
            raise ConfigError(f"unknown expert_mode {self.expert_mode!r}")


@dataclass
class DatasetBundle:
    """Materialized experiment data: labeled pool, unlabeled pool, val, test.

    `labeled` pairs carry the label visible to the model (initially real,
    later possibly pseudo or expert-assigned).  `val` and `test` pairs carry
    ground truth; val records of unknown classes are held but unusable for
    early stopping because their label falls outside `label_set`.
    """

    labeled: list[tuple[FlowRecord, str]]
    unlabeled: list[FlowRecord]
    val: list[tuple[FlowRecord, str]]
    test: list[tuple[FlowRecord, str]]
    label_set: LabelSet
    scaler: tuple[np.ndarray, np.ndarray] | None = None

    def validate(self) -> None:
        for rec, lab in self.labeled:
            if lab not in self.label_set:
                raise ValueError(f"labeled record {rec.id} has label {lab!r} outside label set")
        groups = [
            {r.id for r, _ in self.labeled},
            {r.id for r in self.unlabeled},
            {r.id for r, _ in self.val},
            {r.id for r, _ in self.test},
        ]
        total = sum(len(g) for g in groups)
        if len(set().union(*groups)) != total:
            raise ValueError("record id appears in more than one split")

    def all_ids(self) -> set[int]:
        ids = {r.id for r, _ in self.labeled} | {r.id for r in self.unlabeled}
        return ids | {r.id for r, _ in self.val} | {r.id for r, _ in self.test}


def features_matrix(records: Sequence[FlowRecord]) -> np.ndarray:
    """Stack record features into an (n, d) float64 matrix."""
    if not records:
        raise ValueError("no records")
    return np.stack([r.features for r in records]).astype(np.float64)


def load_records(path: str | Path, expected_dim: int | None = None) -> list[FlowRecord]:
    """Read flow records from a delimited-text feature file.

    The header must be ``id,label,f0..f{d-1}``.  When `expected_dim` is
    given, the file's feature count must match it.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        if len(header) < 3 or header[0] != "id" or header[1] != "label":
            raise SchemaError(f"{path}: header must start with 'id,label,f0...', got {header[:3]}")
        dim = len(header) - 2
        expected_names = [f"f{i}" for i in range(dim)]
        if header[2:] != expected_names:
            raise SchemaError(f"{path}: feature columns must be f0..f{dim - 1}")
        if expected_dim is not None and dim != expected_dim:
            raise SchemaError(f"{path}: expected {expected_dim} features, file declares {dim}")

        records: list[FlowRecord] = []
        seen: set[int] = set()
        for row_idx, row in enumerate(reader):
            if len(row) != dim + 2:
                raise SchemaError(f"{path}: row {row_idx}: expected {dim + 2} columns, got {len(row)}")
            try:
                rid = int(row[0])
            except ValueError:
                raise SchemaError(f"{path}: row {row_idx}: column 'id': not an integer: {row[0]!r}") from None
            if rid in seen:
                raise SchemaError(f"{path}: row {row_idx}: duplicate id {rid}")
            seen.add(rid)
            label = row[1] if row[1] != "" else None
            feats = np.empty(dim, dtype=np.float64)
            for j, cell in enumerate(row[2:]):
                try:
                    feats[j] = float(cell)
                except ValueError:
                    raise SchemaError(
                        f"{path}: row {row_idx}: column 'f{j}': not numeric: {cell!r}"
                    ) from None
            if not np.all(np.isfinite(feats)):
                bad = int(np.flatnonzero(~np.isfinite(feats))[0])
                raise SchemaError(f"{path}: row {row_idx}: column 'f{bad}': non-finite value")
            records.append(FlowRecord(id=rid, features=feats, true_label=label))
    return records


def save_records(records: Sequence[FlowRecord], path: str | Path) -> None:
    """Write records in the same format `load_records` reads."""
    if not records:
        raise ValueError("no records to save")
    dim = records[0].dim
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "label"] + [f"f{i}" for i in range(dim)])
        for rec in records:
            if rec.dim != dim:
                raise ValueError(f"record {rec.id}: dimension {rec.dim} != {dim}")
            label = rec.true_label if rec.true_label is not None else ""
            writer.writerow([rec.id, label] + [repr(float(v)) for v in rec.features])


def _split_counts(n: int, ratios: Sequence[float]) -> list[int]:
    # floor each share, then hand leftover records to the largest shares first
    counts = [int(math.floor(n * r)) for r in ratios]
    leftover = n - sum(counts)
    order = sorted(range(len(ratios)), key=lambda i: (-ratios[i], i))
    for k in range(leftover):
        counts[order[k % len(order)]] += 1
    return counts


def make_setting_bundle(
    records: Sequence[FlowRecord],
    setting: ExperimentSetting,
    standardize: bool = True,
) -> DatasetBundle:
    """Build the labeled/unlabeled/val/test bundle for one experiment setting.

    Per class: a seeded shuffle, then a stratified train/val/test split at
    `split_ratio`.  Within the train share of each known class, the first
    `known_fraction` records keep their label; the rest of train (including
    every unknown-class train record) goes to the unlabeled pool with labels
    hidden.  Val and test retain all classes.

    When `standardize` is set, features are shifted/scaled to zero mean and
    unit variance per dimension, with statistics computed from the labeled
    train records only.
    """
    by_class: dict[str, list[FlowRecord]] = {}
    for rec in records:
        if rec.true_label is None:
            raise ConfigError(f"record {rec.id} has no true label; cannot build setting bundle")
        by_class.setdefault(rec.true_label, []).append(rec)

    wanted = set(setting.known_classes) | set(setting.unknown_classes)
    for cls in setting.known_classes + setting.unknown_classes:
        if cls not in by_class:
            raise ConfigError(f"class {cls!r} not present in records")
    extra = set(by_class) - wanted
    if extra:
        raise ConfigError(f"classes {sorted(extra)} are neither known nor unknown in this setting")

    labeled: list[tuple[FlowRecord, str]] = []
    unlabeled: list[FlowRecord] = []
    val: list[tuple[FlowRecord, str]] = []
    test: list[tuple[FlowRecord, str]] = []

    for cls in sorted(by_class):
        group = sorted(by_class[cls], key=lambda r: r.id)
        rng = np.random.default_rng([setting.seed, _class_stream(cls)])
        perm = rng.permutation(len(group))
        shuffled = [group[i] for i in perm]
        n_train, n_val, n_test = _split_counts(len(group), setting.split_ratio)
        train_part = shuffled[:n_train]
        val_part = shuffled[n_train : n_train + n_val]
        test_part = shuffled[n_train + n_val :]

        val.extend((r, cls) for r in val_part)
        test.extend((r, cls) for r in test_part)
        if cls in setting.known_classes:
            n_lab = max(1, int(math.floor(setting.known_fraction * len(train_part)))) if train_part else 0
            labeled.extend((r, cls) for r in train_part[:n_lab])
            unlabeled.extend(train_part[n_lab:])
        else:
            unlabeled.extend(train_part)

    scaler = None
    if standardize:
        if not labeled:
            raise ConfigError("cannot standardize: no labeled records")
        train_feats = features_matrix([r for r, _ in labeled])
        mean = train_feats.mean(axis=0)
        std = train_feats.std(axis=0)
        std = np.where(std > 0, std, 1.0)
        scaler = (mean, std)
        labeled = [(_rescale(r, mean, std), c) for r, c in labeled]
        unlabeled = [_rescale(r, mean, std) for r in unlabeled]
        val = [(_rescale(r, mean, std), c) for r, c in val]
        test = [(_rescale(r, mean, std), c) for r, c in test]

    bundle = DatasetBundle(
        labeled=labeled,
        unlabeled=unlabeled,
        val=val,
        test=test,
        label_set=LabelSet(tuple(setting.known_classes)),
        scaler=scaler,
    )
    bundle.validate()
    return bundle


def _rescale(rec: FlowRecord, mean: np.ndarray, std: np.ndarray) -> FlowRecord:
    return FlowRecord(id=rec.id, features=(rec.features - mean) / std, true_label=rec.true_label)


def _class_stream(name: str) -> int:
    # stable small integer derived from the class identifier, for seeding
    return sum((i + 1) * b for i, b in enumerate(name.encode("utf-8"))) % (2**31)


def synth_gaussians(
    n_classes: int,
    per_class: int,
    d: int,
    separation: float,
    seed: int,
) -> list[FlowRecord]:
    """Generate isotropic unit-variance Gaussian blobs with well-separated means.

    Class means sit evenly on a circle in the first two feature dimensions
    (a line when d == 1), with the radius chosen so adjacent means are
    exactly `separation` apart; the remaining dimensions carry pure noise.
    Keeping all class structure in one shared subspace means any subset of
    classes is distinguishable through directions that also separate the
    rest, which is the regime the self-training pipeline targets.  Output is
    deterministic per seed; class c is labeled ``class{c}``.
    """
    if n_classes < 2:
        raise ValueError("n_classes must be >= 2")
    if per_class < 10:
        raise ValueError("per_class must be >= 10")
    if separation <= 0:
        raise ValueError("separation must be positive")
    if d < 1:
        raise ValueError("d must be >= 1")

    means = []
    if d == 1:
        for c in range(n_classes):
            means.append(np.array([c * separation]))
    else:
        radius = separation / (2.0 * math.sin(math.pi / n_classes))
        for c in range(n_classes):
            angle = 2.0 * math.pi * c / n_classes
            coords = np.zeros(d)
            coords[0] = radius * math.cos(angle)
            coords[1] = radius * math.sin(angle)
            means.append(coords)

    rng = np.random.default_rng(seed)
    records: list[FlowRecord] = []
    rid = 0
    for c in range(n_classes):
        noise = rng.standard_normal((per_class, d))
        feats = means[c] + noise
        for row in feats:
            records.append(FlowRecord(id=rid, features=row, true_label=f"class{c}"))
            rid += 1
    return records
