"""Confidence-consistency decisions and the expert labeling queue.

The unlabeled pool is sorted by prediction confidence.  Samples in the top
band whose auxiliary label agrees with the model's argmax become accepted
pseudo-labels; samples in the bottom band whose cluster failed to align are
detected as unknown traffic; everything else (including all clustering
noise) is deferred to a later iteration.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from trafficlearn.alignment import AuxiliaryLabel
from trafficlearn.data import DatasetBundle, FlowRecord, LabelSet

ACCEPT = "accept"
UNKNOWN = "unknown"
DEFER = "defer"

PENDING = "pending"
LABELED = "labeled"
DISMISSED = "dismissed"


@dataclass(frozen=True)
class ConsistencyConfig:
    top_fraction: float = 0.10
    bottom_fraction: float = 0.10

    def __post_init__(self):
        for name, f in (("top_fraction", self.top_fraction), ("bottom_fraction", self.bottom_fraction)):
            if not (0.0 < f < 1.0):
                raise ValueError(f"{name} must be in (0, 1), got {f}")
        if self.top_fraction + self.bottom_fraction > 1.0:
            raise ValueError("top_fraction + bottom_fraction must not exceed 1")


@dataclass(frozen=True)
class UpdateDecision:
    sample_id: int
    outcome: str  # ACCEPT | UNKNOWN | DEFER
    pseudo_label: str | None
    confidence: float
    aux: AuxiliaryLabel | None
    cluster_id: int | None  # None for clustering noise


@dataclass
class QueueGroup:
    """One detected-unknown cluster awaiting an expert verdict."""

    gid: str
    records: list[FlowRecord]
    evidence: dict
    status: str = PENDING
    assigned_class: str | None = None

    @property
    def sample_ids(self) -> list[int]:
        return [r.id for r in self.records]


@dataclass(frozen=True)
class Verdict:
    action: str  # "label" | "dismiss"
    class_name: str | None = None

    def __post_init__(self):
        if self.action not in ("label", "dismiss"):
            raise ValueError(f"unknown verdict action {self.action!r}")
        if self.action == "label" and not self.class_name:
            raise ValueError("label verdict requires class_name")


class ExpertQueue:
    """Ordered collection of detected-unknown groups with resolution status."""

    def __init__(self):
        self.groups: dict[str, QueueGroup] = {}

    def add(self, group: QueueGroup) -> None:
        if group.gid in self.groups:
            raise ValueError(f"group {group.gid} already queued")
        self.groups[group.gid] = group

    def get(self, gid: str) -> QueueGroup:
        if gid not in self.groups:
            raise KeyError(f"no queue group {gid!r}")
        return self.groups[gid]

    def pending(self) -> list[QueueGroup]:
        return [g for g in self.groups.values() if g.status == PENDING]

    def __len__(self) -> int:
        return len(self.groups)


def confidence(probs) -> float:
    """Model confidence: the highest predicted class probability."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.size == 0:
        raise ValueError("empty probability vector")
    return float(probs.max())


def band_sizes(n: int, cfg: ConsistencyConfig, warn: bool = True) -> tuple[int, int]:
    """Top/bottom band sizes; the bottom band is truncated if the ceilings overlap."""
    n_top = math.ceil(cfg.top_fraction * n)
    n_bottom = math.ceil(cfg.bottom_fraction * n)
    if n_top + n_bottom > n:
        if warn:
            warnings.warn(
                f"confidence bands overlap on {n} samples; truncating bottom band "
                f"from {n_bottom} to {n - n_top}",
                RuntimeWarning,
                stacklevel=2,
            )
        n_bottom = n - n_top
    return n_top, n_bottom


def consistency_check(
    samples: Sequence[tuple[int, np.ndarray, AuxiliaryLabel | None, int | None]],
    classes: Sequence[str],
    cfg: ConsistencyConfig,
) -> list[UpdateDecision]:
    """Decide accept/unknown/defer for each (id, probs, aux label, cluster id).

    Sorting is by descending confidence with ascending-id tie-breaks.
    Acceptance requires top-band membership, an aligned cluster, and
    agreement between the auxiliary class and the model argmax; unknown
    detection requires bottom-band membership and a failed alignment.
    Returns decisions in the input order.
    """
    if not samples:
        raise ValueError("no samples to check")
    confs = [confidence(probs) for _, probs, _, _ in samples]
    order = sorted(range(len(samples)), key=lambda i: (-confs[i], samples[i][0]))
    n_top, n_bottom = band_sizes(len(samples), cfg)
    top = set(order[:n_top])
    bottom = set(order[len(samples) - n_bottom :]) if n_bottom else set()

    decisions: list[UpdateDecision] = []
    for i, (sid, probs, aux, cluster_id) in enumerate(samples):
        outcome, pseudo = DEFER, None
        if aux is not None:
            if i in top and not aux.is_unknown:
                argmax_class = classes[int(np.argmax(probs))]
                if argmax_class == aux.class_name:
                    outcome, pseudo = ACCEPT, aux.class_name
            elif i in bottom and aux.is_unknown:
                outcome = UNKNOWN
        decisions.append(
            UpdateDecision(
                sample_id=sid,
                outcome=outcome,
                pseudo_label=pseudo,
                confidence=confs[i],
                aux=aux,
                cluster_id=cluster_id,
            )
        )
    return decisions


def apply_decisions(
    bundle: DatasetBundle,
    decisions: Sequence[UpdateDecision],
    expert_mode: str,
    step: int,
) -> tuple[DatasetBundle, list[QueueGroup], list[UpdateDecision]]:
    """Move decided samples out of the unlabeled pool.

    Accepted samples join the labeled set under their pseudo-label.  Detected
    unknowns leave the pool: grouped by originating cluster into expert-queue
    groups in with-expert mode, or returned as terminal unknown predictions
    in no-expert mode.  Deferred samples stay.  Ids are conserved.
    """
    by_id = {r.id: r for r in bundle.unlabeled}
    for d in decisions:
        if d.sample_id not in by_id:
            raise ValueError(f"decision references id {d.sample_id} not in the unlabeled pool")

    removed: set[int] = set()
    new_labeled = list(bundle.labeled)
    groups: dict[int, list[UpdateDecision]] = {}
    final_unknowns: list[UpdateDecision] = []

    for d in decisions:
        if d.outcome == ACCEPT:
            new_labeled.append((by_id[d.sample_id], d.pseudo_label))
            removed.add(d.sample_id)
        elif d.outcome == UNKNOWN:
            removed.add(d.sample_id)
            if expert_mode == "with-expert":
                groups.setdefault(d.cluster_id, []).append(d)
            else:
                final_unknowns.append(d)

    queue_groups: list[QueueGroup] = []
    for cluster_id in sorted(groups):
        ds = groups[cluster_id]
        recs = [by_id[d.sample_id] for d in ds]
        dists = [d.aux.distance for d in ds]
        queue_groups.append(
            QueueGroup(
                gid=f"s{step}c{cluster_id}",
                records=recs,
                evidence={
                    "step": step,
                    "cluster_id": cluster_id,
                    "size": len(ds),
                    "mean_confidence": float(np.mean([d.confidence for d in ds])),
                    "distance_to_nearest_class": float(np.mean(dists)),
                    "representative_ids": [d.sample_id for d in ds[:20]],
                },
            )
        )

    new_unlabeled = [r for r in bundle.unlabeled if r.id not in removed]
    new_bundle = replace(bundle, labeled=new_labeled, unlabeled=new_unlabeled)
    return new_bundle, queue_groups, final_unknowns


def expert_resolve(
    queue: ExpertQueue,
    gid: str,
    verdict: Verdict,
    bundle: DatasetBundle,
    label_set: LabelSet,
) -> tuple[DatasetBundle, LabelSet, bool]:
    """Apply an expert verdict to a pending group.

    Labeling with a new class grows the label set (the returned flag requests
    a model output expansion); labeling with an existing class just moves the
    samples; dismissal returns them to the unlabeled pool.
    """
    group = queue.get(gid)
    if group.status != PENDING:
        raise ValueError(f"group {gid} is not pending (status {group.status})")

    expanded = False
    if verdict.action == "label":
        name = verdict.class_name
        if name not in label_set:
            label_set = label_set.add(name)
            expanded = True
        bundle = replace(bundle, labeled=bundle.labeled + [(r, name) for r in group.records])
        group.status = LABELED
        group.assigned_class = name
    else:
        bundle = replace(bundle, unlabeled=bundle.unlabeled + list(group.records))
        group.status = DISMISSED
    return bundle, label_set, expanded


def oracle_expert(group: QueueGroup, truth: Mapping[int, str]) -> Verdict:
    """Simulated expert: labels a group with the majority true class.

    Ties break toward the smaller class identifier.
    """
    votes: dict[str, int] = {}
    for rec in group.records:
        if rec.id not in truth:
            raise ValueError(f"no ground truth for sample {rec.id}")
        lab = truth[rec.id]
        votes[lab] = votes.get(lab, 0) + 1
    winner = min(votes, key=lambda name: (-votes[name], name))
    return Verdict(action="label", class_name=winner)
