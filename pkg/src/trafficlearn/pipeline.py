"""Iterative self-training orchestration.

Each step runs four stages in order: (1) train or fine-tune the classifier
on the current labeled set, (2) embed the unlabeled pool and cluster it by
density, (3) align clusters against known-class centroids, (4) run the
confidence-consistency check and apply the resulting decisions.  Expert
verdicts submitted during a step are staged and applied at the start of the
next one, so every step report is immutable once emitted.

All randomness derives from the run seed plus the step index, which makes
`run_step` a pure function of its state: checkpoint/restore reproduces the
exact continuation.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from trafficlearn.alignment import AlignConfig, ClassCentroids, align, centroid
from trafficlearn.clustering import NOISE, dbscan, suggest_eps
from trafficlearn.data import DatasetBundle, FlowRecord, features_matrix
from trafficlearn.evaluation import InferenceRule, quick_scores
from trafficlearn.model import (
    CheckpointError,
    Classifier,
    TrainConfig,
    expand_output,
    mean_cross_entropy,
    softmax,
    train,
)
from trafficlearn.updater import (
    ACCEPT,
    UNKNOWN,
    ConsistencyConfig,
    ExpertQueue,
    QueueGroup,
    Verdict,
    apply_decisions,
    band_sizes,
    consistency_check,
    expert_resolve,
)

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "trafficlearn-checkpoint-1"


@dataclass(frozen=True)
class ClusterConfig:
    """DBSCAN parameters; None picks them from the data each step."""

    eps: float | None = None
    min_pts: int | None = None
    eps_floor: float = 1e-6

    def resolved_min_pts(self, n: int) -> int:
        if self.min_pts is not None:
            return self.min_pts
        return max(4, math.ceil(math.log2(max(n, 2))))


@dataclass(frozen=True)
class StopRule:
    """Stop after max_steps, or once nothing was accepted or detected for
    `quiescent_steps` consecutive steps."""

    max_steps: int = 50
    quiescent_steps: int = 2

    def __post_init__(self):
        if self.max_steps < 1 or self.quiescent_steps < 1:
            raise ValueError("stop rule values must be >= 1")


@dataclass
class StepReport:
    step: int
    pool_size: int
    accepted: int
    detected_unknown: int
    deferred: int
    noise: int
    per_class_accepted: dict
    cluster_count: int
    eps: float | None
    min_pts: int | None
    align_threshold: float | None
    conf_top_cutoff: float | None
    conf_bottom_cutoff: float | None
    train_loss: float
    labeled_size: int
    label_set_version: int
    eval: dict
    wall_time_s: float = 0.0

    def counts_sum(self) -> int:
        return self.accepted + self.detected_unknown + self.deferred + self.noise

    def to_json(self, include_timing: bool = False) -> str:
        payload = asdict(self)
        if not include_timing:
            # wall time varies run to run; the logged form must be byte-stable
            payload.pop("wall_time_s")
        return json.dumps(payload, sort_keys=True)


@dataclass
class PipelineState:
    """Everything one iteration needs; treat as moved (do not reuse after run_step)."""

    step: int
    bundle: DatasetBundle
    model: Classifier
    queue: ExpertQueue
    final_unknown: dict[int, dict]
    staged: list[tuple[str, Verdict]]
    train_cfg: TrainConfig
    align_cfg: AlignConfig
    consistency_cfg: ConsistencyConfig
    cluster_cfg: ClusterConfig
    expert_mode: str
    seed: int
    initial_pool_total: int
    expert_labeled: int = 0
    detection_cutoff: float | None = None
    rule_centroids: ClassCentroids | None = None
    rule_threshold: float | None = None

    @property
    def label_set(self):
        return self.bundle.label_set

    def inference_rule(self) -> InferenceRule:
        return InferenceRule(self.rule_centroids, self.rule_threshold, self.detection_cutoff)

    def expert_fraction(self) -> float:
        if self.initial_pool_total == 0:
            return 0.0
        return self.expert_labeled / self.initial_pool_total


def init_state(
    bundle: DatasetBundle,
    seed: int,
    train_cfg: TrainConfig | None = None,
    align_cfg: AlignConfig | None = None,
    consistency_cfg: ConsistencyConfig | None = None,
    cluster_cfg: ClusterConfig | None = None,
    expert_mode: str = "no-expert",
    hidden: Sequence[int] = (64, 64),
    embedding_dim: int = 32,
) -> PipelineState:
    """Fresh pipeline state with a randomly initialized classifier."""
    if not bundle.labeled:
        raise ValueError("cannot start a pipeline without labeled records")
    input_dim = bundle.labeled[0][0].dim
    model = Classifier(
        input_dim=input_dim,
        hidden=hidden,
        embedding_dim=embedding_dim,
        classes=bundle.label_set.classes,
        seed=[seed, 1],
        label_version=bundle.label_set.version,
    )
    return PipelineState(
        step=0,
        bundle=bundle,
        model=model,
        queue=ExpertQueue(),
        final_unknown={},
        staged=[],
        train_cfg=train_cfg or TrainConfig(),
        align_cfg=align_cfg or AlignConfig(),
        consistency_cfg=consistency_cfg or ConsistencyConfig(),
        cluster_cfg=cluster_cfg or ClusterConfig(),
        expert_mode=expert_mode,
        seed=seed,
        initial_pool_total=len(bundle.labeled) + len(bundle.unlabeled),
    )


def run_step(state: PipelineState) -> tuple[PipelineState, StepReport]:
    """Execute one four-stage iteration and report what happened."""
    started = time.perf_counter()
    t = state.step + 1
    bundle = state.bundle
    model = state.model
    queue = state.queue
    expert_labeled = state.expert_labeled

    # staged expert verdicts take effect now, before training
    for k, (gid, verdict) in enumerate(state.staged):
        group = queue.get(gid)
        bundle, label_set, expanded = expert_resolve(queue, gid, verdict, bundle, bundle.label_set)
        bundle = replace(bundle, label_set=label_set)
        if expanded:
            model = expand_output(model, label_set.classes, seed=[state.seed, 2, t, k])
            model.label_version = label_set.version
        if verdict.action == "label":
            expert_labeled += len(group.records)

    if not bundle.labeled:
        raise ValueError("labeled set is empty; cannot train")

    cfg = replace(state.train_cfg, seed=_mix_seed(state.seed, 3, t))
    model = train(model, bundle.labeled, cfg, val=bundle.val)
    X_lab, y_lab = _labeled_arrays(model, bundle.labeled)
    train_loss = mean_cross_entropy(model, X_lab, y_lab)

    accepted = detected = deferred = noise_count = 0
    per_class_accepted: dict[str, int] = {}
    cluster_count = 0
    eps_used: float | None = None
    min_pts_used: int | None = None
    t_used: float | None = None
    top_cut: float | None = None
    bot_cut: float | None = None
    detection_cutoff = state.detection_cutoff
    rule_centroids = state.rule_centroids
    rule_threshold = state.rule_threshold
    final_unknown = dict(state.final_unknown)

    pool = bundle.unlabeled
    pool_size = len(pool)
    if pool:
        emb = model.embed(features_matrix(pool))
        labeled_emb = model.embed(X_lab)
        cents = ClassCentroids.from_labeled(labeled_emb, [lab for _, lab in bundle.labeled])
        rule_centroids = cents

        min_pts_used = state.cluster_cfg.resolved_min_pts(pool_size)
        if pool_size > min_pts_used:
            eps_used = state.cluster_cfg.eps
            if eps_used is None:
                eps_used = max(suggest_eps(emb, min_pts_used), state.cluster_cfg.eps_floor)
            assignment = dbscan(emb, eps_used, min_pts_used)
        else:
            assignment = None

        aux_by_cluster = {}
        if assignment is not None and assignment.n_clusters > 0:
            cluster_centroids = {
                cid: centroid(emb[assignment.members(cid)]) for cid in range(assignment.n_clusters)
            }
            aux_by_cluster, t_used = align(cluster_centroids, cents, state.align_cfg)
            rule_threshold = t_used
            cluster_count = assignment.n_clusters

        pool_probs = softmax(emb @ model.weights[-1] + model.biases[-1])
        samples = []
        for i, rec in enumerate(pool):
            cid = int(assignment.labels[i]) if assignment is not None else NOISE
            if cid == NOISE:
                samples.append((rec.id, pool_probs[i], None, None))
            else:
                samples.append((rec.id, pool_probs[i], aux_by_cluster[cid], cid))

        decisions = consistency_check(samples, model.classes, state.consistency_cfg)
        confs = sorted((d.confidence for d in decisions), reverse=True)
        n_top, n_bottom = band_sizes(pool_size, state.consistency_cfg, warn=False)
        top_cut = confs[n_top - 1] if n_top else None
        bot_cut = confs[pool_size - n_bottom] if n_bottom else None

        bundle, groups, finals = apply_decisions(bundle, decisions, state.expert_mode, t)
        for g in groups:
            queue.add(g)
        for d in finals:
            final_unknown[d.sample_id] = {
                "step": t,
                "confidence": d.confidence,
                "distance": d.aux.distance,
            }

        accepted = sum(1 for d in decisions if d.outcome == ACCEPT)
        detected = sum(1 for d in decisions if d.outcome == UNKNOWN)
        noise_count = sum(1 for d in decisions if d.cluster_id is None)
        deferred = pool_size - accepted - detected - noise_count
        for d in decisions:
            if d.outcome == ACCEPT:
                per_class_accepted[d.pseudo_label] = per_class_accepted.get(d.pseudo_label, 0) + 1
        unknown_confs = [d.confidence for d in decisions if d.outcome == UNKNOWN]
        if unknown_confs:
            high = max(unknown_confs)
            detection_cutoff = high if detection_cutoff is None else max(detection_cutoff, high)

    new_state = replace(
        state,
        step=t,
        bundle=bundle,
        model=model,
        staged=[],
        final_unknown=final_unknown,
        expert_labeled=expert_labeled,
        detection_cutoff=detection_cutoff,
        rule_centroids=rule_centroids,
        rule_threshold=rule_threshold,
    )
    eval_snapshot = quick_scores(model, bundle.test, new_state.inference_rule())

    report = StepReport(
        step=t,
        pool_size=pool_size,
        accepted=accepted,
        detected_unknown=detected,
        deferred=deferred,
        noise=noise_count,
        per_class_accepted=per_class_accepted,
        cluster_count=cluster_count,
        eps=eps_used,
        min_pts=min_pts_used,
        align_threshold=t_used,
        conf_top_cutoff=top_cut,
        conf_bottom_cutoff=bot_cut,
        train_loss=train_loss,
        labeled_size=len(bundle.labeled),
        label_set_version=bundle.label_set.version,
        eval=eval_snapshot,
        wall_time_s=time.perf_counter() - started,
    )
    logger.info(
        "step %d: pool=%d accepted=%d unknown=%d deferred=%d noise=%d clusters=%d",
        t, pool_size, accepted, detected, deferred, noise_count, cluster_count,
    )
    return new_state, report


def run(
    state: PipelineState,
    stop: StopRule,
    expert: Callable[[QueueGroup], Verdict] | None = None,
    log_path: str | Path | None = None,
) -> tuple[PipelineState, list[StepReport]]:
    """Iterate run_step until the stop rule fires.

    In with-expert mode, `expert` is consulted after each step for every
    pending queue group; its verdicts are staged and applied at the start of
    the next step.
    """
    reports: list[StepReport] = []
    quiet = 0
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        while state.step < stop.max_steps:
            state, rep = run_step(state)
            reports.append(rep)
            if log_fh:
                log_fh.write(rep.to_json() + "\n")
            if expert is not None and state.expert_mode == "with-expert":
                for group in state.queue.pending():
                    state.staged.append((group.gid, expert(group)))
            if rep.accepted + rep.detected_unknown == 0 and not state.staged:
                quiet += 1
            else:
                quiet = 0
            if quiet >= stop.quiescent_steps:
                break
    finally:
        if log_fh:
            log_fh.close()
    return state, reports


def _mix_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def _labeled_arrays(model: Classifier, labeled) -> tuple[np.ndarray, np.ndarray]:
    X = features_matrix([r for r, _ in labeled])
    y = np.array([model.classes.index(lab) for _, lab in labeled], dtype=np.int64)
    return X, y


# ---------------------------------------------------------------------------
# checkpointing


def _record_to_dict(rec: FlowRecord) -> dict:
    return {"id": rec.id, "features": rec.features.tolist(), "true_label": rec.true_label}


def _record_from_dict(d: dict) -> FlowRecord:
    return FlowRecord(id=d["id"], features=np.asarray(d["features"], dtype=np.float64),
                      true_label=d["true_label"])


def _bundle_to_dict(bundle: DatasetBundle) -> dict:
    return {
        "labeled": [[_record_to_dict(r), lab] for r, lab in bundle.labeled],
        "unlabeled": [_record_to_dict(r) for r in bundle.unlabeled],
        "val": [[_record_to_dict(r), lab] for r, lab in bundle.val],
        "test": [[_record_to_dict(r), lab] for r, lab in bundle.test],
        "label_set": {"classes": list(bundle.label_set.classes),
                      "version": bundle.label_set.version},
        "scaler": None if bundle.scaler is None else [bundle.scaler[0].tolist(),
                                                      bundle.scaler[1].tolist()],
    }


def _bundle_from_dict(d: dict) -> DatasetBundle:
    from trafficlearn.data import LabelSet

    scaler = None
    if d["scaler"] is not None:
        scaler = (np.asarray(d["scaler"][0]), np.asarray(d["scaler"][1]))
    return DatasetBundle(
        labeled=[(_record_from_dict(r), lab) for r, lab in d["labeled"]],
        unlabeled=[_record_from_dict(r) for r in d["unlabeled"]],
        val=[(_record_from_dict(r), lab) for r, lab in d["val"]],
        test=[(_record_from_dict(r), lab) for r, lab in d["test"]],
        label_set=LabelSet(tuple(d["label_set"]["classes"]), d["label_set"]["version"]),
        scaler=scaler,
    )


def checkpoint(state: PipelineState, path: str | Path) -> None:
    """Serialize the full pipeline state; restore() resumes bit-identically."""
    queue_payload = [
        {
            "gid": g.gid,
            "records": [_record_to_dict(r) for r in g.records],
            "evidence": g.evidence,
            "status": g.status,
            "assigned_class": g.assigned_class,
        }
        for g in state.queue.groups.values()
    ]
    cents = state.rule_centroids
    payload = {
        "format": CHECKPOINT_FORMAT,
        "step": state.step,
        "seed": state.seed,
        "expert_mode": state.expert_mode,
        "bundle": _bundle_to_dict(state.bundle),
        "model": state.model.to_dict(),
        "queue": queue_payload,
        "staged": [[gid, {"action": v.action, "class_name": v.class_name}]
                   for gid, v in state.staged],
        "final_unknown": {str(k): v for k, v in state.final_unknown.items()},
        "train_cfg": asdict(state.train_cfg),
        "align_cfg": asdict(state.align_cfg),
        "consistency_cfg": asdict(state.consistency_cfg),
        "cluster_cfg": asdict(state.cluster_cfg),
        "initial_pool_total": state.initial_pool_total,
        "expert_labeled": state.expert_labeled,
        "detection_cutoff": state.detection_cutoff,
        "rule_centroids": None if cents is None else {
            "classes": list(cents.classes),
            "centroids": cents.centroids.tolist(),
            "counts": list(cents.counts),
        },
        "rule_threshold": state.rule_threshold,
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True), encoding="utf-8")


def restore(path: str | Path) -> PipelineState:
    """Rebuild a PipelineState written by checkpoint()."""
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    try:
        if payload["format"] != CHECKPOINT_FORMAT:
            raise CheckpointError(f"unsupported checkpoint format {payload.get('format')!r}")
        queue = ExpertQueue()
        for g in payload["queue"]:
            queue.add(QueueGroup(
                gid=g["gid"],
                records=[_record_from_dict(r) for r in g["records"]],
                evidence=g["evidence"],
                status=g["status"],
                assigned_class=g["assigned_class"],
            ))
        cents_payload = payload["rule_centroids"]
        cents = None
        if cents_payload is not None:
            cents = ClassCentroids(
                tuple(cents_payload["classes"]),
                np.asarray(cents_payload["centroids"], dtype=np.float64),
                tuple(cents_payload["counts"]),
            )
        return PipelineState(
            step=payload["step"],
            bundle=_bundle_from_dict(payload["bundle"]),
            model=Classifier.from_dict(payload["model"]),
            queue=queue,
            final_unknown={int(k): v for k, v in payload["final_unknown"].items()},
            staged=[(gid, Verdict(v["action"], v["class_name"])) for gid, v in payload["staged"]],
            train_cfg=TrainConfig(**payload["train_cfg"]),
            align_cfg=AlignConfig(**payload["align_cfg"]),
            consistency_cfg=ConsistencyConfig(**payload["consistency_cfg"]),
            cluster_cfg=ClusterConfig(**payload["cluster_cfg"]),
            expert_mode=payload["expert_mode"],
            seed=payload["seed"],
            initial_pool_total=payload["initial_pool_total"],
            expert_labeled=payload["expert_labeled"],
            detection_cutoff=payload["detection_cutoff"],
            rule_centroids=cents,
            rule_threshold=payload["rule_threshold"],
        )
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from exc
