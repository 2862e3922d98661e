"""End-to-end experiment harness: build a setting, run the pipeline, score it."""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from trafficlearn.alignment import AlignConfig
from trafficlearn.data import (
    DatasetBundle,
    ExperimentSetting,
    FlowRecord,
    features_matrix,
    make_setting_bundle,
)
from trafficlearn.evaluation import (
    ConfusionMatrix,
    MetricSet,
    UNKNOWN_LABEL,
    evaluate,
    quick_scores,
)
from trafficlearn.model import Classifier, TrainConfig, train
from trafficlearn.pipeline import (
    ClusterConfig,
    PipelineState,
    StepReport,
    StopRule,
    init_state,
    run,
)
from trafficlearn.updater import ConsistencyConfig, QueueGroup, Verdict, oracle_expert


@dataclass
class ExperimentResult:
    setting: ExperimentSetting
    reports: list[StepReport]
    confusion: ConfusionMatrix
    metrics: MetricSet
    expert_fraction: float
    final_state: PipelineState

    def to_dict(self) -> dict:
        return {
            "metrics": self.metrics.to_dict(),
            "confusion": self.confusion.to_dict(),
            "expert_fraction": self.expert_fraction,
            "steps": len(self.reports),
            "label_set": list(self.final_state.label_set.classes),
            "final_unknown_count": len(self.final_state.final_unknown),
        }


def run_experiment(
    records: Sequence[FlowRecord],
    setting: ExperimentSetting,
    train_cfg: TrainConfig | None = None,
    align_cfg: AlignConfig | None = None,
    consistency_cfg: ConsistencyConfig | None = None,
    cluster_cfg: ClusterConfig | None = None,
    stop: StopRule | None = None,
    hidden: Sequence[int] = (64, 64),
    embedding_dim: int = 32,
    standardize: bool = True,
    log_path=None,
) -> ExperimentResult:
    """Build the bundle for `setting`, run the pipeline to quiescence, evaluate.

    In with-expert mode the oracle expert (majority ground truth of each
    detected group) supplies verdicts after every step.
    """
    bundle = make_setting_bundle(records, setting, standardize=standardize)
    state = init_state(
        bundle,
        seed=setting.seed,
        train_cfg=train_cfg,
        align_cfg=align_cfg,
        consistency_cfg=consistency_cfg,
        cluster_cfg=cluster_cfg,
        expert_mode=setting.expert_mode,
        hidden=hidden,
        embedding_dim=embedding_dim,
    )

    expert = None
    if setting.expert_mode == "with-expert":
        def expert(group: QueueGroup) -> Verdict:
            return oracle_expert(group, {r.id: r.true_label for r in group.records})

    state, reports = run(state, stop or StopRule(), expert=expert, log_path=log_path)
    confusion, metrics = evaluate(state.model, state.bundle.test, state.inference_rule())
    return ExperimentResult(
        setting=setting,
        reports=reports,
        confusion=confusion,
        metrics=metrics,
        expert_fraction=state.expert_fraction(),
        final_state=state,
    )


def supervised_ceiling(
    records: Sequence[FlowRecord],
    setting: ExperimentSetting,
    train_cfg: TrainConfig | None = None,
    hidden: Sequence[int] = (64, 64),
    embedding_dim: int = 32,
) -> tuple[Classifier, float]:
    """Fully supervised reference: all known-class train data labeled.

    Returns the trained model and its argmax accuracy on known-class test
    samples; this bounds what the self-training pipeline can reach.
    """
    full = replace(setting, known_fraction=1.0)
    bundle = make_setting_bundle(records, full)
    model = Classifier(
        input_dim=bundle.labeled[0][0].dim,
        hidden=hidden,
        embedding_dim=embedding_dim,
        classes=bundle.label_set.classes,
        seed=[setting.seed, 1],
    )
    cfg = train_cfg or TrainConfig()
    model = train(model, bundle.labeled, cfg, val=bundle.val)
    known_test = [(r, lab) for r, lab in bundle.test if lab in model.classes]
    X = features_matrix([r for r, _ in known_test])
    preds = np.argmax(model.predict_proba(X), axis=1)
    hits = [model.classes[p] == lab for p, (_, lab) in zip(preds, known_test)]
    return model, float(np.mean(hits))


SWEEP_AXES = ("known_fraction", "n_known_classes", "n_unknown_classes")


@dataclass
class SweepRow:
    value: float | int
    metrics: MetricSet
    expert_fraction: float
    steps: int


@dataclass
class SweepResult:
    axis: str
    rows: list[SweepRow]

    def to_dict(self) -> dict:
        return {
            "axis": self.axis,
            "rows": [
                {"value": r.value, **r.metrics.to_dict(),
                 "expert_fraction": r.expert_fraction, "steps": r.steps}
                for r in self.rows
            ],
        }

    def series(self, metric: str) -> tuple[list, list]:
        """Plot-ready (x, y) arrays for one metric name."""
        xs = [r.value for r in self.rows]
        ys = [getattr(r.metrics, metric) for r in self.rows]
        return xs, ys

    def to_table(self) -> str:
        lines = [f"{self.axis:>18}  accuracy  precision  recall    fpr     expert"]
        for r in self.rows:
            m = r.metrics
            lines.append(
                f"{r.value:>18}  {m.accuracy:8.4f}  {m.precision:9.4f}  "
                f"{m.recall:6.4f}  {m.fpr:6.4f}  {r.expert_fraction:6.4f}"
            )
        return "\n".join(lines)


def sweep(
    records: Sequence[FlowRecord],
    axis: str,
    values: Sequence,
    setting: ExperimentSetting,
    **experiment_kwargs,
) -> SweepResult:
    """Run one experiment per axis value and tabulate the metrics.

    For the class-count axes, the ordered class list is
    setting.known_classes + setting.unknown_classes; records of classes
    excluded by a value are dropped for that run.
    """
    if axis not in SWEEP_AXES:
        raise ValueError(f"axis must be one of {SWEEP_AXES}, got {axis!r}")
    all_classes = list(setting.known_classes) + list(setting.unknown_classes)

    rows = []
    for value in values:
        if axis == "known_fraction":
            sub_setting = replace(setting, known_fraction=float(value))
            sub_records = records
        elif axis == "n_known_classes":
            k = int(value)
            if not (1 <= k < len(all_classes)):
                raise ValueError(f"n_known_classes={k} out of range for {len(all_classes)} classes")
            sub_setting = replace(
                setting,
                known_classes=tuple(all_classes[:k]),
                unknown_classes=tuple(all_classes[k:]),
            )
            sub_records = records
        else:  # n_unknown_classes
            u = int(value)
            if not (0 <= u <= len(setting.unknown_classes)):
                raise ValueError(f"n_unknown_classes={u} out of range")
            keep_unknown = tuple(setting.unknown_classes[:u])
            sub_setting = replace(setting, unknown_classes=keep_unknown)
            kept = set(setting.known_classes) | set(keep_unknown)
            sub_records = [r for r in records if r.true_label in kept]
        result = run_experiment(sub_records, sub_setting, **experiment_kwargs)
        rows.append(SweepRow(
            value=value,
            metrics=result.metrics,
            expert_fraction=result.expert_fraction,
            steps=len(result.reports),
        ))
    return SweepResult(axis=axis, rows=rows)
