"""Self-training traffic classification with unknown-class discovery.

A small numpy library implementing an iterative pipeline: train a classifier
on scarce labeled flow records, cluster the unlabeled pool in embedding
space, align clusters against known-class centroids, accept high-confidence
consistent pseudo-labels, flag misaligned low-confidence samples as unknown
traffic, and optionally fold expert labels for discovered classes back into
training.
"""

from trafficlearn.data import (
    DatasetBundle,
    ExperimentSetting,
    FlowRecord,
    LabelSet,
    load_records,
    make_setting_bundle,
    save_records,
    synth_gaussians,
)

__all__ = [
    "DatasetBundle",
    "ExperimentSetting",
    "FlowRecord",
    "LabelSet",
    "load_records",
    "make_setting_bundle",
    "save_records",
    "synth_gaussians",
]

__version__ = "0.1.0"
