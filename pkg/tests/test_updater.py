import numpy as np
import pytest

from trafficlearn.alignment import KNOWN, POTENTIAL_UNKNOWN, AuxiliaryLabel
from trafficlearn.data import DatasetBundle, FlowRecord, LabelSet
from trafficlearn.updater import (
    ACCEPT,
    DEFER,
    UNKNOWN,
    ConsistencyConfig,
    ExpertQueue,
    QueueGroup,
    Verdict,
    apply_decisions,
    band_sizes,
    confidence,
    consistency_check,
    expert_resolve,
    oracle_expert,
)


def aux_known(name, dist=0.5):
    return AuxiliaryLabel(KNOWN, name, dist)


def aux_unknown(dist=9.0):
    return AuxiliaryLabel(POTENTIAL_UNKNOWN, None, dist)


def rec(i, d=2):
    return FlowRecord(id=i, features=np.full(d, float(i)))


def probs(*vals):
    return np.array(vals, dtype=np.float64)


def test_confidence_is_max():
    assert confidence(probs(0.5, 0.5)) == 0.5
    assert confidence(probs(0.9, 0.05, 0.05)) == 0.9
    assert confidence(np.full(4, 0.25)) == 0.25
    with pytest.raises(ValueError):
        confidence(np.array([]))


def test_consistency_config_validation():
    with pytest.raises(ValueError):
        ConsistencyConfig(top_fraction=0.0)
    with pytest.raises(ValueError):
        ConsistencyConfig(top_fraction=0.6, bottom_fraction=0.5)


def conf_vec(c, k=20, arg=0):
    """K-class probability vector whose max is exactly c, at index arg."""
    v = np.full(k, (1.0 - c) / (k - 1))
    v[arg] = c
    assert abs(v.sum() - 1.0) < 1e-12 and v.max() == c
    return v


def test_consistency_six_sample_bands():
    # confidences .99/.95/.60/.55/.10/.05 with thirds: 2 accept, 2 defer, 2 unknown
    classes = tuple(f"k{i}" for i in range(20))
    samples = [
        (0, conf_vec(0.99), aux_known("k0"), 0),
        (1, conf_vec(0.95), aux_known("k0"), 0),
        (2, conf_vec(0.60), aux_known("k0"), 1),
        (3, conf_vec(0.55, arg=1), aux_known("k1"), 1),
        (4, conf_vec(0.10), aux_unknown(), 2),
        (5, conf_vec(0.05), aux_unknown(), 2),
    ]
    cfg = ConsistencyConfig(top_fraction=1 / 3, bottom_fraction=1 / 3)
    out = consistency_check(samples, classes, cfg)
    assert [d.outcome for d in out] == [ACCEPT, ACCEPT, DEFER, DEFER, UNKNOWN, UNKNOWN]
    assert out[0].pseudo_label == "k0"


def test_top_band_requires_argmax_agreement():
    samples = [
        (0, probs(0.99, 0.01), aux_known("b"), 0),  # argmax is "a", aux says "b"
        (1, probs(0.10, 0.90), aux_known("b"), 0),
    ]
    out = consistency_check(samples, ("a", "b"), ConsistencyConfig(0.5, 0.4))
    assert out[0].outcome == DEFER


def test_bottom_band_aligned_sample_defers():
    samples = [
        (0, probs(0.99, 0.01), aux_known("a"), 0),
        (1, probs(0.51, 0.49), aux_known("a"), 0),  # low confidence but aligned
    ]
    out = consistency_check(samples, ("a", "b"), ConsistencyConfig(0.4, 0.4))
    assert out[1].outcome == DEFER


def test_top_band_unknown_aux_defers():
    samples = [
        (0, probs(0.99, 0.01), aux_unknown(), 0),
        (1, probs(0.40, 0.60), aux_known("b"), 1),
    ]
    out = consistency_check(samples, ("a", "b"), ConsistencyConfig(0.4, 0.4))
    assert out[0].outcome == DEFER


def test_noise_always_defers():
    samples = [
        (0, probs(0.99, 0.01), None, None),
        (1, probs(0.01, 0.99), None, None),
    ]
    out = consistency_check(samples, ("a", "b"), ConsistencyConfig(0.5, 0.5))
    assert all(d.outcome == DEFER for d in out)


def test_confidence_ties_break_by_id():
    samples = [
        (7, probs(0.9, 0.1), aux_known("a"), 0),
        (3, probs(0.9, 0.1), aux_known("a"), 0),
    ]
    out = consistency_check(samples, ("a", "b"), ConsistencyConfig(0.5, 0.25))
    by_id = {d.sample_id: d for d in out}
    assert by_id[3].outcome == ACCEPT  # lower id sorts first into the top band
    assert by_id[7].outcome == DEFER


def test_band_overlap_warns_and_truncates():
    # ceil(0.5 * 3) = 2 for both bands: overlap on tiny pools
    with pytest.warns(RuntimeWarning, match="truncating"):
        n_top, n_bottom = band_sizes(3, ConsistencyConfig(0.5, 0.5))
    assert n_top == 2 and n_bottom == 1


def test_consistency_deterministic():
    rng = np.random.default_rng(0)
    samples = []
    for i in range(50):
        p = rng.dirichlet(np.ones(3))
        aux = aux_known("a") if i % 3 == 0 else (aux_unknown() if i % 3 == 1 else None)
        samples.append((i, p, aux, i % 4 if aux else None))
    cfg = ConsistencyConfig(0.2, 0.2)
    a = consistency_check(samples, ("a", "b", "c"), cfg)
    b = consistency_check(samples, ("a", "b", "c"), cfg)
    assert a == b


def make_bundle(n_unlabeled=6, n_labeled=2):
    labeled = [(rec(100 + i), "a") for i in range(n_labeled)]
    unlabeled = [rec(i) for i in range(n_unlabeled)]
    return DatasetBundle(labeled=labeled, unlabeled=unlabeled, val=[], test=[],
                         label_set=LabelSet(("a", "b")))


def decision(i, outcome, pseudo=None, cluster=0):
    aux = aux_known(pseudo) if outcome == ACCEPT else (aux_unknown() if outcome == UNKNOWN else None)
    return __import__("trafficlearn.updater", fromlist=["UpdateDecision"]).UpdateDecision(
        sample_id=i, outcome=outcome, pseudo_label=pseudo, confidence=0.5, aux=aux, cluster_id=cluster
    )


def test_apply_no_decisions_is_identity():
    bundle = make_bundle()
    out, groups, finals = apply_decisions(bundle, [], "no-expert", step=1)
    assert [r.id for r in out.unlabeled] == [r.id for r in bundle.unlabeled]
    assert groups == [] and finals == []


def test_apply_single_accept_bookkeeping():
    bundle = make_bundle()
    out, _, _ = apply_decisions(bundle, [decision(0, ACCEPT, "b")], "no-expert", step=1)
    assert len(out.labeled) == len(bundle.labeled) + 1
    assert len(out.unlabeled) == len(bundle.unlabeled) - 1
    assert (0, "b") in [(r.id, lab) for r, lab in out.labeled]


def test_apply_mixed_conservation():
    bundle = make_bundle(6)
    decisions = [
        decision(0, ACCEPT, "a"),
        decision(1, ACCEPT, "b"),
        decision(2, UNKNOWN, cluster=3),
        decision(3, UNKNOWN, cluster=3),
        decision(4, DEFER),
        decision(5, DEFER),
    ]
    out, groups, finals = apply_decisions(bundle, decisions, "with-expert", step=2)
    assert len(out.labeled) == 4 and len(out.unlabeled) == 2
    assert len(groups) == 1 and groups[0].sample_ids == [2, 3]
    assert finals == []
    all_ids = {r.id for r, _ in out.labeled} | {r.id for r in out.unlabeled} | {
        i for g in groups for i in g.sample_ids}
    assert all_ids >= {0, 1, 2, 3, 4, 5}


def test_apply_no_expert_records_final_unknowns():
    bundle = make_bundle(4)
    decisions = [decision(0, UNKNOWN, cluster=1), decision(1, UNKNOWN, cluster=2)]
    out, groups, finals = apply_decisions(bundle, decisions, "no-expert", step=1)
    assert groups == []
    assert sorted(d.sample_id for d in finals) == [0, 1]
    assert len(out.unlabeled) == 2


def test_apply_unknown_id_errors():
    bundle = make_bundle(2)
    with pytest.raises(ValueError, match="999"):
        apply_decisions(bundle, [decision(999, ACCEPT, "a")], "no-expert", step=1)


def test_queue_group_evidence_fields():
    bundle = make_bundle(25)
    decisions = [decision(i, UNKNOWN, cluster=0) for i in range(25)]
    _, groups, _ = apply_decisions(bundle, decisions, "with-expert", step=3)
    ev = groups[0].evidence
    assert ev["size"] == 25
    assert len(ev["representative_ids"]) == 20
    assert 0 <= ev["mean_confidence"] <= 1
    assert ev["distance_to_nearest_class"] > 0


def test_expert_resolve_new_class_expands():
    bundle = make_bundle(0)
    queue = ExpertQueue()
    group = QueueGroup(gid="s1c0", records=[rec(50), rec(51)], evidence={})
    queue.add(group)
    out, label_set, expanded = expert_resolve(queue, "s1c0", Verdict("label", "newapp"),
                                              bundle, bundle.label_set)
    assert expanded and "newapp" in label_set and label_set.version == 1
    assert {(r.id, lab) for r, lab in out.labeled} >= {(50, "newapp"), (51, "newapp")}
    assert group.status == "labeled"


def test_expert_resolve_existing_class_no_expand():
    bundle = make_bundle(0)
    queue = ExpertQueue()
    queue.add(QueueGroup(gid="g", records=[rec(60)], evidence={}))
    out, label_set, expanded = expert_resolve(queue, "g", Verdict("label", "b"),
                                              bundle, bundle.label_set)
    assert not expanded and label_set.version == 0
    assert (60, "b") in [(r.id, lab) for r, lab in out.labeled]


def test_expert_resolve_dismiss_returns_to_pool():
    bundle = make_bundle(1)
    queue = ExpertQueue()
    queue.add(QueueGroup(gid="g", records=[rec(70)], evidence={}))
    out, label_set, expanded = expert_resolve(queue, "g", Verdict("dismiss"),
                                              bundle, bundle.label_set)
    assert not expanded
    assert 70 in [r.id for r in out.unlabeled]
    assert queue.get("g").status == "dismissed"


def test_expert_resolve_non_pending_errors():
    bundle = make_bundle(0)
    queue = ExpertQueue()
    queue.add(QueueGroup(gid="g", records=[rec(80)], evidence={}, status="labeled"))
    with pytest.raises(ValueError, match="not pending"):
        expert_resolve(queue, "g", Verdict("dismiss"), bundle, bundle.label_set)


def test_verdict_validation():
    with pytest.raises(ValueError):
        Verdict("label")
    with pytest.raises(ValueError):
        Verdict("bogus")


def test_oracle_expert_majority_and_ties():
    g = QueueGroup(gid="g", records=[rec(0), rec(1), rec(2)], evidence={})
    truth = {0: "A", 1: "A", 2: "B"}
    assert oracle_expert(g, truth) == Verdict("label", "A")
    truth_tie = {0: "B", 1: "A", 2: "A"}
    g2 = QueueGroup(gid="h", records=[rec(0), rec(1)], evidence={})
    assert oracle_expert(g2, {0: "B", 1: "A"}) == Verdict("label", "A")
    with pytest.raises(ValueError, match="ground truth"):
        oracle_expert(g, {0: "A"})


def test_updater_invariants_random_streams():
    rng = np.random.default_rng(1)
    classes = ("a", "b", "c")
    for trial in range(60):
        n = int(rng.integers(3, 40))
        samples = []
        for i in range(n):
            p = rng.dirichlet(np.ones(3))
            kind = rng.integers(0, 3)
            if kind == 0:
                aux, cl = aux_known(classes[rng.integers(0, 3)], float(rng.uniform(0, 5))), int(rng.integers(0, 4))
            elif kind == 1:
                aux, cl = aux_unknown(float(rng.uniform(5, 20))), int(rng.integers(0, 4))
            else:
                aux, cl = None, None
            samples.append((i, p, aux, cl))
        cfg = ConsistencyConfig(float(rng.uniform(0.05, 0.45)), float(rng.uniform(0.05, 0.45)))
        decisions = consistency_check(samples, classes, cfg)

        bundle = DatasetBundle(labeled=[], unlabeled=[rec(i) for i in range(n)],
                               val=[], test=[], label_set=LabelSet(classes))
        mode = "with-expert" if trial % 2 else "no-expert"
        out, groups, finals = apply_decisions(bundle, decisions, mode, step=trial)

        # conservation of ids across all destinations
        dest = [r.id for r, _ in out.labeled] + [r.id for r in out.unlabeled]
        dest += [i for g in groups for i in g.sample_ids] + [d.sample_id for d in finals]
        assert sorted(dest) == list(range(n))
        # labeled set never shrinks
        assert len(out.labeled) >= len(bundle.labeled)
        for d in decisions:
            if d.outcome == ACCEPT:
                # no acceptance without argmax/aux agreement
                assert d.aux is not None and d.pseudo_label == d.aux.class_name
            if d.outcome == UNKNOWN:
                assert d.aux is not None and d.aux.is_unknown
