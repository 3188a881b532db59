"""Metrics against brute-force oracles, config parsing, bitwise
checkpointing, and the training loop's determinism contracts."""

import dataclasses
import re

import numpy as np
import pytest

from crosskt.data import split
from crosskt.errors import (ConfigError, DataError, NumericalError,
                            UndefinedAUCError)
from crosskt.model import init_model_params
from crosskt.semantics import HashEncoder, build_feature_matrix
from crosskt.synth import SynthConfig, generate
from crosskt.trainer import (
    EvalReport,
    TrainConfig,
    acc,
    auc,
    evaluate,
    format_train_config,
    load_checkpoint,
    parse_eval_report,
    parse_train_config,
    parse_variant,
    run_ablation_suite,
    save_checkpoint,
    train,
)


def brute_force_auc(scores, labels):
    """O(n^2) pair counting: concordant pairs count 1, ties count 1/2."""
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    total = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                total += 1.0
            elif p == q:
                total += 0.5
    return total / (len(pos) * len(neg))


# ---------------------------------------------------------------------------
# metrics


def test_auc_matches_brute_force_exactly():
    rng = np.random.default_rng(19)
    for trial in range(300):
        n = int(rng.integers(2, 60))
        labels = rng.integers(0, 2, size=n).astype(float)
        if labels.min() == labels.max():
            labels[0] = 1.0 - labels[0]
        if trial % 2 == 0:
            scores = rng.normal(size=n)  # continuous, ties unlikely
        else:
            scores = rng.integers(0, 4, size=n).astype(float)  # heavy ties
        assert auc(scores, labels) == brute_force_auc(scores, labels), \
            f"trial {trial}"


def test_auc_hand_value_and_monotone_invariance():
    scores = np.array([0.9, 0.8, 0.3])
    labels = np.array([1.0, 0.0, 1.0])
    assert auc(scores, labels) == 0.5
    assert auc(scores * 3.0 + 2.0, labels) == 0.5
    assert auc(np.exp(scores), labels) == 0.5
    assert auc(np.array([0.2, 0.9, 0.9]), np.array([0.0, 1.0, 1.0])) == 1.0
    assert auc(np.array([0.5, 0.5]), np.array([0.0, 1.0])) == 0.5


def test_auc_error_cases():
    with pytest.raises(UndefinedAUCError):
        auc(np.array([0.1, 0.9]), np.array([1.0, 1.0]))
    with pytest.raises(UndefinedAUCError):
        auc(np.array([]), np.array([]))
    with pytest.raises(DataError):
        auc(np.array([0.1]), np.array([0.5]))
    with pytest.raises(NumericalError):
        auc(np.array([np.nan, 0.2]), np.array([1.0, 0.0]))


def test_acc_exact_threshold():
    scores = np.array([0.5, 0.49999, 0.7, 0.1])
    labels = np.array([1.0, 1.0, 0.0, 0.0])
    # 0.5 rounds up: correct, 0.49999 rounds down: wrong, 0.7 vs 0: wrong,
    # 0.1 vs 0: correct
    assert acc(scores, labels) == 0.5


# ---------------------------------------------------------------------------
# config files


def test_config_round_trip_and_comments():
    cfg = TrainConfig(dim=32, gcn_layers=1, eta=0.25, no_cl=True, seed=9)
    text = format_train_config(cfg)
    assert parse_train_config(text) == cfg
    assert parse_train_config("dim = 8 # inline\n\n# full line\nseed=3\n") \
        == TrainConfig(dim=8, seed=3)


def test_config_rejects_unknown_and_malformed_keys():
    with pytest.raises(ConfigError, match="unknown key"):
        parse_train_config("dimension = 8\n")
    with pytest.raises(ConfigError, match="bad value"):
        parse_train_config("dim = eight\n")
    with pytest.raises(ConfigError, match="duplicate"):
        parse_train_config("dim = 8\ndim = 9\n")
    with pytest.raises(ConfigError, match="expected key = value"):
        parse_train_config("just words\n")
    with pytest.raises(ConfigError, match="true or false"):
        parse_train_config("no_cl = yes\n")


def test_config_field_validation():
    with pytest.raises(ConfigError):
        TrainConfig(dim=0)
    with pytest.raises(ConfigError):
        TrainConfig(eta=1.5)
    with pytest.raises(ConfigError):
        TrainConfig(dim=8, num_heads=3)
    with pytest.raises(ConfigError):
        TrainConfig(flip_threshold=0.7, replace_threshold=0.6)
    with pytest.raises(ConfigError):
        TrainConfig(dropout=1.0)


# ---------------------------------------------------------------------------
# shared small corpus


@pytest.fixture(scope="module")
def synth_world():
    res = generate(SynthConfig(
        num_learners=30, num_skills=6, shared_fraction=0.5,
        questions_per_course=20, concepts_per_course=4,
        min_interactions_per_course=8, max_interactions_per_course=12,
        seed=11))
    tr, va, te = split(res.dataset, 0.7, 0.15, seed=0)
    encoder = HashEncoder(dim=16)
    node_ids = [f"q:{q}" for q in res.graph.questions] + \
               [f"c:{c}" for c in res.graph.concepts]
    feats = build_feature_matrix(res.node_texts, node_ids, encoder,
                                 use_summary=True)
    return res, tr, va, te, feats


def small_config(**overrides):
    base = dict(dim=16, gcn_layers=1, eta=0.5, lam=0.7, lr=0.01,
                weight_decay=1e-5, dropout=0.1, max_epochs=3, patience=10,
                batch_size=16, max_seq_len=32, seed=1)
    base.update(overrides)
    return TrainConfig(**base)


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip_and_bitwise_stability(tmp_path, synth_world):
    res, tr, *_ = synth_world
    params = init_model_params(16, 2, tr.courses, seed=7)
    cfg = small_config(gcn_layers=2)
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, params, cfg, extra={"best_epoch": 3})
    first = path.read_bytes()
    loaded, loaded_cfg, extra = load_checkpoint(path)
    assert loaded_cfg == cfg
    assert extra == {"best_epoch": 3}
    for name, t in params.as_dict().items():
        assert np.array_equal(t.values, loaded.as_dict()[name].values)
    save_checkpoint(path, loaded, loaded_cfg, extra={"best_epoch": 3})
    assert path.read_bytes() == first


def test_checkpoint_rejects_corruption(tmp_path, synth_world):
    res, tr, *_ = synth_world
    params = init_model_params(8, 1, tr.courses, seed=7)
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, params, small_config(dim=8))
    raw = path.read_bytes()
    (tmp_path / "trunc.ckpt").write_bytes(raw[:-16])
    with pytest.raises(DataError, match="truncated"):
        load_checkpoint(tmp_path / "trunc.ckpt")
    (tmp_path / "junk.ckpt").write_bytes(b"not a checkpoint\n")
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "junk.ckpt")
    with pytest.raises(DataError, match="not found"):
        load_checkpoint(tmp_path / "absent.ckpt")


# ---------------------------------------------------------------------------
# training loop


def test_patience_zero_trains_exactly_one_epoch(synth_world):
    res, tr, va, te, feats = synth_world
    result = train(small_config(patience=0, max_epochs=50), tr, va,
                   res.graph, feats)
    assert len(result.history) == 1
    assert result.stopped == "patience"
    assert result.best_epoch == 1


def test_early_stopping_counts_epochs_since_improvement(synth_world):
    res, tr, va, te, feats = synth_world
    result = train(small_config(patience=1, max_epochs=40, lr=0.3),
                   tr, va, res.graph, feats)
    # stopped one epoch after the last improvement, or hit the cap
    if result.stopped == "patience":
        assert result.history[-1].improved is False
        assert result.history[-1].epoch == result.best_epoch + 1
    assert result.best_epoch >= 1


def test_training_is_bitwise_reproducible(tmp_path, synth_world):
    res, tr, va, te, feats = synth_world
    cfg = small_config(max_epochs=2)
    a = train(cfg, tr, va, res.graph, feats)
    b = train(cfg, tr, va, res.graph, feats)
    pa, pb = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(pa, a.params, cfg, extra={"best_epoch": a.best_epoch})
    save_checkpoint(pb, b.params, cfg, extra={"best_epoch": b.best_epoch})
    assert pa.read_bytes() == pb.read_bytes()
    ra = evaluate(a.params, te, res.graph, feats, cfg)
    rb = evaluate(b.params, te, res.graph, feats, cfg)
    assert ra.canonical_text() == rb.canonical_text()
    assert [s.train_loss for s in a.history] == \
        [s.train_loss for s in b.history]


def test_seed_changes_the_run(synth_world):
    res, tr, va, te, feats = synth_world
    a = train(small_config(max_epochs=1), tr, va, res.graph, feats)
    b = train(small_config(max_epochs=1, seed=2), tr, va, res.graph, feats)
    assert a.history[0].train_loss != b.history[0].train_loss


def test_best_parameters_are_retained(synth_world):
    res, tr, va, te, feats = synth_world
    result = train(small_config(max_epochs=4, lr=0.05), tr, va,
                   res.graph, feats)
    metrics = [s.val_metric for s in result.history]
    assert result.best_metric == max(m for m in metrics if m is not None)
    assert result.history[result.best_epoch - 1].improved is True


def test_evaluation_is_batch_size_invariant(synth_world):
    res, tr, va, te, feats = synth_world
    cfg = small_config(max_epochs=1)
    result = train(cfg, tr, va, res.graph, feats)
    r_small = evaluate(result.params, te, res.graph, feats,
                       dataclasses.replace(cfg, batch_size=2))
    r_large = evaluate(result.params, te, res.graph, feats,
                       dataclasses.replace(cfg, batch_size=500))
    assert r_small.canonical_text() == r_large.canonical_text()


def test_eval_report_round_trip(synth_world):
    res, tr, va, te, feats = synth_world
    cfg = small_config(max_epochs=1)
    result = train(cfg, tr, va, res.graph, feats)
    report = evaluate(result.params, te, res.graph, feats, cfg)
    parsed = parse_eval_report(report.canonical_text())
    assert parsed == report
    with pytest.raises(DataError):
        parse_eval_report("something else\n")


def test_dropping_contrastive_terms_equals_full_weight_on_prediction(
        tmp_path, synth_world):
    """Removing the contrastive path must reproduce the run where its
    weight is zero, loss for loss and parameter for parameter."""
    res, tr, va, te, feats = synth_world
    base = small_config(max_epochs=3, dropout=0.3)
    no_cl = train(dataclasses.replace(base, no_cl=True), tr, va,
                  res.graph, feats)
    lam_one = train(dataclasses.replace(base, lam=1.0), tr, va,
                    res.graph, feats)
    assert [s.train_loss for s in no_cl.history] == \
        [s.train_loss for s in lam_one.history]
    for name, t in no_cl.params.as_dict().items():
        assert np.array_equal(t.values, lam_one.params.as_dict()[name].values), name
    ra = evaluate(no_cl.params, te, res.graph, feats, base)
    rb = evaluate(lam_one.params, te, res.graph, feats, base)
    assert ra.canonical_text() == rb.canonical_text()


def test_no_se_uses_seeded_noise_features(synth_world):
    res, tr, va, te, feats = synth_world
    cfg = small_config(max_epochs=1, no_se=True)
    a = train(cfg, tr, va, res.graph, feats)
    b = train(cfg, tr, va, res.graph, feats)
    assert not np.array_equal(a.features.matrix, feats.matrix)
    assert np.array_equal(a.features.matrix, b.features.matrix)
    # features=None is allowed when they are replaced anyway
    c = train(cfg, tr, va, res.graph, None)
    assert np.array_equal(c.features.matrix, a.features.matrix)
    with pytest.raises(ConfigError, match="features are required"):
        train(small_config(), tr, va, res.graph, None)


def test_no_kp_trains_without_propagation(synth_world):
    res, tr, va, te, feats = synth_world
    result = train(small_config(max_epochs=1, no_kp=True), tr, va,
                   res.graph, feats)
    assert len(result.params.gcn_layers) == 0


def test_feature_dim_mismatch_is_config_error(synth_world):
    res, tr, va, te, feats = synth_world
    with pytest.raises(ConfigError, match="dim"):
        train(small_config(dim=32), tr, va, res.graph, feats)


def test_divergence_aborts_with_location(synth_world):
    res, tr, va, te, feats = synth_world
    cfg = small_config(lr=1e150, max_epochs=5, dropout=0.0)
    with pytest.raises(NumericalError,
                       match=r"diverged at epoch \d+, batch \d+"):
        train(cfg, tr, va, res.graph, feats)


# ---------------------------------------------------------------------------
# ablation suite


def test_parse_variant():
    assert parse_variant("full") == {}
    assert parse_variant("no_kp") == {"no_kp": True}
    assert parse_variant("no_kp+no_cl") == {"no_kp": True, "no_cl": True}
    with pytest.raises(ConfigError, match="unknown ablation"):
        parse_variant("no_graph")


def test_ablation_suite_runs_paired_variants(synth_world):
    res, tr, va, te, feats = synth_world
    cfg = small_config(max_epochs=1)
    lines = []
    results = run_ablation_suite(cfg, tr, va, te, res.graph, res.node_texts,
                                 variants=("full", "no_cl", "no_kp+no_cl"),
                                 log_fn=lines.append)
    assert set(results) == {"full", "no_cl", "no_kp+no_cl"}
    for entry in results.values():
        assert entry.report.mean_auc is not None
        assert entry.result.config.seed == cfg.seed
    assert results["no_cl"].result.config.no_cl is True
    assert results["no_kp+no_cl"].result.config.no_kp is True
    assert any(re.search(r"\[full\] test mean_auc=", l) for l in lines)


def test_ablation_no_llm_encodes_original_text(synth_world):
    res, tr, va, te, feats = synth_world
    cfg = small_config(max_epochs=1)
    results = run_ablation_suite(cfg, tr, va, te, res.graph, res.node_texts,
                                 variants=("full", "no_llm"))
    assert not np.array_equal(results["full"].result.features.matrix,
                              results["no_llm"].result.features.matrix)
