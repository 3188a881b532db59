"""Acceptance gate: one test per shipped guarantee, at stated tolerance.

These are deliberately end-to-end and slower than the unit suites; each
asserts one headline property of the engine (gradient integrity, overfit
capacity, cross-course transfer benefit, exactness of the metric stack,
pipeline determinism) together with its runtime bound where one is part
of the guarantee.  `pytest tests/test_acceptance.py -v` prints one
pass/fail line per guarantee.
"""

from __future__ import annotations

import dataclasses
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from crosskt import numcore as nc
from crosskt.cli import main
from crosskt.data import (InteractionRecord, PAD, merge_and_pad, preprocess,
                          split, strip_pad)
from crosskt.graph import RelationBackendSpec, build_graph, save_graph
from crosskt.model import (forward_batch, init_model_params, make_batch,
                           propagate, total_loss)
from crosskt.negatives import (NegativeSampleConfig, SampleStats,
                               build_difficulty_table, hybrid_sample)
from crosskt.numcore.gradcheck import grad_check
from crosskt.rng import stream
from crosskt.semantics import HashEncoder, build_feature_matrix
from crosskt.synth import SynthConfig, generate
from crosskt.trainer import (TrainConfig, auc, evaluate, run_ablation_suite,
                             train, truncated_triples, _feature_tensor)

FIXTURES = Path(__file__).parent / "fixtures"


def _cli(*argv) -> int:
    return main([str(a) for a in argv])


# ---------------------------------------------------------------------------
# the 500-learner transfer world shared by the ablation guarantees


def _transfer_world(seed: int):
    """High-transfer synthetic corpus: skill identity reaches question
    features only through graph propagation, so knocking the graph out
    leaves difficulty as the sole per-question signal."""
    sc = SynthConfig(num_learners=500, num_skills=8, shared_fraction=0.8,
                     questions_per_course=40, concepts_per_course=6,
                     min_interactions_per_course=25,
                     max_interactions_per_course=35,
                     discrimination=2.0, drift=0.05, seed=100 + seed)
    res = generate(sc)
    ds = preprocess(res.records, 1, 1, 1, concept_map=res.concept_map)
    tr, va, te = split(ds, 0.7, 0.15, seed)
    feats = build_feature_matrix(res.node_texts, ds.node_ids(),
                                 HashEncoder(dim=32), use_summary=True)
    return res, tr, va, te, feats


_TRANSFER_CFG = TrainConfig(dim=32, gcn_layers=2, lr=0.01, weight_decay=1e-3,
                            dropout=0.1, lam=0.9, max_epochs=200, patience=30,
                            batch_size=64, max_seq_len=64, seed=0)


# ---------------------------------------------------------------------------
# A1


def test_a1_gradient_integrity_full_loss():
    """Backward pass matches central differences on every parameter
    block of the joint loss for a 4-learner micro-batch."""
    t0 = time.monotonic()
    sc = SynthConfig(num_learners=4, num_skills=3, shared_fraction=0.5,
                     questions_per_course=6, concepts_per_course=2,
                     min_interactions_per_course=5,
                     max_interactions_per_course=8, seed=11)
    res = generate(sc)
    ds = preprocess(res.records, 1, 1, 1, concept_map=res.concept_map)
    assert len(ds.learners) == 4

    feats = build_feature_matrix(res.node_texts, ds.node_ids(),
                                 HashEncoder(dim=16), use_summary=True)
    ft = _feature_tensor(feats, res.graph)
    params = init_model_params(16, 2, ds.courses, 0, 1)

    triples = truncated_triples(ds, 32)
    ids = sorted(ds.learners)
    batch = make_batch(triples, ds, ids)
    table = build_difficulty_table(ds)
    st = SampleStats()
    neg_q = np.zeros_like(batch.q_idx)
    neg_r = np.zeros_like(batch.responses)
    for b, lid in enumerate(ids):
        neg = hybrid_sample(triples[lid].merged, ds, table,
                            NegativeSampleConfig(0.3, 0.6),
                            stream(0, "negatives", 1, b), st)
        for t, rec in enumerate(neg):
            neg_q[b, t] = ds.question_index[rec.question_id]
            neg_r[b, t] = rec.response
    batch.neg_q_idx = neg_q
    batch.neg_responses = neg_r

    cx, cy = ds.courses

    def loss_fn() -> nc.Tensor:
        node_feats = propagate(res.graph, ft, params, 2, dropout_p=0.0,
                               rng=None, training=True)
        out = forward_batch(params, batch, node_feats, eta=0.5,
                            dropout_p=0.0, dropout_rngs={}, training=True,
                            with_cl=True)
        return total_loss(out.pred_losses[cx], out.pred_losses[cy],
                          out.cl_losses[cx], out.cl_losses[cy], 0.7)

    blocks = params.as_dict()
    err = grad_check(loss_fn, list(blocks.values()), eps=1e-6)
    elapsed = time.monotonic() - t0
    print(f"A1: {len(blocks)} blocks, max relative error {err:.3e}, "
          f"{elapsed:.1f}s")
    assert err < 1e-4, f"max relative error {err:.3e}"
    assert elapsed < 60.0, f"gradient check took {elapsed:.1f}s"


# ---------------------------------------------------------------------------
# A2


def test_a2_capacity_overfits_small_corpus():
    """20 learners, D=32, max_seq_len 32: training AUC reaches 0.95
    within 200 epochs."""
    t0 = time.monotonic()
    sc = SynthConfig(num_learners=20, num_skills=4, shared_fraction=0.5,
                     questions_per_course=12, concepts_per_course=3,
                     min_interactions_per_course=12,
                     max_interactions_per_course=16, seed=42,
                     discrimination=8.0)
    res = generate(sc)
    ds = preprocess(res.records, 1, 1, 1, concept_map=res.concept_map)
    feats = build_feature_matrix(res.node_texts, ds.node_ids(),
                                 HashEncoder(dim=32), use_summary=True)
    cfg = TrainConfig(dim=32, gcn_layers=2, lr=0.02, weight_decay=0.0,
                      dropout=0.0, no_cl=True, max_epochs=200, patience=200,
                      batch_size=8, max_seq_len=32, seed=0)
    result = train(cfg, ds, ds, res.graph, feats, log_fn=lambda m: None)
    report = evaluate(result.params, ds, res.graph, feats, cfg)
    elapsed = time.monotonic() - t0
    print(f"A2: training AUC {report.mean_auc:.4f} "
          f"(bound {res.oracle_auc_bound:.4f}), {elapsed:.1f}s")
    assert report.mean_auc is not None and report.mean_auc >= 0.95
    assert elapsed < 300.0, f"overfit run took {elapsed:.1f}s"


# ---------------------------------------------------------------------------
# A3


def test_a3_transfer_benefit_over_ablation():
    """Full model vs no_kp+no_cl on five paired seeds: mean held-out
    AUC improvement at least +0.01, full wins at least 4/5."""
    t0 = time.monotonic()
    gaps = []
    for seed in range(5):
        res, tr, va, te, feats = _transfer_world(seed)
        cfg = dataclasses.replace(_TRANSFER_CFG, seed=seed)
        results = run_ablation_suite(cfg, tr, va, te, res.graph,
                                     res.node_texts,
                                     variants=("full", "no_kp+no_cl"),
                                     encoder=HashEncoder(dim=32),
                                     log_fn=lambda m: None)
        full = results["full"].report.mean_auc
        ablated = results["no_kp+no_cl"].report.mean_auc
        gaps.append(full - ablated)
        print(f"A3 seed {seed}: full={full:.4f} ablated={ablated:.4f} "
              f"gap={full - ablated:+.4f}")
    mean_gap = sum(gaps) / len(gaps)
    wins = sum(g > 0 for g in gaps)
    elapsed = time.monotonic() - t0
    print(f"A3: mean gap {mean_gap:+.4f}, wins {wins}/5, {elapsed:.0f}s")
    assert mean_gap >= 0.01, f"mean gap {mean_gap:+.4f}"
    assert wins >= 4, f"full model won only {wins}/5 seeds"
    assert elapsed < 1800.0, f"ablation sweep took {elapsed:.0f}s"


# ---------------------------------------------------------------------------
# A5


def _brute_force_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = np.sum(pos[:, None] > neg[None, :])
    ties = np.sum(pos[:, None] == neg[None, :])
    return float((wins + 0.5 * ties) / (pos.size * neg.size))


def test_a5_auc_equals_pairwise_brute_force():
    """Rank-based AUC is exactly the O(n^2) pairwise statistic (ties
    count one half) on 10,000 randomized instances up to n=200."""
    rng = np.random.default_rng(9)
    checked = 0
    while checked < 10_000:
        n = int(rng.integers(2, 201))
        labels = rng.integers(0, 2, size=n).astype(float)
        if labels.sum() in (0, n):
            continue  # undefined; the raise path is unit-tested
        kind = rng.integers(0, 3)
        if kind == 0:
            scores = rng.normal(size=n)
        elif kind == 1:
            levels = int(rng.integers(2, 11))
            scores = rng.integers(0, levels, size=n).astype(float) / levels
        else:
            scores = np.round(rng.random(size=n), 2)
        assert auc(scores, labels) == _brute_force_auc(scores, labels)
        checked += 1
    print(f"A5: {checked} instances, exact match")


# ---------------------------------------------------------------------------
# A6


def test_a6_merge_pad_round_trip():
    """1,000 randomized history pairs: alignment invariants hold and
    PAD-stripping recovers both inputs exactly."""
    rng = np.random.default_rng(31)
    for trial in range(1000):
        nx, ny = int(rng.integers(0, 41)), int(rng.integers(0, 41))
        # narrow timestamp range so cross-course ties are common
        seq_x = sorted([InteractionRecord("L", "cx", f"x{rng.integers(20)}",
                                          int(rng.integers(2)), int(t))
                        for t in rng.integers(0, 60, size=nx)],
                       key=lambda r: r.sort_key())
        seq_y = sorted([InteractionRecord("L", "cy", f"y{rng.integers(20)}",
                                          int(rng.integers(2)), int(t))
                        for t in rng.integers(0, 60, size=ny)],
                       key=lambda r: r.sort_key())
        triple = merge_and_pad(seq_x, seq_y)
        assert len(triple.merged) == nx + ny
        assert len(triple.view_x) == nx + ny
        assert len(triple.view_y) == nx + ny
        assert strip_pad(triple.view_x) == seq_x
        assert strip_pad(triple.view_y) == seq_y
        for i in range(len(triple)):
            assert (triple.view_x[i] is PAD) != (triple.view_y[i] is PAD)
            taken = (triple.view_y[i] if triple.view_x[i] is PAD
                     else triple.view_x[i])
            assert triple.merged[i] == taken
        for i in range(len(triple) - 1):
            assert (triple.merged[i].sort_key()
                    <= triple.merged[i + 1].sort_key())
    print("A6: 1000 round trips, zero failures")


# ---------------------------------------------------------------------------
# A7


def test_a7_negative_sampling_contract():
    """10,000 resampled sequences: length preserved, flips exact,
    replacements same-course with strictly correct difficulty
    direction; fallbacks at most 5% of replacement attempts."""
    sc = SynthConfig(num_learners=400, num_skills=8, shared_fraction=0.5,
                     questions_per_course=60, concepts_per_course=6,
                     min_interactions_per_course=20,
                     max_interactions_per_course=30, seed=77)
    res = generate(sc)
    ds = preprocess(res.records, 1, 1, 1, concept_map=res.concept_map)
    table = build_difficulty_table(ds)
    cfg = NegativeSampleConfig()
    triples = truncated_triples(ds, 10 ** 9)
    learners = sorted(ds.learners)

    stats = SampleStats()
    obs_same = obs_flips = obs_repl = 0
    for i in range(10_000):
        lid = learners[i % len(learners)]
        rng = stream(42, "negatives", i // len(learners),
                     learners.index(lid))
        orig = triples[lid].merged
        neg = hybrid_sample(orig, ds, table, cfg, rng, stats)
        assert len(neg) == len(orig)
        for o, s in zip(orig, neg):
            assert (s.learner_id, s.course_id, s.timestamp) == \
                   (o.learner_id, o.course_id, o.timestamp)
            if s.question_id == o.question_id:
                if s.response == o.response:
                    obs_same += 1
                else:
                    assert s.response == 1 - o.response
                    obs_flips += 1
            else:
                obs_repl += 1
                assert s.response == 1 - o.response
                if o.response == 1:  # correct -> easier, answered wrong
                    assert table.rate(s.question_id) > table.rate(o.question_id)
                else:  # wrong -> harder, answered right
                    assert table.rate(s.question_id) < table.rate(o.question_id)

    assert obs_same == stats.unchanged
    assert obs_flips == stats.flips + stats.fallback_flips
    assert obs_repl == stats.replacements
    frac = stats.fallback_flips / stats.replacement_attempts
    print(f"A7: {obs_same + obs_flips + obs_repl} slots, "
          f"fallback fraction {frac:.4f}")
    assert frac <= 0.05, f"fallback fraction {frac:.4f}"


# ---------------------------------------------------------------------------
# A8

_A8_SYNTH = """\
num_learners = 30
num_skills = 5
shared_fraction = 0.5
questions_per_course = 15
concepts_per_course = 4
min_interactions_per_course = 10
max_interactions_per_course = 14
seed = 21
"""

_A8_TRAIN = """\
dim = 16
gcn_layers = 1
lr = 0.01
dropout = 0.3
max_epochs = 4
patience = 10
batch_size = 16
max_seq_len = 32
seed = 5
"""


def test_a8_deterministic_training_is_bitwise(tmp_path):
    """Two deterministic pipeline runs with one config and seed produce
    byte-identical checkpoints and evaluation reports."""
    root = tmp_path
    (root / "synth.cfg").write_text(_A8_SYNTH)
    (root / "train.cfg").write_text(_A8_TRAIN)
    assert _cli("synth", "--config", root / "synth.cfg",
                "--out-dir", root / "synth") == 0
    assert _cli("ingest",
                "--interactions", root / "synth" / "interactions.csv",
                "--concept-map", root / "synth" / "concept_map.csv",
                "--min-answers", 1, "--min-per-course", 1, "--min-cross", 1,
                "--out-dir", root / "ds") == 0
    assert _cli("build-graph", "--dataset", root / "ds",
                "--backend", "fixture",
                "--fixture", root / "synth" / "relation_fixture.json",
                "--out", root / "graph.txt") == 0
    assert _cli("embed", "--node-texts", root / "synth" / "node_texts.tsv",
                "--dim", 16, "--out", root / "embeddings.txt") == 0

    for run_dir in ("run1", "run2"):
        assert _cli("--deterministic", "train",
                    "--config", root / "train.cfg",
                    "--dataset", root / "ds", "--graph", root / "graph.txt",
                    "--embeddings", root / "embeddings.txt",
                    "--out-dir", root / run_dir) == 0
        assert _cli("--deterministic", "evaluate",
                    "--checkpoint", root / run_dir / "checkpoint.ckpt",
                    "--dataset", root / "ds", "--graph", root / "graph.txt",
                    "--embeddings", root / "embeddings.txt",
                    "--split", "test",
                    "--split-manifest", root / run_dir / "split_manifest.txt",
                    "--out", root / run_dir / "eval_test.txt") == 0

    for name in ("checkpoint.ckpt", "eval_val.txt", "eval_test.txt",
                 "history.tsv"):
        a = (root / "run1" / name).read_bytes()
        b = (root / "run2" / name).read_bytes()
        assert a == b, f"{name} differs between identical runs"
    print("A8: checkpoint and reports bitwise identical")


# ---------------------------------------------------------------------------
# A9


def test_a9_fixture_backend_reproduces_golden_graph(tmp_path, dataset):
    """Committed vote fixture rebuilds the committed graph byte for
    byte — including edges decided by a bare 3/5 majority — and a warm
    cache answers every vote without touching the backend."""
    spec = RelationBackendSpec(kind="fixture",
                               fixture_path=str(FIXTURES /
                                                "relation_votes.json"),
                               votes_per_query=5,
                               cache_dir=str(tmp_path / "cache"))
    graph, provenance = build_graph(dataset, spec)

    # hand-derived majorities: 5/5, 3/5 mixed-phrasing, 3/5 via a cyclic
    # two-reply list, 3/5 with an unparseable reply, 3/5 intra-course
    expected = {
        ("ac0", "dc0", "Prerequisite_of"),
        ("ac0", "dc1", "Used_for"),
        ("ac1", "dc0", "Hyponym_of"),
        ("dc0", "ac0", "Part_of"),
        ("ac0", "ac1", "Prerequisite_of"),
    }
    assert set(graph.cc_edges) == expected
    # near-misses must stay out: 2/5 and 1/5 affirmative
    assert ("ac1", "dc1", "Used_for") not in graph.cc_edges
    assert ("dc1", "ac1", "Part_of") not in graph.cc_edges

    rebuilt = tmp_path / "graph.txt"
    save_graph(rebuilt, graph, provenance={})
    golden = (FIXTURES / "golden_graph.txt").read_bytes()
    assert rebuilt.read_bytes() == golden
    assert provenance["backend_calls"] == 200  # 10 pairs x 4 relations x 5

    warm_graph, warm_prov = build_graph(dataset, spec)
    assert warm_prov["backend_calls"] == 0
    assert warm_graph == graph
    print("A9: golden graph reproduced; warm cache made zero calls")


# ---------------------------------------------------------------------------
# A10


def test_a10_no_cl_equals_lambda_one_exactly(tmp_path):
    """Dropping the contrastive term and weighting it to zero are the
    same computation: per-step losses, selected parameters, and reports
    all match bitwise in deterministic mode."""
    sc = SynthConfig(num_learners=40, num_skills=5, shared_fraction=0.5,
                     questions_per_course=15, concepts_per_course=4,
                     min_interactions_per_course=10,
                     max_interactions_per_course=14, seed=33)
    res = generate(sc)
    ds = preprocess(res.records, 1, 1, 1, concept_map=res.concept_map)
    tr, va, _ = split(ds, 0.7, 0.15, 0)
    feats = build_feature_matrix(res.node_texts, ds.node_ids(),
                                 HashEncoder(dim=16), use_summary=True)
    base = TrainConfig(dim=16, gcn_layers=1, lr=0.01, dropout=0.3,
                       max_epochs=6, patience=10, batch_size=16,
                       max_seq_len=32, seed=9)

    with threadpool_limits(limits=1):
        no_cl = train(dataclasses.replace(base, no_cl=True), tr, va,
                      res.graph, feats, log_fn=lambda m: None)
        lam_one = train(dataclasses.replace(base, lam=1.0), tr, va,
                        res.graph, feats, log_fn=lambda m: None)

    steps_a = [s.step_losses for s in no_cl.history]
    steps_b = [s.step_losses for s in lam_one.history]
    assert steps_a == steps_b, "per-step training losses diverge"

    pa, pb = no_cl.params.as_dict(), lam_one.params.as_dict()
    assert pa.keys() == pb.keys()
    for key in pa:
        assert np.array_equal(pa[key].values, pb[key].values), key

    ra = evaluate(no_cl.params, va, res.graph, feats, base)
    rb = evaluate(lam_one.params, va, res.graph, feats, base)
    assert ra.canonical_text() == rb.canonical_text()
    n_steps = sum(len(s) for s in steps_a)
    print(f"A10: {n_steps} training steps bitwise equal")
