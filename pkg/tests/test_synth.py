"""Generator invariants: deterministic output, skill-sharing geometry,
response-model limits, and the oracle scoring bound."""

import numpy as np
import pytest

from crosskt.errors import ConfigError
from crosskt.semantics import FixtureSummaryBackend, summarize
from crosskt.synth import SynthConfig, SynthResult, generate, response_probability


def per_learner_accuracy(result: SynthResult):
    rows = []
    cx, cy = result.config.course_names
    for lid in sorted(result.dataset.learners):
        merged = result.dataset.learners[lid].merged
        xs = [r.response for r in merged if r.course_id == cx]
        ys = [r.response for r in merged if r.course_id == cy]
        rows.append((np.mean(xs), np.mean(ys)))
    return np.array(rows)


def test_config_validation():
    with pytest.raises(ConfigError):
        SynthConfig(num_learners=0)
    with pytest.raises(ConfigError):
        SynthConfig(shared_fraction=1.2)
    with pytest.raises(ConfigError):
        SynthConfig(min_interactions_per_course=5,
                    max_interactions_per_course=4)
    with pytest.raises(ConfigError):
        SynthConfig(course_names=("same", "same"))
    with pytest.raises(ConfigError):
        generate(SynthConfig(num_skills=1, shared_fraction=0.0))


def test_response_probability_model():
    loading = np.array([1.0, 0.0, 0.5])
    theta = np.array([0.2, 9.9, -0.4])
    # weighted mean score (0.2*1 + -0.4*0.5) / 1.5 = 0.0
    assert response_probability(loading, 0.0, theta, 3.0) == \
        pytest.approx(0.5, abs=1e-12)
    assert response_probability(loading, -1.0, theta, 2.0) == \
        pytest.approx(1.0 / (1.0 + np.exp(-2.0)), abs=1e-12)
    with pytest.raises(ConfigError):
        response_probability(np.zeros(3), 0.0, theta, 1.0)


def test_response_probability_monotone_in_skill():
    rng = np.random.default_rng(5)
    for _ in range(50):
        loading = np.abs(rng.normal(size=4)) + 0.01
        theta = rng.normal(size=4)
        diff = rng.normal()
        base = response_probability(loading, diff, theta, 2.0)
        k = int(rng.integers(4))
        bumped = theta.copy()
        bumped[k] += 0.5
        assert response_probability(loading, diff, bumped, 2.0) >= base
    # bumping an unloaded skill changes nothing
    loading = np.array([1.0, 0.0])
    p0 = response_probability(loading, 0.3, np.array([0.1, 0.0]), 2.0)
    p1 = response_probability(loading, 0.3, np.array([0.1, 5.0]), 2.0)
    assert p0 == p1


def test_generation_is_deterministic():
    cfg = SynthConfig(num_learners=20, seed=13)
    a, b = generate(cfg), generate(cfg)
    assert a.records == b.records
    assert a.graph == b.graph
    assert a.summary_fixture == b.summary_fixture
    assert {k: v for k, v in a.true_probabilities.items()} == \
        {k: v for k, v in b.true_probabilities.items()}
    c = generate(SynthConfig(num_learners=20, seed=14))
    assert a.records != c.records


def test_adding_learners_preserves_existing_ones():
    small = generate(SynthConfig(num_learners=10, seed=13))
    large = generate(SynthConfig(num_learners=25, seed=13))
    small_by_learner = {}
    for r in small.records:
        small_by_learner.setdefault(r.learner_id, []).append(r)
    for lid, recs in small_by_learner.items():
        assert [r for r in large.records if r.learner_id == lid] == recs


def test_zero_sharing_keeps_courses_apart():
    res = generate(SynthConfig(num_learners=30, num_skills=8,
                               shared_fraction=0.0, seed=5))
    for a, b, _ in res.graph.cc_edges:
        assert res.graph.concept_course[a] == res.graph.concept_course[b]


def test_full_sharing_couples_course_performance():
    res = generate(SynthConfig(
        num_learners=500, num_skills=8, shared_fraction=1.0,
        questions_per_course=40, concepts_per_course=6,
        min_interactions_per_course=25, max_interactions_per_course=35,
        seed=21))
    cross = [e for e in res.graph.cc_edges
             if res.graph.concept_course[e[0]] !=
             res.graph.concept_course[e[1]]]
    assert cross
    accs = per_learner_accuracy(res)
    corr = np.corrcoef(accs[:, 0], accs[:, 1])[0, 1]
    assert corr > 0.5, f"cross-course accuracy correlation {corr}"


def test_sharp_discrimination_is_nearly_deterministic():
    res = generate(SynthConfig(num_learners=40, discrimination=50.0, seed=6))
    assert res.oracle_auc_bound > 0.98
    ps = np.array(list(res.true_probabilities.values()))
    assert np.mean((ps < 0.01) | (ps > 0.99)) > 0.9


def test_zero_discrimination_is_coin_flipping():
    res = generate(SynthConfig(num_learners=40, discrimination=0.0, seed=6))
    assert res.oracle_auc_bound == pytest.approx(0.5, abs=1e-12)
    assert all(p == 0.5 for p in res.true_probabilities.values())


def test_dataset_and_graph_are_consistent():
    res = generate(SynthConfig(num_learners=25, seed=9))
    ds = res.dataset
    assert ds.courses == tuple(sorted(res.config.course_names))
    node_ids = ds.node_ids()
    assert set(res.node_texts) >= set(node_ids)
    # graph rows line up with the dataset node order
    assert list(res.graph.questions) == list(ds.questions)
    assert list(res.graph.concepts) == list(ds.concepts)
    for q, c in res.graph.qc_edges:
        assert c in ds.concept_map[q]
    for (lid, t), p in res.true_probabilities.items():
        assert 0.0 <= p <= 1.0
    # timestamps are unique per learner so merge order is unambiguous
    for lid, triple in ds.learners.items():
        stamps = [r.timestamp for r in triple.merged]
        assert stamps == sorted(stamps)
        assert len(set(stamps)) == len(stamps)


def test_summary_fixture_reproduces_summaries(tmp_path):
    res = generate(SynthConfig(num_learners=12, seed=3))
    import json
    fixture_path = tmp_path / "summaries.json"
    fixture_path.write_text(json.dumps(res.summary_fixture))
    backend = FixtureSummaryBackend(fixture_path)
    some_q = f"q:{res.dataset.questions[0]}"
    nt = res.node_texts[some_q]
    assert summarize(backend, nt, "question") == nt.summary_text
    some_c = f"c:{res.dataset.concepts[0]}"
    nt = res.node_texts[some_c]
    assert summarize(backend, nt, "concept") == nt.summary_text


def test_relation_fixture_marks_true_edges():
    res = generate(SynthConfig(num_learners=12, seed=3))
    votes = res.relation_fixture["votes"]
    assert res.relation_fixture["default"] == "no"
    for a, b, rel in res.graph.cc_edges:
        assert votes[f"{a}||{b}||{rel}"] == ["yes"] * 5


def test_drift_raises_late_sequence_success():
    cfg = SynthConfig(num_learners=400, num_skills=4, shared_fraction=0.5,
                      questions_per_course=30, concepts_per_course=4,
                      min_interactions_per_course=30,
                      max_interactions_per_course=30, drift=0.15, seed=8)
    res = generate(cfg)
    first_half, second_half = [], []
    for lid, triple in res.dataset.learners.items():
        merged = triple.merged
        mid = len(merged) // 2
        first_half.extend(r.response for r in merged[:mid])
        second_half.extend(r.response for r in merged[mid:])
    assert np.mean(second_half) > np.mean(first_half)
    # final proficiency never drops below where it started on average
    res_nodrift = generate(
        SynthConfig(**{**cfg.__dict__, "drift": 0.0}))
    assert np.mean([t.mean() for t in res.trajectories.values()]) > \
        np.mean([t.mean() for t in res_nodrift.trajectories.values()])
