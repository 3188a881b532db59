"""Synthetic two-course corpora with known skill structure.

Learners hold a latent proficiency per skill.  Courses share a
configurable fraction of the skill pool; concepts load on skills,
questions inherit loadings from their concepts, and responses follow a
logistic item-response rule.  Because the generating process is known,
datasets come with true response probabilities, a ground-truth concept
graph, and an oracle AUC bound no model can beat except by luck.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, get_type_hints

import numpy as np

from .data import Dataset, InteractionRecord, preprocess
from .errors import ConfigError, UndefinedAUCError
from .graph import ConceptGraph
from .rng import stream
from .semantics import NodeText, prompt_digest, render_summary_prompt

_NOISE_VOCAB = [
    "notebook", "harbor", "lantern", "gravel", "meadow", "copper", "willow",
    "ember", "quarry", "drift", "saddle", "orchard", "flint", "marsh",
    "beacon", "timber", "cobble", "prairie", "anchor", "thicket", "summit",
    "hollow", "bramble", "ledger", "canvas", "burrow", "galley", "mosaic",
    "pennant", "ravine", "shoal", "tundra", "vellum", "wharf", "zephyr",
    "bobbin", "crag", "dune", "eddy", "fjord",
]


def response_probability(loading: np.ndarray, difficulty: float,
                         proficiency: np.ndarray,
                         discrimination: float) -> float:
    """P(correct) = sigmoid(a * (weighted skill score - difficulty)).
    The score is the loading-weighted mean of proficiencies, so raising
    any loaded skill never lowers the probability."""
    loading = np.asarray(loading, dtype=np.float64)
    total = loading.sum()
    if total <= 0.0:
        raise ConfigError("question loading must have positive mass")
    score = float(loading @ np.asarray(proficiency, dtype=np.float64)) / total
    z = discrimination * (score - difficulty)
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


@dataclass(frozen=True)
class SynthConfig:
    num_learners: int = 100
    num_skills: int = 8
    shared_fraction: float = 0.5  # fraction of skills common to both courses
    questions_per_course: int = 40
    concepts_per_course: int = 6
    min_interactions_per_course: int = 20
    max_interactions_per_course: int = 30
    discrimination: float = 2.0
    drift: float = 0.05  # proficiency gain on practiced skills
    session_length: int = 1  # consecutive same-course answers per sitting
    seed: int = 0
    course_names: tuple = ("course_x", "course_y")

    def __post_init__(self):
        checks = [
            (self.num_learners >= 1, "num_learners must be >= 1"),
            (self.num_skills >= 1, "num_skills must be >= 1"),
            (0.0 <= self.shared_fraction <= 1.0,
             "shared_fraction must lie in [0, 1]"),
            (self.questions_per_course >= 1,
             "questions_per_course must be >= 1"),
            (self.concepts_per_course >= 1,
             "concepts_per_course must be >= 1"),
            (1 <= self.min_interactions_per_course
             <= self.max_interactions_per_course,
             "interaction range must satisfy 1 <= min <= max"),
            (self.discrimination >= 0.0, "discrimination must be >= 0"),
            (self.drift >= 0.0, "drift must be >= 0"),
            (self.session_length >= 1, "session_length must be >= 1"),
            (len(set(self.course_names)) == 2, "need two distinct courses"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)


def parse_synth_config(text: str) -> SynthConfig:
    """key = value lines mirroring SynthConfig; course_names is a
    comma-separated pair."""
    types = get_type_hints(SynthConfig)
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"synth config line {lineno}: expected "
                              f"key = value, got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in types:
            raise ConfigError(f"synth config line {lineno}: unknown key "
                              f"{key!r}")
        if key in values:
            raise ConfigError(f"synth config line {lineno}: duplicate key "
                              f"{key!r}")
        try:
            if key == "course_names":
                names = tuple(v.strip() for v in val.split(",") if v.strip())
                if len(names) != 2:
                    raise ValueError("expected two comma-separated names")
                values[key] = names
            elif types[key] is int:
                values[key] = int(val)
            elif types[key] is float:
                values[key] = float(val)
            else:
                values[key] = val
        except ValueError as exc:
            raise ConfigError(f"synth config line {lineno}: bad value for "
                              f"{key!r}: {exc}") from exc
    return SynthConfig(**values)


def load_synth_config(path) -> SynthConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"synth config file not found: {p}")
    return parse_synth_config(p.read_text(encoding="utf-8"))


@dataclass
class SynthResult:
    config: SynthConfig
    dataset: Dataset
    graph: ConceptGraph
    records: list
    concept_map: dict
    node_texts: dict  # node id -> NodeText with summaries filled in
    summary_fixture: dict  # reply fixture for the summary backend
    relation_fixture: dict  # vote fixture for the relation backend
    true_probabilities: dict  # (learner, timestamp) -> P(correct)
    trajectories: dict  # learner -> final proficiency vector
    oracle_auc_bound: float | None
    question_loadings: dict
    question_difficulties: dict


def _skill_split(config: SynthConfig) -> tuple[list, list]:
    """Skill indices available to each course; the first
    round(shared_fraction * num_skills) are common."""
    n_shared = round(config.shared_fraction * config.num_skills)
    private = config.num_skills - n_shared
    x_private = (private + 1) // 2
    shared = list(range(n_shared))
    x_skills = shared + list(range(n_shared, n_shared + x_private))
    y_skills = shared + list(range(n_shared + x_private, config.num_skills))
    if not x_skills or not y_skills:
        raise ConfigError(
            "skill pool leaves a course without any skill; raise num_skills "
            "or shared_fraction")
    return x_skills, y_skills


def generate(config: SynthConfig) -> SynthResult:
    """Deterministic for a given config; every random draw comes from a
    stream named by its role."""
    seed = config.seed
    course_x, course_y = config.course_names
    skills_by_course = dict(zip(config.course_names, _skill_split(config)))

    # concepts: a dominant skill plus one minor loading
    concept_loading: dict[str, np.ndarray] = {}
    concept_dominant: dict[str, int] = {}
    concept_course: dict[str, str] = {}
    rng_c = stream(seed, "synth.concepts")
    for course in config.course_names:
        available = skills_by_course[course]
        for k in range(config.concepts_per_course):
            cid = f"{course}_c{k:02d}"
            dominant = available[k % len(available)]
            loading = np.zeros(config.num_skills)
            loading[dominant] = 1.0
            if len(available) > 1:
                minor = available[int(rng_c.integers(len(available)))]
                if minor != dominant:
                    loading[minor] = 0.3
            concept_loading[cid] = loading
            concept_dominant[cid] = dominant
            concept_course[cid] = course

    # questions: one or two same-course concepts, mean loading, and a
    # difficulty spread over the score scale
    concept_map: dict[str, set] = {}
    question_loading: dict[str, np.ndarray] = {}
    question_difficulty: dict[str, float] = {}
    question_course: dict[str, str] = {}
    rng_q = stream(seed, "synth.questions")
    for course in config.course_names:
        cids = [f"{course}_c{k:02d}" for k in range(config.concepts_per_course)]
        for j in range(config.questions_per_course):
            qid = f"{course}_q{j:03d}"
            first = cids[int(rng_q.integers(len(cids)))]
            chosen = {first}
            if len(cids) > 1 and rng_q.uniform() < 0.35:
                second = cids[int(rng_q.integers(len(cids)))]
                chosen.add(second)
            concept_map[qid] = chosen
            question_loading[qid] = np.mean(
                [concept_loading[c] for c in sorted(chosen)], axis=0)
            question_difficulty[qid] = float(rng_q.normal(0.0, 0.8))
            question_course[qid] = course

    # learners answer an interleaved mix of both courses; proficiency
    # drifts upward on the skills each answered question loads on
    records: list[InteractionRecord] = []
    true_probabilities: dict = {}
    trajectories: dict = {}
    questions_of = {
        course: sorted(q for q in question_loading
                       if question_course[q] == course)
        for course in config.course_names}
    for i in range(config.num_learners):
        lid = f"L{i:04d}"
        rng_l = stream(seed, "synth.learner", i)
        theta = rng_l.normal(0.0, 1.0, size=config.num_skills)
        counts = {
            course: int(rng_l.integers(config.min_interactions_per_course,
                                       config.max_interactions_per_course + 1))
            for course in config.course_names}
        # study sittings: runs of session_length same-course answers in
        # shuffled order (length 1 = fully interleaved enrollment)
        blocks: list = []
        for course in config.course_names:
            n = counts[course]
            for start in range(0, n, config.session_length):
                size = min(config.session_length, n - start)
                blocks.append([course] * size)
        rng_l.shuffle(blocks)
        slots = [c for block in blocks for c in block]
        for t, course in enumerate(slots):
            pool = questions_of[course]
            qid = pool[int(rng_l.integers(len(pool)))]
            p = response_probability(question_loading[qid],
                                     question_difficulty[qid], theta,
                                     config.discrimination)
            response = int(rng_l.uniform() < p)
            records.append(InteractionRecord(lid, course, qid, response, t))
            true_probabilities[(lid, t)] = p
            loading = question_loading[qid]
            theta = theta + config.drift * loading / loading.sum()
        trajectories[lid] = theta

    dataset = preprocess(records, min_answers_per_question=1,
                         min_per_course=1, min_cross_course=1,
                         concept_map=concept_map)

    # ground-truth concept links: ordered pairs sharing a dominant skill
    surviving_concepts = set(dataset.concepts)
    cc_edges = set()
    for a in sorted(surviving_concepts):
        for b in sorted(surviving_concepts):
            if a != b and concept_dominant[a] == concept_dominant[b]:
                cc_edges.add((a, b, "Used_for"))
    qc_edges = {(q, c) for q in dataset.questions
                for c in dataset.concept_map[q]}
    graph = ConceptGraph(
        questions=dataset.questions, concepts=dataset.concepts,
        question_course=dict(dataset.question_course),
        concept_course=dict(dataset.concept_course),
        qc_edges=frozenset(qc_edges), cc_edges=frozenset(cc_edges))

    node_texts, summary_fixture = _node_texts(
        config, dataset, concept_dominant, question_difficulty)
    relation_fixture = {
        "votes": {f"{a}||{b}||{rel}": ["yes"] * 5 for a, b, rel in cc_edges},
        "default": "no",
    }

    probs = np.array([true_probabilities[(r.learner_id, r.timestamp)]
                      for r in records])
    outcomes = np.array([float(r.response) for r in records])
    try:
        from .trainer import auc
        bound: float | None = auc(probs, outcomes)
    except UndefinedAUCError:
        bound = None

    return SynthResult(
        config=config, dataset=dataset, graph=graph, records=records,
        concept_map=concept_map, node_texts=node_texts,
        summary_fixture=summary_fixture, relation_fixture=relation_fixture,
        true_probabilities=true_probabilities, trajectories=trajectories,
        oracle_auc_bound=bound, question_loadings=question_loading,
        question_difficulties=question_difficulty)


def _node_texts(config: SynthConfig, dataset: Dataset,
                concept_dominant: Mapping, question_difficulty: Mapping
                ) -> tuple[dict, dict]:
    """Question text is mostly idiosyncratic noise; concept summaries
    name their dominant skill, so skill identity reaches question
    features only through graph propagation."""
    texts: dict[str, NodeText] = {}
    fixture_replies: dict[str, str] = {}
    rng_t = stream(config.seed, "synth.texts")

    def noise(n):
        return " ".join(_NOISE_VOCAB[int(rng_t.integers(len(_NOISE_VOCAB)))]
                        for _ in range(n))

    for q in dataset.questions:
        level = "challenging" if question_difficulty[q] > 0 else "approachable"
        original = (f"Work through the {level} exercise {q.replace('_', ' ')} "
                    f"about {noise(6)}.")
        summary = f"An {level} practice exercise on applied course material."
        nt = NodeText(node_id=f"q:{q}", kind="question",
                      original_text=original, summary_text=summary)
        texts[f"q:{q}"] = nt
        fixture_replies[prompt_digest(
            render_summary_prompt(nt, "question"))] = summary
    for c in dataset.concepts:
        dom = concept_dominant[c]
        original = (f"Unit {c.replace('_', ' ')} covering {noise(4)} and "
                    f"related coursework.")
        summary = (f"Covers skill{dom} methods; mastery of skill{dom} "
                   f"underpins this unit.")
        nt = NodeText(node_id=f"c:{c}", kind="concept",
                      original_text=original, summary_text=summary)
        texts[f"c:{c}"] = nt
        fixture_replies[prompt_digest(
            render_summary_prompt(nt, "concept"))] = summary
    return texts, {"replies": fixture_replies, "default": None}
