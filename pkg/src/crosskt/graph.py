"""Cross-course concept graph construction.

Explicit question-concept edges come straight from the dataset's map.
Implicit concept-concept edges are predicted: for each candidate pair
and each of four relation types, a text backend is asked the same
question several times and the edge is kept on a strict majority of
affirmative votes.  Replies are cached by prompt digest so rebuilding
from a warm cache costs zero backend calls.
"""

from __future__ import annotations

import hashlib
import json
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .data import Dataset
from .errors import BackendError, ConfigError, DataError
from .semantics import HashEncoder, _http_json, prompt_digest

log = logging.getLogger(__name__)

RELATION_TYPES = ("Prerequisite_of", "Used_for", "Hyponym_of", "Part_of")

RELATION_DEFINITIONS = {
    "Prerequisite_of": (
        "Concept A is a prerequisite of concept B when a learner must "
        "understand A before B can be learned properly."),
    "Used_for": (
        "Concept A is used for concept B when techniques or results from A "
        "are applied while working with B."),
    "Hyponym_of": (
        "Concept A is a hyponym of concept B when A is a specific instance "
        "or subtype of the broader concept B."),
    "Part_of": (
        "Concept A is part of concept B when A is a component contained "
        "within the larger whole B."),
}

# Replies whose first word (lowercased, stripped of punctuation) is in this
# set count as affirmative votes; anything else, parseable or not, is a
# negative vote.
AFFIRMATIVE_TOKENS = frozenset({"yes", "y", "true", "affirmative"})


def render_relation_prompt(course_names: tuple[str, str], relation_type: str,
                           concept_a: str, concept_b: str) -> str:
    if relation_type not in RELATION_TYPES:
        raise ConfigError(f"unknown relation type '{relation_type}'; "
                          f"expected one of {list(RELATION_TYPES)}")
    if not concept_a or not concept_b:
        raise DataError("concept names must be nonempty")
    definition = RELATION_DEFINITIONS[relation_type]
    return (
        f'You are mapping dependencies between the courses '
        f'"{course_names[0]}" and "{course_names[1]}".\n'
        f'Relation: {relation_type}.\n'
        f'Definition: {definition}\n'
        f'Concept A: "{concept_a}"\n'
        f'Concept B: "{concept_b}"\n'
        f'Does the relation {relation_type} hold from concept A to '
        f'concept B? Answer with a single word: yes or no.')


def parse_vote(reply: str) -> bool:
    words = reply.strip().lower().split()
    if not words:
        log.info("empty relation reply counted as a negative vote")
        return False
    first = words[0].strip(".,!:;\"'")
    if first in AFFIRMATIVE_TOKENS:
        return True
    if first not in ("no", "n", "false"):
        log.info("unparseable relation reply %r counted as a negative vote",
                 reply[:80])
    return False


# ---------------------------------------------------------------------------
# backends


@dataclass
class RelationBackendSpec:
    kind: str  # llm_http | fixture | heuristic
    endpoint: str | None = None
    token_env: str = "CROSSKT_LLM_TOKEN"
    fixture_path: str | None = None
    threshold: float = 0.5
    votes_per_query: int = 5
    cache_dir: str | None = None
    timeout: float = 30.0
    retries: int = 3
    backoff: float = 0.5

    def __post_init__(self):
        if self.kind not in ("llm_http", "fixture", "heuristic"):
            raise ConfigError(f"unknown relation backend kind '{self.kind}'")
        if self.votes_per_query < 1 or self.votes_per_query % 2 == 0:
            raise ConfigError("votes_per_query must be odd and >= 1, "
                              f"got {self.votes_per_query}")
        if self.kind == "llm_http" and not self.endpoint:
            raise ConfigError("llm_http backend requires an endpoint")
        if self.kind == "fixture" and not self.fixture_path:
            raise ConfigError("fixture backend requires a fixture path")

    def build(self) -> "RelationBackend":
        if self.kind == "fixture":
            return FixtureRelationBackend(self.fixture_path)
        if self.kind == "heuristic":
            return HeuristicRelationBackend(self.threshold)
        return HttpRelationBackend(self.endpoint, self.token_env,
                                   self.timeout, self.retries, self.backoff)


class RelationBackend:
    """One raw reply per (prompt, vote index)."""

    calls = 0

    def query(self, prompt: str, concept_a: str, concept_b: str,
              relation_type: str, vote_index: int) -> str:
        raise NotImplementedError


class FixtureRelationBackend(RelationBackend):
    """Votes from a JSON file:

        {"votes": {"<a>||<b>||<relation>": ["yes","no",...]}, "default": "no"}

    A pair's vote list is read cyclically by vote index; missing keys use
    the default reply.
    """

    kind = "fixture"

    def __init__(self, path):
        self.path = Path(path)
        if not self.path.exists():
            raise BackendError(f"relation fixture not found: {self.path}")
        try:
            blob = json.loads(self.path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise BackendError(f"relation fixture {self.path}: {exc}") from None
        self.votes: dict[str, list[str]] = dict(blob.get("votes", {}))
        self.default: str = blob.get("default", "no")
        self.calls = 0

    def query(self, prompt, concept_a, concept_b, relation_type, vote_index):
        self.calls += 1
        key = f"{concept_a}||{concept_b}||{relation_type}"
        replies = self.votes.get(key)
        if not replies:
            return self.default
        return replies[vote_index % len(replies)]


class HeuristicRelationBackend(RelationBackend):
    """Affirms every relation type for pairs whose hash-encoded names have
    cosine similarity >= threshold.  Deterministic, so all votes agree."""

    kind = "heuristic"

    def __init__(self, threshold: float, dim: int = 256, seed: int = 0):
        self.threshold = float(threshold)
        self.encoder = HashEncoder(dim=dim, seed=seed)
        self.calls = 0

    def query(self, prompt, concept_a, concept_b, relation_type, vote_index):
        self.calls += 1
        va = self.encoder.encode(concept_a)
        vb = self.encoder.encode(concept_b)
        cosine = float(va @ vb)
        return "yes" if cosine >= self.threshold else "no"


class HttpRelationBackend(RelationBackend):
    kind = "llm_http"

    def __init__(self, endpoint, token_env, timeout, retries, backoff):
        self.endpoint = endpoint
        self.token_env = token_env
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self.calls = 0

    def query(self, prompt, concept_a, concept_b, relation_type, vote_index):
        self.calls += 1
        return _http_json(self.endpoint,
                          {"prompt": prompt, "vote_index": vote_index},
                          self.token_env, self.timeout, self.retries,
                          self.backoff)


class VoteCache:
    """Replies under <dir>/votes/<prompt digest>.<vote index>.json, with
    the request body alongside the reply for auditability."""

    def __init__(self, cache_dir):
        self.dir = Path(cache_dir) / "votes"
        self.dir.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def get(self, digest: str, vote_index: int) -> str | None:
        path = self.dir / f"{digest}.{vote_index}.json"
        if not path.exists():
            return None
        return json.loads(path.read_text(encoding="utf-8"))["reply"]

    def put(self, digest: str, vote_index: int, prompt: str, reply: str) -> None:
        path = self.dir / f"{digest}.{vote_index}.json"
        payload = json.dumps({"prompt": prompt, "vote_index": vote_index,
                              "reply": reply}, ensure_ascii=False,
                             sort_keys=True)
        with self._lock:
            tmp = path.with_suffix(".tmp")
            tmp.write_text(payload, encoding="utf-8")
            tmp.replace(path)

    def digest_of_contents(self) -> str:
        h = hashlib.sha256()
        for path in sorted(self.dir.glob("*.json")):
            h.update(path.name.encode("utf-8"))
            h.update(path.read_bytes())
        return h.hexdigest()


def predict_relation(backend: RelationBackend, concept_a: str, concept_b: str,
                     relation_type: str, *, course_names: tuple[str, str],
                     votes_per_query: int = 5,
                     cache: VoteCache | None = None) -> bool:
    """Strict majority over votes_per_query independent queries.  The
    result depends only on the vote multiset, never on vote order."""
    if votes_per_query < 1 or votes_per_query % 2 == 0:
        raise ConfigError("votes_per_query must be odd and >= 1")
    prompt = render_relation_prompt(course_names, relation_type,
                                    concept_a, concept_b)
    digest = prompt_digest(prompt)
    affirmative = 0
    for i in range(votes_per_query):
        reply = cache.get(digest, i) if cache is not None else None
        if reply is None:
            reply = backend.query(prompt, concept_a, concept_b,
                                  relation_type, i)
            if cache is not None:
                cache.put(digest, i, prompt, reply)
        if parse_vote(reply):
            affirmative += 1
    return affirmative * 2 > votes_per_query


# ---------------------------------------------------------------------------
# graph type


@dataclass(frozen=True)
class ConceptGraph:
    questions: tuple[str, ...]
    concepts: tuple[str, ...]
    question_course: dict
    concept_course: dict
    qc_edges: frozenset  # of (question_id, concept_id)
    cc_edges: frozenset  # of (concept_a, concept_b, relation_type)

    def __post_init__(self):
        qset, cset = set(self.questions), set(self.concepts)
        linked = {q for q, _ in self.qc_edges}
        bare = qset - linked
        if bare:
            shown = ", ".join(sorted(bare)[:5])
            raise DataError(f"{len(bare)} question node(s) have no "
                            f"concept edge, e.g. {shown}")
        for q, c in self.qc_edges:
            if q not in qset or c not in cset:
                raise DataError(f"qc_edge ({q}, {c}) references an unknown node")
        for a, b, rel in self.cc_edges:
            if a == b:
                raise DataError(f"cc_edge self-loop on concept '{a}'")
            if rel not in RELATION_TYPES:
                raise DataError(f"cc_edge ({a}, {b}) has unknown relation "
                                f"'{rel}'")
            if a not in cset or b not in cset:
                raise DataError(f"cc_edge ({a}, {b}) references an unknown "
                                "concept")

    def undirected_concept_pairs(self) -> set[tuple[str, str]]:
        """Deduplicated over direction and relation label; what the
        propagation adjacency sees."""
        return {tuple(sorted((a, b))) for a, b, _ in self.cc_edges}


def build_explicit_links(dataset: Dataset) -> frozenset:
    """One (question, concept) edge per map association."""
    edges = set()
    for q in dataset.questions:
        concepts = dataset.concept_map.get(q)
        if not concepts:
            raise DataError(f"question '{q}' has zero concepts")
        for c in concepts:
            edges.add((q, c))
    return frozenset(edges)


def default_candidate_pairs(dataset: Dataset) -> list[tuple[str, str]]:
    """All inter-course ordered pairs, plus intra-course ordered pairs of
    concepts sharing at least one question."""
    pairs: set[tuple[str, str]] = set()
    course = dataset.concept_course
    for a in dataset.concepts:
        for b in dataset.concepts:
            if a != b and course[a] != course[b]:
                pairs.add((a, b))
    for q in dataset.questions:
        shared = sorted(dataset.concept_map[q])
        for a in shared:
            for b in shared:
                if a != b:
                    pairs.add((a, b))
    return sorted(pairs)


def quadratic_candidate_pairs(dataset: Dataset) -> list[tuple[str, str]]:
    return sorted((a, b) for a in dataset.concepts for b in dataset.concepts
                  if a != b)


def build_graph(dataset: Dataset, spec: RelationBackendSpec,
                candidate_pairs: Sequence[tuple[str, str]] | None = None,
                *, relations: Iterable[str] = RELATION_TYPES,
                parallelism: int = 4) -> tuple[ConceptGraph, dict]:
    """Predict cc_edges over the candidate pairs and assemble the graph.

    Returns (graph, provenance).  Backend failures abort the build but
    leave the partial cache on disk for the next attempt.
    """
    if candidate_pairs is None:
        candidate_pairs = default_candidate_pairs(dataset)
    known = set(dataset.concepts)
    for a, b in candidate_pairs:
        if a == b:
            raise ConfigError(f"candidate pair ({a}, {b}) is a self-pair")
        if a not in known or b not in known:
            raise DataError(f"candidate pair ({a}, {b}) references an "
                            "unknown concept")
    relations = tuple(relations)
    for rel in relations:
        if rel not in RELATION_TYPES:
            raise ConfigError(f"unknown relation type '{rel}'")

    backend = spec.build()
    cache = VoteCache(spec.cache_dir) if spec.cache_dir else None
    jobs = [(a, b, rel) for a, b in candidate_pairs for rel in relations]

    def run(job):
        a, b, rel = job
        present = predict_relation(backend, a, b, rel,
                                   course_names=dataset.courses,
                                   votes_per_query=spec.votes_per_query,
                                   cache=cache)
        return job, present

    edges = set()
    if parallelism > 1 and spec.kind == "llm_http":
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            for job, present in pool.map(run, jobs):
                if present:
                    edges.add(job)
    else:
        for job in jobs:
            _, present = run(job)
            if present:
                edges.add(job)

    graph = ConceptGraph(
        questions=dataset.questions,
        concepts=dataset.concepts,
        question_course=dict(dataset.question_course),
        concept_course=dict(dataset.concept_course),
        qc_edges=build_explicit_links(dataset),
        cc_edges=frozenset(edges),
    )
    provenance = {
        "backend": spec.kind,
        "votes_per_query": spec.votes_per_query,
        "candidate_pairs": len(candidate_pairs),
        "backend_calls": backend.calls,
        "cache_digest": cache.digest_of_contents() if cache else "none",
    }
    return graph, provenance


# ---------------------------------------------------------------------------
# graph file format

GRAPH_VERSION = "crosskt-graph v1"


def save_graph(path, graph: ConceptGraph, provenance: dict | None = None) -> None:
    lines = [GRAPH_VERSION, "[nodes]"]
    for q in graph.questions:
        lines.append(f"q:{q} question {graph.question_course[q]}")
    for c in graph.concepts:
        lines.append(f"c:{c} concept {graph.concept_course[c]}")
    lines.append("[qc_edges]")
    for q, c in sorted(graph.qc_edges):
        lines.append(f"{q} {c}")
    lines.append("[cc_edges]")
    for a, b, rel in sorted(graph.cc_edges):
        lines.append(f"{a} {b} {rel}")
    lines.append("[provenance]")
    for key in sorted(provenance or {}):
        lines.append(f"{key} = {provenance[key]}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_graph(path) -> tuple[ConceptGraph, dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"graph file not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != GRAPH_VERSION:
        raise DataError(f"{path}: unrecognized graph version line")
    section = None
    questions: list[str] = []
    concepts: list[str] = []
    q_course: dict = {}
    c_course: dict = {}
    qc: set = set()
    cc: set = set()
    provenance: dict = {}
    for lineno, line in enumerate(lines[1:], start=2):
        line = line.strip()
        if not line:
            continue
        if line.startswith("["):
            if line not in ("[nodes]", "[qc_edges]", "[cc_edges]",
                            "[provenance]"):
                raise DataError(f"{path}:{lineno}: unknown section {line}")
            section = line
            continue
        if section == "[nodes]":
            parts = line.split()
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: expected 'id kind course'")
            nid, kind, course = parts
            prefix, _, raw = nid.partition(":")
            if prefix == "q" and kind == "question":
                questions.append(raw)
                q_course[raw] = course
            elif prefix == "c" and kind == "concept":
                concepts.append(raw)
                c_course[raw] = course
            else:
                raise DataError(f"{path}:{lineno}: malformed node '{line}'")
        elif section == "[qc_edges]":
            parts = line.split()
            if len(parts) != 2:
                raise DataError(f"{path}:{lineno}: expected 'question concept'")
            qc.add((parts[0], parts[1]))
        elif section == "[cc_edges]":
            parts = line.split()
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: expected 'a b relation'")
            cc.add((parts[0], parts[1], parts[2]))
        elif section == "[provenance]":
            key, _, value = line.partition("=")
            provenance[key.strip()] = value.strip()
        else:
            raise DataError(f"{path}:{lineno}: content before any section")
    graph = ConceptGraph(tuple(questions), tuple(concepts), q_course,
                         c_course, frozenset(qc), frozenset(cc))
    return graph, provenance
