"""Interaction logs, preprocessing filters, and aligned sequence views.

A learner active in two courses has three views of one history: the
chronological per-course sequences and their timestamp-order merge.
The merged sequence drives cross-course modeling; the padded per-course
views keep positions aligned so the same index means the same moment
in all three.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import ConfigError, DataError, EmptyDatasetError
from .rng import stream

INTERACTION_HEADER = "learner_id,course_id,question_id,response,timestamp"
MANIFEST_VERSION = "crosskt-dataset-manifest v1"
SPLIT_MANIFEST_VERSION = "crosskt-split-manifest v1"


class _Pad:
    """Sentinel for positions belonging to the other course.

    A distinguished object rather than a fake question id: it can never
    collide with real data or leak into an embedding lookup.
    """

    __slots__ = ()

    def __repr__(self) -> str:
        return "PAD"

    def __deepcopy__(self, memo):
        return self

    def __copy__(self):
        return self


PAD = _Pad()


@dataclass(frozen=True)
class InteractionRecord:
    learner_id: str
    course_id: str
    question_id: str
    response: int
    timestamp: int

    def __post_init__(self):
        if self.response not in (0, 1):
            raise DataError(f"response must be 0 or 1, got {self.response!r}")
        for name in ("learner_id", "course_id", "question_id"):
            value = getattr(self, name)
            if not value or value != value.strip():
                raise DataError(f"{name} must be non-empty without surrounding "
                                f"whitespace, got {value!r}")

    def sort_key(self) -> tuple[int, str, str]:
        # timestamp ties break by (course, question) so merges are deterministic
        return (self.timestamp, self.course_id, self.question_id)


@dataclass(frozen=True)
class AlignedTriple:
    """Merged sequence plus per-course views padded to the same length."""

    merged: tuple
    view_x: tuple
    view_y: tuple

    def __post_init__(self):
        L = len(self.merged)
        if len(self.view_x) != L or len(self.view_y) != L:
            raise DataError("aligned views must share the merged length")
        for i in range(L):
            x, y = self.view_x[i], self.view_y[i]
            x_pad, y_pad = x is PAD, y is PAD
            if x_pad == y_pad:
                raise DataError(f"position {i}: exactly one view must be non-PAD")
            if (y if x_pad else x) != self.merged[i]:
                raise DataError(f"position {i}: non-PAD view entry must equal "
                                "the merged entry")

    def __len__(self) -> int:
        return len(self.merged)


def strip_pad(view: Sequence) -> list[InteractionRecord]:
    return [slot for slot in view if slot is not PAD]


def _check_sorted(records: Sequence[InteractionRecord], label: str) -> None:
    for a, b in zip(records, records[1:]):
        if a.sort_key() > b.sort_key():
            raise DataError(f"{label} is not in chronological order")


def merge_and_pad(seq_x: Sequence[InteractionRecord],
                  seq_y: Sequence[InteractionRecord]) -> AlignedTriple:
    """Interleave two chronological course sequences into an AlignedTriple."""
    _check_sorted(seq_x, "course-X sequence")
    _check_sorted(seq_y, "course-Y sequence")
    merged: list = []
    view_x: list = []
    view_y: list = []
    i = j = 0
    while i < len(seq_x) or j < len(seq_y):
        take_x = j >= len(seq_y) or (
            i < len(seq_x) and seq_x[i].sort_key() <= seq_y[j].sort_key())
        if take_x:
            merged.append(seq_x[i])
            view_x.append(seq_x[i])
            view_y.append(PAD)
            i += 1
        else:
            merged.append(seq_y[j])
            view_x.append(PAD)
            view_y.append(seq_y[j])
            j += 1
    return AlignedTriple(tuple(merged), tuple(view_x), tuple(view_y))


def truncate(triple: AlignedTriple, max_len: int) -> AlignedTriple:
    """Keep the most recent max_len merged slots."""
    if max_len < 1:
        raise ConfigError(f"max_len must be >= 1, got {max_len}")
    if len(triple) <= max_len:
        return triple
    return AlignedTriple(triple.merged[-max_len:],
                         triple.view_x[-max_len:],
                         triple.view_y[-max_len:])


# ---------------------------------------------------------------------------
# file parsing


def load_interactions(path, courses: tuple[str, str] | None = None
                      ) -> list[InteractionRecord]:
    """Parse an interaction-log CSV into records grouped by learner and
    sorted chronologically within each learner."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"interaction log not found: {path}")
    text = path.read_text(encoding="utf-8")
    if not text.strip():
        return []
    lines = text.splitlines()
    if lines[0].strip() != INTERACTION_HEADER:
        raise DataError(f"{path}:1: expected header '{INTERACTION_HEADER}', "
                        f"got '{lines[0].strip()}'")
    records: list[InteractionRecord] = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 5:
            raise DataError(f"{path}:{lineno}: expected 5 comma-separated "
                            f"fields, got {len(parts)}")
        learner, course, question, response_s, ts_s = (p.strip() for p in parts)
        try:
            response = int(response_s)
            timestamp = int(ts_s)
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from None
        if courses is not None and course not in courses:
            raise DataError(f"{path}:{lineno}: unknown course id '{course}', "
                            f"expected one of {sorted(courses)}")
        try:
            records.append(InteractionRecord(learner, course, question,
                                             response, timestamp))
        except DataError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from None
    by_learner: dict[str, list[InteractionRecord]] = {}
    for rec in records:
        by_learner.setdefault(rec.learner_id, []).append(rec)
    out: list[InteractionRecord] = []
    for learner in sorted(by_learner):
        out.extend(sorted(by_learner[learner], key=InteractionRecord.sort_key))
    return out


def load_concept_map(path) -> dict[str, frozenset[str]]:
    """Parse `question_id,concept_id` pairs into a question -> concepts map."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"concept map not found: {path}")
    raw: dict[str, set[str]] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(),
                                  start=1):
        line = line.strip()
        if not line or line == "question_id,concept_id":
            continue
        parts = line.split(",")
        if len(parts) != 2 or not parts[0].strip() or not parts[1].strip():
            raise DataError(f"{path}:{lineno}: expected 'question_id,concept_id'")
        raw.setdefault(parts[0].strip(), set()).add(parts[1].strip())
    return {q: frozenset(cs) for q, cs in raw.items()}


# ---------------------------------------------------------------------------
# dataset


@dataclass(frozen=True)
class Dataset:
    """Preprocessed corpus: aligned learner histories plus dense indices
    over the questions and concepts that survived filtering."""

    learners: Mapping[str, AlignedTriple]
    courses: tuple[str, str]
    questions: tuple[str, ...]
    concepts: tuple[str, ...]
    question_index: Mapping[str, int]
    concept_index: Mapping[str, int]
    question_course: Mapping[str, str]
    concept_course: Mapping[str, str]
    concept_map: Mapping[str, frozenset[str]]
    filter_params: tuple[int, int, int] = (10, 3, 10)

    @property
    def num_questions(self) -> int:
        return len(self.questions)

    @property
    def num_concepts(self) -> int:
        return len(self.concepts)

    @property
    def node_count(self) -> int:
        return len(self.questions) + len(self.concepts)

    def node_ids(self) -> list[str]:
        """Canonical node order: questions first, then concepts."""
        return [f"q:{q}" for q in self.questions] + [f"c:{c}" for c in self.concepts]

    def node_index(self, node_id: str) -> int:
        kind, _, raw = node_id.partition(":")
        if kind == "q" and raw in self.question_index:
            return self.question_index[raw]
        if kind == "c" and raw in self.concept_index:
            return self.num_questions + self.concept_index[raw]
        raise DataError(f"unknown node id '{node_id}'")

    def interaction_count(self) -> int:
        return sum(len(t) for t in self.learners.values())

    def all_records(self) -> list[InteractionRecord]:
        out: list[InteractionRecord] = []
        for learner in sorted(self.learners):
            out.extend(self.learners[learner].merged)
        return out


def _index(ids: Iterable[str]) -> tuple[tuple[str, ...], dict[str, int]]:
    ordered = tuple(sorted(set(ids)))
    return ordered, {v: i for i, v in enumerate(ordered)}


def preprocess(records: Sequence[InteractionRecord],
               min_answers_per_question: int = 10,
               min_per_course: int = 3,
               min_cross_course: int = 10,
               *,
               concept_map: Mapping[str, Iterable[str]]) -> Dataset:
    """Apply the three preprocessing filters, in order, each one pass:

    (1) drop learners without logs in both courses;
    (2) drop questions answered fewer than min_answers_per_question times;
    (3) drop learners with fewer than min_per_course records in either
        course or fewer than min_cross_course records in total.

    `concept_map` must cover every surviving question; the concept
    vocabulary is derived from it.
    """
    if not records:
        raise DataError("preprocess requires a nonempty record collection")

    courses = sorted({r.course_id for r in records})
    if len(courses) > 2:
        raise DataError(f"expected at most 2 courses, found {courses}")

    q_course: dict[str, str] = {}
    for r in records:
        prev = q_course.setdefault(r.question_id, r.course_id)
        if prev != r.course_id:
            raise DataError(f"question '{r.question_id}' appears in more than "
                            "one course")

    by_learner: dict[str, list[InteractionRecord]] = {}
    for r in records:
        by_learner.setdefault(r.learner_id, []).append(r)

    # (1) must have logs in both courses
    kept = {learner: recs for learner, recs in by_learner.items()
            if len({r.course_id for r in recs}) == 2}

    # (2) question answer counts over the remaining records, one pass
    counts: dict[str, int] = {}
    for recs in kept.values():
        for r in recs:
            counts[r.question_id] = counts.get(r.question_id, 0) + 1
    kept = {learner: [r for r in recs
                      if counts[r.question_id] >= min_answers_per_question]
            for learner, recs in kept.items()}

    # (3) per-course and total minimums
    survivors: dict[str, list[InteractionRecord]] = {}
    for learner, recs in kept.items():
        per_course = {c: 0 for c in courses}
        for r in recs:
            per_course[r.course_id] += 1
        if len(recs) >= min_cross_course and \
                all(n >= min_per_course for n in per_course.values()):
            survivors[learner] = recs

    if not survivors:
        raise EmptyDatasetError("preprocessing filtered out every learner")

    course_x, course_y = courses[0], courses[-1]
    triples: dict[str, AlignedTriple] = {}
    for learner in sorted(survivors):
        recs = sorted(survivors[learner], key=InteractionRecord.sort_key)
        seq_x = [r for r in recs if r.course_id == course_x]
        seq_y = [r for r in recs if r.course_id == course_y]
        triples[learner] = merge_and_pad(seq_x, seq_y)

    question_ids = {r.question_id for recs in survivors.values() for r in recs}
    questions, question_index = _index(question_ids)

    missing = sorted(q for q in question_ids if q not in concept_map
                     or not concept_map[q])
    if missing:
        shown = ", ".join(missing[:5])
        raise DataError(f"{len(missing)} question(s) missing from the concept "
                        f"map, e.g. {shown}")
    kept_map = {q: frozenset(concept_map[q]) for q in questions}
    concept_course: dict[str, str] = {}
    for q, cs in kept_map.items():
        for c in cs:
            prev = concept_course.setdefault(c, q_course[q])
            if prev != q_course[q]:
                raise DataError(f"concept '{c}' is claimed by questions from "
                                "both courses")
    concepts, concept_index = _index(concept_course)

    return Dataset(
        learners=triples,
        courses=(course_x, course_y),
        questions=questions,
        concepts=concepts,
        question_index=question_index,
        concept_index=concept_index,
        question_course={q: q_course[q] for q in questions},
        concept_course=concept_course,
        concept_map=kept_map,
        filter_params=(min_answers_per_question, min_per_course,
                       min_cross_course),
    )


def split(dataset: Dataset, train_frac: float, val_frac: float, seed: int
          ) -> tuple[Dataset, Dataset, Dataset]:
    """Learner-level split into train/validation/test Datasets that share
    the parent's index maps."""
    if train_frac <= 0 or val_frac <= 0:
        raise ConfigError("split fractions must be positive")
    if train_frac + val_frac > 1.0 + 1e-12:
        raise ConfigError("train_frac + val_frac must not exceed 1")
    learners = sorted(dataset.learners)
    order = stream(seed, "split").permutation(len(learners))
    shuffled = [learners[i] for i in order]
    n = len(learners)
    n_train = int(round(train_frac * n))
    n_val = int(round(val_frac * n))
    n_test = n - n_train - n_val
    if min(n_train, n_val, n_test) <= 0:
        raise ConfigError(f"split of {n} learners into "
                          f"{train_frac}/{val_frac} leaves an empty part")
    parts = (shuffled[:n_train],
             shuffled[n_train:n_train + n_val],
             shuffled[n_train + n_val:])
    return tuple(
        replace(dataset,
                learners={lid: dataset.learners[lid] for lid in sorted(part)})
        for part in parts
    )


# ---------------------------------------------------------------------------
# manifests


def dataset_manifest(dataset: Dataset) -> str:
    ma, mp, mc = dataset.filter_params
    lines = [
        MANIFEST_VERSION,
        f"courses = {dataset.courses[0]},{dataset.courses[1]}",
        f"learners = {len(dataset.learners)}",
        f"questions = {dataset.num_questions}",
        f"concepts = {dataset.num_concepts}",
        f"interactions = {dataset.interaction_count()}",
        f"min_answers_per_question = {ma}",
        f"min_per_course = {mp}",
        f"min_cross_course = {mc}",
    ]
    return "\n".join(lines) + "\n"


def split_manifest(seed: int, train_frac: float, val_frac: float,
                   parts: tuple[Dataset, Dataset, Dataset]) -> str:
    train, val, test = parts
    lines = [
        SPLIT_MANIFEST_VERSION,
        f"seed = {seed}",
        f"train_frac = {train_frac}",
        f"val_frac = {val_frac}",
        "train = " + ",".join(sorted(train.learners)),
        "val = " + ",".join(sorted(val.learners)),
        "test = " + ",".join(sorted(test.learners)),
    ]
    return "\n".join(lines) + "\n"


def parse_split_manifest(text: str) -> dict[str, list[str]]:
    lines = text.splitlines()
    if not lines or lines[0].strip() != SPLIT_MANIFEST_VERSION:
        raise DataError("unrecognized split manifest version line")
    out: dict[str, list[str]] = {}
    for line in lines[1:]:
        if "=" not in line:
            continue
        key, _, value = line.partition("=")
        key = key.strip()
        if key in ("train", "val", "test"):
            out[key] = [v for v in value.strip().split(",") if v]
    return out


def write_interactions(path, records: Sequence[InteractionRecord]) -> None:
    lines = [INTERACTION_HEADER]
    lines.extend(f"{r.learner_id},{r.course_id},{r.question_id},"
                 f"{r.response},{r.timestamp}" for r in records)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_concept_map(path, concept_map: Mapping[str, Iterable[str]]) -> None:
    lines = ["question_id,concept_id"]
    for q in sorted(concept_map):
        for c in sorted(concept_map[q]):
            lines.append(f"{q},{c}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
