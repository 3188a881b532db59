"""Hard negative sequences for the contrastive objective.

Each interaction in a merged sequence is independently flipped,
replaced, or kept.  Replacement swaps the question for one the learner
would plausibly have answered differently: a correct answer is replaced
by an easier question answered wrong, a wrong answer by a harder
question answered right.  Difficulty comes from training-split correct
rates only.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import PAD, Dataset, InteractionRecord
from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

DEFAULT_RATE = 0.5  # questions never seen in training


@dataclass(frozen=True)
class DifficultyTable:
    """Correct rates per question plus per-course candidate lists sorted
    by (rate, question_id) so pool draws are deterministic."""

    rates: dict
    course_questions: dict  # course -> tuple of question ids, sorted by rate

    def rate(self, question_id: str) -> float:
        return self.rates.get(question_id, DEFAULT_RATE)


def build_difficulty_table(dataset: Dataset) -> DifficultyTable:
    """Correct rate = #correct / #answered over the given records.
    Pass the training split here; held-out responses must not leak into
    the difficulty estimates."""
    correct: dict[str, int] = {}
    total: dict[str, int] = {}
    for rec in dataset.all_records():
        total[rec.question_id] = total.get(rec.question_id, 0) + 1
        correct[rec.question_id] = correct.get(rec.question_id, 0) + rec.response
    rates = {q: correct[q] / total[q] for q in total}
    by_course: dict[str, list[str]] = {c: [] for c in dataset.courses}
    for q in dataset.questions:
        by_course[dataset.question_course[q]].append(q)
    course_questions = {
        c: tuple(sorted(qs, key=lambda q: (rates.get(q, DEFAULT_RATE), q)))
        for c, qs in by_course.items()
    }
    return DifficultyTable(rates=rates, course_questions=course_questions)


@dataclass(frozen=True)
class NegativeSampleConfig:
    flip_threshold: float = 0.3  # u below this flips the response
    replace_threshold: float = 0.6  # u below this (and above flip) replaces

    def __post_init__(self):
        if not 0.0 < self.flip_threshold < self.replace_threshold < 1.0:
            raise ConfigError(
                f"thresholds must satisfy 0 < flip < replace < 1, got "
                f"flip={self.flip_threshold} replace={self.replace_threshold}")


@dataclass
class SampleStats:
    flips: int = 0
    replaced_shared_concept: int = 0  # drawn from the shared-concept pool
    replaced_same_course: int = 0  # fell through to the whole-course pool
    fallback_flips: int = 0  # no strictly easier/harder candidate existed
    unchanged: int = 0

    @property
    def replacements(self) -> int:
        return self.replaced_shared_concept + self.replaced_same_course

    @property
    def replacement_attempts(self) -> int:
        return self.replacements + self.fallback_flips


def _strict_pool(candidates: Sequence[str], table: DifficultyTable,
                 current: str, want_easier: bool) -> list[str]:
    ref = table.rate(current)
    if want_easier:
        return [q for q in candidates if q != current and table.rate(q) > ref]
    return [q for q in candidates if q != current and table.rate(q) < ref]


def hybrid_sample(slots: Sequence, dataset: Dataset, table: DifficultyTable,
                  config: NegativeSampleConfig, rng: np.random.Generator,
                  stats: SampleStats | None = None) -> tuple:
    """Resample one sequence.  Draws one uniform per non-padding slot;
    replacement draws one extra integer to pick from the candidate pool.
    Padding slots pass through untouched.
    """
    out = []
    for slot in slots:
        if slot is PAD:
            out.append(PAD)
            continue
        if not isinstance(slot, InteractionRecord):
            raise DataError(f"expected interaction or padding, got "
                            f"{type(slot).__name__}")
        u = rng.uniform()
        if u < config.flip_threshold:
            out.append(dataclasses.replace(slot, response=1 - slot.response))
            if stats:
                stats.flips += 1
            continue
        if u >= config.replace_threshold:
            out.append(slot)
            if stats:
                stats.unchanged += 1
            continue

        # replacement: correct -> easier question answered wrong,
        # wrong -> harder question answered right
        want_easier = slot.response == 1
        course_pool = table.course_questions.get(slot.course_id)
        if course_pool is None:
            raise DataError(f"course '{slot.course_id}' is not in the "
                            f"difficulty table")
        concepts = dataset.concept_map.get(slot.question_id, frozenset())
        shared = [q for q in course_pool
                  if q != slot.question_id
                  and not concepts.isdisjoint(
                      dataset.concept_map.get(q, frozenset()))]
        pool = _strict_pool(shared, table, slot.question_id, want_easier)
        pool_name = "shared_concept"
        if not pool:
            pool = _strict_pool(course_pool, table, slot.question_id,
                                want_easier)
            pool_name = "same_course"
        if not pool:
            log.debug("no strictly %s question than %r in course %r; "
                      "falling back to a response flip",
                      "easier" if want_easier else "harder",
                      slot.question_id, slot.course_id)
            out.append(dataclasses.replace(slot, response=1 - slot.response))
            if stats:
                stats.fallback_flips += 1
            continue
        choice = pool[int(rng.integers(len(pool)))]
        out.append(dataclasses.replace(slot, question_id=choice,
                                       response=1 - slot.response))
        if stats:
            if pool_name == "shared_concept":
                stats.replaced_shared_concept += 1
            else:
                stats.replaced_same_course += 1
    return tuple(out)
