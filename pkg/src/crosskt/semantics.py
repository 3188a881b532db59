"""Semantic features for graph nodes: summarize, then encode.

Question and concept texts are first condensed by a text backend
(prompted with committed few-shot examples, replies cached by prompt
digest), then turned into D-dimensional vectors.  The encoder is a
pluggable boundary: a deterministic seeded-hash encoder keeps the whole
pipeline offline-testable, and a loader accepts embeddings produced by
any external model.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import BackendError, DataError
from .rng import stream

log = logging.getLogger(__name__)

DEFAULT_DIM = 256

_TOKEN_SPLIT = re.compile(r"[^0-9A-Za-z_]+")


@dataclass
class NodeText:
    node_id: str
    kind: str  # "question" or "concept"
    original_text: str
    summary_text: str | None = None

    def __post_init__(self):
        if self.kind not in ("question", "concept"):
            raise DataError(f"node kind must be question or concept, "
                            f"got {self.kind!r}")
        if not self.original_text:
            raise DataError(f"node '{self.node_id}' has empty original text")

    def text_for_encoding(self, use_summary: bool) -> str:
        if use_summary and self.summary_text:
            return self.summary_text
        return self.original_text


# ---------------------------------------------------------------------------
# prompt templates

QUESTION_PROMPT_HEADER = (
    "You organize study material. Summarize the exercise below in two or "
    "three plain sentences: name the concepts it practices, the skills a "
    "learner needs, and the kind of task it poses. Do not copy code, "
    "numbers, or identifiers verbatim.")

CONCEPT_PROMPT_HEADER = (
    "You organize study material. Describe the course concept below in two "
    "or three plain sentences: say what it covers, which skills it builds, "
    "and where it is typically applied. Do not copy identifiers verbatim.")

FEW_SHOT_QUESTIONS: tuple[tuple[str, str], ...] = (
    ("Write a function that reverses a singly linked list in place and "
     "returns the new head node.",
     "This exercise practices linked list manipulation and pointer "
     "rewiring. The learner needs to track node references carefully while "
     "iterating. It is a classic in-place data structure transformation "
     "task."),
    ("Given a 3x3 matrix of integers, compute its determinant using "
     "cofactor expansion along the first row.",
     "This exercise practices determinant computation and cofactor "
     "expansion. The learner needs comfort with signed minors and "
     "arithmetic bookkeeping. It is a direct numeric linear algebra "
     "calculation."),
)

FEW_SHOT_CONCEPTS: tuple[tuple[str, str], ...] = (
    ("Binary search trees",
     "This concept covers ordered binary trees that support logarithmic "
     "search, insertion, and deletion. It builds skills in recursive "
     "reasoning and invariant maintenance. It is applied wherever sorted "
     "dynamic collections are needed."),
    ("Limits of sequences",
     "This concept covers the formal definition of convergence for "
     "sequences of real numbers. It builds skills in epsilon reasoning and "
     "inequality manipulation. It is applied as the foundation for "
     "continuity and series."),
)


def render_summary_prompt(node_text: NodeText, node_kind: str) -> str:
    """Deterministic summary prompt: header, committed few-shot examples,
    then the node's text."""
    if node_kind == "question":
        header, shots, label = QUESTION_PROMPT_HEADER, FEW_SHOT_QUESTIONS, "Exercise"
    elif node_kind == "concept":
        header, shots, label = CONCEPT_PROMPT_HEADER, FEW_SHOT_CONCEPTS, "Concept"
    else:
        raise DataError(f"unknown node kind {node_kind!r}")
    parts = [header, ""]
    for shown, answer in shots:
        parts.append(f"{label}:\n{shown}\nSummary: {answer}\n")
    parts.append(f"{label}:\n{node_text.original_text}\nSummary:")
    return "\n".join(parts)


def prompt_digest(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# summary backends


class FixtureSummaryBackend:
    """Replies from a JSON file: {"replies": {<prompt digest>: str},
    "default": str | null}.  A missing key without a default is an error."""

    kind = "fixture"

    def __init__(self, path):
        self.path = Path(path)
        if not self.path.exists():
            raise BackendError(f"summary fixture not found: {self.path}")
        try:
            blob = json.loads(self.path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise BackendError(f"summary fixture {self.path}: {exc}") from None
        self.replies: dict[str, str] = dict(blob.get("replies", {}))
        self.default: str | None = blob.get("default")
        self.calls = 0

    def complete(self, prompt: str) -> str:
        self.calls += 1
        digest = prompt_digest(prompt)
        if digest in self.replies:
            return self.replies[digest]
        if self.default is not None:
            return self.default
        raise BackendError(f"summary fixture has no reply for digest "
                           f"{digest[:12]} and no default")


class HttpSummaryBackend:
    """POSTs {"prompt": ...} to an HTTP endpoint, expects {"reply": ...}.
    The auth token is read from the environment, never from config files."""

    kind = "llm_http"

    def __init__(self, endpoint: str, token_env: str = "CROSSKT_LLM_TOKEN",
                 timeout: float = 30.0, retries: int = 3,
                 backoff: float = 0.5):
        self.endpoint = endpoint
        self.token_env = token_env
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self.calls = 0

    def complete(self, prompt: str) -> str:
        self.calls += 1
        return _http_json(self.endpoint, {"prompt": prompt}, self.token_env,
                          self.timeout, self.retries, self.backoff)


def _http_json(endpoint: str, payload: dict, token_env: str, timeout: float,
               retries: int, backoff: float) -> str:
    import os
    import time
    import urllib.error
    import urllib.request

    body = json.dumps(payload).encode("utf-8")
    headers = {"Content-Type": "application/json"}
    token = os.environ.get(token_env)
    if token:
        headers["Authorization"] = f"Bearer {token}"
    last: Exception | None = None
    for attempt in range(retries):
        try:
            req = urllib.request.Request(endpoint, data=body, headers=headers)
            with urllib.request.urlopen(req, timeout=timeout) as resp:
                blob = json.loads(resp.read().decode("utf-8"))
            if "reply" not in blob or not isinstance(blob["reply"], str):
                raise BackendError(f"malformed backend response from "
                                   f"{endpoint}: missing 'reply'")
            return blob["reply"]
        except BackendError:
            raise
        except (urllib.error.URLError, OSError, json.JSONDecodeError,
                ValueError) as exc:
            last = exc
            if attempt + 1 < retries:
                time.sleep(backoff * (2 ** attempt))
    raise BackendError(f"backend at {endpoint} failed after {retries} "
                       f"attempts: {last}")


class SummaryCache:
    """Content-addressed replies under <dir>/summaries/<digest>.json."""

    def __init__(self, cache_dir):
        self.dir = Path(cache_dir) / "summaries"
        self.dir.mkdir(parents=True, exist_ok=True)

    def get(self, digest: str) -> str | None:
        path = self.dir / f"{digest}.json"
        if not path.exists():
            return None
        blob = json.loads(path.read_text(encoding="utf-8"))
        return blob["reply"]

    def put(self, digest: str, prompt: str, reply: str) -> None:
        path = self.dir / f"{digest}.json"
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps({"prompt": prompt, "reply": reply},
                                  ensure_ascii=False, sort_keys=True),
                       encoding="utf-8")
        tmp.replace(path)


def summarize(backend, node_text: NodeText, node_kind: str,
              cache: SummaryCache | None = None) -> str:
    """Summarize one node; replies are cached by prompt digest, and an
    empty backend reply falls back to the original text with a warning."""
    prompt = render_summary_prompt(node_text, node_kind)
    digest = prompt_digest(prompt)
    if cache is not None:
        hit = cache.get(digest)
        if hit is not None:
            return hit
    reply = backend.complete(prompt)
    if not reply.strip():
        log.warning("empty summary reply for node %s; falling back to "
                    "original text", node_text.node_id)
        reply = node_text.original_text
    if cache is not None:
        cache.put(digest, prompt, reply)
    return reply


# ---------------------------------------------------------------------------
# encoders


class HashEncoder:
    """Seeded feature hashing: split text on whitespace/punctuation, hash
    each token into one of D buckets with a ±1 sign, sum, and normalize
    to unit length.  Depends only on the token multiset and the seed."""

    kind = "hash"

    def __init__(self, dim: int = DEFAULT_DIM, seed: int = 0):
        if dim < 1:
            raise DataError(f"encoder dimension must be >= 1, got {dim}")
        self.dim = int(dim)
        self.seed = int(seed)

    def encode(self, text: str) -> np.ndarray:
        if not text:
            raise DataError("cannot encode empty text")
        vec = np.zeros(self.dim, dtype=np.float64)
        for token in _TOKEN_SPLIT.split(text):
            if not token:
                continue
            h = hashlib.blake2b(f"{self.seed}:{token}".encode("utf-8"),
                                digest_size=8).digest()
            value = int.from_bytes(h, "little")
            bucket = value % self.dim
            sign = 1.0 if (value >> 63) & 1 else -1.0
            vec[bucket] += sign
        norm = float(np.linalg.norm(vec))
        if norm < 1e-12:
            # all tokens cancelled; fall back to a single whole-text bucket
            h = hashlib.blake2b(f"{self.seed}::{text}".encode("utf-8"),
                                digest_size=8).digest()
            vec[:] = 0.0
            vec[int.from_bytes(h, "little") % self.dim] = 1.0
            return vec
        return vec / norm


def encode(encoder, text: str) -> np.ndarray:
    """Encode one text into a finite D-vector."""
    vec = np.asarray(encoder.encode(text), dtype=np.float64)
    if not np.all(np.isfinite(vec)):
        raise DataError("encoder produced non-finite values")
    return vec


# ---------------------------------------------------------------------------
# feature matrices


@dataclass
class FeatureMatrix:
    node_ids: tuple[str, ...]
    matrix: np.ndarray

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2:
            raise DataError("feature matrix must be 2-dimensional")
        if self.matrix.shape[0] != len(self.node_ids):
            raise DataError(f"feature matrix has {self.matrix.shape[0]} rows "
                            f"for {len(self.node_ids)} nodes")
        if not np.all(np.isfinite(self.matrix)):
            raise DataError("feature matrix contains non-finite entries")
        self._row_of = {nid: i for i, nid in enumerate(self.node_ids)}

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def row(self, node_id: str) -> np.ndarray:
        if node_id not in self._row_of:
            raise DataError(f"no feature row for node '{node_id}'")
        return self.matrix[self._row_of[node_id]]


def build_feature_matrix(node_texts: Mapping[str, NodeText],
                         node_ids: Sequence[str], encoder,
                         use_summary: bool = True) -> FeatureMatrix:
    """Encode nodes in the given order."""
    missing = [nid for nid in node_ids if nid not in node_texts]
    if missing:
        shown = ", ".join(missing[:5])
        raise DataError(f"{len(missing)} node(s) have no text, e.g. {shown}")
    rows = [encode(encoder,
                   node_texts[nid].text_for_encoding(use_summary))
            for nid in node_ids]
    return FeatureMatrix(tuple(node_ids), np.stack(rows, axis=0))


def random_feature_matrix(node_ids: Sequence[str], dim: int, seed: int
                          ) -> FeatureMatrix:
    """Seeded random features: the ID-based stand-in used when semantic
    encoding is ablated."""
    rng = stream(seed, "features.random")
    mat = rng.normal(size=(len(node_ids), dim))
    norms = np.linalg.norm(mat, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    return FeatureMatrix(tuple(node_ids), mat / norms)


# ---------------------------------------------------------------------------
# file formats


def load_node_texts(path) -> dict[str, NodeText]:
    """Parse `node_id<TAB>kind<TAB>text` lines."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"node-text file not found: {path}")
    out: dict[str, NodeText] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(),
                                  start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DataError(f"{path}:{lineno}: expected 3 tab-separated "
                            f"fields, got {len(parts)}")
        node_id, kind, text = parts
        if node_id in out:
            raise DataError(f"{path}:{lineno}: duplicate node id '{node_id}'")
        try:
            out[node_id] = NodeText(node_id, kind, text)
        except DataError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from None
    return out


def write_node_texts(path, texts: Iterable[NodeText],
                     use_summary: bool = False) -> None:
    lines = []
    for t in texts:
        body = t.text_for_encoding(use_summary)
        if "\t" in body or "\n" in body:
            body = body.replace("\t", " ").replace("\n", " ")
        lines.append(f"{t.node_id}\t{t.kind}\t{body}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def save_embeddings(path, features: FeatureMatrix) -> None:
    """Write `D=<int>` then one `node_id v1 ... vD` row per node, with
    full-precision floats so a round trip is bitwise exact."""
    lines = [f"D={features.dim}"]
    for nid, row in zip(features.node_ids, features.matrix):
        lines.append(nid + " " + " ".join(repr(float(v)) for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_precomputed_embeddings(path, node_ids: Sequence[str] | None = None
                                ) -> FeatureMatrix:
    """Load an embedding file; with `node_ids`, reorder rows to that order
    and require full coverage."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"embedding file not found: {path}")
    lines = [l for l in path.read_text(encoding="utf-8").splitlines()
             if l.strip()]
    if not lines or not lines[0].startswith("D="):
        raise DataError(f"{path}: first line must be 'D=<int>'")
    try:
        dim = int(lines[0][2:])
    except ValueError:
        raise DataError(f"{path}: malformed dimension header "
                        f"'{lines[0]}'") from None
    rows: dict[str, np.ndarray] = {}
    order: list[str] = []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if len(parts) != dim + 1:
            raise DataError(f"{path}:{lineno}: expected node id plus {dim} "
                            f"values, got {len(parts) - 1}")
        nid = parts[0]
        if nid in rows:
            raise DataError(f"{path}:{lineno}: duplicate node id '{nid}'")
        try:
            vec = np.array([float(v) for v in parts[1:]], dtype=np.float64)
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from None
        if not np.all(np.isfinite(vec)):
            raise DataError(f"{path}:{lineno}: non-finite value for "
                            f"node '{nid}'")
        rows[nid] = vec
        order.append(nid)
    if node_ids is not None:
        missing = [nid for nid in node_ids if nid not in rows]
        if missing:
            shown = ", ".join(missing[:5])
            raise DataError(f"{path}: missing embeddings for "
                            f"{len(missing)} node(s), e.g. {shown}")
        order = list(node_ids)
    return FeatureMatrix(tuple(order), np.stack([rows[n] for n in order]))
