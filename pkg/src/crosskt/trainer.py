"""Training loop, evaluation metrics, checkpointing, and the ablation
suite.

Determinism contract: every random draw comes from a named stream keyed
by (seed, site, coordinates), so two runs with the same inputs produce
bitwise-identical checkpoints and evaluation reports, and turning one
consumer off (for example the contrastive path) never shifts the draws
seen by the others.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence, get_type_hints

import numpy as np

from . import numcore as nc
from .data import Dataset, truncate
from .errors import (ConfigError, DataError, NumericalError,
                     UndefinedAUCError)
from .graph import ConceptGraph
from .model import (ModelParams, forward_batch, init_model_params,
                    make_batch, propagate, total_loss)
from .negatives import (NegativeSampleConfig, SampleStats,
                        build_difficulty_table, hybrid_sample)
from .numcore.optim import AdamW
from .rng import stream
from .semantics import (FeatureMatrix, HashEncoder, build_feature_matrix,
                        random_feature_matrix)

log = logging.getLogger(__name__)

ABLATION_FLAGS = ("no_kp", "no_se", "no_llm", "no_cl")


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class TrainConfig:
    dim: int = 256
    gcn_layers: int = 2
    num_heads: int = 1
    eta: float = 0.5  # weight of the cross-course state in fusion
    lam: float = 0.7  # weight of the prediction losses in the total
    lr: float = 0.001
    weight_decay: float = 1e-5
    dropout: float = 0.3
    max_epochs: int = 200
    patience: int = 10
    batch_size: int = 64
    max_seq_len: int = 128
    seed: int = 0
    flip_threshold: float = 0.3
    replace_threshold: float = 0.6
    positional: bool = False  # add the sinusoidal table to attention inputs
    no_kp: bool = False  # skip graph propagation (zero layers)
    no_se: bool = False  # replace text features with seeded noise
    no_llm: bool = False  # encode raw text instead of summaries
    no_cl: bool = False  # drop the contrastive objective

    def __post_init__(self):
        checks = [
            (self.dim >= 1, "dim must be >= 1"),
            (self.gcn_layers >= 0, "gcn_layers must be >= 0"),
            (self.num_heads >= 1 and self.dim % self.num_heads == 0,
             "num_heads must divide dim"),
            (0.0 <= self.eta <= 1.0, "eta must lie in [0, 1]"),
            (0.0 <= self.lam <= 1.0, "lam must lie in [0, 1]"),
            (self.lr > 0.0, "lr must be positive"),
            (self.weight_decay >= 0.0, "weight_decay must be >= 0"),
            (0.0 <= self.dropout < 1.0, "dropout must lie in [0, 1)"),
            (self.max_epochs >= 1, "max_epochs must be >= 1"),
            (self.patience >= 0, "patience must be >= 0"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.max_seq_len >= 1, "max_seq_len must be >= 1"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)
        # threshold ordering is validated by the sampler config
        NegativeSampleConfig(self.flip_threshold, self.replace_threshold)

    @property
    def effective_layers(self) -> int:
        return 0 if self.no_kp else self.gcn_layers

    @property
    def effective_lam(self) -> float:
        # without the contrastive terms the total reduces to the
        # prediction losses at full weight
        return 1.0 if self.no_cl else self.lam


def _field_types() -> dict:
    return get_type_hints(TrainConfig)


def parse_train_config(text: str) -> TrainConfig:
    """key = value lines; # starts a comment; unknown keys are errors."""
    types = _field_types()
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key = value, "
                              f"got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in types:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"config line {lineno}: duplicate key {key!r}")
        t = types[key]
        try:
            if t is bool:
                if val not in ("true", "false"):
                    raise ValueError("expected true or false")
                values[key] = val == "true"
            elif t is int:
                values[key] = int(val)
            elif t is float:
                values[key] = float(val)
            else:
                values[key] = val
        except ValueError as exc:
            raise ConfigError(f"config line {lineno}: bad value for "
                              f"{key!r}: {exc}") from exc
    return TrainConfig(**values)


def load_train_config(path) -> TrainConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    return parse_train_config(p.read_text(encoding="utf-8"))


def format_train_config(config: TrainConfig) -> str:
    lines = []
    for f in dataclasses.fields(TrainConfig):
        v = getattr(config, f.name)
        if isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def save_train_config(path, config: TrainConfig) -> None:
    Path(path).write_text(format_train_config(config), encoding="utf-8")


# ---------------------------------------------------------------------------
# metrics


def auc(scores, labels) -> float:
    """Rank-based AUC with average ranks on ties (each tied pair counts
    one half).  Raises when only one class is present."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if scores.ndim != 1 or scores.shape != labels.shape:
        raise DataError(f"scores and labels must be equal-length vectors, "
                        f"got {scores.shape} and {labels.shape}")
    if scores.size == 0:
        raise UndefinedAUCError("no scored positions")
    if not np.all(np.isin(labels, (0.0, 1.0))):
        raise DataError("labels must be 0 or 1")
    if not np.all(np.isfinite(scores)):
        raise NumericalError("scores must be finite")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUCError(
            f"need both classes to rank, got {n_pos} positives and "
            f"{n_neg} negatives")
    order = np.argsort(scores, kind="mergesort")
    s = scores[order]
    ranks = np.empty(scores.size, dtype=np.float64)
    i = 0
    while i < scores.size:
        j = i
        while j < scores.size and s[j] == s[i]:
            j += 1
        ranks[order[i:j]] = 0.5 * ((i + 1) + j)  # average of 1-based ranks
        i = j
    rank_sum = ranks[labels == 1.0].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def acc(scores, labels) -> float:
    """Fraction of positions where (score >= 0.5) matches the label."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if scores.size == 0:
        raise DataError("no scored positions")
    return float(np.mean((scores >= 0.5).astype(np.float64) == labels))


# ---------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class CourseMetrics:
    course: str
    auc: float | None  # None when only one label class was observed
    acc: float
    positions: int
    learners: int


@dataclass(frozen=True)
class EvalReport:
    courses: tuple
    mean_auc: float | None

    def canonical_text(self) -> str:
        lines = ["crosskt-eval v1"]
        for m in self.courses:
            a = "undefined" if m.auc is None else repr(m.auc)
            lines.append(f"course={m.course} auc={a} acc={repr(m.acc)} "
                         f"positions={m.positions} learners={m.learners}")
        overall = "undefined" if self.mean_auc is None else repr(self.mean_auc)
        lines.append(f"mean_auc={overall}")
        return "\n".join(lines) + "\n"


def write_eval_report(path, report: EvalReport) -> None:
    Path(path).write_text(report.canonical_text(), encoding="utf-8")


def parse_eval_report(text: str) -> EvalReport:
    lines = [l for l in text.splitlines() if l.strip()]
    if not lines or lines[0] != "crosskt-eval v1":
        raise DataError("not an evaluation report")
    courses = []
    mean_auc: float | None = None
    for line in lines[1:]:
        fields = dict(part.split("=", 1) for part in line.split())
        if "mean_auc" in fields:
            v = fields["mean_auc"]
            mean_auc = None if v == "undefined" else float(v)
        else:
            a = fields["auc"]
            courses.append(CourseMetrics(
                course=fields["course"],
                auc=None if a == "undefined" else float(a),
                acc=float(fields["acc"]),
                positions=int(fields["positions"]),
                learners=int(fields["learners"])))
    return EvalReport(courses=tuple(courses), mean_auc=mean_auc)


def truncated_triples(dataset: Dataset, max_seq_len: int) -> dict:
    return {lid: truncate(dataset.learners[lid], max_seq_len)
            for lid in dataset.learners}


def _feature_tensor(features: FeatureMatrix, graph: ConceptGraph):
    expected = [f"q:{q}" for q in graph.questions] + \
               [f"c:{c}" for c in graph.concepts]
    if list(features.node_ids) != expected:
        raise DataError("feature matrix rows do not line up with the graph "
                        "node order; rebuild them from the same dataset")
    return nc.constant(features.matrix)


def _check_alignment(dataset: Dataset, graph: ConceptGraph) -> None:
    """Sequence batches index into feature rows by dataset order, so the
    graph must enumerate exactly the same nodes in the same order."""
    if tuple(graph.questions) != tuple(dataset.questions) or \
            tuple(graph.concepts) != tuple(dataset.concepts):
        raise DataError("graph nodes do not match the dataset; build the "
                        "graph from the same preprocessed data")


def collect_scores(params: ModelParams, dataset: Dataset,
                   node_feats: nc.Tensor, config: TrainConfig) -> dict:
    """Probabilities and labels at every non-padding position of each
    course view, in (sorted learner, position) order.  Results do not
    depend on how learners are grouped into batches."""
    triples = truncated_triples(dataset, config.max_seq_len)
    order = sorted(dataset.learners)
    out = {c: {"scores": [], "labels": [], "learners": 0}
           for c in dataset.courses}
    for start in range(0, len(order), config.batch_size):
        ids = order[start:start + config.batch_size]
        batch = make_batch(triples, dataset, ids)
        result = forward_batch(params, batch, node_feats, eta=config.eta,
                               training=False, with_cl=False,
                               positional=config.positional)
        for course in dataset.courses:
            probs = result.probs[course].values
            mask = result.masks[course]
            for b in range(batch.size):
                on = mask[b] > 0
                if not on.any():
                    continue
                out[course]["scores"].extend(probs[b][on].tolist())
                out[course]["labels"].extend(
                    batch.responses[b][on].tolist())
                out[course]["learners"] += 1
    return out


def evaluate(params: ModelParams, dataset: Dataset, graph: ConceptGraph,
             features: FeatureMatrix, config: TrainConfig) -> EvalReport:
    """Score every interaction of every learner and summarize per-course
    accuracy and AUC.  Deterministic; no dropout, no contrastive terms."""
    _check_alignment(dataset, graph)
    node_feats = nc.constant(
        propagate(graph, _feature_tensor(features, graph), params,
                  len(params.gcn_layers)).values)
    collected = collect_scores(params, dataset, node_feats, config)
    metrics = []
    defined = []
    for course in dataset.courses:
        scores = np.asarray(collected[course]["scores"])
        labels = np.asarray(collected[course]["labels"])
        if scores.size == 0:
            raise DataError(f"no scorable positions for course "
                            f"'{course}'")
        try:
            course_auc: float | None = auc(scores, labels)
            defined.append(course_auc)
        except UndefinedAUCError:
            course_auc = None
            log.warning("course %r has single-class labels; AUC undefined",
                        course)
        metrics.append(CourseMetrics(
            course=course, auc=course_auc, acc=acc(scores, labels),
            positions=int(scores.size),
            learners=collected[course]["learners"]))
    mean_auc = float(np.mean(defined)) if defined else None
    return EvalReport(courses=tuple(metrics), mean_auc=mean_auc)


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = "crosskt-checkpoint v1"


def save_checkpoint(path, params: ModelParams, config: TrainConfig,
                    extra: Mapping | None = None) -> None:
    """Single-file format with a JSON header and raw float64 blobs.
    Identical runs write byte-identical files."""
    blocks = params.as_dict()
    meta = {
        "config": dataclasses.asdict(config),
        "courses": list(params.courses),
        "num_heads": params.num_heads,
        "dim": params.dim,
        "params": [{"name": name, "shape": list(t.values.shape)}
                   for name, t in blocks.items()],
        "extra": dict(extra or {}),
    }
    header = json.dumps(meta, sort_keys=True, separators=(",", ":"))
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC.encode("ascii") + b"\n")
        fh.write(header.encode("utf-8") + b"\n")
        for name, t in blocks.items():
            fh.write(np.ascontiguousarray(t.values,
                                          dtype="<f8").tobytes())


def load_checkpoint(path):
    """-> (ModelParams, TrainConfig, extra dict)."""
    p = Path(path)
    if not p.exists():
        raise DataError(f"checkpoint not found: {p}")
    raw = p.read_bytes()
    first = raw.find(b"\n")
    if first < 0 or raw[:first].decode("ascii", "replace") != CHECKPOINT_MAGIC:
        raise DataError(f"{p} is not a recognized checkpoint")
    second = raw.find(b"\n", first + 1)
    if second < 0:
        raise DataError(f"{p}: truncated checkpoint header")
    try:
        meta = json.loads(raw[first + 1:second].decode("utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{p}: corrupt checkpoint header: {exc}") from exc
    config = TrainConfig(**meta["config"])
    layer_count = sum(1 for b in meta["params"]
                      if b["name"].endswith(".w") and
                      b["name"].startswith("gcn."))
    params = init_model_params(meta["dim"], layer_count,
                               tuple(meta["courses"]), seed=0,
                               num_heads=meta["num_heads"])
    offset = second + 1
    values = {}
    for block in meta["params"]:
        shape = tuple(block["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        chunk = raw[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise DataError(f"{p}: truncated parameter block "
                            f"{block['name']!r}")
        values[block["name"]] = np.frombuffer(
            chunk, dtype="<f8").reshape(shape).astype(np.float64)
        offset += nbytes
    if offset != len(raw):
        raise DataError(f"{p}: {len(raw) - offset} trailing bytes")
    params.load_values(values)
    return params, config, meta["extra"]


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float  # mean of step_losses
    val_metric: float | None
    val_auc: dict
    val_acc: dict
    improved: bool
    step_losses: tuple = ()


@dataclass
class TrainResult:
    params: ModelParams
    config: TrainConfig
    features: FeatureMatrix  # the matrix actually encoded against
    history: list
    best_epoch: int
    best_metric: float
    stopped: str  # "patience" or "max_epochs"


def _chunks(seq: Sequence, size: int):
    for start in range(0, len(seq), size):
        yield seq[start:start + size]


def train(config: TrainConfig, train_ds: Dataset, val_ds: Dataset,
          graph: ConceptGraph, features: FeatureMatrix | None, *,
          log_fn: Callable[[str], None] | None = None) -> TrainResult:
    """Fit the model, early-stopping on the mean of the per-course
    validation AUCs, and return the best parameters seen."""
    if train_ds.courses != val_ds.courses:
        raise DataError("train and validation splits disagree on courses")
    _check_alignment(train_ds, graph)
    emit = log_fn or (lambda msg: log.info("%s", msg))

    if config.no_se:
        node_ids = [f"q:{q}" for q in graph.questions] + \
                   [f"c:{c}" for c in graph.concepts]
        features = random_feature_matrix(node_ids, config.dim, config.seed)
    if features is None:
        raise ConfigError("features are required unless no_se is set")
    if features.dim != config.dim:
        raise ConfigError(f"feature dim {features.dim} does not match "
                          f"configured dim {config.dim}")
    feature_tensor = _feature_tensor(features, graph)

    layers = config.effective_layers
    params = init_model_params(config.dim, layers, train_ds.courses,
                               config.seed, config.num_heads)
    optimizer = AdamW(params.as_dict(), lr=config.lr,
                      weight_decay=config.weight_decay)

    triples = truncated_triples(train_ds, config.max_seq_len)
    learner_list = sorted(train_ds.learners)
    ordinal = {lid: i for i, lid in enumerate(learner_list)}
    use_cl = not config.no_cl
    if use_cl:
        table = build_difficulty_table(train_ds)
        neg_config = NegativeSampleConfig(config.flip_threshold,
                                          config.replace_threshold)

    best_metric = float("-inf")
    best_values = params.copy_values()
    best_epoch = 0
    since_improvement = 0
    history: list[EpochStats] = []
    stopped = "max_epochs"

    for epoch in range(1, config.max_epochs + 1):
        order = stream(config.seed, "batch.order", epoch).permutation(
            len(learner_list))
        neg_slots: dict = {}
        neg_stats = SampleStats()
        if use_cl:
            for lid in learner_list:
                neg_slots[lid] = hybrid_sample(
                    triples[lid].merged, train_ds, table, neg_config,
                    stream(config.seed, "negatives", epoch, ordinal[lid]),
                    neg_stats)

        batch_losses = []
        for batch_index, chunk in enumerate(_chunks(order,
                                                    config.batch_size)):
            ids = [learner_list[i] for i in chunk]
            batch = make_batch(triples, train_ds, ids)
            if use_cl:
                neg_q = np.zeros_like(batch.q_idx)
                neg_r = np.zeros_like(batch.responses)
                for b, lid in enumerate(ids):
                    for t, rec in enumerate(neg_slots[lid]):
                        neg_q[b, t] = train_ds.question_index[rec.question_id]
                        neg_r[b, t] = rec.response
                batch.neg_q_idx = neg_q
                batch.neg_responses = neg_r

            rngs = {}
            if config.dropout > 0.0:
                for site in ("att.x", "att.y", "att.merged", "att.neg"):
                    rngs[site] = stream(config.seed, f"dropout.{site}",
                                        epoch, batch_index)
                gcn_rng = stream(config.seed, "dropout.gcn", epoch,
                                 batch_index)
            else:
                gcn_rng = None

            try:
                node_feats = propagate(graph, feature_tensor, params, layers,
                                       dropout_p=config.dropout, rng=gcn_rng,
                                       training=True)
                out = forward_batch(params, batch, node_feats,
                                    eta=config.eta,
                                    dropout_p=config.dropout,
                                    dropout_rngs=rngs, training=True,
                                    with_cl=use_cl,
                                    positional=config.positional)
                cx, cy = train_ds.courses
                if use_cl:
                    loss = total_loss(out.pred_losses[cx],
                                      out.pred_losses[cy],
                                      out.cl_losses[cx], out.cl_losses[cy],
                                      config.lam)
                else:
                    loss = nc.scale(nc.add(out.pred_losses[cx],
                                           out.pred_losses[cy]),
                                    config.effective_lam)
                optimizer.zero_grad()
                nc.backward(loss)
                optimizer.fill_missing_grads()
                optimizer.step()
            except NumericalError as exc:
                raise NumericalError(
                    f"training diverged at epoch {epoch}, batch "
                    f"{batch_index} (learners {ids[0]}..{ids[-1]}): {exc}"
                ) from exc
            batch_losses.append(float(loss.values))

        val_report = evaluate(params, val_ds, graph, features, config)
        metric = val_report.mean_auc
        if metric is None:
            log.warning("validation AUC undefined for both courses at "
                        "epoch %d; treating as no improvement", epoch)
        improved = metric is not None and metric > best_metric
        if improved:
            best_metric = metric
            best_values = params.copy_values()
            best_epoch = epoch
            since_improvement = 0
        else:
            since_improvement += 1

        train_loss = float(np.mean(batch_losses))
        history.append(EpochStats(
            epoch=epoch, train_loss=train_loss, val_metric=metric,
            val_auc={m.course: m.auc for m in val_report.courses},
            val_acc={m.course: m.acc for m in val_report.courses},
            improved=improved, step_losses=tuple(batch_losses)))
        auc_text = " ".join(
            f"auc[{m.course}]="
            f"{'undefined' if m.auc is None else format(m.auc, '.4f')}"
            for m in val_report.courses)
        neg_text = ""
        if use_cl and neg_stats.replacement_attempts:
            neg_text = (f" neg_fallbacks={neg_stats.fallback_flips}/"
                        f"{neg_stats.replacement_attempts}")
        emit(f"epoch {epoch}: loss={train_loss:.5f} {auc_text}"
             f"{' *' if improved else ''}{neg_text}")

        if since_improvement >= config.patience:
            stopped = "patience"
            break

    params.load_values(best_values)
    return TrainResult(params=params, config=config, features=features,
                       history=history, best_epoch=best_epoch,
                       best_metric=best_metric, stopped=stopped)


# ---------------------------------------------------------------------------
# ablations


DEFAULT_VARIANTS = ("full", "no_kp", "no_se", "no_llm", "no_cl")


def parse_variant(name: str) -> dict:
    """'full' or '+'-joined flags, e.g. 'no_kp+no_cl'."""
    if name == "full":
        return {}
    flags = {}
    for part in name.split("+"):
        if part not in ABLATION_FLAGS:
            raise ConfigError(f"unknown ablation flag {part!r}; expected "
                              f"'full' or one of {ABLATION_FLAGS}")
        flags[part] = True
    return flags


@dataclass
class AblationEntry:
    variant: str
    result: TrainResult
    report: EvalReport


def run_ablation_suite(config: TrainConfig, train_ds: Dataset,
                       val_ds: Dataset, test_ds: Dataset,
                       graph: ConceptGraph, node_texts: Mapping, *,
                       variants: Sequence[str] = DEFAULT_VARIANTS,
                       encoder: HashEncoder | None = None,
                       log_fn: Callable[[str], None] | None = None) -> dict:
    """Train each variant with the shared seed and score it on the test
    split.  Variants only differ by their ablation flags, so paired
    comparisons are seed-matched."""
    emit = log_fn or (lambda msg: log.info("%s", msg))
    encoder = encoder or HashEncoder(dim=config.dim)
    node_ids = [f"q:{q}" for q in graph.questions] + \
               [f"c:{c}" for c in graph.concepts]
    features_by_text: dict[bool, FeatureMatrix] = {}

    def features_for(use_summary: bool) -> FeatureMatrix:
        if use_summary not in features_by_text:
            features_by_text[use_summary] = build_feature_matrix(
                node_texts, node_ids, encoder, use_summary=use_summary)
        return features_by_text[use_summary]

    results: dict[str, AblationEntry] = {}
    for variant in variants:
        flags = parse_variant(variant)
        vconfig = dataclasses.replace(config, **flags)
        features = features_for(use_summary=not vconfig.no_llm)
        emit(f"[{variant}] training")
        result = train(vconfig, train_ds, val_ds, graph, features,
                       log_fn=lambda m: emit(f"[{variant}] {m}"))
        report = evaluate(result.params, test_ds, graph, result.features,
                          vconfig)
        overall = ("undefined" if report.mean_auc is None
                   else format(report.mean_auc, ".4f"))
        emit(f"[{variant}] test mean_auc={overall} "
             f"(best epoch {result.best_epoch})")
        results[variant] = AblationEntry(variant=variant, result=result,
                                         report=report)
    return results
