"""Forward pass: graph propagation, interaction embedding, attention
history encoding, pooling, contrastive discrimination, state fusion,
and prediction.

Two layers of API live here.  The single-learner operations mirror the
method definition one step at a time and are what the unit tests probe.
The batched path (`forward_batch`) runs whole learner batches through
the same parameters for training and evaluation; it is numerically the
same computation laid out over (batch, position) axes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import numcore as nc
from .data import AlignedTriple, Dataset
from .errors import ConfigError, DataError, NumericalError
from .graph import ConceptGraph
from .rng import stream
from .semantics import FeatureMatrix

NEG_MASK = -1e30  # additive mask; exp(NEG_MASK - max) underflows to exact 0


# ---------------------------------------------------------------------------
# parameters


@dataclass
class ModelParams:
    dim: int
    num_heads: int
    courses: tuple[str, str]
    gcn_layers: list  # of (weight (D,D), bias (D,)) Tensor pairs
    response_embedding: nc.Tensor  # (2, D)
    attn_query: nc.Tensor  # (D, D)
    attn_key: nc.Tensor  # (D, D)
    attn_value: nc.Tensor  # (D, D)
    discriminators: dict  # course -> (D, D) bilinear form
    head_weights: dict  # course -> (D, 2D)
    head_projections: dict  # course -> (D,)

    def as_dict(self) -> dict[str, nc.Tensor]:
        out: dict[str, nc.Tensor] = {}
        for l, (w, b) in enumerate(self.gcn_layers):
            out[f"gcn.{l}.w"] = w
            out[f"gcn.{l}.b"] = b
        out["response_embed"] = self.response_embedding
        out["attn.q"] = self.attn_query
        out["attn.k"] = self.attn_key
        out["attn.v"] = self.attn_value
        for course in self.courses:
            out[f"disc.{course}"] = self.discriminators[course]
            out[f"head.{course}.w"] = self.head_weights[course]
            out[f"head.{course}.v"] = self.head_projections[course]
        return out

    def copy_values(self) -> dict[str, np.ndarray]:
        return {name: p.values.copy() for name, p in self.as_dict().items()}

    def load_values(self, values: Mapping[str, np.ndarray]) -> None:
        params = self.as_dict()
        missing = sorted(set(params) - set(values))
        if missing:
            raise DataError(f"checkpoint missing parameter blocks: {missing}")
        for name, p in params.items():
            arr = np.asarray(values[name], dtype=np.float64)
            if arr.shape != p.values.shape:
                raise DataError(f"parameter '{name}' has shape {arr.shape}, "
                                f"expected {p.values.shape}")
            p.values = arr.copy()


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int,
            shape: tuple[int, ...]) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_model_params(dim: int, num_layers: int, courses: Sequence[str],
                      seed: int, num_heads: int = 1) -> ModelParams:
    """Xavier-uniform weights, zero biases.  Every block draws from its
    own named stream, so adding or removing one block never shifts the
    initialization of the others."""
    if dim < 1 or num_layers < 0:
        raise ConfigError("dim must be >= 1 and num_layers >= 0")
    if num_heads < 1 or dim % num_heads != 0:
        raise ConfigError(f"num_heads must divide dim; got heads={num_heads} "
                          f"dim={dim}")
    courses = tuple(courses)
    if len(courses) != 2:
        raise ConfigError("model expects exactly two courses")

    def draw(name, fan_in, fan_out, shape):
        return nc.Tensor(_xavier(stream(seed, f"init.{name}"),
                                 fan_in, fan_out, shape), requires_grad=True)

    gcn = []
    for l in range(num_layers):
        w = draw(f"gcn.{l}.w", dim, dim, (dim, dim))
        b = nc.Tensor(np.zeros(dim), requires_grad=True)
        gcn.append((w, b))
    params = ModelParams(
        dim=dim,
        num_heads=num_heads,
        courses=courses,
        gcn_layers=gcn,
        response_embedding=draw("response_embed", 2, dim, (2, dim)),
        attn_query=draw("attn.q", dim, dim, (dim, dim)),
        attn_key=draw("attn.k", dim, dim, (dim, dim)),
        attn_value=draw("attn.v", dim, dim, (dim, dim)),
        discriminators={c: draw(f"disc.{c}", dim, dim, (dim, dim))
                        for c in courses},
        head_weights={c: draw(f"head.{c}.w", 2 * dim, dim, (dim, 2 * dim))
                      for c in courses},
        head_projections={c: draw(f"head.{c}.v", dim, 1, (dim,))
                          for c in courses},
    )
    return params


# ---------------------------------------------------------------------------
# graph propagation


def normalized_adjacency(graph: ConceptGraph) -> np.ndarray:
    """Undirected adjacency with self-loops over [questions..., concepts...],
    each row divided by its degree (self included), so a row of the
    matrix computes the mean over N_i ∪ {i}."""
    nq = len(graph.questions)
    n = nq + len(graph.concepts)
    q_index = {q: i for i, q in enumerate(graph.questions)}
    c_index = {c: nq + i for i, c in enumerate(graph.concepts)}
    adj = np.zeros((n, n), dtype=np.float64)
    for q, c in graph.qc_edges:
        i, j = q_index[q], c_index[c]
        adj[i, j] = adj[j, i] = 1.0
    for a, b in graph.undirected_concept_pairs():
        i, j = c_index[a], c_index[b]
        adj[i, j] = adj[j, i] = 1.0
    np.fill_diagonal(adj, 1.0)
    return adj / adj.sum(axis=1, keepdims=True)


def propagate(graph: ConceptGraph, features, params: ModelParams,
              num_layers: int | None = None, *, dropout_p: float = 0.0,
              rng: np.random.Generator | None = None,
              training: bool = False) -> nc.Tensor:
    """Stack of mean-aggregating layers:
    x_i^l = ReLU(mean_{j in N_i ∪ {i}} (w^l x_j^{l-1}) + b^l).

    Row order is the graph's node order (questions then concepts).
    num_layers=0 returns the input unchanged.
    """
    if isinstance(features, FeatureMatrix):
        expected = [f"q:{q}" for q in graph.questions] + \
                   [f"c:{c}" for c in graph.concepts]
        if list(features.node_ids) != expected:
            missing = sorted(set(expected) - set(features.node_ids))
            if missing:
                raise DataError(f"feature matrix missing rows for "
                                f"{len(missing)} node(s), e.g. "
                                f"{', '.join(missing[:5])}")
            raise DataError("feature matrix row order does not match the "
                            "graph node order")
        x = nc.constant(features.matrix)
    elif isinstance(features, nc.Tensor):
        x = features
    else:
        x = nc.constant(np.asarray(features, dtype=np.float64))

    n = len(graph.questions) + len(graph.concepts)
    if x.shape[0] != n:
        raise DataError(f"feature matrix has {x.shape[0]} rows for {n} nodes")
    if num_layers is None:
        num_layers = len(params.gcn_layers)
    if num_layers > len(params.gcn_layers):
        raise ConfigError(f"requested {num_layers} layers but parameters "
                          f"hold {len(params.gcn_layers)}")
    if num_layers == 0:
        return x

    adj = nc.constant(normalized_adjacency(graph))
    for l in range(num_layers):
        w, b = params.gcn_layers[l]
        # mean_j(w x_j) = w mean_j(x_j): aggregate first, transform after
        x = nc.relu(nc.add(nc.matmul(nc.matmul(adj, x),
                                     nc.transpose(w, (1, 0))), b))
        x = nc.dropout(x, dropout_p, rng, training)
    return x


# ---------------------------------------------------------------------------
# single-learner operations


def interaction_embed(q_feature: nc.Tensor, response: int,
                      response_embedding: nc.Tensor) -> nc.Tensor:
    """q^r = q + (one-hot response) · W_r."""
    if response not in (0, 1):
        raise DataError(f"response must be 0 or 1, got {response!r}")
    row = nc.reshape(nc.gather_rows(response_embedding, np.array([response])),
                     (response_embedding.shape[1],))
    return nc.add(q_feature, row)


def positional_encoding(length: int, dim: int) -> np.ndarray:
    """Sinusoidal position table (length, dim): sin on even feature
    indices, cos on odd, wavelengths 2π·10000^(2i/dim).  Constant —
    never trained."""
    if length < 1 or dim < 1:
        raise ConfigError(f"positional table needs positive shape, got "
                          f"({length}, {dim})")
    pos = np.arange(length, dtype=np.float64)[:, None]
    idx = np.arange(dim, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, 2.0 * np.floor(idx / 2.0) / dim)
    return np.where(idx.astype(np.int64) % 2 == 0,
                    np.sin(angles), np.cos(angles))


def _split_heads(t: nc.Tensor, heads: int) -> nc.Tensor:
    b, l, d = t.shape
    return nc.transpose(nc.reshape(t, (b, l, heads, d // heads)),
                        (0, 2, 1, 3))


def _merge_heads(t: nc.Tensor) -> nc.Tensor:
    b, h, l, dh = t.shape
    return nc.reshape(nc.transpose(t, (0, 2, 1, 3)), (b, l, h * dh))


def _attend(params: ModelParams, q_src: nc.Tensor, k_src: nc.Tensor,
            v_src: nc.Tensor, allowed: np.ndarray, *,
            dropout_p: float = 0.0, rng: np.random.Generator | None = None,
            training: bool = False,
            return_weights: bool = False):
    """Scaled dot-product attention over batched sequences.

    allowed[b, i, j] = 1 where query position i may read key position j.
    Fully-masked query rows yield an exactly-zero output state.
    """
    heads = params.num_heads
    dh = params.dim // heads
    q = _split_heads(nc.matmul(q_src, params.attn_query), heads)
    k = _split_heads(nc.matmul(k_src, params.attn_key), heads)
    v = _split_heads(nc.matmul(v_src, params.attn_value), heads)
    scores = nc.scale(nc.matmul(q, nc.transpose(k, (0, 1, 3, 2))),
                      1.0 / np.sqrt(dh))
    allowed4 = allowed[:, None, :, :]
    masked = nc.add(nc.mul(scores, nc.constant(allowed4)),
                    nc.constant(NEG_MASK * (1.0 - allowed4)))
    weights = nc.softmax(masked, axis=-1)
    # rows with no allowed key would softmax to uniform garbage; zero them
    row_valid = (allowed.sum(axis=-1, keepdims=True) > 0).astype(np.float64)
    weights = nc.mul(weights, nc.constant(row_valid[:, None, :, :]))
    out = _merge_heads(nc.matmul(weights, v))
    out = nc.dropout(out, dropout_p, rng, training)
    if return_weights:
        return out, weights.values.copy()
    return out, None


def encode_history(history: Sequence[tuple], target_q_feature: nc.Tensor,
                   params: ModelParams, num_heads: int | None = None
                   ) -> nc.Tensor:
    """Attention state for one target: query is the projected target
    question, keys the projected history questions, values the projected
    interaction embeddings.  An empty history yields the zero vector."""
    if num_heads is not None and num_heads != params.num_heads:
        raise ConfigError(f"params were built with {params.num_heads} heads, "
                          f"got num_heads={num_heads}")
    d = params.dim
    if not history:
        return nc.constant(np.zeros(d))
    k_src = nc.reshape(nc.stack([q for q, _ in history], axis=0), (1, len(history), d))
    v_src = nc.reshape(nc.stack([qr for _, qr in history], axis=0), (1, len(history), d))
    q_src = nc.reshape(target_q_feature, (1, 1, d))
    allowed = np.ones((1, 1, len(history)), dtype=np.float64)
    out, _ = _attend(params, q_src, k_src, v_src, allowed)
    return nc.reshape(out, (d,))


def pool_history(states: nc.Tensor, mask) -> nc.Tensor:
    """Mean of per-position states over valid positions: states (T, D),
    mask (T,) of 0/1."""
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim != 1 or mask.shape[0] != states.shape[0]:
        raise NumericalError(f"mask shape {mask.shape} does not match "
                             f"states {states.shape}")
    return nc.masked_mean(states, nc.constant(mask[:, None]), axis=0)


def discriminate(g_single: nc.Tensor, g_cross: nc.Tensor,
                 w_mi: nc.Tensor) -> nc.Tensor:
    """sigmoid(g_single · W_MI · g_cross)."""
    d = w_mi.shape[0]
    z = nc.matmul(nc.matmul(nc.reshape(g_single, (1, d)), w_mi),
                  nc.reshape(g_cross, (d, 1)))
    return nc.sigmoid(nc.reshape(z, ()))


def contrastive_loss(g_single: nc.Tensor, g_cross_pos: nc.Tensor,
                     g_cross_neg: nc.Tensor, w_mi: nc.Tensor) -> nc.Tensor:
    """-(log D(g, g+) + log(1 - D(g, g-))), in logit form:
    softplus(-z+) + softplus(z-)."""
    d = w_mi.shape[0]

    def logit(a, b):
        return nc.reshape(nc.matmul(nc.matmul(nc.reshape(a, (1, d)), w_mi),
                                    nc.reshape(b, (d, 1))), ())

    z_pos = logit(g_single, g_cross_pos)
    z_neg = logit(g_single, g_cross_neg)
    return nc.add(nc.softplus(nc.scale(z_pos, -1.0)), nc.softplus(z_neg))


def fuse_states(h_single: nc.Tensor, h_cross: nc.Tensor, eta: float
                ) -> nc.Tensor:
    """ĥ = η·h_cross + (1−η)·h_single."""
    if not 0.0 <= eta <= 1.0:
        raise ConfigError(f"fusion weight must lie in [0, 1], got {eta}")
    return nc.add(nc.scale(h_cross, eta), nc.scale(h_single, 1.0 - eta))


def predict(h_hat: nc.Tensor, target_q_feature: nc.Tensor,
            head_weight: nc.Tensor, head_projection: nc.Tensor) -> nc.Tensor:
    """probability = sigmoid(v · ReLU(W · (ĥ ⊕ q)))."""
    z = nc.relu(nc.matmul(head_weight,
                          nc.concat([h_hat, target_q_feature], axis=-1)))
    return nc.sigmoid(nc.matmul(head_projection, z))


def prediction_loss(probabilities: nc.Tensor, labels, mask) -> nc.Tensor:
    """Mean binary cross-entropy over valid positions.

    When `probabilities` is the direct output of the sigmoid op, the
    loss is computed from the underlying logits in softplus form;
    otherwise a clamped-log fallback is used.
    """
    labels = np.asarray(labels, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if labels.shape != probabilities.shape:
        raise NumericalError(f"labels shape {labels.shape} does not match "
                             f"probabilities {probabilities.shape}")
    on = mask != 0.0
    if not np.all(np.isin(labels[on], (0.0, 1.0))):
        raise DataError("labels must be 0 or 1 at valid positions")
    mask_t = nc.constant(mask)
    if probabilities._op == "sigmoid" and probabilities._parents:
        logits = probabilities._parents[0]
        # -(r log σ(z) + (1-r) log(1-σ(z))) = softplus(z) - r z
        per = nc.add(nc.softplus(logits),
                     nc.mul(logits, nc.constant(-labels)))
    else:
        p = nc.clip(probabilities, 1e-12, 1.0 - 1e-12)
        per = nc.scale(nc.add(nc.mul(nc.constant(labels), nc.log(p)),
                              nc.mul(nc.constant(1.0 - labels),
                                     nc.log(nc.add(nc.scale(p, -1.0),
                                                   nc.constant(1.0))))),
                       -1.0)
    return nc.masked_mean(per, mask_t)


def total_loss(pred_x: nc.Tensor, pred_y: nc.Tensor, cl_x: nc.Tensor,
               cl_y: nc.Tensor, lam: float) -> nc.Tensor:
    """λ(L_pred^X + L_pred^Y) + (1−λ)(L_cl^X + L_cl^Y)."""
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"loss balance weight must lie in [0, 1], got {lam}")
    return nc.add(nc.scale(nc.add(pred_x, pred_y), lam),
                  nc.scale(nc.add(cl_x, cl_y), 1.0 - lam))


# ---------------------------------------------------------------------------
# batched path


@dataclass
class SequenceBatch:
    """Index arrays for a padded batch of merged learner sequences."""

    learner_ids: list[str]
    q_idx: np.ndarray  # (B, L) dense question index, 0 at padding
    responses: np.ndarray  # (B, L) float 0/1, 0 at padding
    valid: np.ndarray  # (B, L) 1 at real merged slots
    x_mask: np.ndarray  # (B, L) 1 where the slot belongs to course X
    y_mask: np.ndarray  # (B, L)
    neg_q_idx: np.ndarray | None = None  # negative merged sequence
    neg_responses: np.ndarray | None = None

    @property
    def size(self) -> int:
        return self.q_idx.shape[0]

    @property
    def length(self) -> int:
        return self.q_idx.shape[1]


def make_batch(triples: Mapping[str, AlignedTriple], dataset: Dataset,
               learner_ids: Sequence[str]) -> SequenceBatch:
    """Pad the given learners' merged sequences to a common length."""
    if not learner_ids:
        raise DataError("cannot build an empty batch")
    length = max(len(triples[lid]) for lid in learner_ids)
    B = len(learner_ids)
    q_idx = np.zeros((B, length), dtype=np.int64)
    responses = np.zeros((B, length), dtype=np.float64)
    valid = np.zeros((B, length), dtype=np.float64)
    x_mask = np.zeros((B, length), dtype=np.float64)
    y_mask = np.zeros((B, length), dtype=np.float64)
    course_x = dataset.courses[0]
    for b, lid in enumerate(learner_ids):
        triple = triples[lid]
        for t, slot in enumerate(triple.merged):
            q_idx[b, t] = dataset.question_index[slot.question_id]
            responses[b, t] = slot.response
            valid[b, t] = 1.0
            if slot.course_id == course_x:
                x_mask[b, t] = 1.0
            else:
                y_mask[b, t] = 1.0
    return SequenceBatch(list(learner_ids), q_idx, responses, valid,
                         x_mask, y_mask)


def _causal_allowed(key_mask: np.ndarray) -> np.ndarray:
    """allowed[b, i, j] = key_mask[b, j] and j < i."""
    B, L = key_mask.shape
    strict_past = np.tril(np.ones((L, L), dtype=np.float64), k=-1)
    return strict_past[None, :, :] * key_mask[:, None, :]


def _pool_mask_with_fallback(mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rows with no valid position get a dummy single-position mask so
    pooling stays defined; the returned learner mask excludes them from
    any loss."""
    learner_has = (mask.sum(axis=1) > 0).astype(np.float64)
    pool = mask.copy()
    empty = learner_has == 0.0
    if np.any(empty):
        pool[empty, 0] = 1.0
    return pool, learner_has


def _bilinear_batch(g1: nc.Tensor, g2: nc.Tensor, w_mi: nc.Tensor) -> nc.Tensor:
    """Row-wise g1 · W · g2 for (B, D) inputs -> (B,) logits."""
    d = w_mi.shape[0]
    return nc.matmul(nc.mul(nc.matmul(g1, w_mi), g2),
                     nc.constant(np.ones(d)))


@dataclass
class BatchOutput:
    probs: dict  # course -> Tensor (B, L) sigmoid outputs
    pred_losses: dict  # course -> scalar Tensor
    cl_losses: dict | None  # course -> scalar Tensor, None when CL is off
    masks: dict  # course -> np.ndarray (B, L) positions scored
    attention: dict | None = None  # view name -> (B, H, L, L) weight array


def forward_batch(params: ModelParams, batch: SequenceBatch,
                  node_features: nc.Tensor, *, eta: float,
                  dropout_p: float = 0.0,
                  dropout_rngs: Mapping[str, np.random.Generator] | None = None,
                  training: bool = False, with_cl: bool = True,
                  positional: bool = False,
                  return_attention: bool = False) -> BatchOutput:
    """Run one padded batch through the three shared-parameter views
    (course X, course Y, merged), plus the negative merged view when the
    contrastive path is on.  `positional` adds the sinusoidal table to
    the attention inputs; off by default."""
    if not 0.0 <= eta <= 1.0:
        raise ConfigError(f"fusion weight must lie in [0, 1], got {eta}")
    if with_cl and (batch.neg_q_idx is None or batch.neg_responses is None):
        raise DataError("contrastive path requires a sampled negative "
                        "sequence on the batch")
    rngs = dropout_rngs or {}

    def rng_for(site):
        if dropout_p == 0.0 or not training:
            return None
        if site not in rngs:
            raise ConfigError(f"dropout is on but no rng provided for "
                              f"site '{site}'")
        return rngs[site]

    feats = nc.gather_rows(node_features, batch.q_idx)  # (B, L, D)
    resp_rows = nc.gather_rows(params.response_embedding,
                               batch.responses.astype(np.int64))
    qr = nc.add(feats, resp_rows)

    pe = None
    qk_src = feats
    if positional:
        pe = nc.constant(positional_encoding(batch.length,
                                             params.dim)[None])
        qk_src = nc.add(feats, pe)
        qr = nc.add(qr, pe)

    views = {
        "x": _causal_allowed(batch.x_mask),
        "y": _causal_allowed(batch.y_mask),
        "merged": _causal_allowed(batch.valid),
    }
    states = {}
    attention = {} if return_attention else None
    for name, allowed in views.items():
        out, weights = _attend(params, qk_src, qk_src, qr, allowed,
                               dropout_p=dropout_p, rng=rng_for(f"att.{name}"),
                               training=training,
                               return_weights=return_attention)
        states[name] = out
        if return_attention:
            attention[name] = weights

    course_x, course_y = params.courses
    course_masks = {course_x: batch.x_mask, course_y: batch.y_mask}
    view_of = {course_x: "x", course_y: "y"}

    probs: dict = {}
    pred_losses: dict = {}
    for course in params.courses:
        mask = course_masks[course]
        fused = fuse_states(states[view_of[course]], states["merged"], eta)
        z = nc.relu(nc.matmul(nc.concat([fused, feats], axis=-1),
                              nc.transpose(params.head_weights[course],
                                           (1, 0))))
        logits = nc.matmul(z, params.head_projections[course])  # (B, L)
        p = nc.sigmoid(logits)
        probs[course] = p
        pred_losses[course] = prediction_loss(p, batch.responses, mask)

    cl_losses = None
    if with_cl:
        neg_feats = nc.gather_rows(node_features, batch.neg_q_idx)
        neg_resp = nc.gather_rows(params.response_embedding,
                                  batch.neg_responses.astype(np.int64))
        neg_qr = nc.add(neg_feats, neg_resp)
        neg_src = neg_feats
        if pe is not None:
            neg_src = nc.add(neg_feats, pe)
            neg_qr = nc.add(neg_qr, pe)
        neg_out, neg_w = _attend(params, neg_src, neg_src, neg_qr,
                                 views["merged"], dropout_p=dropout_p,
                                 rng=rng_for("att.neg"), training=training,
                                 return_weights=return_attention)
        if return_attention:
            attention["negative"] = neg_w

        pool_valid, _ = _pool_mask_with_fallback(batch.valid)
        g_merged = nc.masked_mean(states["merged"],
                                  nc.constant(pool_valid[:, :, None]), axis=1)
        g_neg = nc.masked_mean(neg_out,
                               nc.constant(pool_valid[:, :, None]), axis=1)
        cl_losses = {}
        for course in params.courses:
            mask = course_masks[course]
            pool_mask, learner_has = _pool_mask_with_fallback(mask)
            g_view = nc.masked_mean(states[view_of[course]],
                                    nc.constant(pool_mask[:, :, None]), axis=1)
            w_mi = params.discriminators[course]
            z_pos = _bilinear_batch(g_view, g_merged, w_mi)
            z_neg = _bilinear_batch(g_view, g_neg, w_mi)
            per_learner = nc.add(nc.softplus(nc.scale(z_pos, -1.0)),
                                 nc.softplus(z_neg))
            cl_losses[course] = nc.masked_mean(per_learner,
                                               nc.constant(learner_has))

    return BatchOutput(probs=probs, pred_losses=pred_losses,
                       cl_losses=cl_losses, masks=course_masks,
                       attention=attention)
