"""Cascade binary pointer tagging for joint triple extraction.

One shared encoder feeds two heads. The subject head tags start/end pointers
per token. The relation-object head, conditioned on a subject span by adding
the span's mean hidden vector to every position, tags start/end pointers per
token per relation. Both heads squash logits through a squared sigmoid and
the same squared scores are thresholded at decode time.

Training uses teacher forcing: gold subject spans (plus sampled negative
spans, which carry all-zero object labels) condition the relation head, and
the two binary cross-entropy terms are summed into one joint loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import (
    DEFAULT_DTYPE,
    Rng,
    Tensor,
    add,
    dropout,
    matmul,
    mul,
    sigmoid,
    square,
    _make,
)
from .encoder import EncodedInput, EncoderConfig, EncoderParams, encode, init_encoder_params

BCE_CLIP = 1e-7


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class Span:
    """Inclusive token span [start, end]."""

    start: int
    end: int

    def __post_init__(self):
        if self.start < 0 or self.end < self.start:
            raise ValueError(f"invalid span ({self.start}, {self.end})")

    def __len__(self) -> int:
        return self.end - self.start + 1


@dataclass(frozen=True)
class Triple:
    subject: str
    predicate: str
    object: str
    subject_span: Span | None = None
    object_span: Span | None = None

    def key(self) -> tuple[str, str, str]:
        return (self.subject, self.predicate, self.object)


@dataclass(frozen=True)
class RelationSchema:
    predicates: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "predicates", tuple(self.predicates))
        if not self.predicates:
            raise SchemaError("schema must list at least one predicate")
        if len(set(self.predicates)) != len(self.predicates):
            raise SchemaError("schema predicates must be unique")
        if any(not p for p in self.predicates):
            raise SchemaError("schema predicates must be non-empty strings")
        object.__setattr__(
            self, "_index", {p: i for i, p in enumerate(self.predicates)}
        )

    def index(self, predicate: str) -> int:
        try:
            return self._index[predicate]
        except KeyError:
            raise SchemaError(f"predicate {predicate!r} not in schema") from None

    def __len__(self) -> int:
        return len(self.predicates)


@dataclass
class ModelParams:
    """Encoder weights plus both head projections, named for serialization."""

    encoder: EncoderParams
    subject_w: Tensor
    subject_b: Tensor
    relation_w: Tensor
    relation_b: Tensor

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        out = [
            ("token_emb", self.encoder.token_emb),
            ("segment_emb", self.encoder.segment_emb),
            ("position_emb", self.encoder.position_emb),
        ]
        for i, layer in enumerate(self.encoder.layers):
            for fname in (
                "w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_o", "b_o",
                "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2",
                "ln1_gamma", "ln1_beta", "ln2_gamma", "ln2_beta",
            ):
                out.append((f"layer{i}.{fname}", getattr(layer, fname)))
        out.extend(
            [
                ("subject_w", self.subject_w),
                ("subject_b", self.subject_b),
                ("relation_w", self.relation_w),
                ("relation_b", self.relation_b),
            ]
        )
        return out

    @property
    def num_relations(self) -> int:
        return self.relation_b.shape[0] // 2

    def zero_grads(self):
        for _, t in self.named_tensors():
            t.zero_grad()

    def freeze(self):
        for _, t in self.named_tensors():
            t.requires_grad = False
        return self


def init_model_params(
    config: EncoderConfig, num_relations: int, rng: Rng, dtype=DEFAULT_DTYPE
) -> ModelParams:
    if num_relations <= 0:
        raise ValueError("num_relations must be positive")
    enc = init_encoder_params(config, rng, dtype=dtype)
    d = config.model_dim
    return ModelParams(
        encoder=enc,
        subject_w=Tensor(rng.uniform(-0.02, 0.02, (d, 2), dtype=dtype), requires_grad=True),
        subject_b=Tensor(np.zeros(2, dtype=dtype), requires_grad=True),
        relation_w=Tensor(
            rng.uniform(-0.02, 0.02, (d, 2 * num_relations), dtype=dtype), requires_grad=True
        ),
        relation_b=Tensor(np.zeros(2 * num_relations, dtype=dtype), requires_grad=True),
    )


@dataclass
class SubjectScores:
    """Squared-sigmoid pointer scores per token; `logits` keeps the grad path."""

    start: np.ndarray
    end: np.ndarray
    scores: Tensor
    logits: Tensor


@dataclass
class RelationObjectScores:
    """Per-token scores with columns [0:R] = starts, [R:2R] = ends."""

    start: np.ndarray
    end: np.ndarray
    scores: Tensor
    logits: Tensor


def subject_scores(
    hidden: Tensor,
    params: ModelParams,
    dropout_p: float = 0.0,
    training: bool = False,
    rng: Rng | None = None,
) -> SubjectScores:
    h = dropout(hidden, dropout_p, training, rng)
    z = add(matmul(h, params.subject_w), params.subject_b)
    s = square(sigmoid(z))
    return SubjectScores(start=s.data[:, 0], end=s.data[:, 1], scores=s, logits=z)


def relation_object_scores(
    conditioned: Tensor,
    params: ModelParams,
    dropout_p: float = 0.0,
    training: bool = False,
    rng: Rng | None = None,
) -> RelationObjectScores:
    r = params.num_relations
    h = dropout(conditioned, dropout_p, training, rng)
    z = add(matmul(h, params.relation_w), params.relation_b)
    s = square(sigmoid(z))
    return RelationObjectScores(start=s.data[:, :r], end=s.data[:, r:], scores=s, logits=z)


def decode_spans(
    start: np.ndarray, end: np.ndarray, mask: np.ndarray, threshold: float = 0.5
) -> list[Span]:
    """Pair each above-threshold start with the nearest end at or after it.

    Unpaired starts are dropped. Masked positions can neither start nor end a
    span. Nested and overlapping spans are allowed.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    mask = np.asarray(mask)
    starts = np.where((start >= threshold) & (mask == 1))[0]
    ends = np.where((end >= threshold) & (mask == 1))[0]
    spans = []
    for s in starts:
        after = ends[ends >= s]
        if after.size:
            spans.append(Span(int(s), int(after[0])))
    return spans


def decode_subject_spans(
    scores: SubjectScores, mask: np.ndarray, threshold: float = 0.5
) -> list[Span]:
    return decode_spans(scores.start, scores.end, mask, threshold)


def decode_objects(
    scores: RelationObjectScores, mask: np.ndarray, threshold: float = 0.5
) -> list[tuple[int, Span]]:
    """All (relation index, object span) pairs, ordered by relation then start."""
    out = []
    for r in range(scores.start.shape[1]):
        for span in decode_spans(scores.start[:, r], scores.end[:, r], mask, threshold):
            out.append((r, span))
    return out


def condition_on_subject(hidden: Tensor, span: Span) -> Tensor:
    """Add the mean hidden vector over the span's rows to every position."""
    n = hidden.shape[0]
    if span.end >= n:
        raise ValueError(f"span ({span.start}, {span.end}) exceeds sequence length {n}")
    m = np.zeros((1, n), dtype=hidden.dtype)
    m[0, span.start : span.end + 1] = 1.0 / len(span)
    return add(hidden, matmul(Tensor(m), hidden))


def condition_on_spans(hidden: Tensor, spans: list[Span]) -> Tensor:
    """Batched conditioning: returns [len(spans) * n, d], one block per span."""
    n, d = hidden.shape
    s = len(spans)
    m = np.zeros((s, n), dtype=hidden.dtype)
    for i, span in enumerate(spans):
        if span.end >= n:
            raise ValueError(f"span ({span.start}, {span.end}) exceeds sequence length {n}")
        m[i, span.start : span.end + 1] = 1.0 / len(span)
    means = m @ hidden.data
    out = (hidden.data[None, :, :] + means[:, None, :]).reshape(s * n, d)

    def back(g):
        g3 = g.reshape(s, n, d)
        return (g3.sum(axis=0) + m.T @ g3.sum(axis=1),)

    return _make(out, (hidden,), back)


def bce_mean(scores: Tensor, labels: np.ndarray, weights: np.ndarray) -> Tensor:
    """Weighted mean binary cross-entropy with activations clipped to
    [1e-7, 1 - 1e-7]; gradient is zero where the clip binds."""
    labels = np.asarray(labels, dtype=scores.dtype)
    weights = np.broadcast_to(np.asarray(weights, dtype=scores.dtype), scores.shape)
    total = float(weights.sum())
    if total <= 0.0:
        raise ValueError("bce_mean: weights sum to zero")
    s = np.clip(scores.data, BCE_CLIP, 1.0 - BCE_CLIP)
    per = -(labels * np.log(s) + (1.0 - labels) * np.log1p(-s))
    out = np.asarray((per * weights).sum() / total, dtype=scores.dtype)

    def back(g):
        inside = (scores.data > BCE_CLIP) & (scores.data < 1.0 - BCE_CLIP)
        ds = weights * (s - labels) / (s * (1.0 - s)) / total
        return (g * ds * inside,)

    return _make(out, (scores,), back)


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


def pointer_bce_mean(logits: Tensor, labels: np.ndarray, weights: np.ndarray) -> Tensor:
    """Weighted mean BCE of squared-sigmoid activations, fused with the logits.

    Equals bce_mean(square(sigmoid(logits)), ...) away from the clip rails but
    stays exact under float32 saturation: the per-entry gradient is the bounded
    closed form -2y(1-s) + (1-y)*2s^2/(1+s) with s = sigmoid(logit).
    """
    z = logits.data
    labels = np.asarray(labels, dtype=z.dtype)
    weights = np.broadcast_to(np.asarray(weights, dtype=z.dtype), z.shape)
    total = float(weights.sum())
    if total <= 0.0:
        raise ValueError("pointer_bce_mean: weights sum to zero")
    e = np.exp(-np.abs(z))
    sig = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype, copy=False)
    # -log(s^2) = 2*softplus(-z); -log(1-s^2) = softplus(z) - log1p(s)
    per = labels * 2.0 * _softplus(-z) + (1.0 - labels) * (_softplus(z) - np.log1p(sig))
    out = np.asarray((per * weights).sum() / total, dtype=z.dtype)

    def back(g):
        dz = -2.0 * labels * (1.0 - sig) + (1.0 - labels) * 2.0 * sig * sig / (1.0 + sig)
        return (g * weights * dz / total,)

    return _make(out, (logits,), back)


def pointer_bce_sum(logits: Tensor, labels: np.ndarray, weights: np.ndarray) -> Tensor:
    """Weighted SUM of squared-sigmoid BCE terms; the caller owns normalization.

    Same per-entry loss and bounded gradient as pointer_bce_mean, without the
    division by the weight total, so mixed per-group normalizers can be encoded
    directly in the weights.
    """
    z = logits.data
    labels = np.asarray(labels, dtype=z.dtype)
    weights = np.broadcast_to(np.asarray(weights, dtype=z.dtype), z.shape)
    e = np.exp(-np.abs(z))
    sig = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype, copy=False)
    per = labels * 2.0 * _softplus(-z) + (1.0 - labels) * (_softplus(z) - np.log1p(sig))
    out = np.asarray((per * weights).sum(), dtype=z.dtype)

    def back(g):
        dz = -2.0 * labels * (1.0 - sig) + (1.0 - labels) * 2.0 * sig * sig / (1.0 + sig)
        return (g * weights * dz,)

    return _make(out, (logits,), back)


@dataclass
class SubjectAnnotation:
    """Gold subject span with its per-relation object pointer labels."""

    span: Span
    object_start: np.ndarray  # [n, R]
    object_end: np.ndarray  # [n, R]


@dataclass
class LossParts:
    total: Tensor
    subject: float
    relation: float


@dataclass(frozen=True)
class LossWeighting:
    """Per-cell weight boosts for the relation BCE.

    positive multiplies gold pointer cells. adjacent multiplies zero cells
    within two token positions of a gold cell in the same column. column
    multiplies zero cells sharing a token position with a gold cell but lying
    in a different column, and wins where both zero-cell rules apply. All ones
    recovers the unweighted per-group mean.
    """

    positive: float = 1.0
    adjacent: float = 1.0
    column: float = 1.0

    @property
    def neutral(self) -> bool:
        return self.positive == self.adjacent == self.column == 1.0


def relation_cell_weights(
    labels: np.ndarray, base: np.ndarray, weighting: LossWeighting
) -> np.ndarray:
    """Expand per-position base weights [s, n, 1] to cell weights [s, n, 2R].

    Gold cells take the positive boost; the adjacent boost dilates two
    positions along the token axis, truncating at block edges, within each
    span block and column; the column boost covers the remaining zero cells
    of gold token positions.
    """
    pos = labels > 0.5
    out = np.broadcast_to(base, labels.shape)
    if weighting.neutral or not pos.any():
        return out
    near = np.zeros_like(pos)
    for shift in (1, 2):
        near[:, :-shift] |= pos[:, shift:]
        near[:, shift:] |= pos[:, :-shift]
    cross = pos.any(axis=2, keepdims=True) & ~pos
    near &= ~pos & ~cross
    return out * (
        1.0
        + (weighting.positive - 1.0) * pos
        + (weighting.adjacent - 1.0) * near
        + (weighting.column - 1.0) * cross
    )


def joint_loss(
    batch,
    params: ModelParams,
    config: EncoderConfig,
    rng: Rng | None = None,
    training: bool = True,
    weighting: LossWeighting | None = None,
) -> LossParts:
    """Subject BCE plus relation BCE, averaged over a batch of encoded examples.

    Gold subject spans and each example's sampled negative spans condition the
    relation head; negatives carry all-zero object labels. Each BCE averages
    over unmasked positions (and, for the relation term, over relations). The
    relation term sums the per-span mean BCE over gold conditioning spans, and
    the negative spans together contribute the sample mean of their per-span
    BCEs, estimating the rejection loss under the negative-sampling draw.
    Optional weighting boosts relation cells around the gold pointers; the
    positive cells of sparse pointer rows otherwise contribute too little
    gradient against the mass of zero cells for the head to pull them over
    the decision threshold.
    """
    if not batch:
        raise ValueError("joint_loss: empty batch")
    r = params.num_relations
    subject_terms = []
    relation_terms = []
    for ex in batch:
        n = len(ex.input.input_ids)
        if len(ex.subject_start) != n or len(ex.subject_end) != n:
            raise ValueError(f"subject labels length {len(ex.subject_start)} != tokens {n}")
        hidden = encode(ex.input, params.encoder, config, training, rng)
        dtype = hidden.dtype
        w = ex.input.input_mask.astype(dtype)[:, None]

        sc = subject_scores(hidden, params, config.dropout_p, training, rng)
        s_labels = np.stack([ex.subject_start, ex.subject_end], axis=1).astype(dtype)
        subject_terms.append(pointer_bce_mean(sc.logits, s_labels, w))

        spans = [sub.span for sub in ex.subjects] + list(ex.negative_spans)
        if not spans:
            continue
        labels = np.zeros((len(spans), n, 2 * r), dtype=dtype)
        for i, sub in enumerate(ex.subjects):
            if sub.object_start.shape != (n, r) or sub.object_end.shape != (n, r):
                raise ValueError(
                    f"object labels shape {sub.object_start.shape} != ({n}, {r})"
                )
            labels[i, :, :r] = sub.object_start
            labels[i, :, r:] = sub.object_end
        conditioned = condition_on_spans(hidden, spans)
        ro = relation_object_scores(conditioned, params, config.dropout_p, training, rng)
        n_unmasked = float(w.sum())
        n_gold = len(ex.subjects)
        n_neg = len(ex.negative_spans)
        per_gold = 1.0 / (n_unmasked * 2 * r)
        per_neg = per_gold / max(n_neg, 1)
        rw = np.concatenate(
            [np.tile(w * per_gold, (n_gold, 1)), np.tile(w * per_neg, (n_neg, 1))]
        )
        if weighting is not None and not weighting.neutral:
            rw = relation_cell_weights(
                labels, rw.reshape(len(spans), n, 1), weighting
            ).reshape(len(spans) * n, 2 * r)
        relation_terms.append(
            pointer_bce_sum(ro.logits, labels.reshape(len(spans) * n, 2 * r), rw)
        )

    def average(terms):
        if not terms:
            return Tensor(np.asarray(0.0, dtype=params.subject_w.dtype))
        acc = terms[0]
        for t in terms[1:]:
            acc = add(acc, t)
        return mul(acc, 1.0 / len(batch))

    l_subject = average(subject_terms)
    l_relation = average(relation_terms)
    return LossParts(
        total=add(l_subject, l_relation),
        subject=l_subject.item(),
        relation=l_relation.item(),
    )


def content_mask(input_ids: np.ndarray, input_mask: np.ndarray, cls_id: int, sep_id: int) -> np.ndarray:
    """Unmasked positions that may carry entity spans (specials excluded)."""
    m = np.asarray(input_mask).copy()
    ids = np.asarray(input_ids)
    m[(ids == cls_id) | (ids == sep_id)] = 0
    return m


def extract_triples(
    text: str,
    params: ModelParams,
    config: EncoderConfig,
    vocab,
    schema: RelationSchema,
    threshold: float = 0.5,
) -> list[Triple]:
    """Tokenize, encode, decode subjects, then objects per subject.

    Returns de-duplicated triples ordered by subject start, relation index,
    object start. Surface strings come from character offsets.
    """
    from .data import CLS_ID, SEP_ID, tokenize

    tokens, offsets = tokenize(text)
    if len(tokens) > config.max_seq_len:
        cut = config.max_seq_len - 1
        tokens = tokens[:cut] + ["[SEP]"]
        offsets = offsets[:cut] + [(offsets[cut - 1][1], offsets[cut - 1][1])]
    ids = vocab.encode(tokens)
    x = EncodedInput(ids, np.ones(len(ids), dtype=np.int64), np.zeros(len(ids), dtype=np.int64))
    hidden = encode(x, params.encoder, config)
    mask = content_mask(ids, x.input_mask, CLS_ID, SEP_ID)

    def surface(span: Span) -> str:
        return text[offsets[span.start][0] : offsets[span.end][1]]

    triples: list[Triple] = []
    seen: set[tuple[str, str, str]] = set()
    subj_spans = decode_subject_spans(subject_scores(hidden, params), mask, threshold)
    for s_span in sorted(subj_spans, key=lambda sp: (sp.start, sp.end)):
        conditioned = condition_on_subject(hidden, s_span)
        ro = relation_object_scores(conditioned, params)
        for rel, o_span in decode_objects(ro, mask, threshold):
            t = Triple(
                subject=surface(s_span),
                predicate=schema.predicates[rel],
                object=surface(o_span),
                subject_span=s_span,
                object_span=o_span,
            )
            if t.key() not in seen:
                seen.add(t.key())
                triples.append(t)
    return triples


def triples_from_labels(ex, schema: RelationSchema) -> list[Triple]:
    """Decode gold pointer labels back into triples (threshold semantics)."""
    from .data import CLS_ID, SEP_ID

    mask = content_mask(ex.input.input_ids, ex.input.input_mask, CLS_ID, SEP_ID)

    def surface(span: Span) -> str:
        return ex.text[ex.char_offsets[span.start][0] : ex.char_offsets[span.end][1]]

    triples = []
    seen = set()
    for sub in ex.subjects:
        for rel in range(len(schema)):
            for o_span in decode_spans(sub.object_start[:, rel], sub.object_end[:, rel], mask):
                t = Triple(
                    subject=surface(sub.span),
                    predicate=schema.predicates[rel],
                    object=surface(o_span),
                    subject_span=sub.span,
                    object_span=o_span,
                )
                if t.key() not in seen:
                    seen.add(t.key())
                    triples.append(t)
    return triples
