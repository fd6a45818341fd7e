"""Deterministic toy layered transformer.

A small decoder-only transformer with seeded pseudo-random weights (no
training).  The model exists to exercise *systems* behavior, so the one
property that matters above all else is bit-exact determinism:

* identical ``(config, seed)`` pairs produce bit-identical weights,
* evaluating layers ``[0, 6)`` then ``[6, 12)`` is bit-identical to
  evaluating ``[0, 12)`` in one call,
* evaluating a batch of tokens is bit-identical to evaluating the same
  tokens one at a time against the same cache.

To guarantee that, every arithmetic step is float64, attention is computed
per query token over its visible cells gathered in position order (the same
vector/matrix shapes regardless of how the work was batched or split), and
no reduction is ever reordered.  Weights come from a single
``numpy.random.Generator`` backed by **PCG64**, consumed in a fixed
documented order, so rebuilding a model reproduces it exactly.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

SPECULATIVE = "speculative"
NON_SPECULATIVE = "non-speculative"
PREFILL = "prefill"


class ModelError(ValueError):
    """Invalid model configuration or evaluation input."""


@dataclass(frozen=True)
class ModelConfig:
    """Shape and seed of a toy layered model."""

    vocab_size: int = 256
    embed_dim: int = 64
    n_layers: int = 12
    n_heads: int = 1
    max_context: int = 1024
    seed: int = 0

    def validate(self) -> None:
        if self.vocab_size < 2:
            raise ModelError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.n_layers < 1:
            raise ModelError(f"n_layers must be >= 1, got {self.n_layers}")
        if self.embed_dim % self.n_heads != 0:
            raise ModelError(
                f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}"
            )
        if self.max_context < 1:
            raise ModelError("max_context must be positive")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.n_heads


@dataclass(frozen=True)
class BatchToken:
    """One token in a batch: id, absolute position, sequence memberships."""

    token: int
    pos: int
    seqs: frozenset
    want_logits: bool = False


@dataclass(frozen=True)
class Batch:
    """Unit of work fed into a pipeline run.

    Speculative batches hold a chain (or tree) of draft tokens; a
    non-speculative batch carries exactly one already-accepted token.  The
    prompt is fed as a single ``prefill`` batch, which follows the
    non-speculative path but is allowed to hold many tokens.
    """

    tokens: tuple
    kind: str = NON_SPECULATIVE
    run_id: int = -1

    def __post_init__(self):
        if not self.tokens:
            raise ModelError("empty batch")
        if self.kind == NON_SPECULATIVE and len(self.tokens) != 1:
            raise ModelError("non-speculative batches carry exactly one token")
        # Positions must never decrease within a shared sequence: a later
        # batch entry at a lower position would be invisible to gathering.
        last_by_seq: dict = {}
        for t in self.tokens:
            for s in t.seqs:
                prev = last_by_seq.get(s)
                if prev is not None and t.pos <= prev:
                    raise ModelError(
                        f"positions not strictly increasing along sequence {s}"
                    )
                last_by_seq[s] = t.pos

    @property
    def positions(self) -> tuple:
        return tuple(t.pos for t in self.tokens)

    @property
    def logit_indices(self) -> tuple:
        return tuple(i for i, t in enumerate(self.tokens) if t.want_logits)


@dataclass(frozen=True)
class LayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w1: np.ndarray
    w2: np.ndarray


@dataclass(frozen=True)
class LayeredModel:
    """Immutable weight blocks; layer i consumes only layer i-1 output."""

    config: ModelConfig
    embedding: np.ndarray
    pos_table: np.ndarray
    layers: tuple
    w_out: np.ndarray

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(self.embedding.tobytes())
        h.update(self.pos_table.tobytes())
        for lw in self.layers:
            for w in (lw.wq, lw.wk, lw.wv, lw.wo, lw.w1, lw.w2):
                h.update(w.tobytes())
        h.update(self.w_out.tobytes())
        return h.hexdigest()


def _freeze(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


def _position_table(max_context: int, dim: int) -> np.ndarray:
    # Classic sinusoidal encoding: deterministic, no RNG draw.
    pos = np.arange(max_context, dtype=np.float64)[:, None]
    i = np.arange(dim, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, (2.0 * np.floor(i / 2.0)) / dim)
    table = np.where(i % 2 == 0, np.sin(angles), np.cos(angles))
    return table.astype(np.float64)


def build_model(config: ModelConfig) -> LayeredModel:
    """Build seeded weights.  Draw order (PCG64, documented, never reorder):

    embedding, then per layer wq, wk, wv, wo, w1, w2, then w_out.
    """
    config.validate()
    rng = np.random.Generator(np.random.PCG64(config.seed))
    d = config.embed_dim
    hidden = 4 * d
    resid = 1.0 / math.sqrt(2.0 * config.n_layers)

    embedding = _freeze(rng.standard_normal((config.vocab_size, d)))
    pos_table = _freeze(_position_table(config.max_context, d))
    layers = []
    for _ in range(config.n_layers):
        wq = rng.standard_normal((d, d)) / math.sqrt(d)
        wk = rng.standard_normal((d, d)) / math.sqrt(d)
        wv = rng.standard_normal((d, d)) / math.sqrt(d)
        wo = rng.standard_normal((d, d)) / math.sqrt(d) * resid
        w1 = rng.standard_normal((d, hidden)) / math.sqrt(d)
        w2 = rng.standard_normal((hidden, d)) / math.sqrt(hidden) * resid
        layers.append(LayerWeights(*map(_freeze, (wq, wk, wv, wo, w1, w2))))
    w_out = _freeze(rng.standard_normal((d, config.vocab_size)) / math.sqrt(d))
    return LayeredModel(config, embedding, pos_table, tuple(layers), w_out)


def _rmsnorm(v: np.ndarray) -> np.ndarray:
    return v / math.sqrt(float(v @ v) / v.shape[0] + 1e-8)


def _gelu(v: np.ndarray) -> np.ndarray:
    # tanh approximation; fixed formula, no library variance
    return 0.5 * v * (1.0 + np.tanh(0.7978845608028654 * (v + 0.044715 * v * v * v)))


@dataclass
class TreeAttentionMask:
    """Visibility of (query token, cache cell / batch token) pairs.

    Stored as per-token index arrays (cache indices and in-batch indices,
    merged in ascending position order) because that is what evaluation
    consumes; ``cache_matrix``/``batch_matrix`` materialize the boolean
    form.  Rule: a query sees an entry iff the entry's position is strictly
    lower and their sequence sets intersect; every token sees itself.
    """

    n_tokens: int
    n_cells: int
    # per token: merged visibility, each element (source, index) where
    # source 0 = cache cell, 1 = batch token; ascending position order
    order: Optional[list] = None
    # maps view index -> raw cache row (None = identity)
    cache_rows: Optional[np.ndarray] = None
    # per token (sel, cache_rows, batch_rows): sel marks cache entries in the
    # merged order; row arrays index raw cache storage / the batch
    plans: Optional[list] = None

    def gather_plans(self) -> list:
        if self.plans is None:
            plans = []
            for entries in self.order:
                cache_rows = np.fromiter(
                    (j for (src, j) in entries if src == 0), dtype=np.int64
                )
                if self.cache_rows is not None and cache_rows.size:
                    cache_rows = self.cache_rows[cache_rows]
                sel = np.fromiter(
                    (src == 0 for (src, _) in entries), dtype=bool,
                    count=len(entries),
                )
                batch_rows = np.fromiter(
                    (j for (src, j) in entries if src == 1), dtype=np.int64
                )
                plans.append((sel, cache_rows, batch_rows))
            self.plans = plans
        return self.plans

    def visible_counts(self) -> list:
        if self.plans is not None:
            return [sel.size for (sel, _, _) in self.plans]
        return [len(entries) for entries in self.order]

    def cache_matrix(self) -> np.ndarray:
        m = np.zeros((self.n_tokens, self.n_cells), dtype=bool)
        for i, entries in enumerate(self.order):
            for src, j in entries:
                if src == 0:
                    m[i, j] = True
        return m

    def batch_matrix(self) -> np.ndarray:
        m = np.zeros((self.n_tokens, self.n_tokens), dtype=bool)
        for i, entries in enumerate(self.order):
            m[i, i] = True
            for src, j in entries:
                if src == 1:
                    m[i, j] = True
        return m


def build_tree_mask(batch: Batch, cache_view: Sequence) -> TreeAttentionMask:
    """Build the causal, branch-exclusive attention mask.

    ``cache_view`` is an ordered list of ``(position, sequence_set)`` pairs
    describing the live cache cells (metadata is identical across layers, so
    one view serves the whole evaluation).
    """
    n = len(batch.tokens)
    order = []
    for i, tok in enumerate(batch.tokens):
        vis = []
        for j, (cpos, cseqs) in enumerate(cache_view):
            if cpos < tok.pos and not tok.seqs.isdisjoint(cseqs):
                vis.append((cpos, 0, j))
        for j, other in enumerate(batch.tokens):
            if j != i and other.pos < tok.pos and not tok.seqs.isdisjoint(other.seqs):
                vis.append((other.pos, 1, j))
        vis.sort(key=lambda e: (e[0], e[1], e[2]))
        order.append([(src, j) for (_, src, j) in vis])
    rows = getattr(cache_view, "rows", None)
    return TreeAttentionMask(
        n_tokens=n, n_cells=len(cache_view), order=order, cache_rows=rows
    )


def build_mask_from_cache(batch: Batch, cache, layer: Optional[int] = None
                          ) -> TreeAttentionMask:
    """Vectorized mask construction straight off the cache's membership
    bitsets.  Same visibility rule and gather order as ``build_tree_mask``
    over ``cache.snapshot(layer)``, without materializing the metadata.
    """
    layer = cache.layers[0] if layer is None else layer
    n_cells = cache._n[layer]
    pos_arr = cache._pos[layer][:n_cells]
    member = cache._member[layer]
    plans = []
    tokens = batch.tokens
    for i, tok in enumerate(tokens):
        seqs = sorted(tok.seqs)
        if n_cells:
            vis = member[seqs[0], :n_cells].copy()
            for s in seqs[1:]:
                vis |= member[s, :n_cells]
            vis &= pos_arr < tok.pos
            rows = np.where(vis)[0]
        else:
            rows = np.empty(0, dtype=np.int64)
        bsel = [
            j for j, other in enumerate(tokens)
            if j != i and other.pos < tok.pos
            and not tok.seqs.isdisjoint(other.seqs)
        ]
        brows = np.asarray(bsel, dtype=np.int64)
        merged_pos = np.concatenate([pos_arr[rows],
                                     np.fromiter((tokens[j].pos for j in bsel),
                                                 dtype=np.int64, count=len(bsel))])
        order_idx = np.argsort(merged_pos, kind="stable")
        sel = order_idx < rows.size
        idx = np.concatenate([rows, brows])[order_idx]
        plans.append((sel, idx[sel], idx[~sel]))
    return TreeAttentionMask(n_tokens=len(tokens), n_cells=int(n_cells),
                             order=None, plans=plans)


def eval_layers(
    model: LayeredModel,
    layer_range: tuple,
    input_acts: Optional[np.ndarray],
    batch: Batch,
    cache,
    mask: Optional[TreeAttentionMask] = None,
) -> np.ndarray:
    """Evaluate decoder layers ``[lo, hi)`` for a batch.

    If the range starts at layer 0 the input is the token batch itself
    (embedding lookup plus additive position encoding); otherwise
    ``input_acts`` must be the activations produced by the previous range.
    One K/V cell per token per layer in range is inserted into ``cache``,
    tagged with the token's position and sequence set.

    Evaluation is strictly per token so that any split of the layer range,
    and any batching of tokens, is bit-identical to serial evaluation.
    """
    lo, hi = layer_range
    cfg = model.config
    if not (0 <= lo < hi <= cfg.n_layers):
        raise ModelError(f"layer range [{lo},{hi}) outside [0,{cfg.n_layers})")
    n = len(batch.tokens)
    d = cfg.embed_dim

    if lo == 0:
        x = np.empty((n, d), dtype=np.float64)
        for i, tok in enumerate(batch.tokens):
            if not (0 <= tok.token < cfg.vocab_size):
                raise ModelError(f"token id {tok.token} outside vocab")
            if tok.pos >= cfg.max_context:
                raise ModelError(f"position {tok.pos} exceeds max_context")
            x[i] = model.embedding[tok.token] + model.pos_table[tok.pos]
    else:
        if input_acts is None:
            raise ModelError("mid-model range requires input activations")
        if input_acts.shape != (n, d):
            raise ModelError(
                f"activation shape {input_acts.shape} != ({n}, {d})"
            )
        x = np.array(input_acts, dtype=np.float64)

    if mask is None:
        # build from the first layer of this range: earlier ranges of a
        # split evaluation have not inserted this batch's cells there yet
        mask = build_mask_from_cache(batch, cache, lo)

    n_heads = cfg.n_heads
    hd = cfg.head_dim
    scale = 1.0 / math.sqrt(hd)

    # per-token gather plans are shared across layers (and across the calls
    # of a split evaluation): metadata is layer-uniform
    plans = mask.gather_plans()

    for layer in range(lo, hi):
        lw = model.layers[layer]
        k_batch = np.empty((n, d), dtype=np.float64)
        v_batch = np.empty((n, d), dtype=np.float64)
        q_batch = np.empty((n, d), dtype=np.float64)
        for i in range(n):
            h = _rmsnorm(x[i])
            q_batch[i] = h @ lw.wq
            k_batch[i] = h @ lw.wk
            v_batch[i] = h @ lw.wv
        for i, tok in enumerate(batch.tokens):
            cache.insert(layer, tok.pos, tok.seqs, k_batch[i], v_batch[i])
        for i in range(n):
            sel, cache_rows, batch_rows = plans[i]
            m = sel.size
            keys = np.empty((m + 1, d), dtype=np.float64)
            vals = np.empty((m + 1, d), dtype=np.float64)
            if cache_rows.size:
                keys[:m][sel] = cache.keys(layer, cache_rows)
                vals[:m][sel] = cache.values(layer, cache_rows)
            if batch_rows.size:
                keys[:m][~sel] = k_batch[batch_rows]
                vals[:m][~sel] = v_batch[batch_rows]
            keys[m] = k_batch[i]
            vals[m] = v_batch[i]
            attn = np.empty(d, dtype=np.float64)
            for head in range(n_heads):
                s0 = head * hd
                s1 = s0 + hd
                scores = keys[:, s0:s1] @ q_batch[i, s0:s1] * scale
                scores -= scores.max()
                w = np.exp(scores)
                w /= w.sum()
                attn[s0:s1] = w @ vals[:, s0:s1]
            x[i] = x[i] + attn @ lw.wo
            h2 = _rmsnorm(x[i])
            x[i] = x[i] + _gelu(h2 @ lw.w1) @ lw.w2
        if not np.all(np.isfinite(x)):
            raise ModelError(f"non-finite activations after layer {layer}")
    return x


def logits(model: LayeredModel, final_acts: np.ndarray, batch: Batch) -> np.ndarray:
    """Project last-layer activations to vocab logits for flagged tokens.

    Returns one row per flagged token, in batch order.
    """
    idx = batch.logit_indices
    if not idx:
        raise ModelError("no tokens flagged for logits")
    out = np.empty((len(idx), model.config.vocab_size), dtype=np.float64)
    for r, i in enumerate(idx):
        out[r] = _rmsnorm(final_acts[i]) @ model.w_out
    return out


def greedy_sample(vec: np.ndarray) -> int:
    """Argmax with ties broken by lowest token id."""
    vec = np.asarray(vec)
    if np.isnan(vec).any():
        raise ModelError("NaN in logits")
    return int(np.argmax(vec))


def max_softmax(vec: np.ndarray) -> float:
    """Highest softmax probability of a logits vector (draft confidence)."""
    v = np.asarray(vec, dtype=np.float64)
    e = np.exp(v - v.max())
    return float(e.max() / e.sum())


def second_best(vec: np.ndarray) -> int:
    """Token id of the runner-up logit (lowest id on ties)."""
    v = np.array(vec, dtype=np.float64)
    v[greedy_sample(v)] = -np.inf
    return int(np.argmax(v))


class SerialDecoder:
    """Single-context incremental greedy decoder over one model.

    Maintains a private cache covering all layers and feeds tokens one at a
    time; this is the reference path that every pipelined mode must match
    bit for bit, and also the substrate for the draft backends.
    """

    def __init__(self, model: LayeredModel, seq_id: int = 0, n_seq_ids: int = 1):
        from .kvcache import KVCache  # local import: kvcache depends on nothing here

        self.model = model
        self.seq_id = seq_id
        self.cache = KVCache(
            embed_dim=model.config.embed_dim,
            layers=range(model.config.n_layers),
            max_context=model.config.max_context,
            n_seq_ids=max(n_seq_ids, seq_id + 1),
        )
        self.tokens: list = []
        self.tip_logits: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.tokens)

    def feed(self, tokens: Iterable[int]) -> np.ndarray:
        """Append tokens; returns logits at the new tip."""
        toks = list(tokens)
        if not toks:
            if self.tip_logits is None:
                raise ModelError("no tokens fed yet")
            return self.tip_logits
        base = len(self.tokens)
        batch = Batch(
            tokens=tuple(
                BatchToken(t, base + i, frozenset([self.seq_id]), i == len(toks) - 1)
                for i, t in enumerate(toks)
            ),
            kind=PREFILL,
        )
        acts = eval_layers(
            self.model, (0, self.model.config.n_layers), None, batch, self.cache
        )
        self.tokens.extend(toks)
        self.tip_logits = logits(self.model, acts, batch)[0]
        return self.tip_logits

    def truncate(self, length: int) -> None:
        """Drop context beyond ``length`` tokens; tip logits become stale."""
        if length < len(self.tokens):
            self.cache.remove(self.seq_id, length)
            del self.tokens[length:]
            self.tip_logits = None

    def greedy_decode(self, prompt: Sequence, n_tokens: int) -> list:
        """Decode ``n_tokens`` greedily after ``prompt``; returns new tokens."""
        tip = self.feed(prompt)
        out = []
        for _ in range(n_tokens):
            t = greedy_sample(tip)
            out.append(t)
            tip = self.feed([t])
        return out


def reference_decode(config: ModelConfig, prompt: Sequence, n_tokens: int) -> list:
    """Convenience oracle: fresh model + serial greedy decode."""
    return SerialDecoder(build_model(config)).greedy_decode(prompt, n_tokens)


def sample_prompt(seed: int, length: int, vocab_size: int) -> list:
    """Seeded random prompt tokens."""
    rng = np.random.Generator(np.random.PCG64(seed))
    return [int(t) for t in rng.integers(0, vocab_size, size=length)]
