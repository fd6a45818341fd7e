"""Draft-side speculation: microbatch generation and cutoff adaptation.

The draft proposes greedy continuations in micro-batches of 1..4 tokens,
stopping as soon as its confidence (highest softmax probability of the next
token) falls below the current cutoff.  The cutoff rises a little with each
consecutive micro-batch and falls a little when speculation idles, so the
amount of in-flight speculation adapts to how the pipeline is keeping up.

Two backends:

* ``ToyDraft`` -- an actual small model (fewer layers, its own seed), so
  alignment with the target is whatever it happens to be.
* ``SyntheticDraft`` -- emits the target's true greedy token with seeded
  probability alpha, else the runner-up token, and always reports
  confidence alpha.  This pins the acceptance rate for controlled
  experiments.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .model import (
    LayeredModel,
    SerialDecoder,
    greedy_sample,
    max_softmax,
    second_best,
)


class SpeculationError(RuntimeError):
    pass


class DraftBackend:
    """Incremental proposer interface.

    ``confidence()`` scores the next token before committing to it;
    ``emit()`` commits it (extending the backend's own context);
    ``feed``/``truncate`` keep the context in sync with verification.
    """

    tokens: List[int]

    def confidence(self) -> float:
        raise NotImplementedError

    def emit(self) -> int:
        raise NotImplementedError

    def feed(self, tokens: Sequence) -> None:
        raise NotImplementedError

    def truncate(self, length: int) -> None:
        raise NotImplementedError

    def __len__(self) -> int:
        return len(self.tokens)


class ToyDraft(DraftBackend):
    """Greedy proposals from a small layered model."""

    def __init__(self, draft_model: LayeredModel):
        self.model = draft_model
        self._dec = SerialDecoder(draft_model)

    @property
    def tokens(self) -> List[int]:
        return self._dec.tokens

    @property
    def max_context(self) -> int:
        return self.model.config.max_context

    def confidence(self) -> float:
        if self._dec.tip_logits is None:
            raise SpeculationError("draft has no context yet")
        return max_softmax(self._dec.tip_logits)

    def emit(self) -> int:
        tok = greedy_sample(self._dec.tip_logits)
        self._dec.feed([tok])
        return tok

    def feed(self, tokens: Sequence) -> None:
        if tokens:
            self._dec.feed(tokens)

    def truncate(self, length: int) -> None:
        self._dec.truncate(length)


class SyntheticDraft(DraftBackend):
    """Alpha-controlled proposer wrapping the target model.

    Tracks the target's own greedy continuation of the current context with
    a private decoder, emits it with probability alpha (seeded draw per
    emission), else the second-best token.  Confidence is the constant
    alpha, which makes cutoff behavior fully predictable.
    """

    def __init__(self, target_model: LayeredModel, alpha: float, seed: int):
        if not (0.0 <= alpha <= 1.0):
            raise SpeculationError(f"alpha must be in [0,1], got {alpha}")
        self.alpha = float(alpha)
        self._dec = SerialDecoder(target_model)
        self._rng = np.random.Generator(np.random.PCG64(seed))

    @property
    def tokens(self) -> List[int]:
        return self._dec.tokens

    @property
    def max_context(self) -> int:
        return self._dec.model.config.max_context

    def confidence(self) -> float:
        if self._dec.tip_logits is None:
            raise SpeculationError("draft has no context yet")
        return self.alpha

    def emit(self) -> int:
        tip = self._dec.tip_logits
        best = greedy_sample(tip)
        tok = best if self._rng.random() < self.alpha else second_best(tip)
        self._dec.feed([tok])
        return tok

    def feed(self, tokens: Sequence) -> None:
        if tokens:
            self._dec.feed(tokens)

    def truncate(self, length: int) -> None:
        self._dec.truncate(length)


@dataclass
class CutoffController:
    """Confidence cutoff with recovery and decay, clamped to [0, 1]."""

    base: float = 0.4
    recovery: float = 0.05
    decay: float = 0.05
    current: float = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if not (0.0 <= self.base <= 1.0):
            raise SpeculationError(f"cutoff must be in [0,1], got {self.base}")
        if self.recovery < 0 or self.decay < 0:
            raise SpeculationError("recovery and decay factors must be >= 0")
        if self.current is None:
            self.current = self.base

    def note_success(self) -> None:
        """One continuous-speculation iteration produced a micro-batch."""
        self.current = min(1.0, self.current + self.recovery)

    def on_run_accepted(self) -> None:
        """Reset to the base cutoff when a completed run is accepted."""
        self.current = self.base

    def on_speculation_idle(self) -> None:
        """Speculation came up empty and no logits are waiting."""
        self.current = max(0.0, self.current - self.decay)


@dataclass
class SpeculationState:
    """Draft handle plus cutoff state and micro-batch cap."""

    backend: DraftBackend
    cutoff: CutoffController
    microbatch: int = 4

    def __post_init__(self):
        if not (1 <= self.microbatch <= 4):
            raise SpeculationError("microbatch cap must be within [1, 4]")


def speculate_microbatch(
    state: SpeculationState,
    context_tail: Optional[Sequence] = None,
    max_tokens: Optional[int] = None,
) -> List[Tuple[int, float]]:
    """Emit up to ``m`` greedy tokens while confidence >= current cutoff.

    Returns ``[]`` (Empty) if the first candidate already falls below the
    cutoff.  ``context_tail``, when given, is the accepted token list the
    draft context must be consistent with; any divergence is rolled back
    first.
    """
    if context_tail is not None:
        rollback_draft(state, context_tail)
    backend = state.backend
    m = state.microbatch if max_tokens is None else max_tokens
    out: List[Tuple[int, float]] = []
    limit = getattr(backend, "max_context", None)
    for _ in range(m):
        if limit is not None and len(backend) >= limit:
            raise SpeculationError("draft context overflow")
        conf = backend.confidence()
        if conf < state.cutoff.current:
            break
        tok = backend.emit()
        out.append((tok, conf))
    return out


def rollback_draft(state: SpeculationState, accepted_tokens: Sequence) -> None:
    """Correct the draft context after verification.

    The draft keeps any speculative extension that is still consistent with
    the accepted tokens; on divergence it truncates to the divergence point
    and re-feeds the corrected suffix (refreshing its tip logits).
    """
    sync_backend(state.backend, accepted_tokens)


def sync_backend(backend: DraftBackend, accepted_tokens: Sequence) -> None:
    have = backend.tokens
    want = list(accepted_tokens)
    cp = 0
    for a, b in zip(have, want):
        if a != b:
            break
        cp += 1
    if cp < len(have) and cp < len(want):
        backend.truncate(cp)
        backend.feed(want[cp:])
    elif len(want) > len(have):
        backend.feed(want[len(have):])
    # else: accepted is a prefix of the draft context; extensions survive
