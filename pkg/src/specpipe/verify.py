"""Greedy verification of completed runs and stale-run detection.

A completed run is walked in position order.  Tokens at positions that are
already decided must match the accepted context (a clash means the run
should have been cancelled; treating it as verified would let logits that
were conditioned on rejected tokens leak into the output).  At the frontier
a token is accepted iff it equals the greedy sample of the target logits at
its predecessor position; on the first mismatch that greedy sample itself
becomes the next accepted token, and on a fully matched walk the final
position's logits donate a bonus token.  Either way exactly one fresh token
comes out of every contributing run, which is what keeps the target
pipeline productive.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .model import greedy_sample

SUPERFLUOUS = "superfluous"
INVALID = "invalid"


class VerifyError(RuntimeError):
    pass


@dataclass(frozen=True)
class VerifyResult:
    accepted: tuple          # newly accepted run tokens, in order
    n_accepted: int
    next_token: Optional[int]  # mismatch sample or bonus; None if nothing new
    terminal: bool
    examined: int            # frontier comparisons performed
    mismatch: bool           # walk ended on a frontier mismatch
    matched_end: int = 0     # position after the last matched/accepted run token


def verify_run(
    record,
    logit_rows: np.ndarray,
    accepted: Sequence,
    base_logits: Optional[np.ndarray] = None,
    eos_token: Optional[int] = None,
) -> VerifyResult:
    """Walk a completed run's tokens against the accepted context.

    ``record`` provides ``tokens``, ``min_pos`` and ``logit_slots`` (map
    position -> row in ``logit_rows``).  ``base_logits`` supplies the
    predictor for ``min_pos`` when the predecessor position is not part of
    the run and not yet decided, which never happens in the engine's FIFO
    discipline but is allowed for direct use.
    """
    n_accepted = 0
    newly: List[int] = []
    examined = 0
    pred: Optional[np.ndarray] = None  # logits predicting the next position
    next_token: Optional[int] = None
    mismatch = False
    matched_end = record.min_pos

    def row(pos: int) -> np.ndarray:
        slot = record.logit_slots.get(pos)
        if slot is None:
            raise VerifyError(f"no logits slot for position {pos}")
        return logit_rows[slot]

    for i, tok in enumerate(record.tokens):
        pos = record.min_pos + i
        if pos < len(accepted):
            if tok != accepted[pos]:
                raise VerifyError(
                    f"run {record.run_id} contradicts accepted token at {pos}; "
                    "it should have been invalidated"
                )
            pred = row(pos)
            matched_end = pos + 1
            continue
        if pos == len(accepted):
            if pred is None:
                if base_logits is not None:
                    pred = base_logits
                else:
                    raise VerifyError(
                        f"no predictor available for frontier position {pos}"
                    )
            examined += 1
            want = greedy_sample(pred)
            if tok == want:
                newly.append(tok)
                accepted = list(accepted) + [tok]
                n_accepted += 1
                pred = row(pos)
                matched_end = pos + 1
                if eos_token is not None and tok == eos_token:
                    return VerifyResult(
                        tuple(newly), n_accepted, None, True, examined, False,
                        matched_end,
                    )
                continue
            next_token = want
            mismatch = True
            break
        raise VerifyError(f"gap before position {pos}; protocol violation")

    if not mismatch and next_token is None:
        # fully matched walk; bonus only if the final slot predicts the frontier
        last_pos = record.min_pos + len(record.tokens) - 1
        if pred is not None and last_pos + 1 == len(accepted):
            next_token = greedy_sample(pred)

    terminal = (
        eos_token is not None
        and next_token is not None
        and next_token == eos_token
    )
    return VerifyResult(
        tuple(newly), n_accepted, next_token, terminal, examined, mismatch,
        matched_end,
    )


def detect_stale_runs(
    fifo: Sequence,
    accepted: Sequence,
) -> List[Tuple[object, str]]:
    """Classify in-flight runs against the current accepted tokens.

    Superfluous: every position the run covers is already decided, so its
    logits can no longer feed the frontier.  Invalid: the run's token chain
    (its own tokens plus the unverified context it was built on) contradicts
    an accepted token, so nothing it carries can ever be accepted.
    """
    last_pos = len(accepted) - 1
    out = []
    for rec in fifo:
        if rec.status != "in-flight":
            continue
        bad = False
        if rec.kind != "non-speculative":
            for pos, tok in rec.chain():
                if pos < len(accepted) and tok != accepted[pos]:
                    bad = True
                    break
        if bad:
            out.append((rec, INVALID))
        elif rec.max_pos < last_pos:
            out.append((rec, SUPERFLUOUS))
    return out


def apply_acceptance(
    result: VerifyResult,
    record,
    emit: Callable[[str, tuple], None],
    live_sequences: Sequence,
) -> None:
    """Emit the pipelined cache commands that commit a verified run.

    Accepted entries are copied from the run's partition to the canonical
    sequence and every live partition (up to the last accepted position + 1,
    metadata only), then the partition's membership is removed everywhere,
    which both discards rejected entries and frees the partition.
    """
    seq = record.seq_id
    if seq == 0:
        return
    if result.matched_end > record.min_pos:
        # the matched prefix may include tokens accepted earlier as bonus
        # samples, whose only cells live in this partition; the canonical
        # sequence needs those too
        dsts = tuple(sorted({0, *live_sequences} - {seq}))
        emit("copy", (seq, dsts, result.matched_end))
    emit("remove", (seq, 0))
