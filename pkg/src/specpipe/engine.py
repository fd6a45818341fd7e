"""Pipeline orchestration: layer-split planning, head loop, workers, modes.

One simulated cluster runs a head controller (speculation, verification,
sampling and cancellation decisions, all serialized), a chain of stage
workers each evaluating a contiguous layer range, and -- in the speculative
modes -- one node dedicated to the draft model.  The controller is
co-located with stage worker 1 (their link is free), mirroring a head node
that also owns the first layer range.

Four modes share this substrate:

* ``iterative``            -- single node, one token per full pass
* ``pipeline-iterative``   -- all nodes in the target pipeline, still one
                              token in flight at a time
* ``sync-speculative``     -- draft builds a tree (capped at 4 tokens), the
                              target verifies it, strictly alternating
* ``async-speculative``    -- continuous asynchronous speculation with
                              multibuffered cache partitions and early
                              cancellation; disabling ``continuous`` limits
                              it to a single tree per acceptance round

All four produce byte-identical token output for the same model and prompt;
they differ only in timing, which is the entire point.
"""

from __future__ import annotations

import hashlib
from collections import deque
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .kvcache import KVCache, SequenceAllocator
from .model import (
    Batch,
    BatchToken,
    LayeredModel,
    ModelConfig,
    NON_SPECULATIVE,
    PREFILL,
    SPECULATIVE,
    build_mask_from_cache,
    build_model,
    eval_layers,
    greedy_sample,
    logits as project_logits,
    sample_prompt,
)
from .sim import Sleep, VirtualExecutor, WallExecutor
from .speculation import (
    CutoffController,
    DraftBackend,
    SpeculationState,
    SyntheticDraft,
    ToyDraft,
    speculate_microbatch,
)
from .transport import LinkProfile, Network, ProtocolError, Tag
from .verify import INVALID, apply_acceptance, detect_stale_runs, verify_run

MODES = ("iterative", "pipeline-iterative", "sync-speculative", "async-speculative")

IN_FLIGHT = "in-flight"
COMPLETED = "completed"
CANCELLED_INVALID = "cancelled-invalid"
CANCELLED_SUPERFLUOUS = "cancelled-superfluous"
DRAINED = "drained"


class EngineError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentConfig:
    """Fully specifies one deterministic experiment."""

    mode: str = "async-speculative"
    nodes: int = 8
    vocab_size: int = 256
    embed_dim: int = 64
    target_layers: int = 12
    draft_layers: int = 2
    draft_embed_dim: int = 64
    n_heads: int = 1
    max_context: int = 1024
    target_seed: int = 1
    draft_seed: int = 2
    draft_backend: str = "toy"          # "toy" | "synthetic"
    alpha: float = 0.8                  # synthetic draft alignment
    cutoff: float = 0.4                 # base confidence cutoff
    cutoff_recovery: float = 0.05
    cutoff_decay: float = 0.05
    microbatch: int = 4
    tree_cap: int = 4                   # sync-speculative tree size
    continuous: bool = True
    partitions: int = 8
    prompt_seed: int = 1234
    prompt_len: int = 128
    gen_len: int = 512
    clock: str = "virtual"              # "virtual" | "wall"
    repetitions: int = 1
    per_layer_delay: float = 1e-3
    link_latency: float = 1e-5
    per_byte_delay: float = 0.0
    draft_token_delay: float = 5e-4
    idle_poll: float = 1e-4
    eos_token: Optional[int] = None
    node_weights: Optional[Tuple[int, ...]] = None

    def validate(self) -> None:
        if self.mode not in MODES:
            raise EngineError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.clock not in ("virtual", "wall"):
            raise EngineError(f"unknown clock {self.clock!r}")
        if self.draft_backend not in ("toy", "synthetic"):
            raise EngineError(f"unknown draft backend {self.draft_backend!r}")
        if not (0.0 <= self.alpha <= 1.0):
            raise EngineError("alpha must be in [0, 1]")
        if self.nodes < 1:
            raise EngineError("need at least one node")
        if self.mode in ("sync-speculative", "async-speculative") and self.nodes < 2:
            raise EngineError(f"{self.mode} needs >= 2 nodes (one is the draft node)")
        if not (1 <= self.microbatch <= 4):
            raise EngineError("microbatch must be within [1, 4]")
        if self.tree_cap < 1:
            raise EngineError("tree_cap must be >= 1")
        if self.partitions < 2:
            raise EngineError("partitions must be >= 2")
        if self.gen_len < 1 or self.prompt_len < 1:
            raise EngineError("prompt_len and gen_len must be >= 1")
        if self.prompt_len + self.gen_len > self.max_context:
            raise EngineError("prompt_len + gen_len exceeds max_context")
        if self.idle_poll <= 0:
            raise EngineError("idle_poll must be > 0 (prevents zero-time spinning)")
        if self.repetitions < 1:
            raise EngineError("repetitions must be >= 1")
        self.target_config().validate()
        if self.uses_draft() and self.draft_backend == "toy":
            self.draft_config().validate()

    def uses_draft(self) -> bool:
        return self.mode in ("sync-speculative", "async-speculative")

    def target_config(self) -> ModelConfig:
        return ModelConfig(
            vocab_size=self.vocab_size,
            embed_dim=self.embed_dim,
            n_layers=self.target_layers,
            n_heads=self.n_heads,
            max_context=self.max_context,
            seed=self.target_seed,
        )

    def draft_config(self) -> ModelConfig:
        return ModelConfig(
            vocab_size=self.vocab_size,
            embed_dim=self.draft_embed_dim,
            n_layers=self.draft_layers,
            n_heads=self.n_heads,
            max_context=self.max_context,
            seed=self.draft_seed,
        )

    def n_stages(self) -> int:
        if self.mode == "iterative":
            return 1
        if self.uses_draft():
            return self.nodes - 1
        return self.nodes

    def profile(self) -> LinkProfile:
        return LinkProfile(
            per_byte_delay=self.per_byte_delay,
            msg_latency=self.link_latency,
            per_layer_delay=self.per_layer_delay,
        )


def plan_layer_split(
    n_layers: int,
    n_nodes: int,
    node_speed_weights: Optional[Sequence[float]] = None,
) -> List[Tuple[int, int]]:
    """Contiguous per-node layer ranges, proportional to speed weights.

    Equal weights by default; fractional remainders go to the earliest
    nodes.  Every node must end up with at least one layer.
    """
    if n_nodes < 1:
        raise EngineError("need at least one node")
    if n_layers < n_nodes:
        raise EngineError(f"{n_layers} layers cannot cover {n_nodes} nodes")
    if node_speed_weights is None:
        weights = [1.0] * n_nodes
    else:
        weights = [float(w) for w in node_speed_weights]
        if len(weights) != n_nodes:
            raise EngineError("need one speed weight per node")
        if any(w <= 0 for w in weights):
            raise EngineError("speed weights must be positive")
    total = sum(weights)
    exact = [n_layers * w / total for w in weights]
    sizes = [int(x) for x in exact]
    for i in range(n_nodes):
        if sum(sizes) == n_layers:
            break
        sizes[i] += 1
    if sum(sizes) != n_layers:
        raise EngineError("layer split does not cover the model")
    if any(s < 1 for s in sizes):
        raise EngineError("weights leave some node without a layer")
    ranges = []
    lo = 0
    for s in sizes:
        ranges.append((lo, lo + s))
        lo += s
    return ranges


# ---------------------------------------------------------------------------
# wire payloads
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RunConfigPayload:
    run_id: int
    kind: str
    tokens: tuple
    positions: tuple
    seq_sets: tuple          # tuple of tuples of sequence ids
    logit_flags: tuple

    @property
    def nbytes(self) -> int:
        return 24 + 24 * len(self.tokens) + 8 * sum(len(s) for s in self.seq_sets)

    def to_batch(self) -> Batch:
        toks = tuple(
            BatchToken(t, p, frozenset(s), bool(f))
            for t, p, s, f in zip(
                self.tokens, self.positions, self.seq_sets, self.logit_flags
            )
        )
        return Batch(tokens=toks, kind=self.kind, run_id=self.run_id)


@dataclass(frozen=True)
class ActivationPayload:
    run_id: int
    array: Optional[np.ndarray]
    placeholder: bool = False

    @property
    def nbytes(self) -> int:
        return 16 + (0 if self.array is None else self.array.nbytes)


@dataclass(frozen=True)
class LogitsPayload:
    run_id: int
    rows: Optional[np.ndarray]
    placeholder: bool = False

    @property
    def nbytes(self) -> int:
        return 16 + (0 if self.rows is None else self.rows.nbytes)


@dataclass(frozen=True)
class CacheCopyPayload:
    src: int
    dsts: tuple
    end_pos: int

    @property
    def nbytes(self) -> int:
        return 24 + 8 * len(self.dsts)


@dataclass(frozen=True)
class CacheRemovePayload:
    seq: int
    from_pos: int

    @property
    def nbytes(self) -> int:
        return 24


@dataclass(frozen=True)
class CancelPayload:
    run_id: int

    @property
    def nbytes(self) -> int:
        return 16


@dataclass(frozen=True)
class ShutdownPayload:
    @property
    def nbytes(self) -> int:
        return 8


@dataclass(frozen=True)
class DraftRequestPayload:
    truncate_to: int
    feed: tuple
    max_tokens: int
    cutoff: float

    @property
    def nbytes(self) -> int:
        return 32 + 8 * len(self.feed)


@dataclass(frozen=True)
class DraftReplyPayload:
    tokens: tuple
    confidences: tuple

    @property
    def nbytes(self) -> int:
        return 8 + 16 * len(self.tokens)


# ---------------------------------------------------------------------------
# run records
# ---------------------------------------------------------------------------

@dataclass
class RunRecord:
    """Head-side tracking state for one in-flight pipeline run."""

    run_id: int
    kind: str
    tokens: tuple
    min_pos: int
    max_pos: int
    seq_id: int
    logit_slots: Dict[int, int]
    basis: tuple = ()        # unverified (pos, token) context the run builds on
    status: str = IN_FLIGHT
    launch_time: float = 0.0
    judged: int = 0          # own tokens whose accept/reject fate is recorded

    def chain(self):
        """Basis plus own tokens, as (position, token) pairs."""
        for pos, tok in self.basis:
            yield pos, tok
        for i, tok in enumerate(self.tokens):
            yield self.min_pos + i, tok


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

@dataclass
class RunMetrics:
    mode: str
    clock: str
    tokens_generated: int
    duration: float
    generation_speed: float
    ttft: float
    itl: float
    acceptance_rate: float
    examined: int
    matched: int
    runs_started: int
    spec_runs: int
    cancelled_invalid: int
    cancelled_superfluous: int
    cancelled_runs: int
    drained_runs: int
    alloc_stalls: int
    inflight_mean: float
    bytes_by_tag: Dict[str, int]
    msgs_by_tag: Dict[str, int]
    token_checksum: str
    virtual_end: float
    wall_seconds: float

    def to_dict(self, include_wall: bool = True) -> dict:
        d = {
            "mode": self.mode,
            "clock": self.clock,
            "tokens_generated": self.tokens_generated,
            "duration": self.duration,
            "generation_speed": self.generation_speed,
            "ttft": self.ttft,
            "itl": self.itl,
            "acceptance_rate": self.acceptance_rate,
            "examined": self.examined,
            "matched": self.matched,
            "runs_started": self.runs_started,
            "spec_runs": self.spec_runs,
            "cancelled_invalid": self.cancelled_invalid,
            "cancelled_superfluous": self.cancelled_superfluous,
            "cancelled_runs": self.cancelled_runs,
            "drained_runs": self.drained_runs,
            "alloc_stalls": self.alloc_stalls,
            "inflight_mean": self.inflight_mean,
            "bytes_by_tag": dict(sorted(self.bytes_by_tag.items())),
            "msgs_by_tag": dict(sorted(self.msgs_by_tag.items())),
            "token_checksum": self.token_checksum,
            "virtual_end": self.virtual_end,
        }
        if include_wall:
            d["wall_seconds"] = self.wall_seconds
        return d


@dataclass
class CancelLogEntry:
    run_id: int
    reason: str
    kind: str
    min_pos: int
    max_pos: int
    accepted_len_at_cancel: int
    chain: tuple             # ((pos, token), ...) basis plus own tokens


@dataclass
class SimResult:
    tokens: List[int]        # generated output, prompt excluded
    metrics: RunMetrics
    accepted_full: List[int]  # prompt + generated (diagnostics)
    accept_events: List[Tuple[float, int]]
    cancel_log: List[CancelLogEntry]
    node_logs: Dict[int, list]
    consumed: Dict[Tuple[int, str], int]
    sent: Dict[Tuple[int, str], int]
    records: List[RunRecord]


def token_checksum(tokens: Sequence) -> str:
    return hashlib.sha256(",".join(str(t) for t in tokens).encode()).hexdigest()


class _InflightTracker:
    def __init__(self):
        self.steps: List[Tuple[float, int]] = [(0.0, 0)]

    def update(self, t: float, n: int) -> None:
        self.steps.append((t, n))

    def mean(self, start: float, end: float) -> float:
        if end <= start:
            return 0.0
        total = 0.0
        for (t0, n), (t1, _) in zip(self.steps, self.steps[1:] + [(end, 0)]):
            a = max(t0, start)
            b = min(t1, end)
            if b > a:
                total += n * (b - a)
        return total / (end - start)


# ---------------------------------------------------------------------------
# worker node
# ---------------------------------------------------------------------------

class _Worker:
    """One pipeline stage: evaluates a contiguous layer range in txn order."""

    def __init__(self, node_id, prev_id, next_id, net, model, layer_range,
                 cfg: ExperimentConfig, controller_id=0):
        self.node = node_id
        self.prev = prev_id
        self.next = next_id
        self.net = net
        self.model = model
        self.lo, self.hi = layer_range
        self.cfg = cfg
        self.controller = controller_id
        self.cache = KVCache(
            embed_dim=model.config.embed_dim,
            layers=range(self.lo, self.hi),
            max_context=model.config.max_context,
            n_seq_ids=cfg.partitions,
        )
        self.runs: Dict[int, RunConfigPayload] = {}
        self.cancelled: set = set()
        self.log: list = []

    def _drain_cancels(self) -> None:
        for payload in self.net.poll_cancel(self.node):
            self.cancelled.add(payload.run_id)

    def _forward_txn(self, tag: Tag, params, body=None):
        if self.next is not None:
            self.net.send_txn(self.node, self.next, tag, params, body)

    def handlers(self) -> dict:
        return {
            Tag.RUN_CONFIG: self._on_run_config,
            Tag.ACTIVATIONS: self._on_activations,
            Tag.CACHE_COPY: self._on_cache_copy,
            Tag.CACHE_REMOVE: self._on_cache_remove,
            Tag.SHUTDOWN: self._on_shutdown,
        }

    def proc(self):
        yield from self.net.dispatch_loop(self.node, self.prev, self.handlers())

    def _on_run_config(self, params: RunConfigPayload):
        self.log.append(("run-config", params.run_id))
        self.runs[params.run_id] = params
        self._forward_txn(Tag.RUN_CONFIG, params)
        return
        yield  # pragma: no cover  (generator handler with no blocking ops)

    def _on_cache_copy(self, params: CacheCopyPayload):
        self.log.append(("cache-copy", params.src, params.dsts, params.end_pos))
        self.cache.copy(params.src, params.dsts, params.end_pos)
        self._forward_txn(Tag.CACHE_COPY, params)
        return
        yield  # pragma: no cover

    def _on_cache_remove(self, params: CacheRemovePayload):
        self.log.append(("cache-remove", params.seq, params.from_pos))
        self.cache.remove(params.seq, params.from_pos)
        self._forward_txn(Tag.CACHE_REMOVE, params)
        return
        yield  # pragma: no cover

    def _on_shutdown(self, params):
        self.log.append(("shutdown",))
        self._forward_txn(Tag.SHUTDOWN, params)
        self._drain_cancels()
        return
        yield  # pragma: no cover

    def _send_placeholders(self, run_id: int) -> None:
        if self.next is not None:
            self._forward_txn(
                Tag.ACTIVATIONS, run_id, ActivationPayload(run_id, None, True)
            )
        else:
            self.net.send(
                self.node, self.controller, Tag.LOGITS,
                LogitsPayload(run_id, None, True),
            )

    def _purge(self, meta: RunConfigPayload) -> None:
        # cells a cancelled speculative run wrote under its partition
        for seqs in meta.seq_sets:
            for s in seqs:
                if s != 0:
                    self.cache.remove(s, 0)

    def _on_activations(self, run_id: int):
        msg = yield from self.net.recv(self.node, self.prev, Tag.ACTIVATIONS)
        body: ActivationPayload = msg.payload
        if body.run_id != run_id:
            raise ProtocolError(
                f"activation body for run {body.run_id} under start {run_id}"
            )
        meta = self.runs.pop(run_id, None)
        if meta is None:
            raise ProtocolError(f"activations for unknown run {run_id}")
        self._drain_cancels()
        speculative = meta.kind == SPECULATIVE

        if body.placeholder:
            # upstream already skipped this run; keep the message pattern intact
            self.log.append(("placeholder-through", run_id))
            self._send_placeholders(run_id)
            return
        if run_id in self.cancelled and speculative:
            self.log.append(("skip-cancelled", run_id))
            self._purge(meta)
            self._send_placeholders(run_id)
            return

        batch = meta.to_batch()
        n = len(batch.tokens)
        mask = build_mask_from_cache(batch, self.cache)
        self._check_coverage(batch, mask)
        x = body.array
        evaluated = 0
        per_layer = self.cfg.per_layer_delay * n
        for layer in range(self.lo, self.hi):
            yield Sleep(per_layer)
            x = eval_layers(
                self.model, (layer, layer + 1),
                None if layer == 0 else x,
                batch, self.cache, mask,
            )
            evaluated += 1
            if layer + 1 < self.hi:
                self._drain_cancels()
                if run_id in self.cancelled and speculative:
                    # stop mid-run; placeholder keeps downstream state intact
                    self.log.append(("abandon", run_id, evaluated))
                    positions = [t.pos for t in batch.tokens]
                    for skipped in range(layer + 1, self.hi):
                        self.cache.pad_dead(skipped, positions)
                    self._purge(meta)
                    self._send_placeholders(run_id)
                    return
        self.log.append(("evaluated", run_id, evaluated))
        if self.next is not None:
            self._forward_txn(
                Tag.ACTIVATIONS, run_id, ActivationPayload(run_id, x, False)
            )
        else:
            rows = project_logits(self.model, x, batch)
            self.net.send(
                self.node, self.controller, Tag.LOGITS,
                LogitsPayload(run_id, rows, False),
            )

    def _check_coverage(self, batch: Batch, mask) -> None:
        # engine batches are chains: every token must see exactly [0, pos)
        counts = mask.visible_counts()
        for i, tok in enumerate(batch.tokens):
            if counts[i] != tok.pos:
                raise ProtocolError(
                    f"node {self.node} run {batch.run_id}: token at position "
                    f"{tok.pos} sees {counts[i]} cells, expected {tok.pos}"
                )


# ---------------------------------------------------------------------------
# draft node
# ---------------------------------------------------------------------------

class _DraftNode:
    """Dedicated speculation node: keeps the draft context, serves requests."""

    def __init__(self, node_id, net, backend: DraftBackend, cfg: ExperimentConfig,
                 controller_id=0):
        self.node = node_id
        self.net = net
        self.backend = backend
        self.cfg = cfg
        self.controller = controller_id
        self.log: list = []

    def proc(self):
        yield from self.net.dispatch_loop(self.node, self.controller, {
            Tag.DRAFT_REQUEST: self._on_request,
            Tag.SHUTDOWN: self._on_shutdown,
        })

    def _on_shutdown(self, params):
        self.log.append(("shutdown",))
        return
        yield  # pragma: no cover

    def _on_request(self, req: DraftRequestPayload):
        if req.truncate_to < len(self.backend):
            self.backend.truncate(req.truncate_to)
        if req.feed:
            self.backend.feed(req.feed)
            yield Sleep(self.cfg.draft_token_delay * len(req.feed))
        room = self.cfg.max_context - len(self.backend)
        budget = max(0, min(req.max_tokens, room))
        props: List[Tuple[int, float]] = []
        if budget > 0:
            state = SpeculationState(
                backend=self.backend,
                cutoff=CutoffController(base=req.cutoff, recovery=0.0, decay=0.0),
                microbatch=1,
            )
            props = speculate_microbatch(state, max_tokens=budget)
            if props:
                yield Sleep(self.cfg.draft_token_delay * len(props))
        self.log.append(("served", len(req.feed), len(props)))
        self.net.send(
            self.node, self.controller, Tag.DRAFT_REPLY,
            DraftReplyPayload(
                tokens=tuple(t for t, _ in props),
                confidences=tuple(c for _, c in props),
            ),
        )


# ---------------------------------------------------------------------------
# head controller
# ---------------------------------------------------------------------------

class _Controller:
    """Sampling, verification, speculation and cancellation decisions."""

    NODE = 0

    def __init__(self, cfg: ExperimentConfig, net: Network, executor,
                 n_stages: int, draft_id: Optional[int], prompt: List[int]):
        self.cfg = cfg
        self.net = net
        self.ex = executor
        self.first_stage = 1
        self.last_stage = n_stages
        self.worker_ids = list(range(1, n_stages + 1))
        self.draft_id = draft_id
        self.prompt = prompt

        self.accepted: List[int] = list(prompt)
        self.run_counter = 0
        self.fifo: deque = deque()
        self.allocator = SequenceAllocator(cfg.partitions)
        self.cutoff = CutoffController(
            base=cfg.cutoff, recovery=cfg.cutoff_recovery, decay=cfg.cutoff_decay
        )
        self.pending: List[Tuple[int, int]] = []   # unverified chain (pos, token)
        self.pending_tip_seq = 0
        self.mirror: List[int] = []                # draft node context mirror
        self.request_ctx: Optional[List[int]] = None
        self.draft_busy = False
        self.spec_since_round = 0
        self.idle_until = 0.0
        self.generated = 0
        self.terminal = False

        self.window_start = 0.0
        self.accept_events: List[Tuple[float, int]] = []
        self.examined = 0
        self.matched = 0
        self.runs_started = 0
        self.spec_runs = 0
        self.cancelled_invalid = 0
        self.cancelled_superfluous = 0
        self.drained_runs = 0
        self.alloc_stalls = 0
        self._stalled = False
        self.inflight = _InflightTracker()
        self.cancel_log: List[CancelLogEntry] = []
        self.records: List[RunRecord] = []

    # -- low-level helpers -------------------------------------------------

    def _next_run_id(self) -> int:
        self.run_counter += 1
        return self.run_counter

    def _launch(self, batch: Batch, seq_id: int, basis: tuple = ()) -> RunRecord:
        rec = RunRecord(
            run_id=batch.run_id,
            kind=batch.kind,
            tokens=tuple(t.token for t in batch.tokens),
            min_pos=batch.tokens[0].pos,
            max_pos=batch.tokens[-1].pos,
            seq_id=seq_id,
            logit_slots={
                batch.tokens[i].pos: slot
                for slot, i in enumerate(batch.logit_indices)
            },
            basis=basis,
            launch_time=self.ex.now(),
        )
        cfgmsg = RunConfigPayload(
            run_id=batch.run_id,
            kind=batch.kind,
            tokens=tuple(t.token for t in batch.tokens),
            positions=tuple(t.pos for t in batch.tokens),
            seq_sets=tuple(tuple(sorted(t.seqs)) for t in batch.tokens),
            logit_flags=tuple(t.want_logits for t in batch.tokens),
        )
        self.net.send_txn(self.NODE, self.first_stage, Tag.RUN_CONFIG, cfgmsg)
        self.net.send_txn(
            self.NODE, self.first_stage, Tag.ACTIVATIONS, batch.run_id,
            ActivationPayload(batch.run_id, None, False),
        )
        self.fifo.append(rec)
        self.records.append(rec)
        self.runs_started += 1
        if batch.kind == SPECULATIVE:
            self.spec_runs += 1
        self.inflight.update(self.ex.now(), len(self.fifo))
        return rec

    def _emit_copy(self, src: int, dsts: Sequence, end_pos: int) -> None:
        if dsts:
            self.net.send_txn(
                self.NODE, self.first_stage, Tag.CACHE_COPY,
                CacheCopyPayload(src, tuple(sorted(dsts)), end_pos),
            )

    def _emit_remove(self, seq: int, from_pos: int) -> None:
        self.net.send_txn(
            self.NODE, self.first_stage, Tag.CACHE_REMOVE,
            CacheRemovePayload(seq, from_pos),
        )

    def _accept(self, tok: int) -> None:
        """Append one verified/sampled token; acceptance timestamps drive
        every latency metric."""
        if self.generated >= self.cfg.gen_len or self.terminal:
            return
        self.accepted.append(tok)
        self.generated += 1
        self.accept_events.append((self.ex.now(), tok))
        if self.cfg.eos_token is not None and tok == self.cfg.eos_token:
            self.terminal = True

    def _judge_walked(self, rec: RunRecord, result) -> None:
        """Acceptance-rate accounting for a verified speculative run.

        Every draft token is judged exactly once: a matched token counts
        whether it was confirmed at the frontier or against an
        already-accepted position, and a walk that ends on a mismatch
        charges that token as rejected.
        """
        if rec.kind != SPECULATIVE:
            return
        ok = result.matched_end - rec.min_pos
        adjudicated = ok + (1 if result.mismatch else 0)
        self.matched += max(0, ok - rec.judged)
        self.examined += max(0, adjudicated - rec.judged)
        rec.judged = max(rec.judged, adjudicated)

    def _judge_cancelled(self, rec: RunRecord) -> None:
        """Judge whatever a cancelled run's tokens can be judged against.

        Tokens drafted on top of a rejected chain prefix say nothing about
        draft alignment, so once the basis diverges nothing more is counted.
        """
        if rec.kind != SPECULATIVE:
            return
        for pos, tok in rec.basis:
            if pos < len(self.accepted) and tok != self.accepted[pos]:
                return
        i = rec.judged
        while i < len(rec.tokens):
            pos = rec.min_pos + i
            if pos >= len(self.accepted):
                break
            self.examined += 1
            if rec.tokens[i] == self.accepted[pos]:
                self.matched += 1
                i += 1
            else:
                i += 1
                break
        rec.judged = i

    def _recv_logits(self):
        msg = yield from self.net.recv(self.NODE, self.last_stage, Tag.LOGITS)
        return msg.payload

    def _pop_record(self, payload: LogitsPayload) -> RunRecord:
        if not self.fifo:
            raise ProtocolError(f"logits for run {payload.run_id} with empty FIFO")
        rec = self.fifo.popleft()
        if rec.run_id != payload.run_id:
            raise ProtocolError(
                f"logits out of order: got run {payload.run_id}, "
                f"expected {rec.run_id}"
            )
        self.inflight.update(self.ex.now(), len(self.fifo))
        return rec

    # -- prefill -------------------------------------------------------------

    def _prefill(self):
        """Prompt through the target pipeline (and draft context sync),
        excluded from all metrics."""
        if self.draft_id is not None:
            self.net.send_txn(
                self.NODE, self.draft_id, Tag.DRAFT_REQUEST,
                DraftRequestPayload(0, tuple(self.prompt), 0, 1.0),
            )
            self.mirror = list(self.prompt)
        batch = Batch(
            tokens=tuple(
                BatchToken(t, i, frozenset([0]), i == len(self.prompt) - 1)
                for i, t in enumerate(self.prompt)
            ),
            kind=PREFILL,
            run_id=self._next_run_id(),
        )
        rec = self._launch(batch, seq_id=0)
        payload = yield from self._recv_logits()
        self._pop_record(payload)
        rec.status = COMPLETED
        if self.draft_id is not None:
            yield from self.net.recv(self.NODE, self.draft_id, Tag.DRAFT_REPLY)
            self.draft_busy = False
        t0 = greedy_sample(payload.rows[0])
        # the token sampled at the end of prompt processing: part of the
        # output, excluded from latency measurement
        self.accepted.append(t0)
        self.generated += 1
        if self.cfg.eos_token is not None and t0 == self.cfg.eos_token:
            self.terminal = True
        self.window_start = self.ex.now()
        return t0

    # -- non-speculative runs -------------------------------------------------

    def _launch_ns(self, token: int, with_copy: bool) -> RunRecord:
        pos = len(self.accepted) - 1
        batch = Batch(
            tokens=(BatchToken(token, pos, frozenset([0]), True),),
            kind=NON_SPECULATIVE,
            run_id=self._next_run_id(),
        )
        rec = self._launch(batch, seq_id=0)
        if with_copy:
            # guaranteed-correct entries go to every partition right behind
            # the run, letting speculative runs reuse them instead of
            # re-evaluating their first token
            self._emit_copy(0, self.allocator.all_ids(), pos + 1)
        return rec

    # -- mode loops ------------------------------------------------------------

    def run_iterative(self):
        t0 = yield from self._prefill()
        tok = t0
        while self.generated < self.cfg.gen_len and not self.terminal:
            rec = self._launch_ns(tok, with_copy=False)
            payload = yield from self._recv_logits()
            got = self._pop_record(payload)
            got.status = COMPLETED
            result = verify_run(got, payload.rows, self.accepted,
                                eos_token=self.cfg.eos_token)
            if result.next_token is None:
                raise ProtocolError("iterative run produced no next token")
            self._accept(result.next_token)
            tok = result.next_token
        yield from self._finish()

    def run_sync_speculative(self):
        t0 = yield from self._prefill()
        tok = t0
        while self.generated < self.cfg.gen_len and not self.terminal:
            reply = yield from self._draft_round_trip(
                max_tokens=self.cfg.tree_cap, cutoff=self.cutoff.base
            )
            drafts = list(reply.tokens)
            pos = len(self.accepted) - 1
            toks = [BatchToken(tok, pos, frozenset([0]), True)]
            for i, d in enumerate(drafts):
                toks.append(BatchToken(d, pos + 1 + i, frozenset([0]), True))
            batch = Batch(tokens=tuple(toks), kind=SPECULATIVE,
                          run_id=self._next_run_id())
            rec = self._launch(batch, seq_id=0)
            rec.judged = 1  # the leading token is accepted context, not a draft
            payload = yield from self._recv_logits()
            got = self._pop_record(payload)
            got.status = COMPLETED
            result = verify_run(got, payload.rows, self.accepted,
                                eos_token=self.cfg.eos_token)
            self._judge_walked(got, result)
            for t in result.accepted:
                self._accept(t)
            if result.next_token is not None:
                self._accept(result.next_token)
            if result.mismatch:
                # rejected draft cells must leave the canonical sequence
                # before the next batch claims those positions
                self._emit_remove(0, result.matched_end)
            if self.terminal:
                break
            tok = self.accepted[-1]
        yield from self._finish()

    def run_async_speculative(self):
        yield from self._prefill()
        if not (self.generated >= self.cfg.gen_len or self.terminal):
            self._launch_ns(self.accepted[-1], with_copy=True)
        while self.generated < self.cfg.gen_len and not self.terminal:
            if self.net.probe(self.NODE, Tag.LOGITS):
                payload = yield from self._recv_logits()
                self._handle_completion(payload)
                continue
            if self.draft_busy and self.net.probe(self.NODE, Tag.DRAFT_REPLY):
                msg = yield from self.net.recv(
                    self.NODE, self.draft_id, Tag.DRAFT_REPLY
                )
                self._handle_reply(msg.payload)
                continue
            if not self.draft_busy and self._want_speculation():
                self._send_draft_request()
                continue
            waits = [(self.last_stage, Tag.LOGITS)]
            if self.draft_busy:
                waits.append((self.draft_id, Tag.DRAFT_REPLY))
            msg = yield from self.net.recv_any(self.NODE, waits)
            if msg.tag == Tag.LOGITS:
                self._handle_completion(msg.payload)
            else:
                self._handle_reply(msg.payload)
        yield from self._finish()

    # -- async internals -------------------------------------------------------

    def _want_speculation(self) -> bool:
        if self.terminal or self.generated >= self.cfg.gen_len:
            return False
        if not self.cfg.continuous and self.spec_since_round >= 1:
            return False
        if self.allocator.available() == 0:
            # partition exhaustion stalls speculation (edge-counted)
            if not self._stalled:
                self._stalled = True
                self.alloc_stalls += 1
            return False
        self._stalled = False
        if self.ex.now() < self.idle_until:
            return False
        ctx_len = len(self.accepted) + len(self.pending)
        return ctx_len + 1 <= self.cfg.max_context

    def _send_draft_request(self) -> None:
        ctx = self.accepted + [t for _, t in self.pending]
        cp = 0
        for a, b in zip(self.mirror, ctx):
            if a != b:
                break
            cp += 1
        if self.cfg.continuous:
            # micro-batch sizing ramps with the unverified chain depth: a
            # fresh chain starts with a single cheap token (its latency sets
            # the post-rejection recovery time), deeper chains batch up to m
            cap = min(self.cfg.microbatch, max(1, len(self.pending)))
        else:
            cap = self.cfg.tree_cap
        cap = min(cap, 4, self.cfg.max_context - len(ctx))
        self.net.send_txn(
            self.NODE, self.draft_id, Tag.DRAFT_REQUEST,
            DraftRequestPayload(
                truncate_to=cp,
                feed=tuple(ctx[cp:]),
                max_tokens=cap,
                cutoff=self.cutoff.current,
            ),
        )
        self.mirror = list(ctx)
        self.request_ctx = list(ctx)
        self.draft_busy = True

    def _handle_reply(self, reply: DraftReplyPayload) -> None:
        self.draft_busy = False
        props = list(reply.tokens)
        # the mirror tracks the draft's actual state, proposals included
        self.mirror.extend(props)
        ctx = self.accepted + [t for _, t in self.pending]
        if self.request_ctx != ctx:
            # verification moved the context while this request was in
            # flight; the proposals extend a rejected chain, so discard
            # them -- the next request rolls the draft back
            self.request_ctx = None
            return
        self.request_ctx = None
        if not props:
            # decay only when speculation failed and nothing is waiting
            if not self.net.probe(self.NODE, Tag.LOGITS):
                self.cutoff.on_speculation_idle()
            self.idle_until = self.ex.now() + self.cfg.idle_poll
            return
        self.cutoff.note_success()
        self._launch_spec(props)
        self.spec_since_round += 1

    def _launch_spec(self, props: List[int]) -> None:
        base = len(self.accepted) + len(self.pending)
        seq = self.allocator.alloc()
        if self.pending:
            # pull the unverified chain prefix into the fresh partition; the
            # tip partition's membership covers the accepted prefix too, so
            # one copy is enough
            self._emit_copy(self.pending_tip_seq, (seq,), base)
        else:
            self._emit_copy(0, (seq,), base)
        basis = tuple(self.pending)
        toks = tuple(
            BatchToken(t, base + i, frozenset([seq]), True)
            for i, t in enumerate(props)
        )
        batch = Batch(tokens=toks, kind=SPECULATIVE, run_id=self._next_run_id())
        self._launch(batch, seq_id=seq, basis=basis)
        self.pending.extend((base + i, t) for i, t in enumerate(props))
        self.pending_tip_seq = seq

    def _handle_completion(self, payload: LogitsPayload) -> None:
        rec = self._pop_record(payload)
        if rec.status in (CANCELLED_INVALID, CANCELLED_SUPERFLUOUS, DRAINED):
            if rec.seq_id != 0:
                self._emit_remove(rec.seq_id, 0)
                self.allocator.free(rec.seq_id)
            return
        rec.status = COMPLETED
        result = verify_run(rec, payload.rows, self.accepted,
                            eos_token=self.cfg.eos_token)
        self._judge_walked(rec, result)
        new_tokens = list(result.accepted)
        if result.next_token is not None:
            new_tokens.append(result.next_token)
        for t in new_tokens:
            self._accept(t)

        commands: List[Tuple[str, tuple]] = []
        apply_acceptance(
            result, rec, lambda op, args: commands.append((op, args)),
            self.allocator.live(),
        )
        for op, args in commands:
            if op == "copy":
                self._emit_copy(*args)
            else:
                self._emit_remove(*args)
        if rec.seq_id != 0:
            self.allocator.free(rec.seq_id)

        if not new_tokens:
            return
        # acceptance round: rebase the chain, reset the cutoff, cancel stale
        # runs, and start one non-speculative run carrying the bonus/new
        # token -- unless an in-flight valid run already carries it, in
        # which case that run will feed the frontier and the non-speculative
        # run would be born superfluous
        self._rebase_pending()
        self.cutoff.on_run_accepted()
        self.spec_since_round = 0
        self._cancel_stale()
        if self.generated < self.cfg.gen_len and not self.terminal:
            if not self._frontier_carried():
                self._launch_ns(self.accepted[-1], with_copy=True)

    def _frontier_carried(self) -> bool:
        pos = len(self.accepted) - 1
        tok = self.accepted[-1]
        for rec in self.fifo:
            if (rec.status == IN_FLIGHT
                    and rec.min_pos <= pos <= rec.max_pos
                    and rec.tokens[pos - rec.min_pos] == tok):
                return True
        return False

    def _rebase_pending(self) -> None:
        kept: List[Tuple[int, int]] = []
        broken = False
        for pos, tok in self.pending:
            if broken:
                break
            if pos < len(self.accepted):
                if tok != self.accepted[pos]:
                    broken = True
                continue
            kept.append((pos, tok))
        self.pending = [] if broken else kept
        if not self.pending:
            self.pending_tip_seq = 0

    def _cancel_stale(self) -> None:
        stale = detect_stale_runs(self.fifo, self.accepted)
        for rec, reason in stale:
            rec.status = (
                CANCELLED_INVALID if reason == INVALID else CANCELLED_SUPERFLUOUS
            )
            self._judge_cancelled(rec)
            if reason == INVALID:
                self.cancelled_invalid += 1
            else:
                self.cancelled_superfluous += 1
            self.cancel_log.append(CancelLogEntry(
                run_id=rec.run_id,
                reason=reason,
                kind=rec.kind,
                min_pos=rec.min_pos,
                max_pos=rec.max_pos,
                accepted_len_at_cancel=len(self.accepted),
                chain=tuple(rec.chain()),
            ))
            self.net.send_cancel(
                self.NODE, self.worker_ids, CancelPayload(rec.run_id)
            )

    # -- shutdown ---------------------------------------------------------------

    def _finish(self):
        """Cancel and drain in-flight runs, then shut the cluster down."""
        for rec in self.fifo:
            if rec.status == IN_FLIGHT:
                rec.status = DRAINED
                self.drained_runs += 1
                self.net.send_cancel(
                    self.NODE, self.worker_ids, CancelPayload(rec.run_id)
                )
        while self.fifo:
            payload = yield from self._recv_logits()
            rec = self._pop_record(payload)
            if rec.seq_id != 0 and rec.seq_id in self.allocator.live():
                self.allocator.free(rec.seq_id)
        if self.draft_busy:
            yield from self.net.recv(self.NODE, self.draft_id, Tag.DRAFT_REPLY)
            self.draft_busy = False
        self.net.send_txn(self.NODE, self.first_stage, Tag.SHUTDOWN,
                          ShutdownPayload())
        if self.draft_id is not None:
            self.net.send_txn(self.NODE, self.draft_id, Tag.SHUTDOWN,
                              ShutdownPayload())

    def _draft_round_trip(self, max_tokens: int, cutoff: float):
        ctx = list(self.accepted)
        cp = 0
        for a, b in zip(self.mirror, ctx):
            if a != b:
                break
            cp += 1
        room = self.cfg.max_context - len(ctx)
        self.net.send_txn(
            self.NODE, self.draft_id, Tag.DRAFT_REQUEST,
            DraftRequestPayload(
                truncate_to=cp,
                feed=tuple(ctx[cp:]),
                max_tokens=max(0, min(max_tokens, room)),
                cutoff=cutoff,
            ),
        )
        self.mirror = ctx
        msg = yield from self.net.recv(self.NODE, self.draft_id, Tag.DRAFT_REPLY)
        reply: DraftReplyPayload = msg.payload
        self.mirror.extend(reply.tokens)
        return reply

    # -- metrics ------------------------------------------------------------------

    def build_metrics(self, wall_seconds: float) -> RunMetrics:
        times = [t for t, _ in self.accept_events]
        k = len(times)
        if k:
            duration = times[-1] - self.window_start
            ttft = times[0] - self.window_start
            gaps = [b - a for a, b in zip(times, times[1:])]
            itl = sum(gaps) / len(gaps) if gaps else 0.0
            speed = k / duration if duration > 0 else float("inf")
        else:
            duration = ttft = itl = 0.0
            speed = 0.0
        out_tokens = self.accepted[len(self.prompt):]
        return RunMetrics(
            mode=self.cfg.mode,
            clock=self.cfg.clock,
            tokens_generated=len(out_tokens),
            duration=duration,
            generation_speed=speed,
            ttft=ttft,
            itl=itl,
            acceptance_rate=(self.matched / self.examined) if self.examined else 0.0,
            examined=self.examined,
            matched=self.matched,
            runs_started=self.runs_started,
            spec_runs=self.spec_runs,
            cancelled_invalid=self.cancelled_invalid,
            cancelled_superfluous=self.cancelled_superfluous,
            cancelled_runs=self.cancelled_invalid + self.cancelled_superfluous,
            drained_runs=self.drained_runs,
            alloc_stalls=self.alloc_stalls,
            inflight_mean=self.inflight.mean(
                self.window_start, times[-1] if k else self.window_start
            ),
            bytes_by_tag=dict(self.net.bytes_sent),
            msgs_by_tag={},
            token_checksum=token_checksum(out_tokens),
            virtual_end=self.ex.now(),
            wall_seconds=wall_seconds,
        )


# ---------------------------------------------------------------------------
# top-level simulation
# ---------------------------------------------------------------------------

def build_draft_backend(cfg: ExperimentConfig,
                        target_model: Optional[LayeredModel] = None,
                        draft_model: Optional[LayeredModel] = None) -> DraftBackend:
    if cfg.draft_backend == "synthetic":
        target_model = target_model or build_model(cfg.target_config())
        # mix in the prompt seed so repetitions draw independent accept
        # patterns while the model weights stay fixed
        seed = cfg.draft_seed * 1000003 + cfg.prompt_seed
        return SyntheticDraft(target_model, cfg.alpha, seed)
    draft_model = draft_model or build_model(cfg.draft_config())
    return ToyDraft(draft_model)


def simulate(cfg: ExperimentConfig,
             target_model: Optional[LayeredModel] = None,
             draft_model: Optional[LayeredModel] = None) -> SimResult:
    """Run one experiment configuration to completion and collect traces."""
    import time as _time

    cfg.validate()
    wall_t0 = _time.perf_counter()
    target_model = target_model or build_model(cfg.target_config())

    n_stages = cfg.n_stages()
    ranges = plan_layer_split(cfg.target_layers, n_stages, cfg.node_weights)
    executor = VirtualExecutor() if cfg.clock == "virtual" else WallExecutor()
    net = Network(executor, cfg.profile(), local_pairs=[(0, 1)])

    draft_id = None
    draft_node = None
    if cfg.uses_draft():
        draft_id = n_stages + 1
        backend = build_draft_backend(cfg, target_model, draft_model)
        draft_node = _DraftNode(draft_id, net, backend, cfg)

    workers = []
    for i, rng in enumerate(ranges):
        node_id = i + 1
        prev_id = node_id - 1
        next_id = node_id + 1 if node_id < n_stages else None
        workers.append(_Worker(node_id, prev_id, next_id, net, target_model,
                               rng, cfg))

    prompt = sample_prompt(cfg.prompt_seed, cfg.prompt_len, cfg.vocab_size)
    controller = _Controller(cfg, net, executor, n_stages, draft_id, prompt)

    runner = {
        "iterative": controller.run_iterative,
        "pipeline-iterative": controller.run_iterative,
        "sync-speculative": controller.run_sync_speculative,
        "async-speculative": controller.run_async_speculative,
    }[cfg.mode]

    for w in workers:
        executor.spawn(f"worker-{w.node}", w.proc())
    if draft_node is not None:
        executor.spawn("draft", draft_node.proc())
    executor.spawn("controller", runner())
    executor.run()

    wall_seconds = _time.perf_counter() - wall_t0
    metrics = controller.build_metrics(wall_seconds)
    metrics.msgs_by_tag = _msgs_by_tag(net)
    node_logs = {w.node: w.log for w in workers}
    if draft_node is not None:
        node_logs[draft_id] = draft_node.log
    return SimResult(
        tokens=controller.accepted[len(prompt):],
        metrics=metrics,
        accepted_full=list(controller.accepted),
        accept_events=list(controller.accept_events),
        cancel_log=list(controller.cancel_log),
        node_logs=node_logs,
        consumed=dict(net.msgs_consumed),
        sent=dict(net.msgs_sent),
        records=list(controller.records),
    )


def _msgs_by_tag(net: Network) -> Dict[str, int]:
    out: Dict[str, int] = {}
    for (_, tag), n in net.msgs_sent.items():
        out[tag] = out.get(tag, 0) + n
    return out
