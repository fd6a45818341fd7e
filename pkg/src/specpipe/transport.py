"""Simulated cluster messaging with MPI-like point-to-point semantics.

Sends are buffered (the sender continues immediately) and delivery order is
non-overtaking per ``(source, destination, tag)``: a message is never
delivered before an earlier message with the same triple, no matter what
the per-message delays work out to.  Different tags interleave freely,
which is exactly what lets cancellation signals on their own tag overtake
bulk activation traffic.

Pipeline operations ride on transactions: a start message on the reserved
``START`` tag names the operation type, and any bulk body follows under the
operation's own tag.  A worker's dispatch loop processes start messages
strictly in arrival order and runs each handler to completion before the
next begins.
"""

from __future__ import annotations

import enum
import threading
from collections import defaultdict
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Sequence, Set, Tuple

from .sim import Park

MSG_HEADER_BYTES = 24


class TransportError(RuntimeError):
    pass


class ProtocolError(TransportError):
    """Ordered-transaction contract violated; always fatal."""


class Tag(enum.IntEnum):
    START = 0
    RUN_CONFIG = 1
    ACTIVATIONS = 2
    LOGITS = 3
    CACHE_COPY = 4
    CACHE_REMOVE = 5
    CANCEL = 6
    SHUTDOWN = 7
    DRAFT_REQUEST = 8
    DRAFT_REPLY = 9


@dataclass(frozen=True)
class LinkProfile:
    """Injectable delays: per-byte, fixed per-message, per-layer compute.

    ``per_layer_delay`` is the node-level compute charge for one decoder
    layer applied to one token; a stage evaluating L layers over a batch of
    n tokens charges ``L * n * per_layer_delay``.
    """

    per_byte_delay: float = 0.0
    msg_latency: float = 0.0
    per_layer_delay: float = 0.0

    def __post_init__(self):
        if self.per_byte_delay < 0 or self.msg_latency < 0 or self.per_layer_delay < 0:
            raise TransportError("link profile delays must be >= 0")

    def transit(self, size: int) -> float:
        return self.msg_latency + size * self.per_byte_delay


@dataclass(frozen=True)
class Blob:
    """Opaque payload of a given wire size (transport tests)."""

    n: int
    label: object = None

    @property
    def nbytes(self) -> int:
        return self.n


@dataclass(frozen=True)
class TxnStart:
    """Transaction start: names the operation; carries its parameters."""

    txn_tag: Tag
    inner: object = None

    @property
    def nbytes(self) -> int:
        return 8 + payload_nbytes(self.inner)


def payload_nbytes(payload) -> int:
    if payload is None:
        return 0
    if isinstance(payload, (int, float, bool)):
        return 8
    if isinstance(payload, (str, bytes)):
        return len(payload)
    n = getattr(payload, "nbytes", None)
    if n is None:
        raise TransportError(f"payload {type(payload).__name__} has no nbytes")
    return int(n)


@dataclass(frozen=True)
class Message:
    src: int
    dst: int
    tag: Tag
    payload: object
    size: int
    send_time: float
    arrival_time: float


class Network:
    """All mailboxes, link profiles and traffic accounting for one cluster."""

    def __init__(self, executor, profile: LinkProfile,
                 local_pairs: Iterable[Tuple[int, int]] = ()):
        self.executor = executor
        self.profile = profile
        # links between co-located contexts (controller and its stage) are free
        self._local = set()
        for a, b in local_pairs:
            self._local.add((a, b))
            self._local.add((b, a))
        self._mailboxes: Dict[Tuple[int, int, Tag], object] = {}
        self._last_arrival: Dict[Tuple[int, int, Tag], float] = {}
        self._shutdown: Set[int] = set()
        # sends and mailbox creation may happen from several node threads in
        # wall-clock mode; the lock is uncontended under the virtual clock
        self._lock = threading.Lock()
        self.bytes_sent: Dict[str, int] = defaultdict(int)
        self.msgs_sent: Dict[Tuple[int, str], int] = defaultdict(int)
        self.msgs_consumed: Dict[Tuple[int, str], int] = defaultdict(int)

    # -- plumbing ---------------------------------------------------------

    def _mailbox(self, dst: int, src: int, tag: Tag):
        key = (dst, src, tag)
        with self._lock:
            mb = self._mailboxes.get(key)
            if mb is None:
                mb = self.executor.make_mailbox(key)
                self._mailboxes[key] = mb
            return mb

    def _mailboxes_for(self, dst: int, tag: Tag) -> list:
        with self._lock:
            out = [mb for (d, s, t), mb in self._mailboxes.items()
                   if d == dst and t == tag]
        out.sort(key=lambda mb: mb.key)
        return out

    def link(self, src: int, dst: int) -> LinkProfile:
        if (src, dst) in self._local:
            return LinkProfile()
        return self.profile

    def mark_shutdown(self, node: int) -> None:
        self._shutdown.add(node)

    # -- point to point ----------------------------------------------------

    def send(self, src: int, dst: int, tag: Tag, payload) -> Message:
        """Buffered send; returns immediately, delivery after link delays.

        Order is preserved per (src, dst, tag): the computed arrival is
        clamped to never precede the previous message on the same triple.
        """
        if dst in self._shutdown:
            raise TransportError(f"destination node {dst} is shut down")
        size = MSG_HEADER_BYTES + payload_nbytes(payload)
        now = self.executor.now()
        mb = self._mailbox(dst, src, tag)
        with self._lock:
            arrival = now + self.link(src, dst).transit(size)
            key = (dst, src, tag)
            arrival = max(arrival, self._last_arrival.get(key, 0.0))
            self._last_arrival[key] = arrival
            msg = Message(src, dst, tag, payload, size, now, arrival)
            self.bytes_sent[tag.name] += size
            self.msgs_sent[(dst, tag.name)] += 1
        self.executor.deliver(mb, arrival, msg)
        return msg

    def probe(self, node: int, tag: Tag) -> bool:
        """Non-blocking: is a message with this tag waiting at the node?"""
        now = self.executor.now()
        return any(mb.ready(now) for mb in self._mailboxes_for(node, tag))

    def recv(self, node: int, src: int, tag: Tag):
        """Blocking receive of the next (src, tag) message.  Generator."""
        mb = self._mailbox(node, src, tag)
        while True:
            msg = mb.pop(self.executor.now())
            if msg is not None:
                self.msgs_consumed[(node, tag.name)] += 1
                return msg
            yield Park((mb,))

    def recv_any(self, node: int, sources: Sequence[Tuple[int, Tag]]):
        """Blocking receive from whichever (src, tag) pair is ready first."""
        mbs = tuple(self._mailbox(node, src, tag) for src, tag in sources)
        while True:
            now = self.executor.now()
            for mb in mbs:
                msg = mb.pop(now)
                if msg is not None:
                    self.msgs_consumed[(node, msg.tag.name)] += 1
                    return msg
            yield Park(mbs)

    def drain(self, node: int, tag: Tag) -> List[Message]:
        """Non-blocking: pop every waiting message with this tag."""
        now = self.executor.now()
        out = []
        for mb in self._mailboxes_for(node, tag):
            while True:
                msg = mb.pop(now)
                if msg is None:
                    break
                self.msgs_consumed[(node, tag.name)] += 1
                out.append(msg)
        return out

    # -- transactions -------------------------------------------------------

    def send_txn(self, src: int, dst: int, txn_tag: Tag, params,
                 body=None) -> None:
        """Begin a transaction toward ``dst``: START message, then any body
        on the transaction's own tag."""
        self.send(src, dst, Tag.START, TxnStart(txn_tag, params))
        if body is not None:
            self.send(src, dst, txn_tag, body)

    def dispatch_loop(self, node: int, src: int,
                      handlers: Dict[Tag, Callable]):
        """Process transaction starts strictly in arrival order.

        Each handler is a generator invoked with the start parameters; it
        runs to completion before the next transaction begins.  A handler
        mapped to ``Tag.SHUTDOWN`` ends the loop after running.  Unknown
        transaction tags are a fatal protocol error.
        """
        while True:
            msg = yield from self.recv(node, src, Tag.START)
            start = msg.payload
            if not isinstance(start, TxnStart):
                raise ProtocolError(f"non-start message on START channel: {msg}")
            handler = handlers.get(start.txn_tag)
            if handler is None:
                raise ProtocolError(f"unknown transaction tag {start.txn_tag!r}")
            yield from handler(start.inner)
            if start.txn_tag == Tag.SHUTDOWN:
                return

    # -- cancellation (out-of-band control channel) -------------------------

    def send_cancel(self, src: int, nodes: Iterable[int], payload) -> None:
        for node in nodes:
            self.send(src, node, Tag.CANCEL, payload)

    def poll_cancel(self, node: int) -> List[object]:
        """Non-blocking: drain any cancellation signals addressed to node."""
        return [m.payload for m in self.drain(node, Tag.CANCEL)]
