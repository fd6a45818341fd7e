"""Metadata-tagged KV cache with sequence partitions.

Cells carry a position and a set of sequence ids.  All sequence-level
operations (copy, remove, free) touch only the membership metadata; key and
value vectors are written once at insertion and never duplicated or
overwritten, which is what makes copying an accepted run into every other
partition effectively free.

Sequence id 0 is the canonical sequence: the accepted context.  Ids 1..P-1
are partitions handed out FIFO to in-flight speculative runs.

Membership is stored as one boolean row per sequence id over the cell
storage, so visibility queries, copies and removals are all vectorized.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Iterable, List, Sequence, Tuple

import numpy as np


class CacheError(ValueError):
    pass


class AllocationExhausted(Exception):
    """No free sequence partition; caller should stall speculation."""


class SequenceAllocator:
    """FIFO pool of speculative sequence ids 1..P-1 (0 is reserved)."""

    def __init__(self, partitions: int = 8):
        if partitions < 2:
            raise CacheError("need at least 2 partitions (canonical + 1)")
        self.partitions = partitions
        self._free = deque(range(1, partitions))
        self._live = set()

    def alloc(self) -> int:
        if not self._free:
            raise AllocationExhausted(f"all {self.partitions - 1} partitions in use")
        seq = self._free.popleft()
        self._live.add(seq)
        return seq

    def free(self, seq: int) -> None:
        if seq == 0:
            raise CacheError("cannot free the canonical sequence")
        if seq not in self._live:
            raise CacheError(f"sequence {seq} is not allocated (double free?)")
        self._live.discard(seq)
        self._free.append(seq)

    def available(self) -> int:
        return len(self._free)

    def live(self) -> List[int]:
        return sorted(self._live)

    def all_ids(self) -> List[int]:
        """Every non-canonical id, live or free."""
        return list(range(1, self.partitions))


@dataclass(frozen=True)
class KVCell:
    """Read-only view of one cache cell (for inspection and tests)."""

    layer: int
    position: int
    sequences: frozenset
    key: np.ndarray
    value: np.ndarray


class CacheView(Sequence):
    """Ordered (position, sequence_set) pairs of live cells plus raw rows."""

    def __init__(self, cells: List[Tuple[int, frozenset]], rows: np.ndarray):
        self._cells = cells
        self.rows = rows

    def __len__(self):
        return len(self._cells)

    def __getitem__(self, i):
        return self._cells[i]


class KVCache:
    """Per-layer K/V store for one pipeline node's layer range.

    The node only materializes vectors for the layers it evaluates, but the
    membership metadata evolves identically on every node because cache
    operations arrive as ordered transactions.
    """

    def __init__(self, embed_dim: int, layers: Iterable[int], max_context: int,
                 n_seq_ids: int = 8):
        self.embed_dim = embed_dim
        self.layers = tuple(layers)
        if not self.layers:
            raise CacheError("cache must cover at least one layer")
        self.max_context = max_context
        self.n_seq_ids = n_seq_ids
        cap = 64
        self._cap = cap
        # one metadata table per layer; rows parallel K/V storage
        self._n = {l: 0 for l in self.layers}
        self._pos = {l: np.zeros(cap, dtype=np.int64) for l in self.layers}
        self._member = {
            l: np.zeros((n_seq_ids, cap), dtype=bool) for l in self.layers
        }
        self._k = {l: np.zeros((cap, embed_dim)) for l in self.layers}
        self._v = {l: np.zeros((cap, embed_dim)) for l in self.layers}

    # -- storage ---------------------------------------------------------

    def _grow(self, layer: int) -> None:
        cap = self._pos[layer].shape[0]
        new = cap * 2
        self._pos[layer] = np.resize(self._pos[layer], new)
        m = np.zeros((self.n_seq_ids, new), dtype=bool)
        m[:, :cap] = self._member[layer]
        self._member[layer] = m
        for store in (self._k, self._v):
            arr = np.zeros((new, self.embed_dim))
            arr[:cap] = store[layer]
            store[layer] = arr

    def insert(self, layer: int, pos: int, seqs: Iterable[int],
               key: np.ndarray, value: np.ndarray) -> int:
        if layer not in self._n:
            raise CacheError(f"layer {layer} not covered by this cache")
        seqs = sorted(set(seqs))
        if not seqs:
            raise CacheError("cell must belong to at least one sequence")
        if not (0 <= pos < self.max_context):
            raise CacheError(f"position {pos} outside [0, {self.max_context})")
        for s in seqs:
            if not (0 <= s < self.n_seq_ids):
                raise CacheError(f"sequence id {s} outside [0, {self.n_seq_ids})")
        n = self._n[layer]
        if n == self._pos[layer].shape[0]:
            self._grow(layer)
        self._pos[layer][n] = pos
        for s in seqs:
            self._member[layer][s, n] = True
        self._k[layer][n] = key
        self._v[layer][n] = value
        self._n[layer] = n + 1
        return n

    def pad_dead(self, layer: int, positions: Iterable[int]) -> None:
        """Append membership-less rows so layer storage stays row-aligned
        with sibling layers after an abandoned (cancelled) evaluation."""
        n = self._n[layer]
        for pos in positions:
            if n == self._pos[layer].shape[0]:
                self._grow(layer)
            self._pos[layer][n] = pos
            n += 1
        self._n[layer] = n

    @property
    def n_cells(self) -> int:
        return self._n[self.layers[0]]

    def keys(self, layer: int, rows: np.ndarray) -> np.ndarray:
        return self._k[layer][rows]

    def values(self, layer: int, rows: np.ndarray) -> np.ndarray:
        return self._v[layer][rows]

    # -- metadata operations (apply uniformly to every covered layer) ----

    def copy(self, src: int, dsts: Iterable[int], end_pos: int) -> None:
        """Add ``dsts`` membership to cells of ``src`` below ``end_pos``.

        Metadata only; a destination that already holds a cell at some
        position keeps it (entries beyond what was already accepted are
        never overwritten), so the at-most-one-visible-cell-per-position
        invariant is preserved.  Idempotent.
        """
        dsts = sorted(set(dsts))
        for layer in self.layers:
            n = self._n[layer]
            if n == 0:
                continue
            member = self._member[layer]
            pos = self._pos[layer][:n]
            cand = member[src, :n] & (pos < end_pos)
            if not cand.any():
                continue
            for d in dsts:
                if d == src:
                    continue
                occupied = np.unique(pos[member[d, :n]])
                take = cand & ~np.isin(pos, occupied)
                member[d, :n] |= take

    def remove(self, seq: int, from_pos: int) -> None:
        """Strip ``seq`` membership from cells at ``pos >= from_pos``.

        Cells whose membership empties are dead: invisible and reclaimable.
        """
        for layer in self.layers:
            n = self._n[layer]
            if n == 0:
                continue
            hit = self._member[layer][seq, :n] & (self._pos[layer][:n] >= from_pos)
            self._member[layer][seq, :n] &= ~hit

    def free_sequence(self, seq: int) -> None:
        """Remove a sequence everywhere (membership only)."""
        if seq == 0:
            raise CacheError("cannot free the canonical sequence")
        self.remove(seq, 0)

    # -- queries ----------------------------------------------------------

    def _alive(self, layer: int) -> np.ndarray:
        n = self._n[layer]
        return self._member[layer][:, :n].any(axis=0)

    def visible_rows(self, seq: int, query_pos: int, layer: int) -> np.ndarray:
        """Raw rows visible to ``seq`` below ``query_pos``, position order."""
        n = self._n[layer]
        if n == 0:
            return np.empty(0, dtype=np.int64)
        vis = self._member[layer][seq, :n] & (self._pos[layer][:n] < query_pos)
        rows = np.where(vis)[0]
        order = np.argsort(self._pos[layer][rows], kind="stable")
        return rows[order]

    def visible_cells(self, seq: int, query_pos: int, layer: int) -> List[KVCell]:
        out = []
        for r in self.visible_rows(seq, query_pos, layer):
            out.append(self.cell(layer, int(r)))
        return out

    def cell(self, layer: int, row: int) -> KVCell:
        seqs = frozenset(int(s) for s in np.where(self._member[layer][:, row])[0])
        return KVCell(
            layer=layer,
            position=int(self._pos[layer][row]),
            sequences=seqs,
            key=self._k[layer][row].copy(),
            value=self._v[layer][row].copy(),
        )

    def visible_positions(self, seq: int, query_pos: int, layer: int) -> np.ndarray:
        rows = self.visible_rows(seq, query_pos, layer)
        return self._pos[layer][rows]

    def snapshot(self, layer: int | None = None) -> CacheView:
        """Live-cell metadata view for mask construction.

        Metadata is identical across a node's layers, so any covered layer
        serves; the first is the default.
        """
        layer = self.layers[0] if layer is None else layer
        n = self._n[layer]
        alive = self._alive(layer)
        rows = np.where(alive)[0]
        member = self._member[layer]
        cells = [
            (int(self._pos[layer][r]),
             frozenset(int(s) for s in np.where(member[:, r])[0]))
            for r in rows
        ]
        return CacheView(cells, rows)

    def seq_positions(self, seq: int, layer: int | None = None) -> np.ndarray:
        """Sorted positions held by one sequence (diagnostics, invariants)."""
        layer = self.layers[0] if layer is None else layer
        n = self._n[layer]
        pos = self._pos[layer][:n][self._member[layer][seq, :n]]
        return np.sort(pos)


def free_sequence(cache: KVCache, allocator: SequenceAllocator, seq: int) -> None:
    """Release a partition: strip its membership, return the id to the pool."""
    allocator.free(seq)  # validates id first (raises on 0 / double free)
    cache.free_sequence(seq)
