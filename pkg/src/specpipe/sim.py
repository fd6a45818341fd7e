"""Execution substrate for the simulated cluster.

Node loops are written as plain Python generators that yield effects:

* ``Sleep(dt)``       -- consume simulated compute time
* ``Park(mailboxes)`` -- block until any of the mailboxes has a message

Two executors drive the same generators:

* ``VirtualExecutor`` -- single-threaded discrete-event scheduler over a
  virtual clock.  Events are ordered by ``(time, sequence_number)``, so a
  given workload replays identically every run.  All acceptance numbers
  come from this mode.
* ``WallExecutor`` -- one OS thread per node with real sleeps and lock-based
  mailboxes; used for smoke-testing that the protocol really is
  concurrency-safe, not for measurements.
"""

from __future__ import annotations

import heapq
import itertools
import threading
import time as _time
from collections import deque
from dataclasses import dataclass
from typing import Callable, List


class SimError(RuntimeError):
    pass


class DeadlockError(SimError):
    pass


@dataclass(frozen=True)
class Sleep:
    dt: float


@dataclass(frozen=True)
class Park:
    mailboxes: tuple


class Mailbox:
    """FIFO of delivered messages (virtual mode: delivery implies ready)."""

    __slots__ = ("key", "items", "waiters")

    def __init__(self, key):
        self.key = key
        self.items = deque()
        self.waiters: list = []

    def ready(self, now: float) -> bool:
        return bool(self.items)

    def peek(self, now: float):
        return self.items[0] if self.items else None

    def pop(self, now: float):
        """Pop the head message if one is ready, else None."""
        if self.ready(now):
            return self.items.popleft()
        return None

    def __len__(self):
        return len(self.items)


class _WallMailbox(Mailbox):
    """Messages become visible once their arrival timestamp has passed."""

    def ready(self, now: float) -> bool:
        return bool(self.items) and self.items[0][0] <= now

    def peek(self, now: float):
        if self.ready(now):
            return self.items[0][1]
        return None

    def pop(self, now: float):
        if self.ready(now):
            return self.items.popleft()[1]
        return None

    def next_arrival(self):
        return self.items[0][0] if self.items else None


class _Proc:
    __slots__ = ("name", "gen", "parked_on", "done")

    def __init__(self, name, gen):
        self.name = name
        self.gen = gen
        self.parked_on: tuple = ()
        self.done = False


class VirtualExecutor:
    """Deterministic discrete-event loop; one process active at a time."""

    wall_clock = False

    def __init__(self):
        self._heap: list = []
        self._seq = itertools.count()
        self._now = 0.0
        self._procs: List[_Proc] = []

    def now(self) -> float:
        return self._now

    def call_at(self, t: float, fn: Callable[[], None]) -> None:
        if t < self._now:
            t = self._now
        heapq.heappush(self._heap, (t, next(self._seq), fn))

    def spawn(self, name: str, gen) -> None:
        proc = _Proc(name, gen)
        self._procs.append(proc)
        self.call_at(self._now, lambda: self._step(proc, None))

    def make_mailbox(self, key) -> Mailbox:
        return Mailbox(key)

    def deliver(self, mailbox: Mailbox, arrival: float, msg) -> None:
        def _arrive():
            mailbox.items.append(msg)
            if mailbox.waiters:
                waiters, mailbox.waiters = mailbox.waiters, []
                for proc in waiters:
                    self._unpark(proc)

        self.call_at(arrival, _arrive)

    def _unpark(self, proc: _Proc) -> None:
        for mb in proc.parked_on:
            if proc in mb.waiters:
                mb.waiters.remove(proc)
        proc.parked_on = ()
        self.call_at(self._now, lambda: self._step(proc, None))

    def _step(self, proc: _Proc, value) -> None:
        if proc.done:
            return
        try:
            eff = proc.gen.send(value)
        except StopIteration:
            proc.done = True
            return
        if isinstance(eff, Sleep):
            self.call_at(self._now + eff.dt, lambda: self._step(proc, None))
        elif isinstance(eff, Park):
            proc.parked_on = eff.mailboxes
            for mb in eff.mailboxes:
                mb.waiters.append(proc)
        else:
            raise SimError(f"process {proc.name} yielded {eff!r}")

    def run(self) -> float:
        while self._heap:
            t, _, fn = heapq.heappop(self._heap)
            self._now = t
            fn()
        stuck = [p.name for p in self._procs if not p.done]
        if stuck:
            raise DeadlockError(f"processes blocked with no pending events: {stuck}")
        return self._now


class WallExecutor:
    """Thread-per-process executor over real time."""

    wall_clock = True

    def __init__(self):
        self._t0 = _time.monotonic()
        self._cond = threading.Condition()
        self._threads: List[threading.Thread] = []
        self._errors: List[BaseException] = []

    def now(self) -> float:
        return _time.monotonic() - self._t0

    def make_mailbox(self, key) -> _WallMailbox:
        return _WallMailbox(key)

    def deliver(self, mailbox: _WallMailbox, arrival: float, msg) -> None:
        with self._cond:
            mailbox.items.append((arrival, msg))
            self._cond.notify_all()

    def spawn(self, name: str, gen) -> None:
        def drive():
            try:
                value = None
                while True:
                    try:
                        eff = gen.send(value)
                    except StopIteration:
                        return
                    value = None
                    if isinstance(eff, Sleep):
                        if eff.dt > 0:
                            _time.sleep(eff.dt)
                    elif isinstance(eff, Park):
                        with self._cond:
                            while not any(
                                mb.ready(self.now()) for mb in eff.mailboxes
                            ):
                                arrivals = [
                                    a
                                    for a in (
                                        mb.next_arrival() for mb in eff.mailboxes
                                    )
                                    if a is not None
                                ]
                                if arrivals:
                                    timeout = max(min(arrivals) - self.now(), 0.0) + 1e-4
                                else:
                                    timeout = 0.05
                                self._cond.wait(timeout=timeout)
                    else:
                        raise SimError(f"process {name} yielded {eff!r}")
            except BaseException as exc:
                with self._cond:
                    self._errors.append(exc)
                    self._cond.notify_all()

        t = threading.Thread(target=drive, name=name, daemon=True)
        self._threads.append(t)
        t.start()

    def run(self, timeout: float = 120.0) -> float:
        deadline = _time.monotonic() + timeout
        for t in self._threads:
            while t.is_alive():
                t.join(timeout=0.05)
                with self._cond:
                    if self._errors:
                        raise self._errors[0]
                if _time.monotonic() > deadline:
                    raise SimError(f"thread {t.name} did not finish")
        with self._cond:
            if self._errors:
                raise self._errors[0]
        return self.now()
