"""Deterministic discrete-event network model.

Single-threaded event loop over a virtual clock in integer microseconds
(float timestamps would make event ordering platform-dependent). Links
carry a baseline round-trip delay d0 plus bounded jitter; one-way delay is
half the RTT with per-direction jitter U(0, jitter_max/2), which preserves
the RTT bound d0 <= RTT <= d0 + jitter_max. Slot hooks fire every 100 ms.

Messages are delivered in (time, sequence) order, so a run is a pure
function of the seed and the registered handlers.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .rng import substream

__all__ = ["LinkModel", "Event", "Network", "UnknownNode", "SLOT_MS"]

SLOT_MS = 100
DEFAULT_PROCESSING_MS = 1.0


class UnknownNode(KeyError):
    """Raised when sending to or from an unregistered node."""


@dataclass(frozen=True)
class LinkModel:
    """Round-trip delay model: RTT = d0 + U(0, jitter_max)."""

    d0_ms: float = 20.0
    jitter_max_ms: float = 15.0

    def __post_init__(self):
        if self.d0_ms < 0 or self.jitter_max_ms < 0:
            raise ValueError("delays must be non-negative")


@dataclass(order=True)
class Event:
    deliver_at_us: int
    seq: int
    src: str = field(compare=False)
    dst: str = field(compare=False)
    payload: object = field(compare=False)
    kind: str = field(compare=False, default="msg")


def sample_rtt(link: LinkModel, rng: np.random.Generator) -> float:
    """Draw one round-trip time in ms: d0 plus uniform jitter."""
    return link.d0_ms + rng.uniform(0.0, link.jitter_max_ms)


class Network:
    """Event-driven message fabric between named nodes.

    Handlers have signature handler(network, event); they run at delivery
    time and may call ``send`` to schedule replies. ``processing_ms`` is the
    fixed per-message handling cost added before a handler's outbound
    messages depart (lightweight MAC/VRF-class work).
    """

    def __init__(
        self,
        seed: int = 0,
        default_link: LinkModel | None = None,
        processing_ms: float = DEFAULT_PROCESSING_MS,
        trace: bool = False,
    ):
        self.seed = seed
        self.default_link = default_link or LinkModel()
        self.processing_ms = processing_ms
        self._rng = substream(seed, "net")
        self._handlers: dict[str, Callable] = {}
        self._links: dict[tuple[str, str], LinkModel] = {}
        self._down: set[frozenset] = set()
        self._queue: list[Event] = []
        self._seq = 0
        self._now_us = 0
        self._slot_hooks: list[Callable[[int], None]] = []
        self._next_slot_us = 0
        self._trace_rows: list[tuple] | None = [] if trace else None

    # -- topology ----------------------------------------------------------

    def register_node(self, name: str, handler: Callable | None = None) -> None:
        self._handlers[name] = handler or (lambda net, ev: None)

    def set_link(self, a: str, b: str, link: LinkModel) -> None:
        self._links[(a, b)] = link
        self._links[(b, a)] = link

    def set_link_down(self, a: str, b: str, down: bool = True) -> None:
        key = frozenset((a, b))
        if down:
            self._down.add(key)
        else:
            self._down.discard(key)

    def link_between(self, a: str, b: str) -> LinkModel:
        return self._links.get((a, b), self.default_link)

    # -- clock and scheduling ----------------------------------------------

    @property
    def now_ms(self) -> float:
        return self._now_us / 1000.0

    def add_slot_hook(self, hook: Callable[[int], None]) -> None:
        """Register a callback invoked at every 100 ms slot boundary."""
        self._slot_hooks.append(hook)

    def sample_rtt(self, a: str, b: str) -> float:
        return sample_rtt(self.link_between(a, b), self._rng)

    def send(self, src: str, dst: str, payload, kind: str = "msg") -> Event:
        """Schedule delivery of ``payload`` after one-way delay plus processing."""
        if src not in self._handlers:
            raise UnknownNode(src)
        if dst not in self._handlers:
            raise UnknownNode(dst)
        if frozenset((src, dst)) in self._down:
            # partitioned link: message silently dropped
            ev = Event(deliver_at_us=-1, seq=-1, src=src, dst=dst, payload=payload, kind=kind)
            return ev
        link = self.link_between(src, dst)
        one_way = link.d0_ms / 2.0 + self._rng.uniform(0.0, link.jitter_max_ms / 2.0)
        delay_us = int(round((one_way + self.processing_ms) * 1000.0))
        ev = Event(
            deliver_at_us=self._now_us + delay_us,
            seq=self._seq,
            src=src,
            dst=dst,
            payload=payload,
            kind=kind,
        )
        self._seq += 1
        heapq.heappush(self._queue, ev)
        return ev

    def call_at(self, t_ms: float, fn: Callable, kind: str = "timer") -> Event:
        """Schedule ``fn()`` at an absolute virtual time."""
        ev = Event(
            deliver_at_us=max(self._now_us, int(round(t_ms * 1000.0))),
            seq=self._seq,
            src="",
            dst="",
            payload=fn,
            kind=kind,
        )
        self._seq += 1
        heapq.heappush(self._queue, ev)
        return ev

    # -- execution -----------------------------------------------------------

    def _fire_slots_until(self, t_us: int) -> None:
        while self._next_slot_us <= t_us:
            for hook in self._slot_hooks:
                hook(self._next_slot_us // 1000)
            self._next_slot_us += SLOT_MS * 1000

    def run_until(self, t_ms: float) -> list[Event]:
        """Process events up to and including virtual time ``t_ms``.

        Returns the delivered events in delivery order.
        """
        limit_us = int(round(t_ms * 1000.0))
        delivered: list[Event] = []
        while self._queue and self._queue[0].deliver_at_us <= limit_us:
            ev = heapq.heappop(self._queue)
            self._fire_slots_until(ev.deliver_at_us)
            self._now_us = ev.deliver_at_us
            if ev.kind == "timer":
                ev.payload()
            else:
                if self._trace_rows is not None:
                    size = len(ev.payload) if isinstance(ev.payload, (bytes, bytearray)) else 0
                    self._trace_rows.append(
                        (ev.deliver_at_us, ev.src, ev.dst, ev.kind, size)
                    )
                self._handlers[ev.dst](self, ev)
            delivered.append(ev)
        self._fire_slots_until(limit_us)
        self._now_us = limit_us
        return delivered

    def run_to_quiescence(self, hard_limit_ms: float = 1e9) -> list[Event]:
        """Run until no events remain (bounded by a hard time limit)."""
        delivered: list[Event] = []
        while self._queue:
            if self._queue[0].deliver_at_us > hard_limit_ms * 1000:
                break
            delivered.extend(self.run_until(self._queue[0].deliver_at_us / 1000.0))
        return delivered

    def write_trace(self, path) -> None:
        """Dump the delivery log as CSV ``t_us,src,dst,type,size``."""
        if self._trace_rows is None:
            raise RuntimeError("network was not created with trace=True")
        with open(path, "w", newline="") as fh:
            fh.write("t_us,src,dst,type,size\n")
            for row in self._trace_rows:
                fh.write(",".join(str(v) for v in row) + "\n")
