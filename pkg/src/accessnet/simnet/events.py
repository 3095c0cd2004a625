"""Virtual clock, event queue and lossy channels."""

from __future__ import annotations

import heapq
import random
from dataclasses import dataclass, field
from typing import Any, Callable, Optional


class EventLoop:
    """Events run in (time, sequence) order; ties keep scheduling order."""

    def __init__(self):
        self.now: float = 0.0
        self._seq = 0
        self._queue: list = []
        self.steps = 0

    def at(self, t: float, fn: Callable, *args) -> None:
        if t < self.now:
            raise ValueError(f"cannot schedule in the past ({t} < {self.now})")
        self._seq += 1
        heapq.heappush(self._queue, (t, self._seq, fn, args))

    def after(self, delay: float, fn: Callable, *args) -> None:
        self.at(self.now + delay, fn, *args)

    def every(self, period: float, fn: Callable, start: Optional[float] = None, until: Optional[float] = None) -> None:
        """Call ``fn(now)`` periodically; ``fn`` returning False stops the timer."""

        def tick():
            if until is not None and self.now > until:
                return
            if fn(self.now) is False:
                return
            self.after(period, tick)

        self.at(self.now + period if start is None else start, tick)

    def __len__(self):
        return len(self._queue)

    def run(self, until: Optional[float] = None, on_step: Optional[Callable[[], None]] = None) -> None:
        q = self._queue
        while q:
            if until is not None and q[0][0] > until:
                break
            t, _, fn, args = heapq.heappop(q)
            self.now = t
            fn(*args)
            self.steps += 1
            if on_step is not None:
                on_step()
        if until is not None:
            self.now = max(self.now, until)


@dataclass(frozen=True)
class Latency:
    low_ms: float
    high_ms: float

    @classmethod
    def parse(cls, spec: Any) -> "Latency":
        """Accepts a number (fixed) or a two-element [low, high] range."""
        if isinstance(spec, (int, float)):
            return cls(float(spec), float(spec))
        low, high = spec
        if high < low:
            raise ValueError(f"latency range [{low}, {high}] is inverted")
        return cls(float(low), float(high))

    def sample(self, rng: random.Random) -> float:
        if self.low_ms == self.high_ms:
            return self.low_ms
        return rng.uniform(self.low_ms, self.high_ms)

    def to_json(self):
        return self.low_ms if self.low_ms == self.high_ms else [self.low_ms, self.high_ms]


@dataclass
class Channel:
    """One bidirectional link.  Loss and latency draws come from the channel's own RNG."""

    name: str
    loss_prob: float = 0.0
    latency: Latency = Latency(1.0, 1.0)
    partitions: list[tuple[float, float]] = field(default_factory=list)
    rng: random.Random = field(default_factory=random.Random)
    sent: int = 0
    lost: int = 0
    blocked: int = 0

    def partitioned(self, t: float) -> bool:
        return any(a <= t < b for a, b in self.partitions)

    def transit(self, t: float) -> Optional[float]:
        """Delay for a message sent at ``t``, or None if it is dropped."""
        self.sent += 1
        if self.partitioned(t):
            self.blocked += 1
            return None
        if self.loss_prob > 0 and self.rng.random() < self.loss_prob:
            self.lost += 1
            return None
        return self.latency.sample(self.rng)

    def lossy_drop(self) -> bool:
        """Per-packet loss with no latency draw (user-plane path)."""
        return self.loss_prob > 0 and self.rng.random() < self.loss_prob

    def send(self, loop: EventLoop, deliver: Callable, *args) -> bool:
        delay = self.transit(loop.now)
        if delay is None:
            return False
        loop.after(delay, deliver, *args)
        return True

    def stats(self) -> dict:
        return {"sent": self.sent, "lost": self.lost, "blocked": self.blocked}
