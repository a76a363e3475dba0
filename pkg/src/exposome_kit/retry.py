"""Bounded exponential backoff shared by the HTTP clients."""
from __future__ import annotations

import random
import time
from dataclasses import dataclass, field
from typing import Callable


@dataclass(frozen=True)
class RetryPolicy:
    """``max_attempts`` total tries; the k-th retry waits ``base * factor**(k-1)``.

    Jitter only lengthens a delay (up to ``jitter`` x), and the result is capped.
    """

    max_attempts: int = 5
    base: float = 0.5
    factor: float = 2.0
    cap: float = 30.0
    jitter: float = 0.25
    sleep: Callable[[float], None] = field(default=time.sleep, compare=False, repr=False)

    def __post_init__(self):
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")

    def delay(self, retry: int, rng: random.Random | None = None) -> float:
        nominal = min(self.cap, self.base * self.factor ** (retry - 1))
        u = (rng or random).random() if self.jitter else 0.0
        return min(self.cap, nominal * (1.0 + self.jitter * u))

    def wait(self, retry: int) -> None:
        self.sleep(self.delay(retry))


def no_sleep(_seconds: float) -> None:
    pass
