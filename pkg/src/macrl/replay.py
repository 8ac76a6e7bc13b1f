"""Macro-transition records and the replay buffer."""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Optional

import numpy as np


@dataclass
class MacroTransition:
    """One completed macro segment for one agent.

    `reward` is the within-segment discounted sum, `duration` its length in
    primitive steps.  A class change across the segment implies the segment
    was force-terminated by the instruction process.
    """

    agent_id: Optional[int]
    macro_id: int
    class_before: int
    class_after: int
    phrase_before: str
    phrase_after: str
    h: np.ndarray
    h_next: np.ndarray
    mask: np.ndarray
    reward: float
    duration: int
    terminal: bool
    interrupted: bool
    corrected: bool = False

    def __post_init__(self):
        if self.duration < 1:
            raise ValueError(f"duration must be >= 1, got {self.duration}")
        if self.class_after != self.class_before and not self.interrupted:
            raise ValueError("class change without forced termination")

    def to_json(self) -> dict:
        return {
            "agent_id": self.agent_id,
            "macro_id": self.macro_id,
            "class_before": self.class_before,
            "class_after": self.class_after,
            "phrase_before": self.phrase_before,
            "phrase_after": self.phrase_after,
            "h": np.asarray(self.h, dtype=float).tolist(),
            "h_next": np.asarray(self.h_next, dtype=float).tolist(),
            "mask": np.asarray(self.mask, dtype=bool).astype(int).tolist(),
            "reward": float(self.reward),
            "duration": int(self.duration),
            "terminal": bool(self.terminal),
            "interrupted": bool(self.interrupted),
            "corrected": bool(self.corrected),
        }

    @classmethod
    def from_json(cls, d: dict) -> "MacroTransition":
        return cls(
            agent_id=d["agent_id"],
            macro_id=d["macro_id"],
            class_before=d["class_before"],
            class_after=d["class_after"],
            phrase_before=d["phrase_before"],
            phrase_after=d["phrase_after"],
            h=np.asarray(d["h"], dtype=float),
            h_next=np.asarray(d["h_next"], dtype=float),
            mask=np.asarray(d["mask"], dtype=int).astype(bool),
            reward=d["reward"],
            duration=d["duration"],
            terminal=d["terminal"],
            interrupted=d["interrupted"],
            corrected=d["corrected"],
        )


def transitions_equal(a: MacroTransition, b: MacroTransition) -> bool:
    return (a.agent_id == b.agent_id and a.macro_id == b.macro_id
            and a.class_before == b.class_before and a.class_after == b.class_after
            and a.phrase_before == b.phrase_before and a.phrase_after == b.phrase_after
            and np.array_equal(a.h, b.h) and np.array_equal(a.h_next, b.h_next)
            and np.array_equal(a.mask, b.mask)
            and a.reward == b.reward and a.duration == b.duration
            and a.terminal == b.terminal and a.interrupted == b.interrupted
            and a.corrected == b.corrected)


class ReplayBuffer:
    """Bounded FIFO buffer with thread-safe appends and snapshot sampling."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._items: list[MacroTransition] = []
        self._next = 0
        self._lock = threading.Lock()

    def add(self, tr: MacroTransition) -> None:
        with self._lock:
            if len(self._items) < self.capacity:
                self._items.append(tr)
            else:
                self._items[self._next] = tr
                self._next = (self._next + 1) % self.capacity

    def extend(self, trs) -> None:
        for tr in trs:
            self.add(tr)

    def __len__(self) -> int:
        with self._lock:
            return len(self._items)

    def sample(self, batch_size: int, rng: np.random.Generator,
               agent_id: Optional[int] = "unset",
               active_frac: Optional[float] = None) -> list[MacroTransition]:
        """Uniform sample (with replacement when the pool is smaller than the
        batch).  Pass agent_id to restrict to one agent's transitions.

        `active_frac` stratifies the batch: at least that fraction is drawn
        from transitions taken under a non-null instruction (when any exist),
        so rare instruction contexts stay represented in every update.
        """
        with self._lock:
            pool = list(self._items)
        if agent_id != "unset":
            pool = [t for t in pool if t.agent_id == agent_id]
        if not pool:
            return []

        def draw(sub, k):
            if not sub or k <= 0:
                return []
            replace = len(sub) < k
            idx = rng.choice(len(sub), size=k, replace=replace)
            return [sub[i] for i in np.atleast_1d(idx)]

        if active_frac:
            active = [t for t in pool if t.class_before != 0]
            rest = [t for t in pool if t.class_before == 0]
            if active and rest:
                k_active = max(1, int(round(batch_size * active_frac)))
                return (draw(active, min(k_active, batch_size))
                        + draw(rest, batch_size - min(k_active, batch_size)))
        return draw(pool, batch_size)
