"""Environment contract consumed by the engine, solver and harness."""

from __future__ import annotations

from abc import ABC, abstractmethod
from typing import Optional, Sequence

import numpy as np

from ..engine import MacroAction
from ..instructions import InstructionRegistry


class EnvModel(ABC):
    """Base multi-agent environment with predefined macro-actions.

    Implementations must be deterministic given the rng passed to
    transition(), keep rewards finite, and end every episode by `horizon`.
    """

    name: str = "env"
    agent_count: int = 1
    horizon: int = 1
    discount: float = 0.95
    instruction_registry: InstructionRegistry

    @abstractmethod
    def initial_state(self, rng: np.random.Generator): ...

    @abstractmethod
    def primitive_actions(self, agent: int) -> Sequence[int]: ...

    @abstractmethod
    def transition(self, state, joint_action, rng: np.random.Generator): ...

    @abstractmethod
    def reward(self, state, joint_action, next_state) -> float:
        """Base-task reward (the null instruction class)."""

    @abstractmethod
    def observe(self, agent: int, state, joint_action, next_state) -> np.ndarray: ...

    def macro_observe(self, agent: int, state, joint_action, next_state) -> np.ndarray:
        return self.observe(agent, state, joint_action, next_state)

    @abstractmethod
    def initial_obs(self, agent: int, state) -> np.ndarray: ...

    def initial_macro_obs(self, agent: int, state) -> np.ndarray:
        return self.initial_obs(agent, state)

    @abstractmethod
    def is_terminal(self, state) -> bool: ...

    @abstractmethod
    def events(self, state, joint_action, next_state) -> tuple:
        """Named events for this step, used by rewards and compliance."""

    @abstractmethod
    def macro_actions(self, agent: int) -> list[MacroAction]: ...

    @abstractmethod
    def state_repr(self, state): ...

    @abstractmethod
    def render_frame(self, state, t: int = 0, active_phrase: str = "") -> dict:
        """JSON grid snapshot for the live console."""

    def build_class_reward(self, spec: dict):
        """Interpret a reward_spec tag into an R_c callable.

        Default kinds: penalty_on_event / bonus_on_event adjust the base
        reward by `amount` per occurrence of `event`, optionally suppressing
        named base reward components while the class is active.
        """
        kind = spec.get("kind")
        if kind == "base":
            return self.reward
        if kind in ("penalty_on_event", "bonus_on_event"):
            event = spec["event"]
            amount = float(spec["amount"])
            suppress = tuple(spec.get("suppress", ()))

            def r_c(state, joint_action, next_state):
                comps = self.reward_components(state, joint_action, next_state)
                total = sum(v for k, v in comps.items() if k not in suppress)
                evs = self.events(state, joint_action, next_state)
                total += amount * sum(1 for e in evs if e == event)
                return total

            return r_c
        raise ValueError(f"unknown reward_spec kind {kind!r} for {self.name}")

    def reward_components(self, state, joint_action, next_state) -> dict:
        """Named additive parts of the base reward.  Their sum must equal
        reward() exactly; environments with suppressible parts override this."""
        return {"base": self.reward(state, joint_action, next_state)}

    def default_arrival_kwargs(self) -> dict:
        """Environment defaults for the live instruction process."""
        return {"arrival_prob": 0.0}
