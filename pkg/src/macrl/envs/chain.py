"""ChainSwitch: a fully enumerable single-agent diagnostic chain.

Layout (defaults, n_states=6):

    0 start --(advance)--> 1 --(advance)--> 2 --(advance)--> 3 big sink (+R_H)
      |                     |                |
    (safe)              (retreat)        (retreat)
      v                     v                v
    4 small sink (+R_L)   5 trap (0)       5 trap (0)

States 1..2 form a one-way risky corridor; retreating from it lands in a
zero-reward trap.  The single non-null instruction class penalizes entering
the risky zone (corridor plus big sink) while active.  Absorbing states
self-loop without reward; episodes end at the horizon.  Everything is small
enough that the exact solver can enumerate the augmented product space.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..engine import MacroAction
from ..instructions import registry_from_specs
from .base import EnvModel

SAFE, ADVANCE = 0, 1


@dataclass
class ChainSwitchConfig:
    n_states: int = 6
    reward_big: float = 10.0
    reward_small: float = 6.0
    penalty: float = 25.0
    arrival_prob: float = 0.25
    mean_duration: float = 3.0
    horizon: int = 12
    discount: float = 0.95
    # instructions only arrive while the agent is in the task region
    gate_states: tuple = field(default=None)
    # randomize episode starts over the task region (training aid; evaluation
    # and the exact model always start at state 0)
    exploring_starts: bool = False

    def __post_init__(self):
        if self.n_states < 5:
            raise ValueError("ChainSwitch needs at least 5 states")
        if self.gate_states is None:
            self.gate_states = tuple(range(self.n_states - 3))


class ChainSwitchEnv(EnvModel):
    name = "chain"
    agent_count = 1

    def __init__(self, config: ChainSwitchConfig = None):
        self.config = config or ChainSwitchConfig()
        cfg = self.config
        self.n_states = cfg.n_states
        self.horizon = cfg.horizon
        self.discount = cfg.discount
        self.big_sink = cfg.n_states - 3
        self.small_sink = cfg.n_states - 2
        self.trap = cfg.n_states - 1
        self.corridor = tuple(range(1, self.big_sink))
        self.flagged = self.corridor + (self.big_sink,)
        self.instruction_registry = registry_from_specs(self, [{
            "class_id": 1,
            "name": "avoid_risky",
            "phrases": ["stay out of the corridor",
                        "avoid the risky zone",
                        "don't take the shortcut"],
            "reward_spec": {"kind": "penalty_on_event", "event": "entered_risky",
                            "amount": -cfg.penalty},
            "mean_duration": cfg.mean_duration,
        }])

    # -- dynamics ------------------------------------------------------------

    def initial_state(self, rng):
        if self.config.exploring_starts:
            return int(rng.integers(self.big_sink))
        return 0

    def primitive_actions(self, agent):
        return (SAFE, ADVANCE)

    def next_state(self, state: int, action: int) -> int:
        if state == 0:
            return 1 if action == ADVANCE else self.small_sink
        if state in self.corridor:
            return state + 1 if action == ADVANCE else self.trap
        return state  # sinks and trap self-loop

    def transition(self, state, joint_action, rng):
        return self.next_state(state, joint_action[0])

    def reward_components(self, state, joint_action, next_state):
        comps = {"big_goal": 0.0, "small_goal": 0.0}
        if next_state == self.big_sink and state != self.big_sink:
            comps["big_goal"] = self.config.reward_big
        if next_state == self.small_sink and state != self.small_sink:
            comps["small_goal"] = self.config.reward_small
        return comps

    def reward(self, state, joint_action, next_state):
        return sum(self.reward_components(state, joint_action, next_state).values())

    def events(self, state, joint_action, next_state):
        if next_state in self.flagged and next_state != state:
            return ("entered_risky",)
        return ()

    def is_terminal(self, state):
        # reward sinks end the episode; the trap parks so an active
        # instruction can expire and resolve
        return state in (self.big_sink, self.small_sink)

    def observe(self, agent, state, joint_action, next_state):
        return self._onehot(next_state)

    def initial_obs(self, agent, state):
        return self._onehot(state)

    def _onehot(self, s: int) -> np.ndarray:
        v = np.zeros(self.n_states)
        v[s] = 1.0
        return v

    def state_repr(self, state):
        return int(state)

    def state_from_obs(self, obs: np.ndarray) -> int:
        return int(np.argmax(obs))

    def macro_actions(self, agent):
        # primitive actions exposed as 1-step macros
        return [
            MacroAction(SAFE, "safe",
                        initiation=lambda h: True,
                        low_level=lambda h: SAFE,
                        termination=lambda h: 1.0),
            MacroAction(ADVANCE, "advance",
                        initiation=lambda h: True,
                        low_level=lambda h: ADVANCE,
                        termination=lambda h: 1.0),
        ]

    def render_frame(self, state, t=0, active_phrase=""):
        cells = [["corridor" if s in self.corridor else
                  "big_sink" if s == self.big_sink else
                  "small_sink" if s == self.small_sink else
                  "trap" if s == self.trap else "start"
                  for s in range(self.n_states)]]
        return {"cells": cells,
                "agents": [{"id": 0, "x": int(state), "y": 0, "macro": ""}],
                "items": [],
                "active_instruction": active_phrase}

    def default_arrival_kwargs(self):
        cfg = self.config
        gate = set(cfg.gate_states)
        return {
            "arrival_prob": cfg.arrival_prob,
            "state_gating": lambda class_id, state, t: state in gate,
        }

    # -- analytic model for the exact solver ---------------------------------

    def tabular_spec(self) -> dict:
        """Exact tensors of the base chain plus instruction metadata."""
        n, a = self.n_states, 2
        T = np.zeros((n, a, n))
        R = np.zeros((n, a, n))
        viol = np.zeros((n, a, n), dtype=bool)
        for s in range(n):
            for act in range(a):
                s2 = self.next_state(s, act)
                T[s, act, s2] = 1.0
                R[s, act, s2] = self.reward(s, (act,), s2)
                viol[s, act, s2] = bool(self.events(s, (act,), s2))
        R_classes = [R]
        for cid in self.instruction_registry.active_class_ids:
            Rc = np.zeros((n, a, n))
            fn = self.instruction_registry[cid].reward_fn
            for s in range(n):
                for act in range(a):
                    s2 = self.next_state(s, act)
                    Rc[s, act, s2] = fn(s, (act,), s2)
            R_classes.append(Rc)
        gate = np.zeros(n, dtype=bool)
        gate[list(self.config.gate_states)] = True
        return {
            "T": T,
            "R_classes": R_classes,
            "violations": [viol],  # per non-null class
            "beta": self.config.arrival_prob,
            "class_weights": np.array([1.0]),
            "expiry": np.array([1.0 / self.config.mean_duration]),
            "gate": gate,
            "gamma": self.discount,
            "horizon": self.horizon,
            "start": 0,
        }
