"""Instruction classes, their arrival/termination dynamics, and reward handling.

An episode carries at most one active instruction at a time.  Class 0 is the
null class (empty phrase, base reward).  Non-null classes arrive while the
null class is active, persist for a geometric number of steps, and then revert
to null.  Every change of the active class obliges the caller to force-terminate
all running macro-actions, in both directions (arrival and expiry).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

NULL_CLASS = 0


class ConfigError(ValueError):
    """Raised for malformed instruction/environment configuration."""


@dataclass(frozen=True)
class CompliancePredicate:
    """How an activation of a class is resolved from logged step events.

    kind "restrictive": violated as soon as `event` occurs while active,
    followed if the activation expires with no occurrence.
    kind "directive": followed as soon as `event` occurs while active (and
    within `budget` steps of activation when a budget is set), violated if
    the activation expires without it.
    """

    kind: str  # "restrictive" | "directive"
    event: str
    budget: Optional[int] = None

    def resolve(self, events_per_step: Sequence[Sequence[str]], expired: bool) -> str:
        hit_at = None
        for k, evs in enumerate(events_per_step):
            if self.event in evs:
                hit_at = k
                break
        if self.kind == "restrictive":
            if hit_at is not None:
                return "violated"
            return "followed" if expired else "pending"
        # directive
        if hit_at is not None and (self.budget is None or hit_at < self.budget):
            return "followed"
        if expired:
            return "violated"
        if self.budget is not None and len(events_per_step) >= self.budget:
            return "violated"
        return "pending"


@dataclass
class InstructionClass:
    class_id: int
    name: str
    phrases: tuple[str, ...]
    reward_fn: Callable  # (state, joint_action, next_state) -> float
    mean_duration: float = 1.0
    reward_spec: dict = field(default_factory=dict)
    compliance: Optional[CompliancePredicate] = None

    def __post_init__(self):
        if self.class_id == NULL_CLASS:
            if tuple(self.phrases) != ("",):
                raise ConfigError("null class must hold exactly the empty phrase")
        else:
            if not self.phrases or any(p == "" for p in self.phrases):
                raise ConfigError(f"class {self.class_id} needs non-empty phrases")
        if self.mean_duration < 1.0:
            raise ConfigError(f"class {self.class_id}: mean_duration must be >= 1")


class InstructionRegistry:
    """Closed-world set of instruction classes for one environment."""

    def __init__(self, classes: Sequence[InstructionClass]):
        self.classes: dict[int, InstructionClass] = {}
        seen_phrases: dict[str, int] = {}
        for c in classes:
            if c.class_id in self.classes:
                raise ConfigError(f"duplicate class_id {c.class_id}")
            for p in c.phrases:
                if p in seen_phrases:
                    raise ConfigError(f"phrase {p!r} appears in classes "
                                      f"{seen_phrases[p]} and {c.class_id}")
                seen_phrases[p] = c.class_id
            self.classes[c.class_id] = c
        if NULL_CLASS not in self.classes:
            raise ConfigError("registry must contain the null class 0")
        self._phrase_to_class = seen_phrases

    def __contains__(self, class_id: int) -> bool:
        return class_id in self.classes

    def __getitem__(self, class_id: int) -> InstructionClass:
        if class_id not in self.classes:
            raise KeyError(f"unregistered instruction class {class_id}")
        return self.classes[class_id]

    @property
    def class_ids(self) -> list[int]:
        return sorted(self.classes)

    @property
    def active_class_ids(self) -> list[int]:
        return [c for c in sorted(self.classes) if c != NULL_CLASS]

    def class_of_phrase(self, phrase: str) -> Optional[int]:
        return self._phrase_to_class.get(phrase)

    def reward_for(self, class_id: int, state, joint_action, next_state) -> float:
        """R_c for the active class; class 0 is exactly the base reward."""
        return self[class_id].reward_fn(state, joint_action, next_state)

    def to_json(self) -> list[dict]:
        out = []
        for cid in self.class_ids:
            c = self.classes[cid]
            out.append({
                "class_id": c.class_id,
                "name": c.name,
                "phrases": list(c.phrases),
                "reward_spec": c.reward_spec,
                "mean_duration": c.mean_duration,
                "gating": None,
            })
        return out

    def dump(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=2)


def registry_from_specs(env, specs: Sequence[dict]) -> InstructionRegistry:
    """Build a registry from JSON-style class specs.

    `env` must provide build_class_reward(spec) -> callable and the null base
    reward; reward_spec kinds are interpreted by the environment.
    """
    classes = [InstructionClass(
        class_id=NULL_CLASS, name="null", phrases=("",),
        reward_fn=env.reward, mean_duration=1.0, reward_spec={"kind": "base"})]
    for s in specs:
        cid = int(s["class_id"])
        if cid == NULL_CLASS:
            continue
        reward_fn = env.build_class_reward(s["reward_spec"])
        classes.append(InstructionClass(
            class_id=cid,
            name=s["name"],
            phrases=tuple(s["phrases"]),
            reward_fn=reward_fn,
            mean_duration=float(s.get("mean_duration", 1.0)),
            reward_spec=dict(s["reward_spec"]),
            compliance=compliance_from_spec(s["reward_spec"]),
        ))
    return InstructionRegistry(classes)


def compliance_from_spec(reward_spec: dict) -> Optional[CompliancePredicate]:
    kind = reward_spec.get("kind")
    # resolve_event lets the judged target differ from the rewarded one
    # (e.g., per-agent shaping rewarded, team arrival judged)
    target = reward_spec.get("resolve_event", reward_spec.get("event"))
    if kind == "penalty_on_event":
        return CompliancePredicate("restrictive", target)
    if kind == "bonus_on_event":
        return CompliancePredicate("directive", target,
                                   budget=reward_spec.get("budget"))
    if kind == "retarget_tool":
        return CompliancePredicate("directive",
                                   f"delivered_tool_{reward_spec['tool']}")
    return None


@dataclass
class AugmentedState:
    """Environment state paired with the active instruction."""

    base: object
    instruction: int = NULL_CLASS
    active_phrase: str = ""
    steps_active: int = 0

    def __post_init__(self):
        if (self.instruction == NULL_CLASS) != (self.active_phrase == ""):
            raise ConfigError("null class iff empty phrase")


@dataclass
class ArrivalProcess:
    """Per-step instruction transition model.

    While the null class is active, a non-null class arrives with probability
    `arrival_prob`, chosen by `class_weights` (restricted by `state_gating`
    when set).  An active class reverts to null with probability
    1/mean_duration per step, giving geometric active durations.
    """

    registry: InstructionRegistry
    arrival_prob: float = 0.0
    class_weights: Optional[dict[int, float]] = None
    state_gating: Optional[Callable] = None  # (class_id, state, t) -> bool

    def __post_init__(self):
        if not 0.0 <= self.arrival_prob <= 1.0:
            raise ConfigError(f"arrival_prob {self.arrival_prob} outside [0, 1]")
        active = self.registry.active_class_ids
        if self.class_weights is None:
            self.class_weights = {c: 1.0 / len(active) for c in active} if active else {}
        if active:
            total = sum(self.class_weights.get(c, 0.0) for c in active)
            if self.arrival_prob > 0.0 and total <= 0.0:
                raise ConfigError("all class weights zero with nonzero arrival_prob")
            if total > 0.0 and abs(total - 1.0) > 1e-12:
                self.class_weights = {c: self.class_weights.get(c, 0.0) / total
                                      for c in active}
        elif self.arrival_prob > 0.0:
            raise ConfigError("arrival_prob > 0 but no non-null classes registered")

    def allowed(self, class_id: int, state, t: int) -> bool:
        if self.state_gating is None:
            return True
        return bool(self.state_gating(class_id, state, t))

    def step(self, t: int, state, class_id: int, phrase: str, rng: np.random.Generator):
        aug = AugmentedState(base=state, instruction=class_id, active_phrase=phrase)
        return step_instruction(aug, None, None, self, rng, t=t)


def step_instruction(current: AugmentedState, history, joint_action,
                     process: ArrivalProcess, rng: np.random.Generator,
                     t: int = 0) -> tuple[int, str, bool]:
    """Advance the instruction process one primitive step.

    Returns (next_class_id, next_phrase, transitioned).  A transitioned result
    obliges the caller to force-terminate every running macro-action.
    """
    reg = process.registry
    c = current.instruction
    if c == NULL_CLASS:
        if process.arrival_prob > 0.0 and rng.random() < process.arrival_prob:
            candidates = [(k, w) for k, w in sorted(process.class_weights.items())
                          if w > 0.0 and process.allowed(k, current.base, t)]
            if not candidates:
                if not any(w > 0.0 for w in process.class_weights.values()):
                    raise ConfigError("arrival fired with all class weights zero")
                return NULL_CLASS, "", False  # everything gated away: no arrival
            ks = [k for k, _ in candidates]
            ws = np.array([w for _, w in candidates], dtype=float)
            ws /= ws.sum()
            new_c = int(ks[rng.choice(len(ks), p=ws)])
            phrases = reg[new_c].phrases
            new_phrase = phrases[int(rng.integers(len(phrases)))]
            return new_c, new_phrase, True
        return NULL_CLASS, "", False
    # active class: geometric termination
    if rng.random() < 1.0 / reg[c].mean_duration:
        return NULL_CLASS, "", True
    return c, current.active_phrase, False


class ScriptedSchedule:
    """Deterministic instruction source keyed by primitive step index.

    `events` maps a step t to the (class_id, phrase) that becomes active for
    step t+1.  Shares the downstream forced-termination path with the sampled
    process so scripted and sampled runs are interchangeable.
    """

    def __init__(self, registry: InstructionRegistry, events: dict[int, tuple[int, str]]):
        self.registry = registry
        self.events = dict(events)

    def step(self, t: int, state, class_id: int, phrase: str,
             rng: np.random.Generator) -> tuple[int, str, bool]:
        if t in self.events:
            new_c, new_phrase = self.events[t]
            if new_c not in self.registry:
                raise KeyError(f"scripted schedule names unregistered class {new_c}")
            return new_c, new_phrase, True
        return class_id, phrase, False


class NullArrival:
    """Arrival source that never issues instructions."""

    def __init__(self, registry: InstructionRegistry):
        self.registry = registry

    def step(self, t, state, class_id, phrase, rng):
        return class_id, phrase, False


def corrected_reward(rbar: float, gamma: float, tau_m: int,
                     v_continue: float, v_incoming: float,
                     same_class: bool) -> float:
    """Value-corrected macro-segment reward at an instruction boundary.

    When the class changed over the segment, the incoming-class bootstrap is
    cancelled and replaced by the continuation value under the outgoing class:
    rbar + gamma^tau * (v_continue - v_incoming).  Both value arguments are
    constants to any downstream gradient (plain floats here).
    """
    if tau_m < 1:
        raise ValueError(f"tau_m must be >= 1, got {tau_m}")
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma {gamma} outside [0, 1]")
    if same_class:
        return rbar
    if not (math.isfinite(v_continue) and math.isfinite(v_incoming)):
        raise ValueError("non-finite value estimate fed to corrected_reward")
    return rbar + gamma ** tau_m * (v_continue - v_incoming)


def augment_observation(obs: np.ndarray, class_embedding: np.ndarray,
                        expected_dim: Optional[int] = None) -> np.ndarray:
    """Concatenate a base observation with an instruction embedding."""
    obs = np.asarray(obs, dtype=float).ravel()
    emb = np.asarray(class_embedding, dtype=float).ravel()
    if expected_dim is not None and emb.shape[0] != expected_dim:
        raise ValueError(f"embedding dim {emb.shape[0]} != expected {expected_dim}")
    return np.concatenate([obs, emb])
