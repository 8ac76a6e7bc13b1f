"""Macro-action simulation engine.

Executes joint macro-actions primitive step by primitive step until any
macro-action terminates naturally, an instruction transition forces
termination, or the horizon/terminal state ends the episode.  Termination is
asynchronous: when one agent's macro ends, only that agent re-selects; the
others keep executing theirs.  A segment boundary is recorded at every such
event.

All randomness flows through four named substreams spawned from one seed
(env, arrival, termination, actor), so a scripted instruction schedule leaves
the env/actor streams untouched and reproduces a sampled run exactly.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .instructions import NULL_CLASS, InstructionRegistry
from .replay import MacroTransition


class ContractViolation(RuntimeError):
    """An engine precondition was broken (bad macro selection, terminal input)."""


@dataclass(frozen=True)
class MacroAction:
    """Temporally extended action: initiation set, low-level policy, termination.

    `initiation` and `termination` are evaluated on the agent's history;
    `low_level` maps the history to a primitive action.  `termination` returns
    the probability in [0, 1] that the macro ends after the current step.
    """

    id: int
    name: str
    initiation: Callable[["AgentHistory"], bool]
    low_level: Callable[["AgentHistory"], int]
    termination: Callable[["AgentHistory"], float]


@dataclass
class AgentHistory:
    """Clipped per-agent history of macro-level and primitive-level activity."""

    agent_id: int
    window: int = 8
    primitive_window: int = 4
    macro_pairs: deque = field(default_factory=deque)       # (macro_obs, macro_id)
    primitive_pairs: deque = field(default_factory=deque)   # (obs, action)
    current_macro_obs: Optional[np.ndarray] = None
    steps_in_macro: int = 0

    def push_macro(self, macro_obs: np.ndarray, macro_id: int) -> None:
        self.macro_pairs.append((np.asarray(macro_obs, dtype=float), int(macro_id)))
        while len(self.macro_pairs) > self.window:
            self.macro_pairs.popleft()

    def push_primitive(self, obs: np.ndarray, action: int) -> None:
        self.primitive_pairs.append((np.asarray(obs, dtype=float), int(action)))
        while len(self.primitive_pairs) > self.primitive_window:
            self.primitive_pairs.popleft()
        self.steps_in_macro += 1

    @property
    def latest_obs(self) -> Optional[np.ndarray]:
        if self.primitive_pairs:
            return self.primitive_pairs[-1][0]
        return self.current_macro_obs


def history_features(hist: AgentHistory, n_macros: int) -> np.ndarray:
    """Fixed-size feature vector: window of (macro-obs, macro one-hot) pairs
    plus the pending macro-observation.  Zero-padded on the left."""
    z_dim = len(hist.current_macro_obs)
    entry = z_dim + n_macros
    out = np.zeros(hist.window * entry + z_dim, dtype=float)
    pairs = list(hist.macro_pairs)[-hist.window:]
    off = (hist.window - len(pairs)) * entry
    for z, m in pairs:
        out[off:off + z_dim] = z
        out[off + z_dim + m] = 1.0
        off += entry
    out[hist.window * entry:] = hist.current_macro_obs
    return out


@dataclass
class MacroSegment:
    """One stretch of primitive steps between macro boundaries."""

    segment_id: int
    start_step: int
    duration: int
    accumulated_reward: float  # within-segment discounted sum
    terminated_agents: frozenset
    interrupted: bool


@dataclass
class StepRecord:
    t: int
    state_repr: object
    joint_primitive: tuple
    reward: float
    per_agent_obs: tuple
    active_class: int
    active_phrase: str
    segment_id: int
    events: tuple

    def to_json(self) -> dict:
        return {
            "t": self.t,
            "state_repr": self.state_repr,
            "joint_primitive": list(self.joint_primitive),
            "reward": self.reward,
            "per_agent_obs": [np.asarray(o).tolist() for o in self.per_agent_obs],
            "active_instruction": {"class_id": self.active_class,
                                   "phrase": self.active_phrase},
            "segment_id": self.segment_id,
            "events": list(self.events),
        }


@dataclass
class Activation:
    class_id: int
    phrase: str
    t_start: int
    t_end: Optional[int] = None  # exclusive; None while still active
    expired: bool = False


@dataclass
class EpisodeResult:
    trace: list
    segments: list
    transitions: list
    activations: list
    undiscounted_return: float
    discounted_return: float
    steps: int

    def dump_trace(self, path) -> None:
        with open(path, "w") as f:
            for rec in self.trace:
                f.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")


def joint_return(trace: Sequence, gamma: float) -> float:
    """Discounted return of a primitive trace; empty traces return 0."""
    total = 0.0
    for rec in trace:
        r = rec.reward if hasattr(rec, "reward") else rec[1]
        t = rec.t if hasattr(rec, "t") else rec[0]
        total += gamma ** t * r
    return total


def run_macro_step(env, state, histories: Sequence[AgentHistory],
                   joint_macro: Sequence[MacroAction], interrupt: Callable,
                   rng: np.random.Generator, registry: InstructionRegistry,
                   class_id: int = NULL_CLASS, start_step: int = 0,
                   rng_term: Optional[np.random.Generator] = None):
    """Execute primitives from a joint macro until the first boundary.

    `interrupt(t, state, joint_action, next_state)` is checked after each
    primitive step; when it reports an instruction transition the segment ends
    immediately and no termination is sampled that step.  Otherwise each
    agent's termination function is sampled Bernoulli.

    Returns (MacroSegment, next_state, histories, step_records).
    """
    if env.is_terminal(state):
        raise ContractViolation("run_macro_step called on a terminal state")
    for hist, macro in zip(histories, joint_macro):
        if not macro.initiation(hist):
            raise ContractViolation(
                f"macro {macro.name!r} not initiable for agent {hist.agent_id}")
    rng_term = rng_term if rng_term is not None else rng
    gamma = env.discount
    records = []
    acc = 0.0
    k = 0
    interrupted = False
    fired: set[int] = set()
    while True:
        t = start_step + k
        joint_action = tuple(m.low_level(h) for m, h in zip(joint_macro, histories))
        next_state = env.transition(state, joint_action, rng)
        r = registry.reward_for(class_id, state, joint_action, next_state)
        events = env.events(state, joint_action, next_state)
        for i, hist in enumerate(histories):
            obs = env.observe(i, state, joint_action, next_state)
            hist.push_primitive(obs, joint_action[i])
        acc += gamma ** k * r
        records.append((t, state, joint_action, r, next_state, events))
        k += 1
        if interrupt is not None and interrupt(t, state, joint_action, next_state):
            interrupted = True
            break
        if env.is_terminal(next_state) or t + 1 >= env.horizon:
            break
        beta = {i: m.termination(h) for i, (m, h) in
                enumerate(zip(joint_macro, histories))}
        for i, b in beta.items():
            if not 0.0 <= b <= 1.0:
                raise ContractViolation(f"termination prob {b} outside [0, 1]")
            if b >= 1.0 or (b > 0.0 and rng_term.random() < b):
                fired.add(i)
        state = next_state
        if fired:
            break
    segment = MacroSegment(
        segment_id=0, start_step=start_step, duration=k,
        accumulated_reward=acc,
        terminated_agents=frozenset() if interrupted else frozenset(fired),
        interrupted=interrupted)
    return segment, records[-1][4], list(histories), records


class EpisodeRunner:
    """Incremental episode execution shared by training, evaluation and the
    live bridge.  Call step() repeatedly until it reports done."""

    def __init__(self, env, macro_sets: Sequence[Sequence[MacroAction]], policy,
                 arrival, seed: int, window: int = 8,
                 collect_transitions: bool = True, record_joint: bool = False,
                 horizon: Optional[int] = None,
                 initial_instruction: Optional[tuple] = None):
        self.env = env
        self.macro_sets = [list(ms) for ms in macro_sets]
        self.policy = policy
        self.arrival = arrival
        self.registry: InstructionRegistry = env.instruction_registry
        self.window = window
        self.collect_transitions = collect_transitions
        self.record_joint = record_joint
        self.record_joint = record_joint
        self.horizon = horizon if horizon is not None else env.horizon
        ss = np.random.SeedSequence(seed)
        env_s, arr_s, term_s, act_s = ss.spawn(4)
        self.rng_env = np.random.Generator(np.random.PCG64(env_s))
        self.rng_arrival = np.random.Generator(np.random.PCG64(arr_s))
        self.rng_term = np.random.Generator(np.random.PCG64(term_s))
        self.rng_actor = np.random.Generator(np.random.PCG64(act_s))

        self.state = env.initial_state(self.rng_env)
        self.class_id = NULL_CLASS
        self.phrase = ""
        if initial_instruction is not None:
            self.class_id, self.phrase = initial_instruction
            if self.class_id not in self.registry:
                raise ContractViolation(
                    f"initial instruction names unknown class {self.class_id}")
        self.t = 0
        self.done = False
        self.trace: list[StepRecord] = []
        self.segments: list[MacroSegment] = []
        self.transitions: list[MacroTransition] = []
        self.activations: list[Activation] = []
        self._seg_id = 0
        self._seg_start = 0
        self._seg_reward = 0.0
        self.undiscounted_return = 0.0
        self.discounted_return = 0.0

        n = env.agent_count
        self.histories = [AgentHistory(i, window=window) for i in range(n)]
        for i, h in enumerate(self.histories):
            h.current_macro_obs = np.asarray(
                env.initial_macro_obs(i, self.state), dtype=float)
        self.current_macros: list[Optional[MacroAction]] = [None] * n
        self._open: list[Optional[dict]] = [None] * n
        for i in range(n):
            self._select(i, start=0)

    # -- selection ---------------------------------------------------------

    def _select(self, agent: int, start: int = 0) -> None:
        """Pick a macro for one agent; `start` is the step its first
        primitive will execute at."""
        hist = self.histories[agent]
        macros = self.macro_sets[agent]
        mask = np.array([bool(m.initiation(hist)) for m in macros])
        if not mask.any():
            raise ContractViolation(f"no initiable macro for agent {agent}")
        feats = history_features(hist, len(macros))
        macro_id = self.policy.select(agent, hist, feats, mask,
                                      self.class_id, self.phrase, self.rng_actor)
        if not mask[macro_id]:
            raise ContractViolation(
                f"policy selected non-initiable macro {macro_id} for agent {agent}")
        macro = macros[macro_id]
        hist.push_macro(hist.current_macro_obs, macro_id)
        hist.steps_in_macro = 0
        self.current_macros[agent] = macro
        self._open[agent] = {
            "start": start, "macro_id": macro_id, "class": self.class_id,
            "phrase": self.phrase, "h": feats, "mask": mask.copy(), "racc": 0.0,
        }

    # -- stepping ----------------------------------------------------------

    def step(self):
        """Advance one primitive step.  Returns the StepRecord."""
        if self.done:
            raise ContractViolation("step() on a finished episode")
        env = self.env
        gamma = env.discount
        joint = tuple(m.low_level(h) for m, h in
                      zip(self.current_macros, self.histories))
        next_state = env.transition(self.state, joint, self.rng_env)
        r = self.registry.reward_for(self.class_id, self.state, joint, next_state)
        events = env.events(self.state, joint, next_state)
        for i, hist in enumerate(self.histories):
            obs = env.observe(i, self.state, joint, next_state)
            hist.push_primitive(obs, joint[i])
            self._open[i]["racc"] += gamma ** (self.t - self._open[i]["start"]) * r
        rec = StepRecord(
            t=self.t, state_repr=env.state_repr(self.state), joint_primitive=joint,
            reward=float(r), per_agent_obs=tuple(hist.primitive_pairs[-1][0]
                                                 for hist in self.histories),
            active_class=self.class_id, active_phrase=self.phrase,
            segment_id=self._seg_id, events=events)
        self.trace.append(rec)
        self._seg_reward += gamma ** (self.t - self._seg_start) * r
        self.undiscounted_return += r
        self.discounted_return += gamma ** self.t * r

        terminal = env.is_terminal(next_state)
        horizon_end = self.t + 1 >= self.horizon
        episode_end = terminal or horizon_end
        if episode_end:
            # no instruction is issued at the moment the episode ends; an
            # arrival here could never be acted on and would only ever
            # resolve as pending
            new_c, new_phrase, transitioned = self.class_id, self.phrase, False
        else:
            new_c, new_phrase, transitioned = self.arrival.step(
                self.t, next_state, self.class_id, self.phrase, self.rng_arrival)

        fired: set[int] = set()
        if not transitioned and not episode_end:
            for i, (m, h) in enumerate(zip(self.current_macros, self.histories)):
                b = m.termination(h)
                if not 0.0 <= b <= 1.0:
                    raise ContractViolation(f"termination prob {b} outside [0, 1]")
                if b >= 1.0 or (b > 0.0 and self.rng_term.random() < b):
                    fired.add(i)

        boundary = transitioned or episode_end or bool(fired)
        if boundary:
            self.segments.append(MacroSegment(
                segment_id=self._seg_id, start_step=self._seg_start,
                duration=self.t - self._seg_start + 1,
                accumulated_reward=self._seg_reward,
                terminated_agents=frozenset(fired) if not transitioned else frozenset(),
                interrupted=transitioned))
            if transitioned or episode_end:
                ending = set(range(env.agent_count))
            else:
                ending = fired
            for i in sorted(ending):
                self._close_macro(i, joint, next_state, new_c, new_phrase,
                                  episode_end, transitioned)
            if (self.record_joint and self.collect_transitions
                    and len(ending) == env.agent_count):
                self._close_joint(new_c, new_phrase, episode_end, transitioned)
            self.class_id, self.phrase = new_c, new_phrase
            if not episode_end:
                for i in sorted(ending):
                    self._select(i, start=self.t + 1)
            self._seg_id += 1
            self._seg_start = self.t + 1
            self._seg_reward = 0.0
        else:
            self.class_id, self.phrase = new_c, new_phrase

        if transitioned:
            self._note_transition(new_c, new_phrase)
        self.state = next_state
        self.t += 1
        if episode_end:
            self.done = True
            for act in self.activations:
                if act.t_end is None:
                    act.t_end = self.t
                    act.expired = False
        return rec

    def _close_macro(self, agent: int, joint, next_state, new_c, new_phrase,
                     episode_end: bool, interrupted: bool) -> None:
        hist = self.histories[agent]
        open_rec = self._open[agent]
        z2 = np.asarray(self.env.macro_observe(agent, self.state, joint, next_state),
                        dtype=float)
        hist.current_macro_obs = z2
        if not self.collect_transitions:
            return
        h2 = history_features(hist, len(self.macro_sets[agent]))
        self.transitions.append(MacroTransition(
            agent_id=agent,
            macro_id=open_rec["macro_id"],
            class_before=open_rec["class"],
            class_after=new_c,
            phrase_before=open_rec["phrase"],
            phrase_after=new_phrase,
            h=open_rec["h"],
            h_next=h2,
            mask=open_rec["mask"],
            reward=open_rec["racc"],
            duration=self.t - open_rec["start"] + 1,
            terminal=episode_end,
            interrupted=interrupted,
        ))

    def _close_joint(self, new_c, new_phrase, episode_end: bool,
                     interrupted: bool) -> None:
        """Concatenated team record for centralized-evaluation variants; only
        emitted when every agent's macro closed at this boundary."""
        parts = self.transitions[-self.env.agent_count:]
        self.transitions.append(MacroTransition(
            agent_id=None,
            macro_id=-1,
            class_before=parts[0].class_before,
            class_after=new_c,
            phrase_before=parts[0].phrase_before,
            phrase_after=new_phrase,
            h=np.concatenate([p.h for p in parts]),
            h_next=np.concatenate([p.h_next for p in parts]),
            mask=np.concatenate([p.mask for p in parts]),
            reward=parts[0].reward,
            duration=max(p.duration for p in parts),
            terminal=episode_end,
            interrupted=interrupted,
        ))

    def _note_transition(self, new_c: int, new_phrase: str) -> None:
        for act in self.activations:
            if act.t_end is None:
                act.t_end = self.t + 1
                act.expired = True
        if new_c != NULL_CLASS:
            self.activations.append(Activation(new_c, new_phrase, self.t + 1))

    def run(self) -> EpisodeResult:
        while not self.done:
            self.step()
        return EpisodeResult(
            trace=self.trace, segments=self.segments, transitions=self.transitions,
            activations=self.activations,
            undiscounted_return=self.undiscounted_return,
            discounted_return=self.discounted_return, steps=self.t)


def run_episode(env, macro_sets, policy, arrival, seed: int, window: int = 8,
                collect_transitions: bool = True,
                horizon: Optional[int] = None) -> EpisodeResult:
    return EpisodeRunner(env, macro_sets, policy, arrival, seed, window=window,
                         collect_transitions=collect_transitions,
                         horizon=horizon).run()


def segment_primitive_consistency(result: EpisodeResult, gamma: float) -> float:
    """Max absolute gap between segment sums and the primitive-trace return."""
    total = sum(gamma ** seg.start_step * seg.accumulated_reward
                for seg in result.segments)
    return abs(total - joint_return(result.trace, gamma))


def load_trace(path) -> list[dict]:
    records = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records
