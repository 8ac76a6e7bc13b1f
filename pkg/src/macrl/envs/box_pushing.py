"""Cooperative box pushing on a small grid.

Two agents share a field with one big box (spanning two columns, movable only
when both halves are pushed in the same step) and two single-agent small
boxes.  Pushing means moving up into a box cell from directly below; boxes
only travel toward the goal row.  The episode ends when the big box is
delivered or the horizon runs out.

Instructions either forbid moving the big box (penalty per moved step, big
delivery unrewarded while active) or call both agents to the small boxes
(bonus on arrival, big delivery unrewarded while active).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ..engine import MacroAction
from ..instructions import registry_from_specs
from .base import EnvModel

STAY, UP, DOWN, LEFT, RIGHT = range(5)
DELTAS = {STAY: (0, 0), UP: (0, -1), DOWN: (0, 1), LEFT: (-1, 0), RIGHT: (1, 0)}


@dataclass(frozen=True)
class BPState:
    agents: tuple          # ((x, y), (x, y))
    big_row: int           # -1 once delivered
    small_rows: tuple      # row per small column, -1 once delivered


@dataclass
class BoxPushingConfig:
    width: int = 5
    height: int = 4
    big_cols: tuple = (1, 2)
    small_cols: tuple = (0, 4)
    boxes_row: int = 2
    agent_starts: tuple = ((1, 3), (3, 3))
    reward_big: float = 300.0
    reward_small: float = 20.0
    step_cost: float = -0.5
    push_penalty: float = -10.0
    small_bonus: float = 15.0
    horizon: int = 14
    discount: float = 0.95
    arrival_prob: float = 0.2
    arrival_cutoff: int = 6      # no arrivals after this step
    arrival_weights: tuple = ()  # (class_id, weight) pairs; empty = uniform
    no_push_duration: float = 2.0
    go_small_duration: float = 5.0
    # randomize agent placement at reset (training aid; evaluation always
    # uses agent_starts)
    exploring_starts: bool = False

    def __post_init__(self):
        if self.boxes_row < 1 or self.boxes_row >= self.height - 1:
            raise ValueError("boxes_row must leave room below and a goal row above")


class BoxPushingEnv(EnvModel):
    name = "box_pushing"
    agent_count = 2

    def __init__(self, config: BoxPushingConfig = None):
        self.config = config or BoxPushingConfig()
        cfg = self.config
        self.horizon = cfg.horizon
        self.discount = cfg.discount
        self.instruction_registry = registry_from_specs(self, [
            {
                "class_id": 1,
                "name": "no_push_big",
                "phrases": ["don't push the box", "do not push the big box",
                            "stop pushing the box"],
                "reward_spec": {"kind": "penalty_on_event",
                                "event": "big_box_moved",
                                "amount": cfg.push_penalty,
                                "suppress": ["big_goal"]},
                "mean_duration": cfg.no_push_duration,
            },
            {
                "class_id": 2,
                "name": "go_small",
                # rewarded per agent near its small box so each learner gets
                # dense credit; compliance still requires both to arrive
                "phrases": ["go to small boxes", "go to the small boxes",
                            "push the small boxes"],
                "reward_spec": {"kind": "bonus_on_event",
                                "event": "agent_at_small_box",
                                "amount": cfg.small_bonus,
                                "suppress": ["big_goal"],
                                "resolve_event": "agents_at_small_boxes"},
                "mean_duration": cfg.go_small_duration,
            },
        ])

    # -- state helpers -------------------------------------------------------

    def initial_state(self, rng):
        cfg = self.config
        base = BPState(agents=tuple(cfg.agent_starts), big_row=cfg.boxes_row,
                       small_rows=(cfg.boxes_row, cfg.boxes_row))
        if not cfg.exploring_starts:
            return base
        big_row = int(rng.integers(1, cfg.boxes_row + 1))
        small_rows = (int(rng.integers(1, cfg.boxes_row + 1)),
                      int(rng.integers(1, cfg.boxes_row + 1)))
        varied = BPState(agents=base.agents, big_row=big_row,
                         small_rows=small_rows)
        free = [(x, y) for x in range(cfg.width) for y in range(cfg.height)
                if (x, y) not in self.box_cells(varied)]
        idx = rng.choice(len(free), size=2, replace=False)
        return BPState(agents=(free[int(idx[0])], free[int(idx[1])]),
                       big_row=big_row, small_rows=small_rows)

    def big_cells(self, state) -> set:
        if state.big_row < 0:
            return set()
        return {(c, state.big_row) for c in self.config.big_cols}

    def small_cells(self, state) -> dict:
        out = {}
        for i, col in enumerate(self.config.small_cols):
            if state.small_rows[i] >= 0:
                out[(col, state.small_rows[i])] = i
        return out

    def box_cells(self, state) -> set:
        return self.big_cells(state) | set(self.small_cells(state))

    def is_terminal(self, state):
        return state.big_row < 0

    def primitive_actions(self, agent):
        return tuple(range(5))

    # -- dynamics -------------------------------------------------------------

    def transition(self, state: BPState, joint_action, rng):
        cfg = self.config
        agents = list(state.agents)
        big_row = state.big_row
        small_rows = list(state.small_rows)
        big = self.big_cells(state)
        smalls = self.small_cells(state)

        desires = []
        for i, a in enumerate(joint_action):
            dx, dy = DELTAS[int(a)]
            x, y = agents[i]
            nx, ny = x + dx, y + dy
            if not (0 <= nx < cfg.width and 0 <= ny < cfg.height):
                desires.append((x, y))
            else:
                desires.append((nx, ny))

        # push resolution: moving up into a box cell from directly below
        big_push_cols = set()
        small_push = {}
        for i, a in enumerate(joint_action):
            if int(a) != UP:
                continue
            target = desires[i]
            if target in big:
                big_push_cols.add(target[0])
            elif target in smalls:
                small_push[i] = target

        moved_big = False
        if (big_row > 0 and big_push_cols == set(cfg.big_cols)
                and not any((c, big_row - 1) in small_push.values()
                            for c in cfg.big_cols)
                and not any(tuple(p) == (c, big_row - 1)
                            for c in cfg.big_cols for p in agents)):
            big_row -= 1
            moved_big = True

        moved_small = []
        for i, (cx, cy) in small_push.items():
            idx = smalls[(cx, cy)]
            above = (cx, cy - 1)
            if cy > 0 and above not in self.big_cells(
                    replace(state, big_row=big_row)) and not any(
                    tuple(p) == above for p in agents):
                small_rows[idx] -= 1
                moved_small.append(idx)

        # final occupancy after box motion
        new_boxes = ({(c, big_row) for c in cfg.big_cols} if big_row >= 0 else set())
        for j, col in enumerate(cfg.small_cols):
            if small_rows[j] >= 0:
                new_boxes.add((col, small_rows[j]))

        targets = []
        for i, a in enumerate(joint_action):
            act = int(a)
            want = desires[i]
            if act == UP and want in big:
                # follow a successful joint push, else blocked
                targets.append(want if moved_big else tuple(agents[i]))
            elif act == UP and want in smalls:
                targets.append(want if smalls[want] in moved_small
                               else tuple(agents[i]))
            elif want in new_boxes:
                targets.append(tuple(agents[i]))
            else:
                targets.append(want)

        # agent-agent conflicts: same target or swap -> both stay
        if targets[0] == targets[1]:
            targets = [tuple(agents[0]), tuple(agents[1])]
        elif targets[0] == tuple(agents[1]) and targets[1] == tuple(agents[0]):
            targets = [tuple(agents[0]), tuple(agents[1])]
        else:
            for i, j in ((0, 1), (1, 0)):
                if targets[i] == tuple(agents[j]) and targets[j] == tuple(agents[j]):
                    targets[i] = tuple(agents[i])

        big_row_final = big_row
        if big_row == 0 and moved_big:
            pass
        if big_row == 0:
            big_row_final = -1 if moved_big else big_row
        # delivery: reaching the goal row marks the box delivered
        if moved_big and big_row == 0:
            big_row_final = -1
        small_final = [(-1 if r == 0 and j in moved_small else r)
                       for j, r in enumerate(small_rows)]
        return BPState(agents=tuple(tuple(t) for t in targets),
                       big_row=big_row_final,
                       small_rows=tuple(small_final))

    def _deliveries(self, state: BPState, next_state: BPState):
        big = state.big_row >= 0 and next_state.big_row < 0
        small = [state.small_rows[j] >= 0 and next_state.small_rows[j] < 0
                 for j in range(len(self.config.small_cols))]
        return big, small

    def reward_components(self, state, joint_action, next_state):
        big, small = self._deliveries(state, next_state)
        return {
            "big_goal": self.config.reward_big if big else 0.0,
            "small_goal": self.config.reward_small * sum(small),
            "step_cost": self.config.step_cost,
        }

    def reward(self, state, joint_action, next_state):
        return sum(self.reward_components(state, joint_action, next_state).values())

    def events(self, state, joint_action, next_state):
        evs = []
        if next_state.big_row != state.big_row:
            evs.append("big_box_moved")
        if any(next_state.small_rows[j] != state.small_rows[j]
               for j in range(len(self.config.small_cols))):
            evs.append("small_box_moved")
        big, small = self._deliveries(state, next_state)
        if big:
            evs.append("big_delivered")
        if any(small):
            evs.append("small_delivered")
        for agent in range(self.agent_count):
            if self._near_small(next_state, agent):
                evs.append("agent_at_small_box")
        if self._both_near_smalls(next_state):
            evs.append("agents_at_small_boxes")
        return tuple(evs)

    def _near_small(self, state: BPState, agent: int) -> bool:
        # within one step of the agent's assigned small box
        col = self.config.small_cols[agent]
        row = state.small_rows[agent]
        row = row if row >= 0 else 0
        pos = state.agents[agent]
        return abs(pos[0] - col) + abs(pos[1] - row) <= 1

    def _both_near_smalls(self, state: BPState) -> bool:
        return all(self._near_small(state, agent)
                   for agent in range(self.agent_count))

    # -- observations ----------------------------------------------------------

    def observe(self, agent, state, joint_action, next_state):
        return self._obs(agent, next_state)

    def initial_obs(self, agent, state):
        return self._obs(agent, state)

    def _obs(self, agent, state: BPState) -> np.ndarray:
        me = state.agents[agent]
        other = state.agents[1 - agent]
        cfg = self.config
        return np.array([
            me[0], me[1], other[0], other[1],
            state.big_row, state.small_rows[0], state.small_rows[1],
            1.0 if state.big_row < 0 else 0.0,
            1.0 if me == self._big_slot(agent, state) else 0.0,
            1.0 if me == self._small_slot(agent, state) else 0.0,
        ], dtype=float)

    def _big_slot(self, agent, state: BPState):
        col = self.config.big_cols[agent]
        return (col, (state.big_row if state.big_row >= 0 else 0) + 1)

    def _small_slot(self, agent, state: BPState):
        col = self.config.small_cols[agent]
        row = state.small_rows[agent]
        return (col, (row if row >= 0 else 0) + 1)

    def state_repr(self, state: BPState):
        return {"agents": [list(p) for p in state.agents],
                "big_row": state.big_row,
                "small_rows": list(state.small_rows)}

    # -- macros -----------------------------------------------------------------

    def _decode_pos(self, hist, agent):
        obs = hist.latest_obs
        return int(round(obs[0])), int(round(obs[1]))

    def _decode_big_row(self, hist):
        return int(round(hist.latest_obs[4]))

    def _decode_small_row(self, hist, agent):
        return int(round(hist.latest_obs[5 + agent]))

    def _greedy_step(self, pos, target, blocked) -> int:
        """One step toward target, preferring the larger axis gap, avoiding
        blocked cells; stays when boxed in."""
        if pos == target:
            return STAY
        dx, dy = target[0] - pos[0], target[1] - pos[1]
        prefs = []
        if abs(dx) >= abs(dy) and dx != 0:
            prefs.append(LEFT if dx < 0 else RIGHT)
        if dy != 0:
            prefs.append(UP if dy < 0 else DOWN)
        if abs(dx) < abs(dy) and dx != 0:
            prefs.append(LEFT if dx < 0 else RIGHT)
        for act in prefs:
            d = DELTAS[act]
            cell = (pos[0] + d[0], pos[1] + d[1])
            if (0 <= cell[0] < self.config.width
                    and 0 <= cell[1] < self.config.height
                    and cell not in blocked):
                return act
        return STAY

    def _blocked_cells(self, hist, agent):
        big_row = self._decode_big_row(hist)
        cells = set()
        if big_row >= 0:
            cells |= {(c, big_row) for c in self.config.big_cols}
        for j, col in enumerate(self.config.small_cols):
            row = self._decode_small_row(hist, j)
            if row >= 0:
                cells.add((col, row))
        obs = hist.latest_obs
        cells.add((int(round(obs[2])), int(round(obs[3]))))  # other agent
        return cells

    def macro_actions(self, agent):
        cfg = self.config
        prims = [MacroAction(i, nm, lambda h: True,
                             (lambda a: lambda h: a)(i), lambda h: 1.0)
                 for i, nm in enumerate(["stay", "up", "down", "left", "right"])]

        def big_slot(hist):
            row = self._decode_big_row(hist)
            return (cfg.big_cols[agent], (row if row >= 0 else 0) + 1)

        def small_slot(hist):
            row = self._decode_small_row(hist, agent)
            return (cfg.small_cols[agent], (row if row >= 0 else 0) + 1)

        def goto_big_low(hist):
            return self._greedy_step(self._decode_pos(hist, agent), big_slot(hist),
                                     self._blocked_cells(hist, agent))

        def goto_small_low(hist):
            return self._greedy_step(self._decode_pos(hist, agent),
                                     small_slot(hist),
                                     self._blocked_cells(hist, agent))

        goto_big = MacroAction(
            5, "go_to_big_box",
            initiation=lambda h: self._decode_big_row(h) >= 0,
            low_level=goto_big_low,
            termination=lambda h: 1.0 if (self._decode_big_row(h) < 0 or
                                          self._decode_pos(h, agent) == big_slot(h))
            else 0.0)

        def push_big_low(hist):
            # approach the push slot, then push; persistence lets the two
            # agents synchronize without selecting in the same round
            if self._decode_pos(hist, agent) == big_slot(hist):
                return UP
            return goto_big_low(hist)

        push_big = MacroAction(
            6, "push_big",
            initiation=lambda h: self._decode_big_row(h) >= 0,
            low_level=push_big_low,
            termination=lambda h: 1.0 if self._decode_big_row(h) < 0 else 0.0)
        goto_small = MacroAction(
            7, "go_to_small_box",
            initiation=lambda h: self._decode_small_row(h, agent) >= 0,
            low_level=goto_small_low,
            termination=lambda h: 1.0 if (self._decode_small_row(h, agent) < 0 or
                                          self._decode_pos(h, agent) == small_slot(h))
            else 0.0)

        def push_small_low(hist):
            if self._decode_pos(hist, agent) == small_slot(hist):
                return UP
            return goto_small_low(hist)

        push_small = MacroAction(
            8, "push_small",
            initiation=lambda h: self._decode_small_row(h, agent) >= 0,
            low_level=push_small_low,
            termination=lambda h: 1.0 if self._decode_small_row(h, agent) < 0
            else 0.0)
        return prims + [goto_big, push_big, goto_small, push_small]

    def render_frame(self, state: BPState, t=0, active_phrase=""):
        cfg = self.config
        cells = [["." for _ in range(cfg.width)] for _ in range(cfg.height)]
        for c in self.big_cells(state):
            cells[c[1]][c[0]] = "B"
        for c in self.small_cells(state):
            cells[c[1]][c[0]] = "b"
        items = [{"kind": "goal_row", "y": 0}]
        agents = [{"id": i, "x": p[0], "y": p[1]} for i, p in enumerate(state.agents)]
        return {"cells": cells, "agents": agents, "items": items,
                "active_instruction": active_phrase}

    def default_arrival_kwargs(self):
        cfg = self.config
        kwargs = {
            "arrival_prob": cfg.arrival_prob,
            "state_gating": lambda class_id, state, t: t <= cfg.arrival_cutoff,
        }
        if cfg.arrival_weights:
            kwargs["class_weights"] = {int(c): float(w)
                                       for c, w in cfg.arrival_weights}
        return kwargs
