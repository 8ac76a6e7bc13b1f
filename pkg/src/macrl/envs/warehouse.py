"""Warehouse tool delivery with heterogeneous agents.

A fixed robot arm stages tools one at a time at a staging cell; two mobile
robots carry staged tools across the floor to three human workers who
alternate between their workstations and a break area on a seeded schedule.
Deliveries only count when the worker is at their station.  By default tools
are wanted in a fixed order; a "get me tool k" instruction retargets the
wanted tool while it is active.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..engine import MacroAction
from ..instructions import registry_from_specs
from .base import EnvModel

STAY, UP, DOWN, LEFT, RIGHT, USE = range(6)
DELTAS = {STAY: (0, 0), UP: (0, -1), DOWN: (0, 1), LEFT: (-1, 0), RIGHT: (1, 0)}

ARM = 0  # agent 0 is the arm; agents 1..2 are mobile


@dataclass(frozen=True)
class WTDState:
    mobiles: tuple        # two (x, y)
    holding: tuple        # tool id or -1 per mobile
    staged: int           # tool at the staging cell, -1 if empty
    staging_left: int     # steps until the current staging job finishes
    staging_tool: int     # tool being staged, -1 if idle
    delivered: tuple      # bool per tool
    worker_offsets: tuple
    t: int


@dataclass
class WarehouseConfig:
    width: int = 7
    height: int = 5
    arm_pos: tuple = (0, 2)
    staging_cell: tuple = (1, 2)
    mobile_starts: tuple = ((2, 1), (2, 3))
    worker_cells: tuple = ((6, 0), (6, 2), (6, 4))
    break_cell: tuple = (4, 4)
    n_tools: int = 4
    tool_order: tuple = (0, 1, 2, 3)
    staging_steps: int = 2
    work_period: int = 6
    delivery_reward: float = 40.0
    wrong_delivery_penalty: float = -5.0
    step_cost: float = -0.1
    retarget_bonus: float = 0.0
    horizon: int = 60
    discount: float = 0.95
    arrival_prob: float = 0.05
    mean_duration: float = 10.0


class WarehouseEnv(EnvModel):
    name = "warehouse"
    agent_count = 3

    def __init__(self, config: WarehouseConfig = None):
        self.config = config or WarehouseConfig()
        cfg = self.config
        self.horizon = cfg.horizon
        self.discount = cfg.discount
        specs = []
        for k in range(cfg.n_tools):
            specs.append({
                "class_id": k + 1,
                "name": f"get_tool_{k}",
                "phrases": [f"get me tool {k}", f"bring tool {k}",
                            f"i need tool {k}"],
                "reward_spec": {"kind": "retarget_tool", "tool": k},
                "mean_duration": cfg.mean_duration,
            })
        self.instruction_registry = registry_from_specs(self, specs)

    def build_class_reward(self, spec: dict):
        if spec.get("kind") == "retarget_tool":
            tool = int(spec["tool"])

            def r_c(state, joint_action, next_state):
                return self._reward_with_needed(state, joint_action, next_state,
                                                needed=tool)

            return r_c
        return super().build_class_reward(spec)

    # -- schedule and helpers ------------------------------------------------

    def worker_at_station(self, state: WTDState, worker: int) -> bool:
        period = self.config.work_period
        phase = (state.t + state.worker_offsets[worker]) % (period + 2)
        return phase < period

    def needed_tool(self, state: WTDState) -> int:
        for k in self.config.tool_order:
            if not state.delivered[k]:
                return k
        return -1

    def initial_state(self, rng):
        offsets = tuple(int(rng.integers(0, self.config.work_period + 2))
                        for _ in self.config.worker_cells)
        return WTDState(mobiles=tuple(self.config.mobile_starts),
                        holding=(-1, -1), staged=-1, staging_left=0,
                        staging_tool=-1,
                        delivered=tuple(False for _ in range(self.config.n_tools)),
                        worker_offsets=offsets, t=0)

    def primitive_actions(self, agent):
        # the arm's primitive k+1 works on tool k; mobiles move and USE
        if agent == ARM:
            return tuple(range(self.config.n_tools + 1))
        return tuple(range(6))

    # -- dynamics --------------------------------------------------------------

    def transition(self, state: WTDState, joint_action, rng):
        cfg = self.config
        staged = state.staged
        staging_left = state.staging_left
        staging_tool = state.staging_tool
        arm_act = int(joint_action[ARM])
        if 1 <= arm_act <= cfg.n_tools:
            tool = arm_act - 1
            if staging_tool == tool and staging_left > 0:
                staging_left -= 1
            elif (staging_tool < 0 and staged < 0
                  and not state.delivered[tool]):
                staging_tool = tool
                staging_left = cfg.staging_steps - 1
            if staging_tool >= 0 and staging_left == 0 and staged < 0:
                staged = staging_tool
                staging_tool = -1
        mobiles = list(state.mobiles)
        holding = list(state.holding)
        delivered = list(state.delivered)
        for m in (0, 1):
            act = int(joint_action[m + 1])
            x, y = mobiles[m]
            if act in DELTAS and act != STAY:
                d = DELTAS[act]
                nx, ny = x + d[0], y + d[1]
                blocked = (not (0 <= nx < cfg.width and 0 <= ny < cfg.height)
                           or (nx, ny) == cfg.arm_pos
                           or (nx, ny) == tuple(mobiles[1 - m]))
                if not blocked:
                    mobiles[m] = (nx, ny)
            elif act == USE:
                pos = mobiles[m]
                if (self._adjacent(pos, cfg.staging_cell) and holding[m] < 0
                        and staged >= 0):
                    holding[m] = staged
                    staged = -1
                elif holding[m] >= 0:
                    w = self._worker_near(pos)
                    if w is not None and self.worker_at_station(state, w):
                        tool = holding[m]
                        if not delivered[tool]:
                            delivered[tool] = True
                            holding[m] = -1
        if mobiles[0] == mobiles[1]:
            mobiles = list(state.mobiles)
        return WTDState(mobiles=tuple(mobiles), holding=tuple(holding),
                        staged=staged, staging_left=staging_left,
                        staging_tool=staging_tool, delivered=tuple(delivered),
                        worker_offsets=state.worker_offsets, t=state.t + 1)

    def _adjacent(self, pos, cell) -> bool:
        return abs(pos[0] - cell[0]) + abs(pos[1] - cell[1]) <= 1

    def _worker_near(self, pos):
        for w, cell in enumerate(self.config.worker_cells):
            if self._adjacent(pos, cell):
                return w
        return None

    def _delivered_now(self, state, next_state):
        return [k for k in range(self.config.n_tools)
                if next_state.delivered[k] and not state.delivered[k]]

    def _reward_with_needed(self, state, joint_action, next_state, needed: int):
        comps = {"delivery": 0.0, "wrong_delivery": 0.0,
                 "step_cost": self.config.step_cost}
        for k in self._delivered_now(state, next_state):
            if needed < 0 or k == needed or state.delivered[needed]:
                comps["delivery"] += self.config.delivery_reward
            else:
                comps["wrong_delivery"] += self.config.wrong_delivery_penalty
        return sum(comps.values())

    def reward_components(self, state, joint_action, next_state):
        comps = {"delivery": 0.0, "wrong_delivery": 0.0,
                 "step_cost": self.config.step_cost}
        needed = self.needed_tool(state)
        for k in self._delivered_now(state, next_state):
            if k == needed:
                comps["delivery"] += self.config.delivery_reward
            else:
                comps["wrong_delivery"] += self.config.wrong_delivery_penalty
        return comps

    def reward(self, state, joint_action, next_state):
        return sum(self.reward_components(state, joint_action, next_state).values())

    def events(self, state, joint_action, next_state):
        evs = []
        for k in self._delivered_now(state, next_state):
            evs.append(f"delivered_tool_{k}")
        if next_state.staged >= 0 and state.staged < 0:
            evs.append(f"staged_tool_{next_state.staged}")
        return tuple(evs)

    def is_terminal(self, state: WTDState):
        return all(state.delivered)

    # -- observations -------------------------------------------------------------

    def observe(self, agent, state, joint_action, next_state):
        return self._obs(agent, next_state)

    def initial_obs(self, agent, state):
        return self._obs(agent, state)

    def _obs(self, agent, state: WTDState) -> np.ndarray:
        at_station = [1.0 if self.worker_at_station(state, w) else 0.0
                      for w in range(len(self.config.worker_cells))]
        base = [*state.mobiles[0], *state.mobiles[1],
                state.holding[0], state.holding[1],
                state.staged, state.staging_tool, state.staging_left,
                *[1.0 if d else 0.0 for d in state.delivered],
                self.needed_tool(state), *at_station]
        return np.array(base, dtype=float)

    def state_repr(self, state: WTDState):
        return {"mobiles": [list(p) for p in state.mobiles],
                "holding": list(state.holding), "staged": state.staged,
                "delivered": list(state.delivered), "t": state.t}

    # -- macros ----------------------------------------------------------------------

    def _decode(self, hist):
        o = hist.latest_obs
        return {
            "m0": (int(round(o[0])), int(round(o[1]))),
            "m1": (int(round(o[2])), int(round(o[3]))),
            "holding": (int(round(o[4])), int(round(o[5]))),
            "staged": int(round(o[6])),
            "staging_tool": int(round(o[7])),
            "staging_left": int(round(o[8])),
            "delivered": [bool(round(o[9 + k])) for k in range(self.config.n_tools)],
        }

    def _greedy_step(self, pos, target, blocked=()) -> int:
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

    def macro_actions(self, agent):
        cfg = self.config
        if agent == ARM:
            # primitive 0 (wait) and k+1 (work on tool k) as 1-step macros,
            # plus multi-step staging macros that run a job to completion
            macros = [MacroAction(0, "wait", lambda h: True,
                                  lambda h: STAY, lambda h: 1.0)]
            for k in range(cfg.n_tools):
                macros.append(MacroAction(
                    k + 1, f"work_tool_{k}", lambda h: True,
                    (lambda kk: lambda h: kk + 1)(k), lambda h: 1.0))
            for k in range(cfg.n_tools):
                def init(hist, k=k):
                    d = self._decode(hist)
                    return (not d["delivered"][k] and d["staged"] < 0
                            and d["staging_tool"] < 0)

                def low(hist, k=k):
                    return k + 1

                def term(hist, k=k):
                    d = self._decode(hist)
                    done = d["staged"] == k
                    hijacked = d["staging_tool"] not in (-1, k) or d["staged"] >= 0
                    return 1.0 if done or hijacked else 0.0

                macros.append(MacroAction(cfg.n_tools + 1 + k, f"stage_tool_{k}",
                                          initiation=init, low_level=low,
                                          termination=term))
            return macros
        m = agent - 1
        prims = [MacroAction(i, nm, lambda h: True,
                             (lambda a: lambda h: a)(i), lambda h: 1.0)
                 for i, nm in enumerate(
                     ["stay", "up", "down", "left", "right", "use"])]

        def mypos(hist):
            d = self._decode(hist)
            return d["m0"] if m == 0 else d["m1"]

        def other(hist):
            d = self._decode(hist)
            return d["m1"] if m == 0 else d["m0"]

        def fetch_low(hist):
            d = self._decode(hist)
            pos = mypos(hist)
            if self._adjacent(pos, cfg.staging_cell) and d["staged"] >= 0:
                return USE
            target = (cfg.staging_cell[0] + 1, cfg.staging_cell[1])
            return self._greedy_step(pos, target, blocked=(cfg.arm_pos,
                                                           other(hist)))

        def fetch_init(hist):
            d = self._decode(hist)
            return d["holding"][m] < 0

        def fetch_term(hist):
            d = self._decode(hist)
            return 1.0 if d["holding"][m] >= 0 else 0.0

        macros = list(prims)
        macros.append(MacroAction(6, "fetch_staged_tool", fetch_init,
                                  fetch_low, fetch_term))
        for w, cell in enumerate(cfg.worker_cells):
            def dlow(hist, cell=cell):
                pos = mypos(hist)
                if self._adjacent(pos, cell):
                    return USE
                target = (cell[0] - 1, cell[1])
                return self._greedy_step(pos, target, blocked=(cfg.arm_pos,
                                                               other(hist)))

            def dinit(hist):
                d = self._decode(hist)
                return d["holding"][m] >= 0

            def dterm(hist):
                d = self._decode(hist)
                return 1.0 if d["holding"][m] < 0 else 0.0

            macros.append(MacroAction(7 + w, f"deliver_to_worker_{w}",
                                      dinit, dlow, dterm))
        return macros

    def render_frame(self, state: WTDState, t=0, active_phrase=""):
        cfg = self.config
        cells = [["." for _ in range(cfg.width)] for _ in range(cfg.height)]
        cells[cfg.arm_pos[1]][cfg.arm_pos[0]] = "arm"
        cells[cfg.staging_cell[1]][cfg.staging_cell[0]] = "staging"
        for w, c in enumerate(cfg.worker_cells):
            cells[c[1]][c[0]] = (f"worker_{w}" if self.worker_at_station(state, w)
                                 else f"worker_{w}_away")
        agents = [{"id": 0, "x": cfg.arm_pos[0], "y": cfg.arm_pos[1]}]
        agents += [{"id": m + 1, "x": p[0], "y": p[1], "holding": state.holding[m]}
                   for m, p in enumerate(state.mobiles)]
        items = [{"kind": "staged", "tool": state.staged},
                 {"kind": "delivered", "tools": list(state.delivered)}]
        return {"cells": cells, "agents": agents, "items": items,
                "active_instruction": active_phrase}

    def default_arrival_kwargs(self):
        return {"arrival_prob": self.config.arrival_prob}
