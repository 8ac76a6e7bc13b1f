"""Kitchen coordination on a 7x7 grid.

Three agents (plus one scripted human wandering the floor) prepare dishes by
visiting stations in recipe order: fetch a tomato, chop it on either cutting
board, blend, and deliver.  Interacting with the next required station
advances the team's recipe stage and pays a step reward; delivery pays a
bonus and resets the recipe.  Restrictive instructions forbid a resource
(left board, tomato) at a heavy penalty, fetch instructions ask for the
lettuce, and direct commands ask for an immediate displacement.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ..engine import MacroAction
from ..instructions import registry_from_specs
from .base import EnvModel

STAY, UP, DOWN, LEFT, RIGHT, INTERACT = range(6)
DELTAS = {STAY: (0, 0), UP: (0, -1), DOWN: (0, 1), LEFT: (-1, 0), RIGHT: (1, 0)}

STATIONS = {
    "tomato_bin": (0, 1),
    "lettuce_bin": (0, 5),
    "cutting_board_left": (0, 3),
    "cutting_board_right": (6, 3),
    "blender": (3, 0),
    "delivery": (3, 6),
}
RECIPE = ("tomato", "board", "blender", "delivery")
STATION_KIND = {
    "tomato_bin": "tomato",
    "cutting_board_left": "board",
    "cutting_board_right": "board",
    "blender": "blender",
    "delivery": "delivery",
    "lettuce_bin": "lettuce",
}


@dataclass(frozen=True)
class OCState:
    agents: tuple       # three (x, y)
    human: tuple        # (x, y)
    stage: int          # recipe progress 0..len(RECIPE)
    dishes: int
    t: int


@dataclass
class OvercookedConfig:
    size: int = 7
    agent_starts: tuple = ((3, 3), (2, 4), (4, 4))
    human_start: tuple = (5, 5)
    step_reward: float = 10.0
    delivery_bonus: float = 30.0
    time_penalty: float = -0.1
    restriction_penalty: float = -50.0
    fetch_bonus: float = 10.0
    move_bonus: float = 2.0
    move_budget: int = 5
    horizon: int = 40
    discount: float = 0.95
    arrival_prob: float = 0.08
    mean_duration: float = 6.0


class OvercookedEnv(EnvModel):
    name = "overcooked"
    agent_count = 3

    def __init__(self, config: OvercookedConfig = None):
        self.config = config or OvercookedConfig()
        cfg = self.config
        self.horizon = cfg.horizon
        self.discount = cfg.discount
        self.instruction_registry = registry_from_specs(self, [
            {
                "class_id": 1,
                "name": "no_left_board",
                "phrases": ["don't use the left cutting board",
                            "do not use the left cutting board",
                            "stay off the left board"],
                "reward_spec": {"kind": "penalty_on_event",
                                "event": "used_left_board",
                                "amount": cfg.restriction_penalty},
                "mean_duration": cfg.mean_duration,
            },
            {
                "class_id": 2,
                "name": "no_tomato",
                "phrases": ["don't get the tomato", "do not touch the tomato",
                            "leave the tomato alone"],
                "reward_spec": {"kind": "penalty_on_event",
                                "event": "picked_tomato",
                                "amount": cfg.restriction_penalty},
                "mean_duration": cfg.mean_duration,
            },
            {
                "class_id": 3,
                "name": "get_lettuce",
                "phrases": ["get me the lettuce", "bring me the lettuce",
                            "fetch the lettuce"],
                "reward_spec": {"kind": "bonus_on_event",
                                "event": "picked_lettuce",
                                "amount": cfg.fetch_bonus},
                "mean_duration": cfg.mean_duration,
            },
            {
                "class_id": 4,
                "name": "move_left",
                "phrases": ["move left", "shift to the left"],
                "reward_spec": {"kind": "bonus_on_event",
                                "event": "moved_left",
                                "amount": cfg.move_bonus,
                                "budget": cfg.move_budget},
                "mean_duration": cfg.mean_duration,
            },
        ])

    # -- dynamics ---------------------------------------------------------------

    def initial_state(self, rng):
        return OCState(agents=tuple(self.config.agent_starts),
                       human=tuple(self.config.human_start),
                       stage=0, dishes=0, t=0)

    def primitive_actions(self, agent):
        return tuple(range(6))

    def _human_step(self, state: OCState, rng) -> tuple:
        # seeded wander; never enters station cells
        moves = [STAY, UP, DOWN, LEFT, RIGHT]
        d = DELTAS[moves[int(rng.integers(len(moves)))]]
        nx, ny = state.human[0] + d[0], state.human[1] + d[1]
        n = self.config.size
        if not (0 <= nx < n and 0 <= ny < n) or (nx, ny) in STATIONS.values():
            return state.human
        return (nx, ny)

    def transition(self, state: OCState, joint_action, rng):
        n = self.config.size
        human = self._human_step(state, rng)
        occupied = set(state.agents) | {human}
        new_pos = []
        for i, a in enumerate(joint_action):
            act = int(a)
            d = DELTAS.get(act, (0, 0))
            x, y = state.agents[i]
            nx, ny = x + d[0], y + d[1]
            if not (0 <= nx < n and 0 <= ny < n) or (nx, ny) in occupied - {(x, y)}:
                new_pos.append((x, y))
            else:
                new_pos.append((nx, ny))
        # same-target conflicts resolve to staying
        for i in range(3):
            for j in range(i + 1, 3):
                if new_pos[i] == new_pos[j]:
                    new_pos[i] = state.agents[i]
                    new_pos[j] = state.agents[j]
        stage = state.stage
        dishes = state.dishes
        for i, a in enumerate(joint_action):
            if int(a) != INTERACT:
                continue
            station = self._station_at(state.agents[i])
            if station is None:
                continue
            kind = STATION_KIND[station]
            if stage < len(RECIPE) and kind == RECIPE[stage]:
                stage += 1
                if RECIPE[stage - 1] == "delivery":
                    pass
        if stage == len(RECIPE):
            dishes += 1
            stage = 0
        return OCState(agents=tuple(new_pos), human=human, stage=stage,
                       dishes=dishes, t=state.t + 1)

    def _station_at(self, pos) -> str:
        for name, cell in STATIONS.items():
            if abs(pos[0] - cell[0]) + abs(pos[1] - cell[1]) <= 1:
                return name
        return None

    def reward_components(self, state, joint_action, next_state):
        comps = {"recipe_step": 0.0, "delivery": 0.0,
                 "time": self.config.time_penalty}
        advanced = (next_state.stage - state.stage) % len(RECIPE)
        delivered = next_state.dishes > state.dishes
        if delivered:
            comps["delivery"] = self.config.delivery_bonus
            comps["recipe_step"] = self.config.step_reward
        elif advanced:
            comps["recipe_step"] = self.config.step_reward * advanced
        return comps

    def reward(self, state, joint_action, next_state):
        return sum(self.reward_components(state, joint_action, next_state).values())

    def events(self, state, joint_action, next_state):
        evs = []
        for i, a in enumerate(joint_action):
            act = int(a)
            if act == INTERACT:
                station = self._station_at(state.agents[i])
                if station == "cutting_board_left":
                    evs.append("used_left_board")
                elif station == "cutting_board_right":
                    evs.append("used_right_board")
                elif station == "tomato_bin":
                    evs.append("picked_tomato")
                elif station == "lettuce_bin":
                    evs.append("picked_lettuce")
            if next_state.agents[i][0] < state.agents[i][0]:
                evs.append("moved_left")
        if next_state.dishes > state.dishes:
            evs.append("delivered_dish")
        return tuple(evs)

    def is_terminal(self, state):
        return False

    # -- observations -------------------------------------------------------------

    def observe(self, agent, state, joint_action, next_state):
        return self._obs(agent, next_state)

    def initial_obs(self, agent, state):
        return self._obs(agent, state)

    def _obs(self, agent, state: OCState) -> np.ndarray:
        me = state.agents[agent]
        others = [p for i, p in enumerate(state.agents) if i != agent]
        stage_onehot = [0.0] * (len(RECIPE) + 1)
        stage_onehot[state.stage] = 1.0
        return np.array([me[0], me[1], *others[0], *others[1],
                         *state.human, *stage_onehot, state.dishes],
                        dtype=float)

    def state_repr(self, state: OCState):
        return {"agents": [list(p) for p in state.agents],
                "human": list(state.human), "stage": state.stage,
                "dishes": state.dishes}

    # -- macros ---------------------------------------------------------------------

    def _decode_pos(self, hist):
        obs = hist.latest_obs
        return int(round(obs[0])), int(round(obs[1]))

    def _greedy_step(self, pos, target) -> int:
        if pos == target:
            return STAY
        dx, dy = target[0] - pos[0], target[1] - pos[1]
        if abs(dx) >= abs(dy) and dx != 0:
            return LEFT if dx < 0 else RIGHT
        if dy != 0:
            return UP if dy < 0 else DOWN
        return LEFT if dx < 0 else RIGHT

    def macro_actions(self, agent):
        prims = [MacroAction(i, nm, lambda h: True,
                             (lambda a: lambda h: a)(i), lambda h: 1.0)
                 for i, nm in enumerate(
                     ["stay", "up", "down", "left", "right", "interact"])]
        macros = list(prims)
        next_id = len(prims)
        for name, cell in STATIONS.items():
            target = (cell[0], min(cell[1] + 1, self.config.size - 1))
            if cell[1] == self.config.size - 1:
                target = (cell[0], cell[1] - 1)

            def low(hist, target=target):
                return self._greedy_step(self._decode_pos(hist), target)

            def term(hist, target=target):
                return 1.0 if self._decode_pos(hist) == target else 0.0

            macros.append(MacroAction(next_id, f"go_to_{name}",
                                      initiation=lambda h: True,
                                      low_level=low, termination=term))
            next_id += 1
        return macros

    def render_frame(self, state: OCState, t=0, active_phrase=""):
        n = self.config.size
        cells = [["." for _ in range(n)] for _ in range(n)]
        for name, (x, y) in STATIONS.items():
            cells[y][x] = name
        agents = [{"id": i, "x": p[0], "y": p[1]}
                  for i, p in enumerate(state.agents)]
        items = [{"kind": "human", "x": state.human[0], "y": state.human[1]},
                 {"kind": "stage", "value": state.stage},
                 {"kind": "dishes", "value": state.dishes}]
        return {"cells": cells, "agents": agents, "items": items,
                "active_instruction": active_phrase}

    def default_arrival_kwargs(self):
        return {"arrival_prob": self.config.arrival_prob}
