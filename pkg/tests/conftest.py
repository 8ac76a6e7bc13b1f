import numpy as np
import pytest

from macrl.envs import build_env


@pytest.fixture()
def chain_env():
    return build_env("chain")


@pytest.fixture()
def bp_env():
    return build_env("box_pushing")


class ScriptedPolicy:
    """Takes macros from a fixed list (per selection), then repeats the last."""

    def __init__(self, macro_ids):
        self.macro_ids = list(macro_ids)
        self.i = 0

    def select(self, agent, hist, feats, mask, class_id, phrase, rng):
        mid = self.macro_ids[min(self.i, len(self.macro_ids) - 1)]
        self.i += 1
        if not mask[mid]:
            mid = int(np.flatnonzero(mask)[0])
        return mid


class RandomPolicy:
    def select(self, agent, hist, feats, mask, class_id, phrase, rng):
        opts = np.flatnonzero(mask)
        return int(opts[rng.integers(len(opts))])


@pytest.fixture()
def scripted_policy():
    return ScriptedPolicy


@pytest.fixture()
def random_policy():
    return RandomPolicy()
