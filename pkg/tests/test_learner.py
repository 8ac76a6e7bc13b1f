import json
import os

import numpy as np
import pytest

from macrl.encoder import build_encoder
from macrl.envs import build_env
from macrl.nets import Actor, Critic
from macrl.replay import MacroTransition, ReplayBuffer, transitions_equal
from macrl.training import (Conditioner, TrainConfig, apply_correction,
                            batch_returns, coupled_return, load_checkpoint,
                            segment_return, train)


def make_transition(**overrides):
    base = dict(agent_id=0, macro_id=1, class_before=0, class_after=0,
                phrase_before="", phrase_after="", h=np.zeros(4),
                h_next=np.ones(4), mask=np.array([True, True]), reward=1.0,
                duration=1, terminal=False, interrupted=False)
    base.update(overrides)
    return MacroTransition(**base)


class ConstantCritic:
    """Maps known inputs to fixed values for hand-checkable returns."""

    def __init__(self, table):
        self.table = table

    def value(self, x):
        x = np.atleast_2d(x)
        out = []
        for row in x:
            key = round(float(row.sum()), 6)
            out.append(self.table[key])
        return np.array(out)


class IdentityEncoder:
    dim = 1

    def embed(self, phrase):
        # distinct scalar embedding per phrase for table lookups
        return np.array([float(len(phrase))])


class TestSegmentReturn:
    def setup_method(self):
        self.cond = Conditioner(IdentityEncoder())

    def test_terminal_zero_bootstrap(self):
        tr = make_transition(reward=2.5, terminal=True)
        critic = ConstantCritic({})
        assert segment_return(tr, critic, self.cond, 0.9) == 2.5

    def test_same_class_case(self):
        # G = 2 + 0.9^1 * 10 = 11.0
        tr = make_transition(reward=2.0, duration=1)
        critic = ConstantCritic({round(4.0, 6): 10.0})
        assert segment_return(tr, critic, self.cond, 0.9) == pytest.approx(
            11.0, abs=1e-12)

    def test_cross_class_case(self):
        # G = 2 + 0.9 * (10 - 4) = 7.4
        tr = make_transition(reward=2.0, duration=1, class_after=1,
                             phrase_after="x", interrupted=True)
        critic = ConstantCritic({round(4.0, 6): 10.0, round(5.0, 6): 4.0})
        assert segment_return(tr, critic, self.cond, 0.9) == pytest.approx(
            7.4, abs=1e-12)

    def test_corrected_transition_bootstraps_incoming(self):
        # the correction folded into the reward plus the incoming-class
        # bootstrap yields the decoupled target raw + g * V_continue
        critic = ConstantCritic({round(4.0, 6): 10.0, round(5.0, 6): 4.0})
        raw = make_transition(reward=2.0, duration=1, class_after=1,
                              phrase_after="x", interrupted=True)
        corrected, nq = apply_correction([raw], [critic], self.cond, 0.9, "mavic")
        assert nq == 0 and corrected[0].corrected
        g_corr = segment_return(corrected[0], critic, self.cond, 0.9)
        assert g_corr == pytest.approx(2.0 + 0.9 * 10.0, abs=1e-12)


class TestApplyCorrection:
    def setup_method(self):
        self.cond = Conditioner(IdentityEncoder())

    def test_same_class_batch_untouched(self):
        critic = ConstantCritic({round(4.0, 6): 3.0})
        batch = [make_transition(reward=r) for r in (1.0, -2.0, 0.5)]
        out, nq = apply_correction(batch, [critic], self.cond, 0.9, "mavic")
        assert nq == 0
        for a, b in zip(batch, out):
            assert a is b

    def test_worked_example(self):
        # r = 1 + 0.9^2 * (5 - 3) = 2.62
        tr = make_transition(reward=1.0, duration=2, class_after=1,
                             phrase_after="abc", interrupted=True)
        critic = ConstantCritic({round(4.0, 6): 5.0, round(7.0, 6): 3.0})
        out, _ = apply_correction([tr], [critic], self.cond, 0.9, "mavic")
        assert out[0].reward == pytest.approx(2.62, abs=1e-12)

    def test_other_modes_pass_through(self):
        tr = make_transition(reward=1.0, class_after=1, phrase_after="x",
                             interrupted=True)
        for mode in ("naive", "switch", "vanilla"):
            out, nq = apply_correction([tr], [None], None, 0.9, mode)
            assert out[0] is tr and nq == 0

    def test_nonfinite_critic_quarantines(self):
        tr = make_transition(reward=1.0, class_after=1, phrase_after="x",
                             interrupted=True)
        critic = ConstantCritic({round(4.0, 6): float("nan"),
                                 round(5.0, 6): 1.0})
        out, nq = apply_correction([tr], [critic], self.cond, 0.9, "mavic")
        assert out == [] and nq == 1


class TestReplayBuffer:
    def test_round_trip_exact(self):
        tr = make_transition(reward=3.14159, duration=3, class_after=1,
                             phrase_after="go", interrupted=True,
                             h=np.array([0.1, -2.5, 1e-9, 7.0]),
                             h_next=np.array([4.0, 0.0, -1.0, 2.0]))
        blob = json.dumps(tr.to_json())
        back = MacroTransition.from_json(json.loads(blob))
        assert transitions_equal(tr, back)

    def test_fifo_eviction(self):
        buf = ReplayBuffer(capacity=3)
        for k in range(5):
            buf.add(make_transition(reward=float(k)))
        assert len(buf) == 3
        rewards = sorted(t.reward for t in buf._items)
        assert rewards == [2.0, 3.0, 4.0]

    def test_agent_filtered_sampling(self):
        buf = ReplayBuffer(capacity=10)
        for k in range(4):
            buf.add(make_transition(agent_id=k % 2, reward=float(k)))
        rng = np.random.default_rng(0)
        batch = buf.sample(8, rng, agent_id=1)
        assert batch and all(t.agent_id == 1 for t in batch)

    def test_class_change_requires_interruption(self):
        with pytest.raises(ValueError):
            make_transition(class_after=2, interrupted=False)


class TestTrainingPipeline:
    def chain_config(self, mode, seed=0, **over):
        base = dict(env="chain", mode=mode, seed=seed, epochs=3,
                    episodes_per_epoch=4, updates_per_epoch=4, batch_size=16,
                    buffer_capacity=256, window=2, eval_every=100,
                    eval_episodes=2)
        base.update(over)
        return TrainConfig.from_dict(base)

    def test_beta_zero_mavic_equals_naive_bitwise(self, tmp_path):
        """With no arrivals the correction branch never fires: identical
        parameter trajectories under one seed."""
        blobs = {}
        for mode in ("mavic", "naive"):
            cfg = self.chain_config(mode, seed=3, arrival_prob=0.0,
                                    instructed_start_frac=0.0,
                                    out_dir=str(tmp_path / mode))
            result = train(cfg)
            with open(result.checkpoint_path) as f:
                blobs[mode] = json.load(f)
        assert blobs["mavic"]["agents"] == blobs["naive"]["agents"]

    def test_constant_critic_correction_neutrality(self):
        """If the critic is constant across classes the corrected rewards
        coincide with the uncorrected ones."""
        cond = Conditioner(IdentityEncoder())

        class FlatCritic:
            def value(self, x):
                return np.full(np.atleast_2d(x).shape[0], 4.2)

        tr = make_transition(reward=1.0, class_after=1, phrase_after="zz",
                             interrupted=True)
        out, _ = apply_correction([tr], [FlatCritic()], cond, 0.9, "mavic")
        assert out[0].reward == pytest.approx(1.0, abs=1e-12)

    def test_same_seed_same_metrics_and_checkpoint(self, tmp_path):
        paths = []
        for run in range(2):
            cfg = self.chain_config("mavic", seed=11,
                                    out_dir=str(tmp_path / f"run{run}"))
            result = train(cfg)
            paths.append((result.checkpoint_path, result.metrics_path))
        with open(paths[0][0]) as a, open(paths[1][0]) as b:
            assert a.read() == b.read()
        with open(paths[0][1]) as a, open(paths[1][1]) as b:
            assert a.read() == b.read()

    def test_checkpoint_round_trip(self, tmp_path):
        cfg = self.chain_config("mavic", seed=2, out_dir=str(tmp_path))
        result = train(cfg)
        lp = load_checkpoint(result.checkpoint_path)
        env = build_env(lp.env_name, lp.env_config)
        pol = lp.policy(env)
        from macrl import harness
        macro_sets = [env.macro_actions(0)]
        out = harness.eval_base(env, macro_sets, pol, 3, seed=0, window=lp.window)
        assert np.isfinite(out["mean"])

    def test_frozen_encoder_unchanged_by_training(self, tmp_path):
        env = build_env("chain")
        enc = build_encoder(env.instruction_registry, {"kind": "lookup", "dim": 8})
        before = {p: enc.embed(p).copy()
                  for p in ("", "stay out of the corridor", "unknown words")}
        cfg = self.chain_config("mavic", seed=5, out_dir=str(tmp_path))
        train(cfg)
        for p, v in before.items():
            assert np.array_equal(enc.embed(p), v)

    def test_switch_mode_runs_with_fixed_context(self, tmp_path):
        cfg = self.chain_config("switch", seed=7, out_dir=str(tmp_path))
        result = train(cfg)
        assert os.path.exists(result.checkpoint_path)

    def test_collect_counts_match_trace_segments(self, chain_env):
        from conftest import RandomPolicy
        from macrl.training import collect_episode, make_arrival
        macro_sets = [chain_env.macro_actions(0)]
        arrival = make_arrival(chain_env, "mavic", None)
        buf = ReplayBuffer(10_000)
        total_expected = 0
        for seed in range(100):
            res = collect_episode(chain_env, macro_sets, RandomPolicy(), arrival,
                                  seed, buf, window=2)
            # single agent: one transition per segment boundary
            total_expected += len(res.segments)
        assert len(buf) == total_expected

    def test_invalid_config_listed(self):
        from macrl.instructions import ConfigError
        with pytest.raises(ConfigError) as ei:
            TrainConfig.from_dict({"mode": "zen", "epochs": 0})
        msg = str(ei.value)
        assert "mode" in msg and "epochs" in msg

    def test_unknown_config_keys_rejected(self):
        from macrl.instructions import ConfigError
        with pytest.raises(ConfigError) as ei:
            TrainConfig.from_dict({"modes": "mavic"})
        assert "modes" in str(ei.value)
