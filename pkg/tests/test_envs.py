import numpy as np
import pytest

from macrl.engine import EpisodeRunner
from macrl.envs import ENV_NAMES, build_env, compliance_event
from macrl.instructions import NULL_CLASS, ArrivalProcess, ConfigError

from conftest import RandomPolicy


@pytest.fixture(params=ENV_NAMES)
def any_env(request):
    return build_env(request.param)


def run_random_episode(env, seed, arrival_prob=None):
    macro_sets = [env.macro_actions(i) for i in range(env.agent_count)]
    kwargs = env.default_arrival_kwargs()
    if arrival_prob is not None:
        kwargs["arrival_prob"] = arrival_prob
    arrival = ArrivalProcess(env.instruction_registry, **kwargs)
    runner = EpisodeRunner(env, macro_sets, RandomPolicy(), arrival, seed=seed)
    return runner.run()


class TestConformance:
    """Generic contract checks every environment must pass."""

    def test_determinism_under_seed(self, any_env):
        a = run_random_episode(any_env, seed=11)
        b = run_random_episode(any_env, seed=11)
        assert len(a.trace) == len(b.trace)
        for ra, rb in zip(a.trace, b.trace):
            assert ra.to_json() == rb.to_json()

    def test_reward_finite_and_horizon_respected(self, any_env):
        for seed in range(3):
            res = run_random_episode(any_env, seed=seed)
            assert res.steps <= any_env.horizon
            assert all(np.isfinite(rec.reward) for rec in res.trace)

    def test_macro_initiation_totality(self, any_env):
        # in every reachable selection point at least one macro is initiable
        # (the runner itself raises otherwise); run a few seeds
        for seed in range(3):
            run_random_episode(any_env, seed=seed, arrival_prob=0.3)

    def test_null_class_reward_identity(self, any_env):
        reg = any_env.instruction_registry
        res = run_random_episode(any_env, seed=5)
        rng = np.random.default_rng(0)
        state = any_env.initial_state(rng)
        for rec in res.trace[:20]:
            pass  # identity asserted through components below
        comps_sum = None
        state = any_env.initial_state(np.random.default_rng(1))
        for _ in range(10):
            joint = tuple(any_env.primitive_actions(i)[0]
                          for i in range(any_env.agent_count))
            nxt = any_env.transition(state, joint, np.random.default_rng(2))
            base = any_env.reward(state, joint, nxt)
            assert reg.reward_for(NULL_CLASS, state, joint, nxt) == base
            comps = any_env.reward_components(state, joint, nxt)
            assert sum(comps.values()) == pytest.approx(base, abs=1e-12)
            if any_env.is_terminal(nxt):
                break
            state = nxt

    def test_every_class_has_compliance_predicate(self, any_env):
        reg = any_env.instruction_registry
        for cid in reg.active_class_ids:
            assert reg[cid].compliance is not None

    def test_phrases_unique_and_nonempty(self, any_env):
        reg = any_env.instruction_registry
        seen = set()
        for cid in reg.active_class_ids:
            for p in reg[cid].phrases:
                assert p and p not in seen
                seen.add(p)


class TestBuildEnv:
    def test_unknown_name_rejected(self):
        with pytest.raises(ConfigError):
            build_env("mystery")

    def test_unknown_keys_listed(self):
        with pytest.raises(ConfigError) as ei:
            build_env("chain", {"bogus_key": 1, "another": 2})
        assert "another" in str(ei.value) and "bogus_key" in str(ei.value)

    def test_chain_augmented_space_size(self):
        env = build_env("chain")
        n_aug = env.n_states * len(env.instruction_registry.class_ids)
        assert n_aug == 12

    def test_overcooked_grid_is_seven_by_seven(self):
        env = build_env("overcooked")
        frame = env.render_frame(env.initial_state(np.random.default_rng(0)))
        assert len(frame["cells"]) == 7
        assert all(len(row) == 7 for row in frame["cells"])

    def test_primitives_present_as_one_step_macros(self, any_env):
        for agent in range(any_env.agent_count):
            macros = any_env.macro_actions(agent)
            prims = any_env.primitive_actions(agent)
            assert len(macros) >= len(prims)


class TestChainExactness:
    def test_replay_matches_analytic_tensors(self, chain_env):
        spec = chain_env.tabular_spec()
        res = run_random_episode(chain_env, seed=3, arrival_prob=0.3)
        for rec in res.trace:
            s = rec.state_repr
            a = rec.joint_primitive[0]
            # the logged successor and reward match the tensors exactly
            nxt = chain_env.next_state(s, a)
            assert spec["T"][s, a, nxt] == 1.0
            c = rec.active_class
            assert rec.reward == spec["R_classes"][c][s, a, nxt]

    def test_trap_is_absorbing_not_terminal(self, chain_env):
        assert not chain_env.is_terminal(chain_env.trap)
        assert chain_env.is_terminal(chain_env.big_sink)
        assert chain_env.is_terminal(chain_env.small_sink)


class TestBoxPushing:
    def test_big_reward_reachable(self, bp_env):
        from conftest import ScriptedPolicy
        from macrl.instructions import NullArrival
        macro_sets = [bp_env.macro_actions(i) for i in range(2)]

        class PushPlan:
            def select(self, agent, hist, feats, mask, cid, phrase, rng):
                return 6 if mask[6] else 0

        runner = EpisodeRunner(bp_env, macro_sets, PushPlan(),
                               NullArrival(bp_env.instruction_registry), seed=0)
        res = runner.run()
        assert any("big_delivered" in rec.events for rec in res.trace)
        assert res.undiscounted_return > 0.9 * bp_env.config.reward_big

    def test_big_box_requires_both_agents(self, bp_env):
        state = bp_env.initial_state(np.random.default_rng(0))
        from dataclasses import replace
        # put only agent 0 below its half and push
        state = replace(state, agents=((1, 3), (4, 3)))
        nxt = bp_env.transition(state, (1, 0), np.random.default_rng(0))
        assert nxt.big_row == state.big_row
        # both halves pushed: the box moves
        state2 = replace(state, agents=((1, 3), (2, 3)))
        nxt2 = bp_env.transition(state2, (1, 1), np.random.default_rng(0))
        assert nxt2.big_row == state.big_row - 1

    def test_no_instruction_optimum_is_big_box_plan(self, bp_env):
        """Exhaustive search over coarse joint macro plans at the default
        layout: nothing beats delivering the big box promptly."""
        from macrl.instructions import NullArrival
        macro_sets = [bp_env.macro_actions(i) for i in range(2)]

        class FixedPair:
            def __init__(self, m0, m1):
                self.pair = (m0, m1)

            def select(self, agent, hist, feats, mask, cid, phrase, rng):
                m = self.pair[agent]
                return m if mask[m] else 0

        values = {}
        for m0 in range(9):
            for m1 in range(9):
                res = EpisodeRunner(
                    bp_env, macro_sets, FixedPair(m0, m1),
                    NullArrival(bp_env.instruction_registry), seed=0).run()
                values[(m0, m1)] = res.discounted_return
        best = max(values.values())
        # the joint big-push plan attains the optimum (ties allowed)
        assert values[(6, 6)] == pytest.approx(best, abs=1e-9)
        assert best > 0.8 * bp_env.config.reward_big


class TestComplianceEvent:
    def test_restrictive_followed_at_expiry(self, bp_env):
        cls = bp_env.instruction_registry[1]
        windows = [() for _ in range(20)]
        assert compliance_event(bp_env, cls, windows, expired=True) == "followed"

    def test_restrictive_violation(self, bp_env):
        cls = bp_env.instruction_registry[1]
        windows = [(), (), ("big_box_moved",)]
        assert compliance_event(bp_env, cls, windows, expired=False) == "violated"

    def test_restrictive_pending_unexpired(self, bp_env):
        cls = bp_env.instruction_registry[1]
        assert compliance_event(bp_env, cls, [()], expired=False) == "pending"

    def test_directive_followed_on_event(self):
        env = build_env("warehouse")
        cls = env.instruction_registry[3]  # get tool 2
        windows = [(), ("delivered_tool_2",)]
        assert compliance_event(env, cls, windows, expired=False) == "followed"

    def test_directive_violated_at_expiry(self):
        env = build_env("warehouse")
        cls = env.instruction_registry[3]
        assert compliance_event(env, cls, [(), ()], expired=True) == "violated"

    def test_direct_command_budget(self):
        env = build_env("overcooked")
        cls = env.instruction_registry[4]  # move left, budget 5
        on_time = [()] * 3 + [("moved_left",)]
        assert compliance_event(env, cls, on_time, expired=False) == "followed"
        late = [()] * 6 + [("moved_left",)]
        assert compliance_event(env, cls, late, expired=False) == "violated"


class TestWarehouse:
    def test_tool_delivery_flow(self):
        env = build_env("warehouse")
        macro_sets = [env.macro_actions(i) for i in range(3)]
        from macrl.instructions import NullArrival

        class Orchestrated:
            def select(self, agent, hist, feats, mask, cid, phrase, rng):
                if agent == 0:
                    for mid in range(5, 9):  # stage_tool macros
                        if mid < len(mask) and mask[mid]:
                            return mid
                    return 0
                if agent == 1:
                    if mask[6]:
                        return 6  # fetch
                    if mask[7]:
                        return 7  # deliver to worker 0
                    return 0
                return 0

        res = EpisodeRunner(env, macro_sets, Orchestrated(),
                            NullArrival(env.instruction_registry), seed=4).run()
        delivered = [e for rec in res.trace for e in rec.events
                     if e.startswith("delivered_tool_")]
        assert delivered, "orchestrated plan should deliver at least one tool"

    def test_ordering_constraint(self):
        env = build_env("warehouse")
        state = env.initial_state(np.random.default_rng(0))
        assert env.needed_tool(state) == 0

    def test_retarget_reward(self):
        env = build_env("warehouse")
        reg = env.instruction_registry
        from dataclasses import replace
        state = env.initial_state(np.random.default_rng(0))
        # mobile 0 adjacent to worker 0 holding tool 2; worker at station
        state = replace(state, mobiles=((5, 0), (2, 3)), holding=(2, -1),
                        worker_offsets=(0, 0, 0), t=0)
        nxt = env.transition(state, (0, 5, 0), np.random.default_rng(1))
        if not nxt.delivered[2]:
            pytest.skip("worker schedule blocked the delivery this step")
        # under the base order tool 2 is out of order (0 first): penalized
        assert env.reward(state, (0, 5, 0), nxt) < 0
        # under "get me tool 2" it is the wanted tool: rewarded
        r = reg.reward_for(3, state, (0, 5, 0), nxt)
        assert r > 30.0
