"""Actor-critic training with replay-time value correction.

Four training modes share one pipeline:

* mavic   -- live instruction arrivals; replayed cross-class transitions get
             the value correction folded into their reward before the target
             is formed.
* naive   -- live arrivals, no correction: targets bootstrap straight across
             instruction boundaries.
* switch  -- each episode runs under one instruction context fixed at reset
             (sampled uniformly, null included); no mid-episode transitions.
* vanilla -- no instructions at train or eval time; the upper bound on base
             task performance.

Every transition's target bootstraps with the incoming-class critic value,
so with corrections applied this realizes the decoupled per-class objective,
and without them the coupled one.  All value terms entering rewards,
returns and advantages are detached constants by construction.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .encoder import build_encoder
from .engine import EpisodeRunner
from .envs import build_env
from .instructions import (NULL_CLASS, ArrivalProcess, ConfigError, NullArrival,
                           corrected_reward)
from .nets import Actor, Critic
from .replay import MacroTransition, ReplayBuffer

MODES = ("mavic", "naive", "switch", "vanilla")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    env: str = "chain"
    env_config: dict = field(default_factory=dict)
    mode: str = "mavic"
    seed: int = 0
    epochs: int = 40
    episodes_per_epoch: int = 16
    updates_per_epoch: int = 30
    batch_size: int = 64
    buffer_capacity: int = 8192
    lr_actor: float = 0.05
    lr_critic: float = 0.2
    clip_norm: float = 10.0
    actor_weight_decay: float = 1e-3
    huber_delta: float = 0.0  # 0 keeps plain squared error
    # rewards are multiplied by this for learning only; evaluation metrics
    # stay in environment units
    reward_scale: float = 1.0
    window: int = 8
    embed_dim: int = 8
    hidden: tuple = (32, 32)      # critic
    actor_hidden: tuple = ()      # linear softmax actor by default
    gradient_bootstrap: str = "segment_return"  # or "incoming_value"
    entropy_coef: float = 0.01
    explore_eps: float = 0.1  # uniform-over-initiable mixing during collection
    bilinear: bool = True     # macro-obs x embedding interaction features
    input_mode: str = "concat"  # or "bilinear": full features x embedding
    normalize_advantages: bool = True
    exploring_starts: bool = True  # randomized starts for collection episodes
    # fraction of live-mode collection episodes that begin with an
    # instruction already active (rare-instruction exploration aid)
    instructed_start_frac: float = 0.3
    # fraction of collection episodes where all agents commit to one shared
    # exploratory macro (coordinated-discovery aid for joint effects)
    joint_explore_frac: float = 0.0
    # minimum fraction of each batch drawn from instructed-context
    # transitions (balanced replay; None samples uniformly)
    batch_active_frac: Optional[float] = None
    encoder_spec: dict = field(default_factory=lambda: {"kind": "lookup"})
    arrival_prob: Optional[float] = None  # None: environment default
    eval_every: int = 5
    eval_episodes: int = 40
    checkpoint_every: int = 0  # 0: final only
    out_dir: str = "runs"

    def validate(self) -> None:
        bad = []
        if self.mode not in MODES:
            bad.append(f"mode={self.mode!r} (expected one of {MODES})")
        for key in ("epochs", "episodes_per_epoch", "updates_per_epoch",
                    "batch_size", "buffer_capacity", "window", "embed_dim"):
            if getattr(self, key) < 1:
                bad.append(f"{key}={getattr(self, key)} (must be >= 1)")
        for key in ("lr_actor", "lr_critic"):
            if getattr(self, key) <= 0:
                bad.append(f"{key}={getattr(self, key)} (must be > 0)")
        if self.gradient_bootstrap not in ("segment_return", "incoming_value"):
            bad.append(f"gradient_bootstrap={self.gradient_bootstrap!r}")
        if self.arrival_prob is not None and not 0.0 <= self.arrival_prob <= 1.0:
            bad.append(f"arrival_prob={self.arrival_prob}")
        if bad:
            raise ConfigError("invalid training config: " + "; ".join(bad))

    def hash(self) -> str:
        d = asdict(self)
        d.pop("out_dir", None)  # not part of the behavioral config
        blob = json.dumps(d, sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        bad = sorted(set(d) - known)
        if bad:
            raise ConfigError(f"unknown training config keys: {bad}")
        d = dict(d)
        for key in ("hidden", "actor_hidden"):
            if key in d:
                d[key] = tuple(d[key])
        cfg = cls(**d)
        cfg.validate()
        return cfg


def net_input(feats: np.ndarray, emb: np.ndarray, z_dim: int = 0,
              mode: str = "concat") -> np.ndarray:
    """Network input for (history features, instruction embedding).

    "concat": features ++ embedding, plus interaction terms between the
    pending macro-observation and the embedding when z_dim is set.
    "bilinear": the full outer product (features ++ 1) x embedding; with
    near-orthogonal class embeddings this conditions every weight on the
    instruction, so the per-class slices train without interference while
    unseen embeddings still produce blended behavior.
    """
    if mode == "bilinear":
        fb = np.append(feats, 1.0)
        return np.outer(fb, emb).ravel()
    if z_dim <= 0:
        return np.concatenate([feats, emb])
    z = feats[-z_dim:]
    return np.concatenate([feats, emb, np.outer(z, emb).ravel()])


def input_dim(feat_dim: int, z_dim: int, embed_dim: int, bilinear: bool,
              mode: str = "concat") -> int:
    if mode == "bilinear":
        return (feat_dim + 1) * embed_dim
    return feat_dim + embed_dim + (z_dim * embed_dim if bilinear else 0)


class NetPolicy:
    """Macro selection from per-agent actors conditioned on the instruction
    embedding.  Greedy mode takes the argmax; sampling mode optionally mixes
    in a uniform exploration floor over initiable macros."""

    def __init__(self, actors: Sequence[Actor], encoder, greedy: bool = False,
                 force_null: bool = False, explore_eps: float = 0.0,
                 z_dim: int = 0, input_mode: str = "concat"):
        self.actors = list(actors)
        self.encoder = encoder
        self.greedy = greedy
        self.force_null = force_null
        self.explore_eps = explore_eps
        self.z_dim = z_dim
        self.input_mode = input_mode

    def _input(self, feats: np.ndarray, phrase: str) -> np.ndarray:
        emb = self.encoder.embed("" if self.force_null else phrase)
        return net_input(feats, emb, self.z_dim, self.input_mode)

    def select(self, agent, hist, feats, mask, class_id, phrase, rng):
        x = self._input(feats, phrase)
        actor = self.actors[agent]
        if self.greedy:
            return actor.greedy(x, mask)
        if self.explore_eps > 0.0 and rng.random() < self.explore_eps:
            options = np.flatnonzero(mask)
            return int(options[rng.integers(len(options))])
        return actor.sample(x, mask, rng)


class SuggestedMacroPolicy:
    """Collection-time wrapper: every agent takes the suggested macro whenever
    it is initiable, falling back to the base policy otherwise."""

    def __init__(self, base, macro_id: int):
        self.base = base
        self.macro_id = macro_id

    def select(self, agent, hist, feats, mask, class_id, phrase, rng):
        if self.macro_id < len(mask) and mask[self.macro_id]:
            return self.macro_id
        return self.base.select(agent, hist, feats, mask, class_id, phrase, rng)


class Conditioner:
    """Builds the network input for a (history, phrase) pair using the frozen
    encoder and the configured input form."""

    def __init__(self, encoder, z_dim: int = 0, mode: str = "concat"):
        self.encoder = encoder
        self.z_dim = z_dim
        self.mode = mode

    def input(self, feats: np.ndarray, phrase: str) -> np.ndarray:
        return net_input(feats, self.encoder.embed(phrase), self.z_dim,
                         self.mode)


def apply_correction(batch: Sequence[MacroTransition], critics: Sequence[Critic],
                     cond: Conditioner, gamma: float, mode: str):
    """Replay-time value correction (mavic only).

    Cross-class transitions get reward + gamma^tau * (V(h', c) - V(h', c')),
    both critic evaluations detached.  Non-finite critic output quarantines
    the transition rather than poisoning the batch.  Other modes pass
    through unchanged.
    """
    if mode != "mavic":
        return list(batch), 0
    out = []
    quarantined = 0
    for tr in batch:
        if tr.class_after == tr.class_before or tr.corrected:
            out.append(tr)
            continue
        critic = critics[tr.agent_id]
        v_cont = float(critic.value(cond.input(tr.h_next, tr.phrase_before))[0])
        v_inc = float(critic.value(cond.input(tr.h_next, tr.phrase_after))[0])
        if not (np.isfinite(v_cont) and np.isfinite(v_inc)):
            quarantined += 1
            continue
        new_r = corrected_reward(tr.reward, gamma, tr.duration, v_cont, v_inc,
                                 same_class=False)
        tr2 = MacroTransition(**{**tr.__dict__, "reward": new_r, "corrected": True})
        out.append(tr2)
    return out, quarantined


def segment_return(tr: MacroTransition, critic: Critic, cond: Conditioner,
                   gamma: float) -> float:
    """Macro-segment return: reward plus the decoupled bootstrap.

    For raw cross-class transitions the incoming-class value is cancelled
    against the continuation value; for transitions whose reward already
    carries the correction, the incoming-class bootstrap alone completes the
    same quantity.  Terminal transitions use a zero bootstrap.
    """
    if tr.terminal:
        return float(tr.reward)
    disc = gamma ** tr.duration
    v_inc = float(critic.value(cond.input(tr.h_next, tr.phrase_after))[0])
    if not np.isfinite(v_inc):
        raise ValueError("non-finite critic value in segment_return")
    if tr.corrected or tr.class_after == tr.class_before:
        return float(tr.reward + disc * v_inc)
    v_cont = float(critic.value(cond.input(tr.h_next, tr.phrase_before))[0])
    if not np.isfinite(v_cont):
        raise ValueError("non-finite critic value in segment_return")
    return float(tr.reward + disc * (v_cont - v_inc))


def coupled_return(tr: MacroTransition, critic: Critic, cond: Conditioner,
                   gamma: float) -> float:
    """Standard bootstrap across the boundary: reward + gamma^tau V(h', c')."""
    if tr.terminal:
        return float(tr.reward)
    v_inc = float(critic.value(cond.input(tr.h_next, tr.phrase_after))[0])
    return float(tr.reward + gamma ** tr.duration * v_inc)


def batch_returns(batch, critic, cond: Conditioner, gamma, mode: str) -> np.ndarray:
    fn = segment_return if mode == "mavic" else coupled_return
    return np.array([fn(tr, critic, cond, gamma) for tr in batch])


def actor_gradient(batch: Sequence[MacroTransition], actor: Actor, critic: Critic,
                   cond: Conditioner, gamma: float, mode: str,
                   bootstrap: str = "segment_return",
                   entropy_coef: float = 0.0,
                   normalize: bool = False):
    """Policy-gradient step data for one agent's batch: grad log pi scaled by
    the advantage (return minus current-state value), values detached."""
    xs = np.stack([cond.input(tr.h, tr.phrase_before) for tr in batch])
    masks = np.stack([tr.mask for tr in batch])
    actions = np.array([tr.macro_id for tr in batch])
    if bootstrap == "incoming_value":
        returns = np.array([coupled_return(tr, critic, cond, gamma)
                            for tr in batch])
    else:
        returns = batch_returns(batch, critic, cond, gamma, mode)
    v_h = critic.value(xs)
    advantages = returns - v_h
    scaled = advantages
    if normalize and len(advantages) > 1:
        scaled = advantages / (advantages.std() + 1e-8)
    gW, gb, logps = actor.policy_gradient(xs, masks, actions, scaled,
                                          entropy_coef=entropy_coef)
    return gW, gb, advantages, logps


def make_arrival(env, mode: str, arrival_prob: Optional[float]):
    registry = env.instruction_registry
    if mode == "vanilla":
        return NullArrival(registry)
    kwargs = env.default_arrival_kwargs()
    if arrival_prob is not None:
        kwargs["arrival_prob"] = arrival_prob
    if mode == "switch":
        return NullArrival(registry)  # context fixed per episode instead
    return ArrivalProcess(registry, **kwargs)


def collect_episode(env, macro_sets, policy: NetPolicy, arrival, seed: int,
                    buffer: Optional[ReplayBuffer], window: int,
                    initial_instruction: Optional[tuple] = None,
                    reward_scale: float = 1.0):
    """Run one episode and append per-agent macro transitions to the buffer.
    Returns the EpisodeResult."""
    runner = EpisodeRunner(env, macro_sets, policy, arrival, seed, window=window,
                           collect_transitions=buffer is not None,
                           initial_instruction=initial_instruction)
    result = runner.run()
    if buffer is not None:
        if reward_scale != 1.0:
            for tr in result.transitions:
                tr.reward *= reward_scale
        buffer.extend(result.transitions)
    return result


@dataclass
class TrainResult:
    checkpoint_path: str
    metrics_path: str
    final_metrics: dict
    config: TrainConfig


def train(config: TrainConfig) -> TrainResult:
    config.validate()
    from . import harness  # late import: harness uses checkpoints from here

    env = build_env(config.env, config.env_config)
    collect_env = env
    if config.exploring_starts and "exploring_starts" in type(
            env.config).__dataclass_fields__:
        collect_env = build_env(config.env, {**config.env_config,
                                             "exploring_starts": True})
    registry = env.instruction_registry
    encoder = build_encoder(registry, {**config.encoder_spec,
                                       "dim": config.embed_dim})
    macro_sets = [env.macro_actions(i) for i in range(env.agent_count)]
    z_dim = len(env.initial_macro_obs(0, env.initial_state(
        np.random.default_rng(0))))
    feat_dim = config.window * (z_dim + len(macro_sets[0])) + z_dim
    bilinear_dim = z_dim if config.bilinear else 0
    in_dim = input_dim(feat_dim, z_dim, config.embed_dim, config.bilinear,
                       config.input_mode)
    cond = Conditioner(encoder, bilinear_dim, config.input_mode)

    root = np.random.SeedSequence(config.seed)
    init_ss, sample_ss, mode_ss = root.spawn(3)
    init_rng = np.random.Generator(np.random.PCG64(init_ss))
    sample_rng = np.random.Generator(np.random.PCG64(sample_ss))
    mode_rng = np.random.Generator(np.random.PCG64(mode_ss))

    actors = [Actor(in_dim, len(macro_sets[i]), config.actor_hidden, init_rng)
              for i in range(env.agent_count)]
    critics = [Critic(in_dim, config.hidden, init_rng)
               for i in range(env.agent_count)]
    policy = NetPolicy(actors, encoder, greedy=False,
                       force_null=config.mode == "vanilla",
                       explore_eps=config.explore_eps, z_dim=bilinear_dim,
                       input_mode=config.input_mode)
    arrival = make_arrival(env, config.mode, config.arrival_prob)
    buffer = ReplayBuffer(config.buffer_capacity)
    gamma = env.discount

    os.makedirs(config.out_dir, exist_ok=True)
    tag = f"{config.env}_{config.mode}_seed{config.seed}"
    metrics_path = os.path.join(config.out_dir, f"metrics_{tag}.jsonl")
    ckpt_path = os.path.join(config.out_dir, f"checkpoint_{tag}.json")
    metrics_file = open(metrics_path, "w")

    total_quarantined = 0
    last_metrics: dict = {}
    switch_classes = registry.class_ids
    try:
        for epoch in range(config.epochs):
            for ep in range(config.episodes_per_epoch):
                ep_seed = (config.seed * 1_000_003 + epoch) * 1_000_003 + ep
                initial = None
                if config.mode == "switch":
                    cid = int(switch_classes[mode_rng.integers(len(switch_classes))])
                    phrases = registry[cid].phrases
                    phrase = phrases[int(mode_rng.integers(len(phrases)))]
                    initial = (cid, phrase)
                elif (config.mode in ("mavic", "naive")
                      and registry.active_class_ids
                      and mode_rng.random() < config.instructed_start_frac):
                    active = registry.active_class_ids
                    cid = int(active[mode_rng.integers(len(active))])
                    phrases = registry[cid].phrases
                    phrase = phrases[int(mode_rng.integers(len(phrases)))]
                    initial = (cid, phrase)
                ep_policy = policy
                if (config.joint_explore_frac > 0.0
                        and mode_rng.random() < config.joint_explore_frac):
                    n_common = min(len(ms) for ms in macro_sets)
                    ep_policy = SuggestedMacroPolicy(
                        policy, int(mode_rng.integers(n_common)))
                collect_episode(collect_env, macro_sets, ep_policy, arrival, ep_seed,
                                buffer, config.window, initial_instruction=initial,
                                reward_scale=config.reward_scale)
            critic_loss = actor_loss = 0.0
            for _ in range(config.updates_per_epoch):
                for agent in range(env.agent_count):
                    batch = buffer.sample(config.batch_size, sample_rng,
                                          agent_id=agent,
                                          active_frac=config.batch_active_frac)
                    if not batch:
                        continue
                    batch, nq = apply_correction(batch, critics, cond, gamma,
                                                 config.mode)
                    total_quarantined += nq
                    if not batch:
                        continue
                    critic = critics[agent]
                    targets = batch_returns(batch, critic, cond, gamma,
                                            config.mode)
                    xs = np.stack([cond.input(tr.h, tr.phrase_before)
                                   for tr in batch])
                    c_loss, gW, gb, _ = critic.value_and_grad_to_target(
                        xs, targets, huber_delta=config.huber_delta)
                    critic.net.apply_grads(gW, gb, config.lr_critic,
                                           config.clip_norm)
                    gW, gb, adv, logps = actor_gradient(
                        batch, actors[agent], critic, cond, gamma, config.mode,
                        bootstrap=config.gradient_bootstrap,
                        entropy_coef=config.entropy_coef,
                        normalize=config.normalize_advantages)
                    a_loss = float(-np.mean(logps * adv))
                    # ascent on the surrogate: apply negated gradients
                    actors[agent].net.apply_grads([-g for g in gW], [-g for g in gb],
                                                  config.lr_actor, config.clip_norm,
                                                  config.actor_weight_decay)
                    if not (np.isfinite(c_loss) and np.isfinite(a_loss)):
                        dump = os.path.join(config.out_dir, f"diverged_{tag}.json")
                        with open(dump, "w") as f:
                            json.dump({"epoch": epoch, "critic_loss": c_loss,
                                       "actor_loss": a_loss}, f)
                        raise TrainingDiverged(
                            f"non-finite loss at epoch {epoch}; dump: {dump}")
                    critic_loss, actor_loss = c_loss, a_loss
            if (epoch + 1) % config.eval_every == 0 or epoch == config.epochs - 1:
                last_metrics = _evaluate(env, macro_sets, actors, encoder, config,
                                         epoch)
                last_metrics["quarantined"] = total_quarantined
                last_metrics["critic_loss"] = critic_loss
                last_metrics["actor_loss"] = actor_loss
                metrics_file.write(json.dumps(last_metrics, sort_keys=True) + "\n")
                metrics_file.flush()
            if config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
                save_checkpoint(ckpt_path + f".ep{epoch + 1}", env, actors, critics,
                                encoder, config)
    finally:
        metrics_file.close()
    save_checkpoint(ckpt_path, env, actors, critics, encoder, config)
    return TrainResult(checkpoint_path=ckpt_path, metrics_path=metrics_path,
                       final_metrics=last_metrics, config=config)


def _evaluate(env, macro_sets, actors, encoder, config: TrainConfig,
              epoch: int) -> dict:
    from . import harness

    z_dim = len(env.initial_macro_obs(0, env.initial_state(
        np.random.default_rng(0))))
    bdim = z_dim if config.bilinear else 0
    greedy = NetPolicy(actors, encoder, greedy=True,
                       force_null=config.mode == "vanilla", z_dim=bdim,
                       input_mode=config.input_mode)
    base = harness.eval_base(env, macro_sets, greedy, config.eval_episodes,
                             seed=config.seed * 7919 + epoch,
                             window=config.window)
    live_policy = NetPolicy(actors, encoder, greedy=True, force_null=False,
                            z_dim=bdim, input_mode=config.input_mode)
    compl = harness.eval_compliance(env, macro_sets, live_policy,
                                    config.eval_episodes,
                                    seed=config.seed * 104729 + epoch,
                                    window=config.window,
                                    arrival_prob=config.arrival_prob)
    return {
        "epoch": epoch,
        "mode": config.mode,
        "seed": config.seed,
        "base_return": base["mean"],
        "compliance": compl["compliance"],
    }


# -- checkpoints ---------------------------------------------------------------

def save_checkpoint(path, env, actors: Sequence[Actor], critics: Sequence[Critic],
                    encoder, config: TrainConfig) -> None:
    blob = {
        "version": 1,
        "env": config.env,
        "env_config": config.env_config,
        "mode": config.mode,
        "seed": config.seed,
        "config_hash": config.hash(),
        "window": config.window,
        "embed_dim": config.embed_dim,
        "bilinear": config.bilinear,
        "input_mode": config.input_mode,
        "encoder": encoder.spec(),
        "agents": [{"actor": a.net.to_json(), "critic": c.net.to_json()}
                   for a, c in zip(actors, critics)],
    }
    with open(path, "w") as f:
        json.dump(blob, f, sort_keys=True)


@dataclass
class LoadedPolicy:
    env_name: str
    env_config: dict
    mode: str
    window: int
    embed_dim: int
    bilinear: bool
    input_mode: str
    actors: list
    critics: list
    encoder: object

    def z_dim(self, env) -> int:
        if not self.bilinear:
            return 0
        return len(env.initial_macro_obs(0, env.initial_state(
            np.random.default_rng(0))))

    def conditioner(self, env) -> Conditioner:
        return Conditioner(self.encoder, self.z_dim(env), self.input_mode)

    def policy(self, env, greedy: bool = True) -> NetPolicy:
        return NetPolicy(self.actors, self.encoder, greedy=greedy,
                         force_null=self.mode == "vanilla",
                         z_dim=self.z_dim(env), input_mode=self.input_mode)


def load_checkpoint(path) -> LoadedPolicy:
    with open(path) as f:
        blob = json.load(f)
    if blob.get("version") != 1:
        raise ConfigError(f"unsupported checkpoint version in {path}")
    env = build_env(blob["env"], blob["env_config"])
    encoder = build_encoder(env.instruction_registry, blob["encoder"])
    actors, critics = [], []
    from .nets import MLP

    for spec in blob["agents"]:
        a = Actor.__new__(Actor)
        a.net = MLP.from_json(spec["actor"])
        a.n_macros = a.net.sizes[-1]
        c = Critic.__new__(Critic)
        c.net = MLP.from_json(spec["critic"])
        actors.append(a)
        critics.append(c)
    return LoadedPolicy(env_name=blob["env"], env_config=blob["env_config"],
                        mode=blob["mode"], window=blob["window"],
                        embed_dim=blob["embed_dim"],
                        bilinear=blob.get("bilinear", False),
                        input_mode=blob.get("input_mode", "concat"),
                        actors=actors, critics=critics, encoder=encoder)
