"""Dialogue policy learning against the environment, pluggable over rewards.

The policy consumes only (states, actions, log-probs, rewards); it never
reads reward-model internals. Rollouts run several environments in lockstep
for speed, with per-episode RNG streams so trajectories are bit-identical
regardless of how episodes are batched. Updates are REINFORCE with a value
baseline or clipped-surrogate PPO over the same surrogate pieces.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nnops as nn
from .autodiff import ParamSet, Value
from .env import DialogueEnv, is_success
from .metrics import entity_f1
from .rewards import RewardHandle
from .schemas import Preset


@dataclass
class PolicyConfig:
    hidden: int = 64
    value_hidden: int = 32
    lr: float = 3e-3
    algo: str = "ppo"              # "ppo" | "reinforce"
    episodes: int = 2500
    batch_episodes: int = 16
    discount: float = 0.99
    entropy_beta: float = 0.01
    clip: float = 0.2
    ppo_epochs: int = 2
    value_coef: float = 0.5
    explore_temperature: float = 1.0
    terminal_bonus: float = 0.0    # optional success bonus on learned rewards
    eval_episodes: int = 200
    bc_epochs: int = 0             # imitation warm start on D_F turns (0 = off)
    bc_lr: float = 3e-3
    bc_batch: int = 64
    seed: int = 0


class PolicyModel:
    def __init__(self, state_width: int, n_actions: int, cfg: PolicyConfig):
        self.state_width = state_width
        self.n_actions = n_actions
        self.cfg = cfg
        p = ParamSet(cfg.seed)
        nn.register_dense(p, "pi1", state_width, cfg.hidden, "tanh")
        nn.register_dense(p, "pi2", cfg.hidden, n_actions, "linear")
        nn.register_dense(p, "v1", state_width, cfg.value_hidden, "tanh")
        nn.register_dense(p, "v2", cfg.value_hidden, 1, "linear")
        self.params = p

    def logits(self, states: np.ndarray) -> Value:
        return nn.dense_forward(self.params, "pi2",
                                nn.dense_forward(self.params, "pi1", ad.constant(states)))

    def values(self, states: np.ndarray) -> Value:
        out = nn.dense_forward(self.params, "v2",
                               nn.dense_forward(self.params, "v1", ad.constant(states)))
        return ad.reshape(out, (out.shape[0],))

    # inference-only twins used inside rollouts
    def np_logits(self, states: np.ndarray) -> np.ndarray:
        p = self.params
        h = np.tanh(states @ p["pi1.W"].data + p["pi1.b"].data)
        return h @ p["pi2.W"].data + p["pi2.b"].data

    def np_log_probs(self, states: np.ndarray, temperature: float = 1.0) -> np.ndarray:
        lg = self.np_logits(states) / temperature
        lg = lg - lg.max(axis=1, keepdims=True)
        return lg - np.log(np.exp(lg).sum(axis=1, keepdims=True))


def act(policy: PolicyModel, state_vec: np.ndarray, rng: np.random.Generator,
        explore: bool = True):
    """Sample (explore) or argmax (eval) an action; returns (id, log-prob)."""
    lp = policy.np_log_probs(np.asarray(state_vec)[None, :],
                             policy.cfg.explore_temperature if explore else 1.0)[0]
    if explore:
        a = int(rng.choice(len(lp), p=np.exp(lp)))
    else:
        a = int(np.argmax(lp))
    return a, float(lp[a])


@dataclass
class Trajectory:
    states: np.ndarray          # (T, S)
    actions: np.ndarray         # (T,)
    log_probs: np.ndarray       # (T,)
    rewards: np.ndarray         # (T,)
    success: bool
    turns: int
    domain_count: int
    f1: float

    @property
    def episode_return(self) -> float:
        return float(self.rewards.sum())


def rollout(env: DialogueEnv, policy: PolicyModel, handle: RewardHandle,
            episode: int, explore: bool = True) -> Trajectory:
    """Single full episode; the reward handle's state threads through turns."""
    batch = _collect(env.preset, policy, handle, [episode], env.max_turns,
                     env.synonym_rate, env.seed, explore)
    return batch[0]


def _collect(preset: Preset, policy: PolicyModel, handle: RewardHandle, episodes,
             max_turns: int, synonym_rate: float, env_seed: int, explore: bool):
    """Lockstep rollout of the given episode indices."""
    envs, rngs, rows = [], [], []
    for ep in episodes:
        env = DialogueEnv(preset, max_turns=max_turns, synonym_rate=synonym_rate,
                          render=False, seed=env_seed)
        env.reset(ep)
        envs.append(env)
        rngs.append(np.random.Generator(np.random.PCG64(
            np.random.SeedSequence([policy.cfg.seed, ep, 0xAC]))))
        rows.append({"states": [], "actions": [], "log_probs": [], "rewards": []})
    ctx = handle.start(len(envs))
    alive = list(range(len(envs)))
    while alive:
        svecs = np.stack([envs[i].state.encode(preset) for i in alive])
        lp = policy.np_log_probs(svecs, policy.cfg.explore_temperature if explore else 1.0)
        acts = np.empty(len(alive), dtype=np.intp)
        for j, i in enumerate(alive):
            if explore:
                acts[j] = rngs[i].choice(lp.shape[1], p=np.exp(lp[j]))
            else:
                acts[j] = np.argmax(lp[j])
        done = np.zeros(len(alive), dtype=bool)
        success = np.zeros(len(alive), dtype=bool)
        for j, i in enumerate(alive):
            _, d = envs[i].step(int(acts[j]))
            done[j] = d
            if d:
                success[j] = is_success(envs[i].goal, envs[i].state, preset).success
        # reward handles see the full lockstep batch; VRNN state advances on
        # every row each step, so context rows track their env rows
        rewards = handle.score(ctx, svecs, acts, done, success)
        if policy.cfg.terminal_bonus and handle.standardize:
            rewards = rewards + policy.cfg.terminal_bonus * (done & success)
        for j, i in enumerate(alive):
            rows[i]["states"].append(svecs[j])
            rows[i]["actions"].append(int(acts[j]))
            rows[i]["log_probs"].append(float(lp[j, acts[j]]))
            rows[i]["rewards"].append(float(rewards[j]))
        if done.any():
            # rebuild the lockstep set without finished rows
            keep = [j for j in range(len(alive)) if not done[j]]
            alive = [alive[j] for j in keep]
            ctx = _shrink_ctx(handle, ctx, keep)
    out = []
    for i, env in enumerate(envs):
        res = is_success(env.goal, env.state, preset)
        rec = env.finish_record()
        out.append(Trajectory(
            states=np.asarray(rows[i]["states"]), actions=np.asarray(rows[i]["actions"]),
            log_probs=np.asarray(rows[i]["log_probs"]),
            rewards=np.asarray(rows[i]["rewards"]), success=res.success,
            turns=env.state.turn, domain_count=env.goal.domain_count(),
            f1=entity_f1(env.goal, rec, preset)))
    return out


def _shrink_ctx(handle: RewardHandle, ctx, keep):
    if ctx is None:
        return None
    ctx.h = ctx.h[keep]
    return ctx


def discounted_returns(rewards: np.ndarray, discount: float) -> np.ndarray:
    """G_t = r_t + discount * G_{t+1}."""
    out = np.empty_like(rewards)
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + discount * acc
        out[t] = acc
    return out


def _prepare_batch(trajectories, cfg: PolicyConfig, standardize: bool):
    rewards = [t.rewards for t in trajectories]
    if standardize:
        flat = np.concatenate(rewards)
        mu, sd = flat.mean(), flat.std()
        rewards = [(r - mu) / (sd + 1e-8) for r in rewards]
    returns = np.concatenate([discounted_returns(r, cfg.discount) for r in rewards])
    states = np.concatenate([t.states for t in trajectories])
    actions = np.concatenate([t.actions for t in trajectories])
    old_lp = np.concatenate([t.log_probs for t in trajectories])
    return states, actions, old_lp, returns


def surrogate_loss(policy: PolicyModel, states, actions, returns,
                   old_log_probs=None, clip: float | None = None) -> Value:
    """Policy-gradient surrogate: -mean(weight * advantage) - beta * entropy
    + value_coef * value MSE. With old_log_probs and clip set this is the
    clipped PPO objective; otherwise the REINFORCE score-function form."""
    cfg = policy.cfg
    values = policy.values(states)
    adv = ad.constant(returns - values.data)  # advantages never backprop into V
    log_p = nn.log_softmax(policy.logits(states), 1.0, axis=1)
    lp_taken = ad.take_per_row(log_p, actions)
    if old_log_probs is not None and clip is not None:
        ratio = ad.exp(ad.sub(lp_taken, ad.constant(old_log_probs)))
        clipped = ad.clamp(ratio, 1.0 - clip, 1.0 + clip)
        pg = ad.mul(ad.vmean(ad.minimum(ad.mul(ratio, adv), ad.mul(clipped, adv))), -1.0)
    else:
        pg = ad.mul(ad.vmean(ad.mul(lp_taken, adv)), -1.0)
    diff = ad.sub(values, ad.constant(returns))
    v_loss = ad.vmean(ad.mul(diff, diff))
    ent = ad.vmean(nn.entropy_from_log_probs(log_p, axis=1))
    return ad.add(ad.add(pg, ad.mul(v_loss, cfg.value_coef)),
                  ad.mul(ent, -cfg.entropy_beta))


def reinforce_update(policy: PolicyModel, trajectories, opt: nn.Adam,
                     standardize: bool) -> dict:
    cfg = policy.cfg
    states, actions, _, returns = _prepare_batch(trajectories, cfg, standardize)
    loss = surrogate_loss(policy, states, actions, returns)
    policy.params.zero_grad()
    loss.backward()
    opt.step()
    return {"loss": loss.item()}


def ppo_update(policy: PolicyModel, trajectories, opt: nn.Adam,
               standardize: bool) -> dict:
    cfg = policy.cfg
    states, actions, old_lp, returns = _prepare_batch(trajectories, cfg, standardize)
    last = 0.0
    for _ in range(cfg.ppo_epochs):
        loss = surrogate_loss(policy, states, actions, returns, old_lp, cfg.clip)
        policy.params.zero_grad()
        loss.backward()
        opt.step()
        last = loss.item()
    return {"loss": last}


def behavior_clone(policy: PolicyModel, states: np.ndarray, action_ids: np.ndarray,
                   epochs: int, lr: float, batch: int, seed: int) -> list[float]:
    """Imitation warm start: cross-entropy on expert (state, action) pairs.
    Applied identically under every reward handle, mirroring the pretraining
    step of the experimental procedure the baselines follow."""
    opt = nn.Adam(policy.params, lr=lr)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0xBC])))
    losses = []
    for _ in range(epochs):
        order = rng.permutation(len(states))
        total = 0.0
        for lo in range(0, len(order), batch):
            idx = order[lo:lo + batch]
            lp = nn.log_softmax(policy.logits(states[idx]), 1.0, axis=1)
            loss = ad.mul(ad.vmean(ad.take_per_row(lp, action_ids[idx])), -1.0)
            policy.params.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        losses.append(total / len(states))
    return losses


def bc_turns_from_demos(demos) -> tuple[np.ndarray, np.ndarray]:
    """Stack (state, action) pairs from fully annotated demonstrations."""
    states, actions = [], []
    for d in demos:
        states.extend(np.asarray(d.states[:-1], dtype=float))
        actions.extend(d.actions)
    return np.asarray(states), np.asarray(actions, dtype=np.intp)


def train_policy(preset: Preset, handle: RewardHandle, cfg: PolicyConfig,
                 max_turns: int = 20, synonym_rate: float = 0.2,
                 env_seed: int | None = None, log_path=None, bc_turns=None):
    """Fixed-episode-budget training; returns (policy, per-episode log).

    Adversarial handles receive one discriminator update per policy batch,
    fed by the freshly collected policy turns.
    """
    policy = PolicyModel(preset.layout.width, len(preset.actions), cfg)
    if cfg.bc_epochs > 0 and bc_turns is not None:
        behavior_clone(policy, bc_turns[0], bc_turns[1], cfg.bc_epochs,
                       cfg.bc_lr, cfg.bc_batch, cfg.seed)
    opt = nn.Adam(policy.params, lr=cfg.lr)
    env_seed = cfg.seed if env_seed is None else env_seed
    log = []
    fh = open(log_path, "a") if log_path is not None else None
    update = ppo_update if cfg.algo == "ppo" else reinforce_update
    for start in range(0, cfg.episodes, cfg.batch_episodes):
        episodes = list(range(start, min(start + cfg.batch_episodes, cfg.episodes)))
        batch = _collect(preset, policy, handle, episodes, max_turns, synonym_rate,
                         env_seed, explore=True)
        if handle.trainable:
            states = np.concatenate([t.states for t in batch])
            actions = np.concatenate([t.actions for t in batch])
            lps = np.concatenate([t.log_probs for t in batch])
            disc_loss = handle.update(states, actions, lps)
        else:
            disc_loss = None
        stats = update(policy, batch, opt, handle.standardize)
        for t, ep in zip(batch, episodes):
            entry = {"episode": ep, "return": round(t.episode_return, 6),
                     "success": bool(t.success), "turns": int(t.turns)}
            log.append(entry)
            if fh is not None:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
        if fh is not None and disc_loss is not None:
            fh.write(json.dumps({"disc_loss": round(disc_loss, 6),
                                 "after_episode": episodes[-1]}, sort_keys=True) + "\n")
    if fh is not None:
        fh.close()
    return policy, log


def evaluate_policy(preset: Preset, policy: PolicyModel, handle: RewardHandle,
                    n_episodes: int, eval_seed: int = 10_000_000,
                    max_turns: int = 20, synonym_rate: float = 0.2):
    """Greedy-mode rollouts on a held-out episode stream; returns trajectories."""
    out = []
    for lo in range(0, n_episodes, 32):
        eps = list(range(eval_seed + lo, eval_seed + min(lo + 32, n_episodes)))
        out.extend(_collect(preset, policy, handle, eps, max_turns, synonym_rate,
                            env_seed=policy.cfg.seed, explore=False))
    return out
