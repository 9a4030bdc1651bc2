"""Reward functions behind one interface, so the policy stays reward-agnostic.

Handles: the trained dynamics-model reward over action embeddings
(act-vrnn), the same dynamics model over predicted one-hot labels (ss-vrnn),
an adversarial discriminator over embeddings (act-gdpl), over predicted
one-hot labels (ss-gdpl), over true labels from the fully annotated subset
only (adversarial), and the handcrafted sparse reward.

Every handle scores (history, state, action, done, success) -> scalar; the
VRNN handles thread their filtering state through the history, the
adversarial ones are stateless per turn and are trained alternately with
the policy (one discriminator step per policy batch).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nnops as nn
from .autodiff import ParamSet, Value
from .corpus import ConfigError
from .vrnn import RewardScorer, VrnnModel

HANDLE_NAMES = ("act-vrnn", "ss-vrnn", "act-gdpl", "ss-gdpl", "adversarial", "handcrafted")


@dataclass
class HandcraftedRewardConfig:
    turn_penalty: float = -0.05
    success_bonus: float = 1.0
    failure_penalty: float = -1.0

    def __post_init__(self):
        if not (self.turn_penalty < 0 < self.success_bonus):
            raise ConfigError("handcrafted reward needs penalty < 0 < bonus")


def handcrafted_reward(cfg: HandcraftedRewardConfig, turn_index: int, done: bool,
                       success: bool) -> float:
    """Per-turn penalty, plus the terminal bonus/penalty on the last turn."""
    r = cfg.turn_penalty
    if done:
        r += cfg.success_bonus if success else cfg.failure_penalty
    return r


class RewardHandle:
    """Base interface; rollouts call start() once and score() every turn."""

    name = "base"
    standardize = False
    trainable = False

    def start(self, batch: int):
        return None

    def score(self, ctx, states: np.ndarray, action_ids: np.ndarray,
              done: np.ndarray, success: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class HandcraftedHandle(RewardHandle):
    name = "handcrafted"

    def __init__(self, cfg: HandcraftedRewardConfig | None = None):
        self.cfg = cfg or HandcraftedRewardConfig()

    def score(self, ctx, states, action_ids, done, success):
        r = np.full(len(action_ids), self.cfg.turn_penalty)
        r += done * np.where(success, self.cfg.success_bonus, self.cfg.failure_penalty)
        return r


class VrnnHandle(RewardHandle):
    standardize = True

    def __init__(self, model: VrnnModel, table: np.ndarray, name: str = "act-vrnn",
                 score_logvar_floor: float = -2.0, score_temperature: float = 1.0):
        self.name = name
        self.scorer = RewardScorer(model, table, score_logvar_floor, score_temperature)

    def start(self, batch: int):
        return self.scorer.start(batch)

    def score(self, ctx, states, action_ids, done, success):
        return self.scorer.score_and_advance(ctx, states, action_ids)


class Discriminator:
    """f(s, action representation) -> scalar, trained with the adversarial
    objective: push expert turns up, policy turns (importance weighted by
    their own likelihood) down."""

    def __init__(self, state_width: int, repr_dim: int, hidden: int = 32,
                 lr: float = 1e-3, seed: int = 0):
        self.state_width = state_width
        self.repr_dim = repr_dim
        p = ParamSet(seed)
        nn.register_dense(p, "d1", state_width + repr_dim, hidden, "tanh")
        nn.register_dense(p, "d2", hidden, 1, "linear")
        self.params = p
        self.opt = nn.Adam(p, lr=lr)

    def forward(self, states: np.ndarray, reps: np.ndarray) -> Value:
        x = ad.constant(np.concatenate([states, reps], axis=1))
        out = nn.dense_forward(self.params, "d2", nn.dense_forward(self.params, "d1", x))
        return ad.reshape(out, (out.shape[0],))

    def scores(self, states: np.ndarray, reps: np.ndarray) -> np.ndarray:
        return self.forward(states, reps).data


def adversarial_loss(disc: Discriminator, expert_states, expert_reps,
                     policy_states, policy_reps, policy_log_probs) -> Value:
    """-E_expert[f] + log E_policy[exp(f - log pi)], the importance-weighted
    softplus-free form computed as a stable log-sum-exp."""
    f_e = disc.forward(expert_states, expert_reps)
    f_p = disc.forward(policy_states, policy_reps)
    shifted = ad.sub(f_p, ad.constant(np.asarray(policy_log_probs)))
    peak = ad.constant(shifted.data.max())
    lse = ad.add(ad.log(ad.vmean(ad.exp(ad.sub(shifted, peak)))), peak)
    return ad.add(ad.mul(ad.vmean(f_e), -1.0), lse)


def adversarial_update(disc: Discriminator, expert_batch, policy_batch) -> float:
    """One gradient step; batches are (states, reps[, log_probs]) tuples.
    Returns the loss value for the stability log."""
    e_s, e_r = expert_batch[0], expert_batch[1]
    p_s, p_r, p_lp = policy_batch
    if len(e_s) == 0 or len(p_s) == 0:
        raise ConfigError("adversarial update needs nonempty expert and policy batches")
    loss = adversarial_loss(disc, e_s, e_r, p_s, p_r, p_lp)
    disc.params.zero_grad()
    loss.backward()
    disc.opt.step()
    return loss.item()


class AdversarialHandle(RewardHandle):
    """GDPL-style learned reward r(s, a) = f(s, repr(a)); repr is either the
    learned embedding row or a one-hot over action ids."""

    standardize = True
    trainable = True

    def __init__(self, name: str, disc: Discriminator, repr_table: np.ndarray,
                 expert_pool: tuple[np.ndarray, np.ndarray], batch: int = 128,
                 seed: int = 0):
        self.name = name
        self.disc = disc
        self.repr_table = np.asarray(repr_table, dtype=float)
        self.expert_pool = expert_pool
        self.batch = batch
        self.rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0xD15C])))
        self.loss_log: list[float] = []

    def score(self, ctx, states, action_ids, done, success):
        return self.disc.scores(states, self.repr_table[action_ids])

    def update(self, policy_states, policy_action_ids, policy_log_probs) -> float:
        e_s, e_r = self.expert_pool
        idx = self.rng.integers(len(e_s), size=min(self.batch, len(e_s)))
        loss = adversarial_update(
            self.disc, (e_s[idx], e_r[idx]),
            (policy_states, self.repr_table[policy_action_ids], policy_log_probs))
        self.loss_log.append(loss)
        return loss


def expert_pool_from_enriched(enriched, n_actions: int, repr_kind: str,
                              variants=("full", "partial", "unlabeled")):
    """Stack (state, action-representation) rows for discriminator training."""
    states, reps = [], []
    eye = np.eye(n_actions)
    for dlg in enriched:
        if dlg.variant not in variants:
            continue
        for turn in dlg.turns:
            states.append(turn.state)
            reps.append(eye[turn.action_id] if repr_kind == "onehot" else turn.embedding)
    if not states:
        raise ConfigError("no expert turns available for the adversarial reward")
    return np.asarray(states), np.asarray(reps)


def ablation_wiring(name: str, *, state_width: int, n_actions: int,
                    vrnn_model: VrnnModel | None = None,
                    vrnn_onehot_model: VrnnModel | None = None,
                    embedding_table: np.ndarray | None = None,
                    enriched=None, handcrafted_cfg: HandcraftedRewardConfig | None = None,
                    disc_hidden: int = 32, disc_lr: float = 1e-3, seed: int = 0,
                    score_logvar_floor: float = -2.0,
                    score_temperature: float = 1.0) -> RewardHandle:
    """Build the named reward handle, checking its prerequisites."""
    if name == "handcrafted":
        return HandcraftedHandle(handcrafted_cfg)
    if name == "act-vrnn":
        if vrnn_model is None or embedding_table is None:
            raise ConfigError("act-vrnn needs a trained dynamics model and embedding table")
        return VrnnHandle(vrnn_model, embedding_table, "act-vrnn",
                          score_logvar_floor, score_temperature)
    if name == "ss-vrnn":
        if vrnn_onehot_model is None:
            raise ConfigError("ss-vrnn needs a dynamics model trained on one-hot labels")
        return VrnnHandle(vrnn_onehot_model, np.eye(n_actions), "ss-vrnn",
                          score_logvar_floor, score_temperature)
    if name in ("act-gdpl", "ss-gdpl", "adversarial"):
        if enriched is None:
            raise ConfigError(f"{name} needs an enriched demonstration corpus")
        if name == "act-gdpl":
            if embedding_table is None:
                raise ConfigError("act-gdpl needs the learned embedding table")
            pool = expert_pool_from_enriched(enriched, n_actions, "emb")
            table, dim = np.asarray(embedding_table), np.asarray(embedding_table).shape[1]
        elif name == "ss-gdpl":
            pool = expert_pool_from_enriched(enriched, n_actions, "onehot")
            table, dim = np.eye(n_actions), n_actions
        else:  # plain adversarial: true labels from the fully annotated subset only
            pool = expert_pool_from_enriched(enriched, n_actions, "onehot", variants=("full",))
            table, dim = np.eye(n_actions), n_actions
        disc = Discriminator(state_width, dim, hidden=disc_hidden, lr=disc_lr, seed=seed)
        return AdversarialHandle(name, disc, table, pool, seed=seed)
    raise ConfigError(f"unknown reward handle {name!r}; choose from {HANDLE_NAMES}")
