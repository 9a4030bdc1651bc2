"""Recurrent latent dynamics model over enriched expert trajectories.

Per step t, with deterministic hidden h and stochastic latent z:

    prior      p(z_t | .)  = prior_net(h_{t-1})
    posterior  q(z_t | .)  = enc_net(h_{t-1}, e(a_t))
    decoder    p(e(a_t)|.) = dec_net(z_t, h_{t-1}, s_t)   (diagonal Gaussian)
    recurrence h_t         = gru(e(a_t), z_t, s_t ; h_{t-1})

Training maximizes the per-dialogue evidence lower bound: sum over steps of
decoder log-density of the observed action embedding minus KL(posterior ||
prior), one reparameterized sample per step.

Reward: with the model advanced through the true history in filtering mode
(posterior means at past steps, prior mean at the step being scored), the
decoder Gaussian scores every embedding-table row; a softmax over those
log-densities turns the embedding-space density into log p(a | history, s),
the per-turn reward. Scoring therefore never peeks at the action taken.

Ablations share the interface: mode "det" forces z to the prior mean and
drops the KL; mode "stoch" freezes h at zero so only latents carry state.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nnops as nn
from .autodiff import ParamSet, Value

MODES = ("full", "stoch", "det")


@dataclass
class VrnnConfig:
    input_dim: int = 16          # action-embedding width (|A| for one-hot wiring)
    state_width: int = 70
    latent_dim: int = 8
    hidden_dim: int = 32
    trunk_dim: int = 24
    mode: str = "full"
    n_samples: int = 1
    input_noise: float = 0.0     # per-step chance of swapping the observed
    lr: float = 3e-3             # embedding for another turn's (denoising)
    epochs: int = 25
    batch: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")


class VrnnModel:
    def __init__(self, cfg: VrnnConfig):
        self.cfg = cfg
        p = ParamSet(cfg.seed)
        nn.register_dense(p, "prior1", cfg.hidden_dim, cfg.trunk_dim, "tanh")
        nn.register_dense(p, "prior_mean", cfg.trunk_dim, cfg.latent_dim, "linear")
        nn.register_dense(p, "prior_logvar", cfg.trunk_dim, cfg.latent_dim, "linear")
        nn.register_dense(p, "enc1", cfg.hidden_dim + cfg.input_dim, cfg.trunk_dim, "tanh")
        nn.register_dense(p, "enc_mean", cfg.trunk_dim, cfg.latent_dim, "linear")
        nn.register_dense(p, "enc_logvar", cfg.trunk_dim, cfg.latent_dim, "linear")
        nn.register_dense(p, "dec1", cfg.latent_dim + cfg.hidden_dim + cfg.state_width,
                          cfg.trunk_dim, "tanh")
        nn.register_dense(p, "dec_mean", cfg.trunk_dim, cfg.input_dim, "linear")
        nn.register_dense(p, "dec_logvar", cfg.trunk_dim, cfg.input_dim, "linear")
        nn.register_gru(p, "rnn", cfg.input_dim + cfg.latent_dim + cfg.state_width,
                        cfg.hidden_dim)
        self.params = p

    # each step takes and returns (B, dim) Values

    def prior_step(self, h: Value) -> nn.Gaussian:
        t = nn.dense_forward(self.params, "prior1", h)
        return nn.Gaussian(nn.dense_forward(self.params, "prior_mean", t),
                           nn.dense_forward(self.params, "prior_logvar", t))

    def posterior_step(self, h: Value, e_a: Value) -> nn.Gaussian:
        t = nn.dense_forward(self.params, "enc1", ad.concat([h, e_a], axis=1))
        return nn.Gaussian(nn.dense_forward(self.params, "enc_mean", t),
                           nn.dense_forward(self.params, "enc_logvar", t))

    def decode_step(self, z: Value, h: Value, s: Value) -> nn.Gaussian:
        t = nn.dense_forward(self.params, "dec1", ad.concat([z, h, s], axis=1))
        return nn.Gaussian(nn.dense_forward(self.params, "dec_mean", t),
                           nn.dense_forward(self.params, "dec_logvar", t))

    def recur_step(self, e_a: Value, z: Value, h: Value, s: Value) -> Value:
        if self.cfg.mode == "stoch":
            return h  # hidden frozen at zero: latents alone carry the dialogue
        x = ad.concat([e_a, z, s], axis=1)
        return nn.gru_step(self.params, "rnn", x, h)

    def initial_hidden(self, batch: int) -> Value:
        return ad.constant(np.zeros((batch, self.cfg.hidden_dim)))


def elbo_batch(model: VrnnModel, embeddings: np.ndarray, states: np.ndarray,
               mask: np.ndarray, noise: np.ndarray,
               observed: np.ndarray | None = None):
    """ELBO summed over steps for a padded batch of trajectories.

    embeddings (B,T,d): decode targets (the demonstrated action embeddings);
    states (B,T,S); mask (B,T) 1 for real steps; noise (B,T,z) frozen
    standard-normal draws. `observed`, when given, replaces the embeddings
    fed to the posterior and the recurrence (denoising training: corrupted
    history, clean targets); scoring-time filtering sees taken actions the
    same way. Returns (elbo (B,), recon_total, kl_total); KL is pointwise
    nonnegative.
    """
    b, t_max, _ = embeddings.shape
    cfg = model.cfg
    obs = embeddings if observed is None else observed
    h = model.initial_hidden(b)
    elbo = ad.constant(np.zeros(b))
    recon_sum, kl_sum = 0.0, 0.0
    for t in range(t_max):
        e_t = ad.constant(embeddings[:, t, :])
        o_t = ad.constant(obs[:, t, :])
        s_t = ad.constant(states[:, t, :])
        m = ad.constant(mask[:, t])
        prior = model.prior_step(h)
        if cfg.mode == "det":
            z = prior.mean
            kl = ad.constant(np.zeros(b))
        else:
            post = model.posterior_step(h, o_t)
            z = nn.reparam_sample(post, noise[:, t, :])
            kl = nn.gaussian_kl(post, prior)
        dec = model.decode_step(z, h, s_t)
        recon = nn.gaussian_log_density(e_t, dec)
        elbo = ad.add(elbo, ad.mul(ad.sub(recon, kl), m))
        recon_sum += float((recon.data * mask[:, t]).sum())
        kl_sum += float((kl.data * mask[:, t]).sum())
        h_new = model.recur_step(o_t, z, h, s_t)
        h = ad.add(ad.mul(ad.constant(mask[:, t:t + 1]), h_new),
                   ad.mul(1.0 - mask[:, t:t + 1], h))
    return elbo, recon_sum, kl_sum


def elbo(model: VrnnModel, turns, noise: np.ndarray) -> Value:
    """Single-trajectory ELBO; `turns` iterates (state, embedding) pairs."""
    states = np.stack([np.asarray(s, dtype=float) for s, _ in turns])[None, :, :]
    embs = np.stack([np.asarray(e, dtype=float) for _, e in turns])[None, :, :]
    mask = np.ones((1, states.shape[1]))
    out, _, _ = elbo_batch(model, embs, states, mask, np.asarray(noise)[None, :, :])
    return ad.vsum(out)


def _pack(dialogues, input_dim, state_width, one_hot_ids: bool):
    """Pad enriched dialogues to (B,T,.) arrays; one_hot_ids swaps embeddings
    for one-hot action indicators (the predicted-label ablation wiring)."""
    b = len(dialogues)
    t_max = max(len(d.turns) for d in dialogues)
    embs = np.zeros((b, t_max, input_dim))
    states = np.zeros((b, t_max, state_width))
    mask = np.zeros((b, t_max))
    for i, dlg in enumerate(dialogues):
        for t, turn in enumerate(dlg.turns):
            embs[i, t] = (np.eye(input_dim)[turn.action_id] if one_hot_ids
                          else turn.embedding)
            states[i, t] = turn.state
            mask[i, t] = 1.0
    return embs, states, mask


def mean_corpus_elbo(model: VrnnModel, dialogues, one_hot_ids: bool = False,
                     seed: int = 0) -> float:
    """Mean per-dialogue ELBO with frozen noise (for before/after comparisons)."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0xE1B0])))
    total = 0.0
    cfg = model.cfg
    for lo in range(0, len(dialogues), 64):
        chunk = dialogues[lo:lo + 64]
        embs, states, mask = _pack(chunk, cfg.input_dim, cfg.state_width, one_hot_ids)
        noise = rng.standard_normal((len(chunk), embs.shape[1], cfg.latent_dim))
        out, _, _ = elbo_batch(model, embs, states, mask, noise)
        total += float(out.data.sum())
    return total / max(len(dialogues), 1)


def train_vrnn(dialogues, cfg: VrnnConfig, one_hot_ids: bool = False, log_path=None):
    """Maximize the mean ELBO over enriched dialogues; returns (model, log)."""
    if not dialogues:
        raise ValueError("empty enriched corpus")
    model = VrnnModel(cfg)
    opt = nn.Adam(model.params, lr=cfg.lr)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, 0x7A1])))
    log = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(dialogues))
        tot_elbo, tot_recon, tot_kl, n_steps = 0.0, 0.0, 0.0, 0
        for lo in range(0, len(order), cfg.batch):
            chunk = [dialogues[i] for i in order[lo:lo + cfg.batch]]
            embs, states, mask = _pack(chunk, cfg.input_dim, cfg.state_width, one_hot_ids)
            observed = None
            if cfg.input_noise > 0:
                # swap some observed inputs for other random turns' embeddings
                flat = embs.reshape(-1, cfg.input_dim)
                real = np.flatnonzero(mask.reshape(-1))
                corrupt = real[rng.random(len(real)) < cfg.input_noise]
                observed = embs.copy().reshape(-1, cfg.input_dim)
                observed[corrupt] = flat[rng.choice(real, size=len(corrupt))]
                observed = observed.reshape(embs.shape)
            noise = rng.standard_normal((len(chunk), embs.shape[1], cfg.latent_dim))
            if cfg.n_samples > 1:
                acc = None
                for _ in range(cfg.n_samples):
                    noise = rng.standard_normal((len(chunk), embs.shape[1], cfg.latent_dim))
                    out, rs, ks = elbo_batch(model, embs, states, mask, noise, observed)
                    acc = out if acc is None else ad.add(acc, out)
                out = ad.mul(acc, 1.0 / cfg.n_samples)
            else:
                out, rs, ks = elbo_batch(model, embs, states, mask, noise, observed)
            loss = ad.mul(ad.vmean(out), -1.0)
            model.params.zero_grad()
            loss.backward()
            opt.step()
            tot_elbo += float(out.data.sum())
            tot_recon += rs
            tot_kl += ks
            n_steps += int(mask.sum())
        entry = {"epoch": epoch, "elbo_per_dialogue": tot_elbo / len(dialogues),
                 "recon_per_step": tot_recon / max(n_steps, 1),
                 "kl_per_step": tot_kl / max(n_steps, 1)}
        log.append(entry)
        if log_path is not None:
            with open(log_path, "a") as fh:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
    return model, log


# ---------------- reward-time filtering ----------------

class RewardState:
    """Per-rollout filtering state; advance() with the action actually taken."""

    def __init__(self, h: np.ndarray):
        self.h = h
        self.steps = 0


def _np_dense(params: ParamSet, name: str, x: np.ndarray) -> np.ndarray:
    kind, n_in, n_out, act = params.layers[name]
    y = x @ params[f"{name}.W"].data + params[f"{name}.b"].data
    if act == "tanh":
        return np.tanh(y)
    if act == "sigmoid":
        return 1.0 / (1.0 + np.exp(-y))
    return y


def _np_gru(params: ParamSet, name: str, x: np.ndarray, h: np.ndarray) -> np.ndarray:
    _, n_in, nh = params.layers[name]
    xw = x @ params[f"{name}.W"].data + params[f"{name}.b"].data
    hu = h @ params[f"{name}.U"].data
    r = 1.0 / (1.0 + np.exp(-(xw[:, :nh] + hu[:, :nh])))
    z = 1.0 / (1.0 + np.exp(-(xw[:, nh:2 * nh] + hu[:, nh:2 * nh])))
    n = np.tanh(xw[:, 2 * nh:] + r * (h @ params[f"{name}.Un"].data))
    return (1.0 - z) * n + z * h


class RewardScorer:
    """Inference-only twin of the trained model for rollout-time scoring.

    Scores are log-probabilities over the action inventory; their
    exponentials sum to one at every step. The scorer reads only the
    dialogue history, the current state and the candidate action id; it
    never sees policy internals.
    """

    def __init__(self, model: VrnnModel, table: np.ndarray,
                 score_logvar_floor: float = -2.0, score_temperature: float = 1.0):
        self.model = model
        self.table = np.asarray(table, dtype=float)  # (|A|, input_dim)
        if self.table.shape[1] != model.cfg.input_dim:
            raise ValueError("embedding table width != model input width")
        # the trained decoder can be extremely sharp; a variance floor and a
        # softmax temperature keep scores bounded on off-distribution states
        # so reward scale is not dominated by outliers
        self.score_logvar_floor = score_logvar_floor
        self.score_temperature = score_temperature

    def start(self, batch: int = 1) -> RewardState:
        return RewardState(np.zeros((batch, self.model.cfg.hidden_dim)))

    def _clamp(self, lv):
        return np.clip(lv, max(nn.LOG_VAR_MIN, self.score_logvar_floor), nn.LOG_VAR_MAX)

    def action_log_probs(self, state: RewardState, s: np.ndarray) -> np.ndarray:
        """(B, |A|) log p(a | h, s) with z at the prior mean."""
        p = self.model.params
        trunk = _np_dense(p, "prior1", state.h)
        z = _np_dense(p, "prior_mean", trunk)
        dec_in = np.concatenate([z, state.h, s], axis=1)
        t = _np_dense(p, "dec1", dec_in)
        mean = _np_dense(p, "dec_mean", t)
        logvar = self._clamp(_np_dense(p, "dec_logvar", t))
        # log N(e(a'); mean, diag) for every table row, then normalize over A
        diff = self.table[None, :, :] - mean[:, None, :]
        quad = (diff * diff * np.exp(-logvar)[:, None, :]).sum(axis=2)
        logdet = (logvar + nn.LOG_2PI).sum(axis=1)
        dens = -0.5 * (quad + logdet[:, None]) / self.score_temperature
        shifted = dens - dens.max(axis=1, keepdims=True)
        return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))

    def score_and_advance(self, state: RewardState, s: np.ndarray,
                          action_ids: np.ndarray) -> np.ndarray:
        """Reward log p(a_t | h, s_t) for each row's candidate, then advance
        h with the taken action (posterior mean in filtering mode)."""
        if state.steps < 0:
            raise ValueError("reward state not initialized")
        log_p = self.action_log_probs(state, s)
        rewards = log_p[np.arange(len(action_ids)), action_ids]
        p = self.model.params
        e_a = self.table[action_ids]
        if self.model.cfg.mode == "det":
            trunk = _np_dense(p, "prior1", state.h)
            z = _np_dense(p, "prior_mean", trunk)
        else:
            trunk = _np_dense(p, "enc1", np.concatenate([state.h, e_a], axis=1))
            z = _np_dense(p, "enc_mean", trunk)
        if self.model.cfg.mode != "stoch":
            state.h = _np_gru(p, "rnn", np.concatenate([e_a, z, s], axis=1), state.h)
        state.steps += 1
        return rewards


# ---------------- persistence ----------------

CHECKPOINT_VERSION = 1


def save_checkpoint(path, kind: str, params: ParamSet, config: dict,
                    config_hash: str = "", extra: dict | None = None):
    obj = {"format_version": CHECKPOINT_VERSION, "kind": kind,
           "config_hash": config_hash, "config": config,
           "extra": extra or {},
           "arrays": {k: {"shape": list(v.data.shape), "data": v.data.reshape(-1).tolist()}
                      for k, v in params.items()}}
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, separators=(",", ":"))


def load_checkpoint(path, expected_kind: str | None = None) -> dict:
    with open(path) as fh:
        obj = json.load(fh)
    if obj.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version "
                         f"{obj.get('format_version')!r}")
    if expected_kind is not None and obj.get("kind") != expected_kind:
        raise ValueError(f"{path}: checkpoint kind {obj.get('kind')!r}, "
                         f"expected {expected_kind!r}")
    return obj


def restore_arrays(params: ParamSet, obj: dict):
    arrays = {k: np.asarray(v["data"], dtype=float).reshape(v["shape"])
              for k, v in obj["arrays"].items()}
    params.load_arrays(arrays)
