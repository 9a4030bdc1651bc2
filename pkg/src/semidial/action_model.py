"""Joint action prediction and action embedding learning.

A semi-supervised VAE over dialogue state transitions handles fully and
partially labeled demonstrations; a structurally identical VAE over response
generation extends the objective to unlabeled dialogues. The two paths share
the inference network q(z | u_t, e(a)) and the embedding table, so learning
signal from text-only dialogues shapes the same embeddings the reward model
will consume.

Pieces (all batched, rows = turns):
  predictor        f(a | u_t, s_t, s_{t+1}) = softmax(e(a) . g(.) / gamma)
  text predictor   f(a | u_t, u_{t-1}, u_{t+1}), same embedding table
  inference        q(z | u_t, e(a)) -> diagonal Gaussian
  transition dec   p(s_{t+1} | s_t, z), one Bernoulli logit per state bit
  response dec     p(u_t | z, u_{t-1}, u_{t+1}), recurrent over positions
  context head     predicts s_t bits from the system-utterance history; its
                   sigmoid output is the state stand-in for unlabeled turns

The unlabeled bounds take the exact expectation over the whole action set
(refused above 512 actions); one reparameterized sample per turn is shared
across actions so a one-hot classifier reproduces the labeled bound exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nnops as nn
from .autodiff import ParamSet, Value

MAX_EXACT_ACTIONS = 512


class ActionSpaceTooLarge(Exception):
    pass


@dataclass
class ActionModelConfig:
    embed_dim: int = 16
    latent_dim: int = 8
    token_dim: int = 16
    enc_hidden: int = 32
    g_hidden: int = 48
    q_hidden: int = 32
    dec_hidden: int = 48
    resp_hidden: int = 32
    temperature: float = 1.0
    alpha: float = 1.0
    entropy_sign: float = 1.0
    resp_weight: float = 1.0
    state_head_weight: float = 1.0
    lr: float = 3e-3
    epochs: int = 12
    batch: int = 32
    seed: int = 0
    context_cap: int = 48
    soft_enrich: bool = False


class ActionModel:
    """Parameter container plus batched forward passes."""

    def __init__(self, vocab_size: int, state_width: int, n_actions: int,
                 cfg: ActionModelConfig):
        self.vocab_size = vocab_size
        self.state_width = state_width
        self.n_actions = n_actions
        self.cfg = cfg
        p = ParamSet(cfg.seed)
        p.add("tok_emb", (vocab_size, cfg.token_dim))
        nn.register_gru(p, "enc", cfg.token_dim, cfg.enc_hidden)
        p.add("emb", (n_actions, cfg.embed_dim))
        nn.register_dense(p, "g1", cfg.enc_hidden + 2 * state_width, cfg.g_hidden, "tanh")
        nn.register_dense(p, "g2", cfg.g_hidden, cfg.embed_dim, "linear")
        nn.register_dense(p, "gt1", 3 * cfg.enc_hidden, cfg.g_hidden, "tanh")
        nn.register_dense(p, "gt2", cfg.g_hidden, cfg.embed_dim, "linear")
        nn.register_dense(p, "q1", cfg.enc_hidden + cfg.embed_dim, cfg.q_hidden, "tanh")
        nn.register_dense(p, "q_mean", cfg.q_hidden, cfg.latent_dim, "linear")
        nn.register_dense(p, "q_logvar", cfg.q_hidden, cfg.latent_dim, "linear")
        nn.register_dense(p, "td1", state_width + cfg.latent_dim, cfg.dec_hidden, "tanh")
        nn.register_dense(p, "td2", cfg.dec_hidden, state_width, "linear")
        nn.register_dense(p, "rd_init", cfg.latent_dim + 2 * cfg.enc_hidden,
                          cfg.resp_hidden, "tanh")
        nn.register_gru(p, "rdec", cfg.token_dim, cfg.resp_hidden)
        nn.register_dense(p, "rd_out", cfg.resp_hidden, vocab_size, "linear")
        nn.register_dense(p, "ctx_state", cfg.enc_hidden, state_width, "linear")
        self.params = p

    # ---------------- encoders ----------------

    def encode_utterances(self, utts: list[list[int]]) -> Value:
        """Recurrent pooling of token embeddings; returns (B, enc_hidden)."""
        b = len(utts)
        max_len = max(1, max(len(u) for u in utts))
        ids = np.zeros((b, max_len), dtype=np.intp)
        mask = np.zeros((b, max_len))
        for i, u in enumerate(utts):
            ids[i, :len(u)] = u
            mask[i, :len(u)] = 1.0
        h = ad.constant(np.zeros((b, self.cfg.enc_hidden)))
        for t in range(max_len):
            x = ad.take_rows(self.params["tok_emb"], ids[:, t])
            xw = nn.gru_input_proj(self.params, "enc", x)
            h_new = nn.gru_step_proj(self.params, "enc", xw, h)
            m = mask[:, t:t + 1]
            h = ad.add(ad.mul(ad.constant(m), h_new), ad.mul(1.0 - m, h))
        return h

    # ---------------- predictors ----------------

    def action_logits(self, enc_u: Value, s: np.ndarray, s_next: np.ndarray) -> Value:
        g_in = ad.concat([enc_u, ad.constant(s), ad.constant(s_next)], axis=1)
        g = nn.dense_forward(self.params, "g2", nn.dense_forward(self.params, "g1", g_in))
        return ad.matmul(g, ad.transpose(self.params["emb"]))

    def action_logits_text(self, enc_u: Value, enc_prev: Value, enc_next: Value) -> Value:
        g_in = ad.concat([enc_u, enc_prev, enc_next], axis=1)
        g = nn.dense_forward(self.params, "gt2", nn.dense_forward(self.params, "gt1", g_in))
        return ad.matmul(g, ad.transpose(self.params["emb"]))

    def predict_log_probs(self, enc_u: Value, s, s_next) -> Value:
        return nn.log_softmax(self.action_logits(enc_u, s, s_next), self.cfg.temperature)

    def predict_log_probs_text(self, enc_u, enc_prev, enc_next) -> Value:
        return nn.log_softmax(self.action_logits_text(enc_u, enc_prev, enc_next),
                              self.cfg.temperature)

    # ---------------- inference and decoders ----------------

    def q_gaussian(self, enc_u: Value, e_a: Value) -> nn.Gaussian:
        h = nn.dense_forward(self.params, "q1", ad.concat([enc_u, e_a], axis=1))
        return nn.Gaussian(nn.dense_forward(self.params, "q_mean", h),
                           nn.dense_forward(self.params, "q_logvar", h))

    def transition_logits(self, s: Value, z: Value) -> Value:
        h = nn.dense_forward(self.params, "td1", ad.concat([s, z], axis=1))
        return nn.dense_forward(self.params, "td2", h)

    def labeled_bound_batch(self, s: np.ndarray, s_next: np.ndarray, enc_u: Value,
                            a_ids: np.ndarray, noise: np.ndarray) -> Value:
        """Reconstruction log-likelihood of s_{t+1} minus KL to the standard
        normal prior; one reparameterized sample; shape (B,)."""
        e_a = ad.take_rows(self.params["emb"], a_ids)
        q = self.q_gaussian(enc_u, e_a)
        z = nn.reparam_sample(q, noise)
        logits = self.transition_logits(ad.constant(s), z)
        recon = nn.bernoulli_log_lik(logits, s_next)
        kl = nn.gaussian_kl(q, nn.Gaussian.standard(q.mean.shape))
        return ad.sub(recon, kl)

    def unlabeled_bound_batch(self, s: np.ndarray, s_next: np.ndarray, enc_u: Value,
                              noise: np.ndarray) -> Value:
        """Exact expectation of the labeled bound under the predictor plus
        (sign-configurable) classifier entropy; shape (B,)."""
        n_a = self.n_actions
        if n_a > MAX_EXACT_ACTIONS:
            raise ActionSpaceTooLarge(
                f"exact enumeration refused for |A|={n_a} > {MAX_EXACT_ACTIONS}")
        b = s.shape[0]
        log_p = self.predict_log_probs(enc_u, s, s_next)            # (B, |A|)
        all_ids = np.tile(np.arange(n_a), b)
        bounds = self.labeled_bound_batch(
            np.repeat(s, n_a, axis=0), np.repeat(s_next, n_a, axis=0),
            ad.repeat_rows(enc_u, n_a), all_ids, np.repeat(noise, n_a, axis=0))
        bounds = ad.reshape(bounds, (b, n_a))
        expected = ad.vsum(ad.mul(ad.exp(log_p), bounds), axis=1)
        ent = nn.entropy_from_log_probs(log_p, axis=1)
        return ad.add(expected, ad.mul(ent, self.cfg.entropy_sign))

    def classification_nll_batch(self, enc_u: Value, s, s_next, a_ids) -> Value:
        lp = self.predict_log_probs(enc_u, s, s_next)
        return ad.mul(ad.take_per_row(lp, a_ids), -1.0)

    def decode_response(self, z: Value, enc_prev: Value, enc_next: Value,
                        utts: list[list[int]], bos_id: int) -> Value:
        """Teacher-forced recurrent decoder; per-row token log-likelihood."""
        b = len(utts)
        max_len = max(1, max(len(u) for u in utts))
        tgt = np.zeros((b, max_len), dtype=np.intp)
        mask = np.zeros((b, max_len))
        for i, u in enumerate(utts):
            tgt[i, :len(u)] = u
            mask[i, :len(u)] = 1.0
        inp = np.concatenate([np.full((b, 1), bos_id, dtype=np.intp), tgt[:, :-1]], axis=1)
        h = nn.dense_forward(self.params, "rd_init",
                             ad.concat([z, enc_prev, enc_next], axis=1))
        states = []
        for t in range(max_len):
            x = ad.take_rows(self.params["tok_emb"], inp[:, t])
            xw = nn.gru_input_proj(self.params, "rdec", x)
            h = nn.gru_step_proj(self.params, "rdec", xw, h)
            states.append(h)
        # one fused vocabulary projection + likelihood over all timesteps
        hs = ad.concat(states, axis=0)                      # (T*B, hidden)
        logits = nn.dense_forward(self.params, "rd_out", hs)
        flat_ll = nn.categorical_log_lik(logits, tgt.T.reshape(-1))
        masked = ad.mul(flat_ll, ad.constant(mask.T.reshape(-1)))
        return ad.vsum(ad.reshape(masked, (max_len, b)), axis=0)

    def response_labeled_bound_batch(self, utts: list[list[int]], enc_u: Value,
                                     enc_prev: Value, enc_next: Value,
                                     a_ids: np.ndarray, noise: np.ndarray,
                                     bos_id: int) -> Value:
        e_a = ad.take_rows(self.params["emb"], a_ids)
        q = self.q_gaussian(enc_u, e_a)
        z = nn.reparam_sample(q, noise)
        recon = self.decode_response(z, enc_prev, enc_next, utts, bos_id)
        kl = nn.gaussian_kl(q, nn.Gaussian.standard(q.mean.shape))
        return ad.sub(recon, kl)

    def response_unlabeled_bound_batch(self, utts: list[list[int]], enc_u: Value,
                                       enc_prev: Value, enc_next: Value,
                                       noise: np.ndarray, bos_id: int) -> Value:
        n_a = self.n_actions
        if n_a > MAX_EXACT_ACTIONS:
            raise ActionSpaceTooLarge(
                f"exact enumeration refused for |A|={n_a} > {MAX_EXACT_ACTIONS}")
        b = len(utts)
        log_p = self.predict_log_probs_text(enc_u, enc_prev, enc_next)
        all_ids = np.tile(np.arange(n_a), b)
        rep_utts = [u for u in utts for _ in range(n_a)]
        bounds = self.response_labeled_bound_batch(
            rep_utts, ad.repeat_rows(enc_u, n_a), ad.repeat_rows(enc_prev, n_a),
            ad.repeat_rows(enc_next, n_a), all_ids, np.repeat(noise, n_a, axis=0), bos_id)
        bounds = ad.reshape(bounds, (b, n_a))
        expected = ad.vsum(ad.mul(ad.exp(log_p), bounds), axis=1)
        ent = nn.entropy_from_log_probs(log_p, axis=1)
        return ad.add(expected, ad.mul(ent, self.cfg.entropy_sign))

    def state_head_nll_batch(self, ctx_enc: Value, s_target: np.ndarray) -> Value:
        logits = nn.dense_forward(self.params, "ctx_state", ctx_enc)
        return ad.mul(nn.bernoulli_log_lik(logits, s_target), -1.0)

    def context_state_probs(self, ctx_enc: Value) -> Value:
        return ad.sigmoid(nn.dense_forward(self.params, "ctx_state", ctx_enc))


# ---------------- single-turn convenience surface ----------------

def predict_action(model: ActionModel, u_t: list[int], s_t, s_next) -> np.ndarray:
    """Probability vector over the action set for one turn."""
    enc = model.encode_utterances([u_t])
    lp = model.predict_log_probs(enc, np.asarray(s_t)[None, :], np.asarray(s_next)[None, :])
    return np.exp(lp.data[0])


def predict_action_text(model: ActionModel, u_t, u_prev, u_next) -> np.ndarray:
    enc_u = model.encode_utterances([u_t])
    enc_p = model.encode_utterances([u_prev])
    enc_n = model.encode_utterances([u_next])
    return np.exp(model.predict_log_probs_text(enc_u, enc_p, enc_n).data[0])


def labeled_bound(model: ActionModel, s_next, s_t, u_t, a: int, noise) -> Value:
    enc = model.encode_utterances([u_t])
    out = model.labeled_bound_batch(np.asarray(s_t)[None, :], np.asarray(s_next)[None, :],
                                    enc, np.array([a]), np.asarray(noise)[None, :])
    return ad.vsum(out)


def unlabeled_bound(model: ActionModel, s_next, s_t, u_t, noise) -> Value:
    enc = model.encode_utterances([u_t])
    out = model.unlabeled_bound_batch(np.asarray(s_t)[None, :], np.asarray(s_next)[None, :],
                                      enc, np.asarray(noise)[None, :])
    return ad.vsum(out)


def classification_loss(model: ActionModel, turns) -> Value:
    """Mean negative log-probability of the true action over fully labeled
    turns given as (u_t, s_t, s_next, a) tuples."""
    enc = model.encode_utterances([t[0] for t in turns])
    s = np.stack([np.asarray(t[1]) for t in turns])
    s_next = np.stack([np.asarray(t[2]) for t in turns])
    a_ids = np.array([t[3] for t in turns])
    return ad.vmean(model.classification_nll_batch(enc, s, s_next, a_ids))


def response_labeled_bound(model: ActionModel, u_t, u_prev, u_next, a: int,
                           noise, bos_id: int) -> Value:
    enc_u = model.encode_utterances([u_t])
    enc_p = model.encode_utterances([u_prev])
    enc_n = model.encode_utterances([u_next])
    out = model.response_labeled_bound_batch([u_t], enc_u, enc_p, enc_n,
                                             np.array([a]), np.asarray(noise)[None, :], bos_id)
    return ad.vsum(out)


def response_unlabeled_bound(model: ActionModel, u_t, u_prev, u_next, noise,
                             bos_id: int) -> Value:
    enc_u = model.encode_utterances([u_t])
    enc_p = model.encode_utterances([u_prev])
    enc_n = model.encode_utterances([u_next])
    out = model.response_unlabeled_bound_batch([u_t], enc_u, enc_p, enc_n,
                                               np.asarray(noise)[None, :], bos_id)
    return ad.vsum(out)
