"""Training loop for the action model plus demonstration enrichment.

The maximized objective is

    sum_{D_F} L(s', s, a) + sum_{D_P} U(s', s)
    + alpha * sum_{D_F} log f(a | u, s, s')
    + w_resp * [ sum_{D_F} L_resp(u | a) + sum_{D_U} U_resp(u) ]
    + w_state * context-head log-likelihood on D_F and D_P

with terms present only when the corresponding corpus is nonempty.
Minibatches of turns from each pool are interleaved within an epoch;
everything is deterministic given the config seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nnops as nn
from .action_model import ActionModel, ActionModelConfig
from .corpus import ConfigError, Demonstration
from .schemas import BOS, SEP, Preset


@dataclass
class EnrichedTurn:
    state: np.ndarray           # real state bits, or the context-head stand-in
    action_id: int
    embedding: np.ndarray
    probs: np.ndarray           # full predictive distribution (one-hot on D_F)
    placeholder_state: bool


@dataclass
class EnrichedDialogue:
    dialogue_id: int
    variant: str
    turns: list[EnrichedTurn]


def _sep_utt(preset: Preset) -> list[int]:
    return [preset.vocab.ids[SEP]]


def _sys_context(demo: Demonstration, t: int, preset: Preset, cap: int) -> list[int]:
    """System-utterance history before turn t, capped to the last `cap`
    tokens. Available in every supervision variant."""
    out: list[int] = []
    sep = preset.vocab.ids[SEP]
    for i in range(t):
        if out:
            out.append(sep)
        out.extend(demo.sys_utts[i])
    if not out:
        out = [sep]
    return out[-cap:]


def _neighbors(demo: Demonstration, t: int, preset: Preset):
    prev_u = demo.sys_utts[t - 1] if t > 0 else _sep_utt(preset)
    next_u = demo.sys_utts[t + 1] if t + 1 < demo.n_turns else _sep_utt(preset)
    return prev_u, next_u


def _turn_pool(demos: list[Demonstration]) -> list[tuple[int, int]]:
    return [(i, t) for i, d in enumerate(demos) for t in range(d.n_turns)]


def _batches(pool, batch, rng):
    idx = rng.permutation(len(pool))
    for lo in range(0, len(pool), batch):
        yield [pool[i] for i in idx[lo:lo + batch]]


def _batches_by_length(pool, batch, rng, length_of):
    """Shuffled batches grouping similar utterance lengths, so the action-set
    expansion in the response bound pads as little as possible."""
    idx = rng.permutation(len(pool))
    ordered = sorted((pool[i] for i in idx), key=length_of)
    chunks = [ordered[lo:lo + batch] for lo in range(0, len(ordered), batch)]
    rng.shuffle(chunks)
    return chunks


def holdout_accuracy(model: ActionModel, demos: list[Demonstration]) -> float:
    """Argmax accuracy of the transition-mode predictor on fully labeled turns."""
    correct, total = 0, 0
    for demo in demos:
        utts = demo.sys_utts
        enc = model.encode_utterances(utts)
        s = np.asarray(demo.states[:-1], dtype=float)
        s_next = np.asarray(demo.states[1:], dtype=float)
        lp = model.predict_log_probs(enc, s, s_next).data
        pred = lp.argmax(axis=1)
        correct += int((pred == np.asarray(demo.actions)).sum())
        total += demo.n_turns
    return correct / max(total, 1)


def train_action_model(d_full: list[Demonstration], d_partial: list[Demonstration],
                       d_unlabeled: list[Demonstration], preset: Preset,
                       cfg: ActionModelConfig, holdout: list[Demonstration] | None = None,
                       log_path=None):
    """Returns (model, log). `log` is a list of per-epoch dicts with every
    objective term; optionally mirrored to a JSONL file."""
    if not d_full:
        raise ConfigError("at least some fully labeled dialogues are required")
    model = ActionModel(len(preset.vocab), preset.layout.width, len(preset.actions), cfg)
    opt = nn.Adam(model.params, lr=cfg.lr)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, 0xAC7])))
    bos = preset.vocab.ids[BOS]

    pool_f = _turn_pool(d_full)
    pool_p = _turn_pool(d_partial)
    pool_u = _turn_pool(d_unlabeled)
    log = []

    def f_batch_loss(items):
        utts = [d_full[i].sys_utts[t] for i, t in items]
        s = np.asarray([d_full[i].states[t] for i, t in items], dtype=float)
        s_next = np.asarray([d_full[i].states[t + 1] for i, t in items], dtype=float)
        a_ids = np.asarray([d_full[i].actions[t] for i, t in items])
        enc = model.encode_utterances(utts)
        noise = rng.standard_normal((len(items), cfg.latent_dim))
        bound = ad.vmean(model.labeled_bound_batch(s, s_next, enc, a_ids, noise))
        cls = ad.vmean(model.classification_nll_batch(enc, s, s_next, a_ids))
        terms = {"labeled_bound": bound.item(), "cls_nll": cls.item()}
        loss = ad.add(ad.mul(bound, -1.0), ad.mul(cls, cfg.alpha))
        if cfg.resp_weight > 0:
            prevs, nexts = zip(*[_neighbors(d_full[i], t, preset) for i, t in items])
            enc_p = model.encode_utterances(list(prevs))
            enc_n = model.encode_utterances(list(nexts))
            noise_r = rng.standard_normal((len(items), cfg.latent_dim))
            rbound = ad.vmean(model.response_labeled_bound_batch(
                utts, enc, enc_p, enc_n, a_ids, noise_r, bos))
            terms["resp_labeled_bound"] = rbound.item()
            loss = ad.add(loss, ad.mul(rbound, -cfg.resp_weight))
        if cfg.state_head_weight > 0:
            ctx = [_sys_context(d_full[i], t, preset, cfg.context_cap) for i, t in items]
            snll = ad.vmean(model.state_head_nll_batch(model.encode_utterances(ctx), s))
            terms["state_nll"] = snll.item()
            loss = ad.add(loss, ad.mul(snll, cfg.state_head_weight))
        return loss, terms

    def p_batch_loss(items):
        utts = [d_partial[i].sys_utts[t] for i, t in items]
        s = np.asarray([d_partial[i].states[t] for i, t in items], dtype=float)
        s_next = np.asarray([d_partial[i].states[t + 1] for i, t in items], dtype=float)
        enc = model.encode_utterances(utts)
        noise = rng.standard_normal((len(items), cfg.latent_dim))
        bound = ad.vmean(model.unlabeled_bound_batch(s, s_next, enc, noise))
        terms = {"unlabeled_bound": bound.item()}
        loss = ad.mul(bound, -1.0)
        if cfg.state_head_weight > 0:
            ctx = [_sys_context(d_partial[i], t, preset, cfg.context_cap) for i, t in items]
            snll = ad.vmean(model.state_head_nll_batch(model.encode_utterances(ctx), s))
            terms["state_nll"] = snll.item()
            loss = ad.add(loss, ad.mul(snll, cfg.state_head_weight))
        return loss, terms

    def u_batch_loss(items):
        utts = [d_unlabeled[i].sys_utts[t] for i, t in items]
        prevs, nexts = zip(*[_neighbors(d_unlabeled[i], t, preset) for i, t in items])
        enc = model.encode_utterances(utts)
        enc_p = model.encode_utterances(list(prevs))
        enc_n = model.encode_utterances(list(nexts))
        noise = rng.standard_normal((len(items), cfg.latent_dim))
        rbound = ad.vmean(model.response_unlabeled_bound_batch(
            utts, enc, enc_p, enc_n, noise, bos))
        terms = {"resp_unlabeled_bound": rbound.item()}
        return ad.mul(rbound, -cfg.resp_weight), terms

    for epoch in range(cfg.epochs):
        schedule = []
        schedule += [("f", b) for b in _batches(pool_f, cfg.batch, rng)]
        schedule += [("p", b) for b in _batches(pool_p, cfg.batch, rng)]
        schedule += [("u", b) for b in _batches_by_length(
            pool_u, cfg.batch, rng, lambda it: len(d_unlabeled[it[0]].sys_utts[it[1]]))]
        rng.shuffle(schedule)
        sums, counts = {}, {}
        objective_total = 0.0
        for kind, items in schedule:
            loss, terms = {"f": f_batch_loss, "p": p_batch_loss, "u": u_batch_loss}[kind](items)
            model.params.zero_grad()
            loss.backward()
            opt.step()
            objective_total += -loss.item()
            for k, v in terms.items():
                sums[k] = sums.get(k, 0.0) + v
                counts[k] = counts.get(k, 0) + 1
        entry = {"epoch": epoch, "objective": objective_total / max(len(schedule), 1)}
        entry.update({k: sums[k] / counts[k] for k in sums})
        if holdout:
            entry["holdout_accuracy"] = holdout_accuracy(model, holdout)
        log.append(entry)
        if log_path is not None:
            with open(log_path, "a") as fh:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
    return model, log


def enrich(d_full, d_partial, d_unlabeled, model: ActionModel,
           preset: Preset) -> list[EnrichedDialogue]:
    """Attach action embeddings (and state stand-ins for unlabeled turns).

    D_F keeps true labels; D_P takes the transition-mode argmax; D_U takes
    the text-mode argmax plus the context-head state vector. Ties break to
    the lowest action id. Every turn stores its predictive distribution;
    with cfg.soft_enrich the embedding is the distribution-weighted mixture
    instead of the argmax row.
    """
    emb = model.params["emb"].data
    out = []
    for variant, demos in (("full", d_full), ("partial", d_partial), ("unlabeled", d_unlabeled)):
        for demo in demos:
            enc = model.encode_utterances(demo.sys_utts)
            if variant == "full":
                s_all = np.asarray(demo.states[:-1], dtype=float)
                a_ids = np.asarray(demo.actions)
                probs = np.eye(model.n_actions)[a_ids]
                placeholder = False
            elif variant == "partial":
                s_all = np.asarray(demo.states[:-1], dtype=float)
                s_next = np.asarray(demo.states[1:], dtype=float)
                lp = model.predict_log_probs(enc, s_all, s_next).data
                probs = np.exp(lp)
                a_ids = lp.argmax(axis=1)
                placeholder = False
            else:
                prevs, nexts = zip(*[_neighbors(demo, t, preset) for t in range(demo.n_turns)])
                enc_p = model.encode_utterances(list(prevs))
                enc_n = model.encode_utterances(list(nexts))
                lp = model.predict_log_probs_text(enc, enc_p, enc_n).data
                probs = np.exp(lp)
                a_ids = lp.argmax(axis=1)
                ctx = [_sys_context(demo, t, preset, model.cfg.context_cap)
                       for t in range(demo.n_turns)]
                s_all = model.context_state_probs(model.encode_utterances(ctx)).data
                placeholder = True
            turns = []
            for t in range(demo.n_turns):
                e = probs[t] @ emb if model.cfg.soft_enrich else emb[a_ids[t]]
                turns.append(EnrichedTurn(
                    state=np.asarray(s_all[t], dtype=float), action_id=int(a_ids[t]),
                    embedding=np.asarray(e, dtype=float), probs=probs[t],
                    placeholder_state=placeholder))
            out.append(EnrichedDialogue(demo.dialogue_id, variant, turns))
    return out


def enrich_accuracy(enriched: list[EnrichedDialogue], ledger: list[Demonstration],
                    variants=("partial", "unlabeled")) -> float:
    """Fraction of predicted labels matching the generator's hidden actions."""
    truth = {d.dialogue_id: d.actions for d in ledger}
    ok, total = 0, 0
    for dlg in enriched:
        if dlg.variant not in variants:
            continue
        for t, turn in enumerate(dlg.turns):
            ok += int(turn.action_id == truth[dlg.dialogue_id][t])
            total += 1
    return ok / max(total, 1)


ENRICHED_VERSION = 1


def save_enriched(path, enriched: list[EnrichedDialogue], config_hash: str = ""):
    header = {"v": ENRICHED_VERSION, "kind": "enriched", "n": len(enriched),
              "config_hash": config_hash}
    with open(path, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n")
        for dlg in enriched:
            obj = {"id": dlg.dialogue_id, "variant": dlg.variant,
                   "turns": [{"s": turn.state.tolist(), "a": turn.action_id,
                              "e": turn.embedding.tolist(), "p": turn.probs.tolist(),
                              "ph": turn.placeholder_state} for turn in dlg.turns]}
            fh.write(json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n")


def load_enriched(path) -> list[EnrichedDialogue]:
    from .corpus import CorpusFormatError

    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise CorpusFormatError(f"{path}: line {lineno}: malformed JSON ({e.msg})") from e
            if lineno == 1:
                if obj.get("kind") != "enriched" or obj.get("v") != ENRICHED_VERSION:
                    raise CorpusFormatError(f"{path}: not an enriched corpus (or wrong version)")
                continue
            turns = [EnrichedTurn(state=np.asarray(t["s"], dtype=float), action_id=t["a"],
                                  embedding=np.asarray(t["e"], dtype=float),
                                  probs=np.asarray(t["p"], dtype=float),
                                  placeholder_state=t["ph"])
                     for t in obj["turns"]]
            out.append(EnrichedDialogue(obj["id"], obj["variant"], turns))
    return out
