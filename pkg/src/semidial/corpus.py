"""Expert demonstration corpora: generation, label masking, persistence.

A demonstration is one expert dialogue at one of three supervision levels:
  full      (s_t, a_t, u_t)  states, system actions, system utterances
  partial   (s_t, u_t)       action labels removed
  unlabeled (c_t, u_t)       states and actions removed; c_t is the running
                             history of user and system utterances, stored
                             as per-turn token lists and concatenated on use

Masking partitions whole dialogues (never single turns) and removes
information only: the generator's fully annotated corpus is the ledger from
which every hidden field can be restored by dialogue id.

On disk: line-delimited JSON, one header line then one dialogue per line.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .env import DialogueEnv, UserGoal, rollout_expert
from .schemas import Preset

CORPUS_VERSION = 1

FULL, PARTIAL, UNLABELED = "full", "partial", "unlabeled"


class CorpusFormatError(Exception):
    pass


class ConfigError(Exception):
    pass


@dataclass
class Demonstration:
    dialogue_id: int
    variant: str
    sys_utts: list[list[int]]                 # u_1..u_n, all variants
    states: list[list[int]] | None = None     # s_1..s_{n+1}, full/partial
    actions: list[int] | None = None          # a_1..a_n, full only
    usr_utts: list[list[int]] | None = None   # opening + n responses, unlabeled only
    goal: dict | None = None                  # full only (hidden from learners)
    success: bool | None = None

    @property
    def n_turns(self) -> int:
        return len(self.sys_utts)

    def context_before(self, t: int, sep_id: int, max_tokens: int | None = None) -> list[int]:
        """c_t: user+system utterance history before turn t (0-based), for
        unlabeled demonstrations."""
        if self.usr_utts is None:
            raise ValueError("contexts only exist on unlabeled demonstrations")
        parts = [self.usr_utts[0]]
        for i in range(t):
            parts.append(self.sys_utts[i])
            parts.append(self.usr_utts[i + 1])
        out: list[int] = []
        for p in parts:
            if out:
                out.append(sep_id)
            out.extend(p)
        if max_tokens is not None and len(out) > max_tokens:
            out = out[-max_tokens:]
        return out

    def to_json(self) -> dict:
        d = {"id": self.dialogue_id, "variant": self.variant, "sys_utts": self.sys_utts}
        if self.states is not None:
            d["states"] = self.states
        if self.actions is not None:
            d["actions"] = self.actions
        if self.usr_utts is not None:
            d["usr_utts"] = self.usr_utts
        if self.goal is not None:
            d["goal"] = self.goal
        if self.success is not None:
            d["success"] = self.success
        return d

    @staticmethod
    def from_json(d: dict) -> "Demonstration":
        return Demonstration(
            dialogue_id=d["id"], variant=d["variant"], sys_utts=d["sys_utts"],
            states=d.get("states"), actions=d.get("actions"), usr_utts=d.get("usr_utts"),
            goal=d.get("goal"), success=d.get("success"))


@dataclass
class SplitSpec:
    """Fractions (f_full, f_partial, f_unlabeled) over N dialogues."""

    f_full: float
    f_partial: float
    f_unlabeled: float
    seed: int = 0

    def __post_init__(self):
        for f in (self.f_full, self.f_partial, self.f_unlabeled):
            if not 0.0 <= f <= 1.0:
                raise ConfigError(f"split fraction {f} outside [0, 1]")
        total = self.f_full + self.f_partial + self.f_unlabeled
        if abs(total - 1.0) > 1e-9:
            raise ConfigError(f"split fractions sum to {total}, expected 1")

    def counts(self, n: int) -> tuple[int, int, int]:
        """Exact largest-remainder apportionment of n dialogues."""
        fracs = (self.f_full, self.f_partial, self.f_unlabeled)
        floors = [int(np.floor(f * n)) for f in fracs]
        remainder = n - sum(floors)
        order = sorted(range(3), key=lambda i: (-(fracs[i] * n - floors[i]), i))
        for i in order[:remainder]:
            floors[i] += 1
        return tuple(floors)


def record_to_demo(record, dialogue_id: int) -> Demonstration:
    states = [r.state_vec.astype(int).tolist() for r in record.turns]
    states.append(record.final_state_vec.astype(int).tolist())
    return Demonstration(
        dialogue_id=dialogue_id, variant=FULL,
        sys_utts=[r.sys_tokens for r in record.turns],
        states=states,
        actions=[r.action_id for r in record.turns],
        usr_utts=[record.opening_tokens] + [r.usr_tokens for r in record.turns],
        goal=record.goal.to_json(), success=record.success)


def generate_corpus(preset: Preset, n: int, seed: int, max_turns: int = 20,
                    synonym_rate: float = 0.2) -> list[Demonstration]:
    """N expert rollouts, fully annotated. The expert always succeeds."""
    if n < 1:
        raise ConfigError("corpus size must be >= 1")
    env = DialogueEnv(preset, max_turns=max_turns, synonym_rate=synonym_rate,
                      render=True, seed=seed)
    demos = []
    for ep in range(n):
        record = rollout_expert(env, ep)
        demos.append(record_to_demo(record, ep))
    return demos


def _strip(demo: Demonstration, variant: str) -> Demonstration:
    if variant == FULL:
        return demo
    if variant == PARTIAL:
        return Demonstration(demo.dialogue_id, PARTIAL, sys_utts=demo.sys_utts,
                             states=demo.states)
    return Demonstration(demo.dialogue_id, UNLABELED, sys_utts=demo.sys_utts,
                         usr_utts=demo.usr_utts)


def mask_labels(corpus: list[Demonstration], spec: SplitSpec):
    """Partition by dialogue into (D_F, D_P, D_U) and strip hidden fields.

    The partition is disjoint and exhaustive; within one dialogue every turn
    keeps the same supervision level. Deterministic given spec.seed.
    """
    n = len(corpus)
    n_f, n_p, n_u = spec.counts(n)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([spec.seed, 0xD1A1])))
    order = rng.permutation(n)
    d_f = sorted(order[:n_f].tolist())
    d_p = sorted(order[n_f:n_f + n_p].tolist())
    d_u = sorted(order[n_f + n_p:].tolist())
    full = [_strip(corpus[i], FULL) for i in d_f]
    partial = [_strip(corpus[i], PARTIAL) for i in d_p]
    unlabeled = [_strip(corpus[i], UNLABELED) for i in d_u]
    return full, partial, unlabeled


def save_corpus(path, demos: list[Demonstration], preset_name: str,
                config_hash: str = "", extra: dict | None = None):
    header = {"v": CORPUS_VERSION, "kind": "corpus", "preset": preset_name,
              "n": len(demos), "config_hash": config_hash}
    if extra:
        header.update(extra)
    with open(path, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n")
        for demo in demos:
            fh.write(json.dumps(demo.to_json(), sort_keys=True, separators=(",", ":")) + "\n")


def load_corpus(path):
    """Returns (header, demonstrations). Raises CorpusFormatError with the
    failing line number on malformed input."""
    demos = []
    header = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped:
                continue
            try:
                obj = json.loads(stripped)
            except json.JSONDecodeError as e:
                raise CorpusFormatError(
                    f"{path}: line {lineno}: malformed JSON ({e.msg}); "
                    f"last complete line was {lineno - 1}") from e
            if lineno == 1:
                if obj.get("kind") != "corpus" or "v" not in obj:
                    raise CorpusFormatError(f"{path}: line 1: missing corpus header")
                if obj["v"] != CORPUS_VERSION:
                    raise CorpusFormatError(
                        f"{path}: unsupported corpus version {obj['v']} "
                        f"(expected {CORPUS_VERSION})")
                header = obj
            else:
                try:
                    demos.append(Demonstration.from_json(obj))
                except KeyError as e:
                    raise CorpusFormatError(
                        f"{path}: line {lineno}: missing field {e}") from e
    if header is None:
        raise CorpusFormatError(f"{path}: empty corpus file")
    return header, demos


def goal_of(demo: Demonstration) -> UserGoal:
    if demo.goal is None:
        raise ValueError("goal only present on fully annotated demonstrations")
    return UserGoal.from_json(demo.goal)
