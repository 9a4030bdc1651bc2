"""Synthetic multi-domain task-oriented dialogue environment.

A goal sampler, a deterministic rule-based user simulator, a deterministic
expert system policy, a templated utterance renderer and a strict success
judge. Interaction is at the dialogue-act level; utterances are rendered
only when building demonstration corpora.

One turn = one system action followed by the user's response. The user
opens the dialogue before turn 1 by volunteering a constraint.

User response rules, applied in order (first match wins):
  U1 system requested slots in a goal domain -> answer all of them
     (goal value, or dontcare for slots the user has no constraint on)
  U2 some offered goal domain has unsatisfied requests -> ask up to 2
     of them (marks them pending; re-asks if already pending)
  U3 some offered, bookable goal domain wants booking and is not booked
     -> request the booking
  U4 some goal domain has an unstated constraint -> volunteer the first
  U5 all needs met -> after `bye`: dialogue done; after `reqmore`: say
     nothing-else (sets the user-signaled-done flag); otherwise acknowledge
  U6 otherwise wait (e.g. constraints stated, still waiting for an offer)

Expert system rules, applied in order over active domains (first match wins):
  E1 pending unsatisfied requests -> inform up to 2 of them
  E2 booking requested on an offered domain -> book
  E3 unstated informable slots -> request up to 2 of them
  E4 every informable stated and no offer yet -> offer
  E5 nothing to do: user signaled done -> bye, else -> reqmore
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .schemas import (
    DONTCARE,
    MAX_UTTERANCE_LEN,
    SYNONYMS,
    Preset,
    SystemAction,
    db_booking_ref,
    db_entity,
    db_value,
)


class EnvStateError(Exception):
    """Raised when the environment is driven after the dialogue is done."""


@dataclass(frozen=True)
class GoalDomain:
    constraints: dict[str, str]
    requests: tuple[str, ...]
    wants_booking: bool


@dataclass(frozen=True)
class UserGoal:
    domains: dict[str, GoalDomain]  # insertion order = schema order

    def domain_count(self) -> int:
        return len(self.domains)

    def to_json(self) -> dict:
        return {d: {"constraints": g.constraints, "requests": list(g.requests),
                    "wants_booking": g.wants_booking} for d, g in self.domains.items()}

    @staticmethod
    def from_json(d: dict) -> "UserGoal":
        return UserGoal({k: GoalDomain(dict(v["constraints"]), tuple(v["requests"]),
                                       bool(v["wants_booking"])) for k, v in d.items()})


def sample_goal(preset: Preset, rng: np.random.Generator) -> UserGoal:
    """Draw a goal spanning 1..min(3, #domains) domains, each with at least
    one constraint and one request. Deterministic given the generator state."""
    n_available = len(preset.domains)
    n_domains = int(rng.integers(1, min(3, n_available) + 1))
    chosen = sorted(rng.choice(n_available, size=n_domains, replace=False).tolist())
    domains = {}
    for idx in chosen:
        schema = preset.domains[idx]
        inf_slots = list(schema.informable)
        n_con = int(rng.integers(1, min(3, len(inf_slots)) + 1))
        con_idx = sorted(rng.choice(len(inf_slots), size=n_con, replace=False).tolist())
        constraints = {}
        for i in con_idx:
            slot = inf_slots[i]
            vocab = schema.informable[slot]
            constraints[slot] = vocab[int(rng.integers(len(vocab)))]
        n_req = int(rng.integers(1, min(2, len(schema.requestable)) + 1))
        req_idx = sorted(rng.choice(len(schema.requestable), size=n_req, replace=False).tolist())
        requests = tuple(schema.requestable[i] for i in req_idx)
        wants_booking = bool(schema.bookable and rng.random() < 0.5)
        domains[schema.name] = GoalDomain(constraints, requests, wants_booking)
    return UserGoal(domains)


@dataclass
class DomainState:
    active: bool = False
    stated: dict[str, str] = field(default_factory=dict)     # slot -> value (or dontcare)
    pending: set[str] = field(default_factory=set)
    satisfied: set[str] = field(default_factory=set)
    offered: bool = False
    offer_covers: set[tuple[str, str]] = field(default_factory=set)
    book_requested: bool = False
    booked: bool = False


@dataclass
class DialogueState:
    """Structured dialogue state; encodes to a fixed-width binary vector."""

    domains: dict[str, DomainState]
    turn: int = 0
    user_signaled_done: bool = False
    done: bool = False
    provided: set[tuple] = field(default_factory=set)  # judge bookkeeping, not encoded

    @staticmethod
    def initial(preset: Preset) -> "DialogueState":
        return DialogueState({s.name: DomainState() for s in preset.domains})

    def stated_real(self, domain: str, schema) -> dict[str, str]:
        ds = self.domains[domain]
        return {s: v for s, v in ds.stated.items() if v != DONTCARE and s in schema.informable}

    def encode(self, preset: Preset) -> np.ndarray:
        layout = preset.layout
        vec = np.zeros(layout.width)
        for schema in preset.domains:
            d = schema.name
            ds = self.domains[d]
            if ds.active:
                vec[layout.index(f"{d}.active")] = 1.0
            for slot, vocab in schema.informable.items():
                if slot in ds.stated:
                    vec[layout.index(f"{d}.{slot}.stated")] = 1.0
                    v = ds.stated[slot]
                    key = f"{d}.{slot}={v}" if v in vocab else f"{d}.{slot}={DONTCARE}"
                    vec[layout.index(key)] = 1.0
            for slot in schema.requestable:
                if slot in ds.pending:
                    vec[layout.index(f"{d}.{slot}.pending")] = 1.0
                if slot in ds.satisfied:
                    vec[layout.index(f"{d}.{slot}.satisfied")] = 1.0
            if ds.offered:
                vec[layout.index(f"{d}.offered")] = 1.0
            if ds.book_requested:
                vec[layout.index(f"{d}.book_requested")] = 1.0
            if ds.booked:
                vec[layout.index(f"{d}.booked")] = 1.0
        bucket = min(self.turn // layout.TURNS_PER_BUCKET, layout.TURN_BUCKETS - 1)
        vec[layout.index(f"turn.bucket{bucket}")] = 1.0
        if self.user_signaled_done:
            vec[layout.index("user_signaled_done")] = 1.0
        return vec


@dataclass(frozen=True)
class UserMove:
    move: str                           # one of schemas.USER_MOVES
    domain: str = ""
    slot_values: tuple[tuple[str, str], ...] = ()  # usr_inform payload
    slots: tuple[str, ...] = ()                    # usr_request payload


def required_entities(goal: UserGoal, preset: Preset) -> set[tuple]:
    req: set[tuple] = set()
    for d, g in goal.domains.items():
        schema = preset.schema(d)
        for slot, value in g.constraints.items():
            req.add(("con", d, slot, value))
        for slot in g.requests:
            req.add(("req", d, slot, db_value(schema, slot, g.constraints)))
        if g.wants_booking:
            req.add(("book", d))
    return req


def apply_system_action(goal: UserGoal, state: DialogueState, action: SystemAction,
                        preset: Preset) -> dict:
    """Mutate state with the system action's effects; return rendering values."""
    values = {}
    if action.act in ("reqmore", "bye"):
        return values
    schema = preset.schema(action.domain)
    ds = state.domains[action.domain]
    sr = state.stated_real(action.domain, schema)
    gd = goal.domains.get(action.domain)
    if action.act == "inform":
        pairs = []
        for slot in action.slots:
            v = db_value(schema, slot, sr)
            state.provided.add(("req", action.domain, slot, v))
            if gd is not None and slot in gd.requests and v == db_value(schema, slot, gd.constraints):
                ds.satisfied.add(slot)
                ds.pending.discard(slot)
            pairs.append((slot, v))
        values["slot_values"] = tuple(pairs)
    elif action.act == "offer":
        ds.offered = True
        for slot, v in sr.items():
            ds.offer_covers.add((slot, v))
            state.provided.add(("con", action.domain, slot, v))
        values["name"] = db_entity(schema, sr)
    elif action.act == "book":
        if ds.offered:
            ds.booked = True
            state.provided.add(("book", action.domain))
        else:
            state.provided.add(("book_early", action.domain))
        values["ref"] = db_booking_ref(schema, sr)
    elif action.act == "request":
        pass
    return values


def _needs_met(goal: UserGoal, state: DialogueState) -> bool:
    for d, g in goal.domains.items():
        ds = state.domains[d]
        if any(s not in ds.satisfied for s in g.requests):
            return False
        if g.wants_booking and not ds.booked:
            return False
        if any(s not in ds.stated for s in g.constraints):
            return False
    return True


def user_respond(goal: UserGoal, state: DialogueState, last_action: SystemAction | None,
                 preset: Preset) -> UserMove:
    """Rule-based user move (rules U1-U6 in the module docstring)."""
    # U1: answer a request
    if last_action is not None and last_action.act == "request" \
            and last_action.domain in goal.domains:
        d = last_action.domain
        gd = goal.domains[d]
        ds = state.domains[d]
        pairs = []
        for slot in last_action.slots:
            value = gd.constraints.get(slot, DONTCARE)
            ds.stated[slot] = value
            pairs.append((slot, value))
        ds.active = True
        return UserMove("usr_inform", d, slot_values=tuple(pairs))
    # U2: ask requests on an offered domain
    for d, gd in goal.domains.items():
        ds = state.domains[d]
        if ds.offered:
            missing = [s for s in gd.requests if s not in ds.satisfied]
            if missing:
                ask = tuple(missing[:2])
                ds.pending.update(ask)
                return UserMove("usr_request", d, slots=ask)
    # U3: ask for the booking
    for d, gd in goal.domains.items():
        ds = state.domains[d]
        if ds.offered and gd.wants_booking and not ds.booked:
            ds.book_requested = True
            return UserMove("usr_book", d)
    # U4: volunteer the next constraint
    for d, gd in goal.domains.items():
        ds = state.domains[d]
        for slot, value in gd.constraints.items():
            if slot not in ds.stated:
                ds.stated[slot] = value
                ds.active = True
                return UserMove("usr_inform", d, slot_values=((slot, value),))
    # U5 / U6
    if _needs_met(goal, state):
        if last_action is not None and last_action.act == "reqmore":
            state.user_signaled_done = True
            return UserMove("usr_none")
        return UserMove("usr_ack")
    return UserMove("usr_wait")


def user_step(goal: UserGoal, state: DialogueState, last_action: SystemAction | None,
              preset: Preset, rng: np.random.Generator, max_turns: int = 20,
              synonym_rate: float = 0.2, render: bool = True):
    """Apply a system action, produce the user response and the done flag.

    Returns (user utterance token ids or None, state, done). Raises
    EnvStateError if the dialogue already finished.
    """
    if state.done:
        raise EnvStateError("user_step called after dialogue end")
    if last_action is not None:
        state.turn += 1
        apply_system_action(goal, state, last_action, preset)
    move = user_respond(goal, state, last_action, preset)
    done = False
    if last_action is not None and last_action.act == "bye" and _needs_met(goal, state):
        done = True
    if state.turn >= max_turns:
        done = True
    state.done = done
    tokens = render_utterance(move, preset, rng, synonym_rate=synonym_rate) if render else None
    return tokens, state, done


def expert_policy(state: DialogueState, preset: Preset) -> SystemAction:
    """Deterministic expert rules E1-E5 (module docstring); sees only the
    visible state, never the hidden goal."""
    actions = preset.actions
    for schema in preset.domains:
        d = schema.name
        ds = state.domains[d]
        if not ds.active:
            continue
        pending = [s for s in schema.requestable if s in ds.pending and s not in ds.satisfied]
        if pending:
            return actions[actions.find("inform", d, tuple(pending[:2]))]
        if ds.book_requested and ds.offered and not ds.booked:
            return actions[actions.find("book", d)]
        unstated = [s for s in schema.informable if s not in ds.stated]
        if unstated:
            return actions[actions.find("request", d, tuple(unstated[:2]))]
        if not ds.offered:
            return actions[actions.find("offer", d)]
    if state.user_signaled_done:
        return actions[actions.find("bye")]
    return actions[actions.find("reqmore")]


def render_utterance(move, preset: Preset, rng: np.random.Generator,
                     values: dict | None = None, synonym_rate: float = 0.2) -> list[int]:
    """Render a system action or user move to token ids.

    Picks one of the >= 3 act-type templates uniformly, substitutes slot,
    value, domain, entity and reference tokens, then swaps each content
    token with its synonym with probability `synonym_rate` (only content
    tokens have synonyms; template words never change).
    """
    from .schemas import SYSTEM_TEMPLATES, USER_TEMPLATES, flatten_template

    values = values or {}
    if isinstance(move, SystemAction):
        templates = SYSTEM_TEMPLATES[move.act]
        domain = move.domain
        slot_values = values.get("slot_values", ())
        if move.act == "request":
            slot_values = tuple((s, "") for s in move.slots)
    else:
        templates = USER_TEMPLATES[move.move]
        domain = move.domain
        slot_values = move.slot_values if move.move == "usr_inform" \
            else tuple((s, "") for s in move.slots)
    tmpl = templates[int(rng.integers(len(templates)))]
    stream = flatten_template(tmpl, two_slots=len(slot_values) > 1)

    subst = {"D": domain, "NAME": values.get("name", ""), "REF": values.get("ref", "")}
    if len(slot_values) > 0:
        subst["S1"], subst["V1"] = slot_values[0]
    if len(slot_values) > 1:
        subst["S2"], subst["V2"] = slot_values[1]

    words = []
    for tok in stream:
        if tok in subst:
            w = subst[tok]
            if not w:
                continue
            if w in SYNONYMS and rng.random() < synonym_rate:
                w = SYNONYMS[w]
            words.append(w)
        else:
            words.append(tok)
    words = words[:MAX_UTTERANCE_LEN]
    return preset.vocab.encode(words)


@dataclass
class SuccessResult:
    success: bool
    matched: int
    required: int


def is_success(goal: UserGoal, final_state: DialogueState, preset: Preset) -> SuccessResult:
    """Strict judge: every required entity matched and nothing incorrect
    provided (so entity-F1 of 1.0 and success coincide)."""
    required = required_entities(goal, preset)
    matched = len(final_state.provided & required)
    spurious = len(final_state.provided - required)
    success = matched == len(required) and spurious == 0
    return SuccessResult(success, matched, len(required))


@dataclass
class TurnRecord:
    state_vec: np.ndarray
    action_id: int
    sys_tokens: list[int] | None
    usr_tokens: list[int] | None


@dataclass
class DialogueRecord:
    goal: UserGoal
    opening_tokens: list[int] | None
    turns: list[TurnRecord]
    final_state_vec: np.ndarray
    final_state: DialogueState
    success: bool
    matched: int
    required: int

    @property
    def n_turns(self) -> int:
        return len(self.turns)

    def provided_entities(self) -> set[tuple]:
        return self.final_state.provided


class DialogueEnv:
    """Action-level environment wrapper with per-episode RNG streams.

    Streams derive from (root_seed, episode_index) so distinct instances
    and distinct episodes never share randomness yet replay exactly.
    """

    def __init__(self, preset: Preset, max_turns: int = 20, synonym_rate: float = 0.2,
                 render: bool = False, seed: int = 0):
        self.preset = preset
        self.max_turns = max_turns
        self.synonym_rate = synonym_rate
        self.render = render
        self.seed = seed
        self.episode_index = -1
        self.goal = None
        self.state = None
        self._rng = None
        self._last_action = None
        self._turns: list[TurnRecord] = []
        self._opening = None

    def rng_for_episode(self, episode: int) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, episode])))

    def reset(self, episode: int | None = None, goal: UserGoal | None = None) -> np.ndarray:
        self.episode_index = self.episode_index + 1 if episode is None else episode
        self._rng = self.rng_for_episode(self.episode_index)
        self.goal = goal if goal is not None else sample_goal(self.preset, self._rng)
        self.state = DialogueState.initial(self.preset)
        self._last_action = None
        self._turns = []
        # user opens the dialogue
        move = user_respond(self.goal, self.state, None, self.preset)
        self._opening = render_utterance(move, self.preset, self._rng,
                                         synonym_rate=self.synonym_rate) if self.render else None
        return self.state.encode(self.preset)

    def step(self, action_id: int):
        """Returns (next_state_vec, done). One turn: system action + user reply."""
        if self.state is None:
            raise EnvStateError("reset() the environment first")
        if self.state.done:
            raise EnvStateError("step() after dialogue end")
        action = self.preset.actions[action_id]
        state_before = self.state.encode(self.preset)
        self.state.turn += 1
        values = apply_system_action(self.goal, self.state, action, self.preset)
        sys_tokens = render_utterance(action, self.preset, self._rng, values,
                                      self.synonym_rate) if self.render else None
        move = user_respond(self.goal, self.state, action, self.preset)
        done = (action.act == "bye" and _needs_met(self.goal, self.state)) \
            or self.state.turn >= self.max_turns
        self.state.done = done
        usr_tokens = render_utterance(move, self.preset, self._rng,
                                      synonym_rate=self.synonym_rate) if self.render else None
        self._turns.append(TurnRecord(state_before, action_id, sys_tokens, usr_tokens))
        return self.state.encode(self.preset), done

    def finish_record(self) -> DialogueRecord:
        res = is_success(self.goal, self.state, self.preset)
        return DialogueRecord(
            goal=self.goal, opening_tokens=self._opening, turns=self._turns,
            final_state_vec=self.state.encode(self.preset), final_state=self.state,
            success=res.success, matched=res.matched, required=res.required)


def rollout_expert(env: DialogueEnv, episode: int | None = None) -> DialogueRecord:
    env.reset(episode)
    done = False
    while not done:
        action = expert_policy(env.state, env.preset)
        _, done = env.step(env.preset.actions.id_of(action))
    return env.finish_record()
