"""Domain schemas, action inventory, state-vector layout and utterance templates.

Everything here is a pure function of the preset configuration, so action
ids, state layouts and vocabularies are stable across runs: two processes
loading the same preset always agree bit for bit.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from importlib import resources

PRESET_VERSION = 1
DONTCARE = "dontcare"

SYSTEM_ACTS = ("inform", "request", "offer", "book", "reqmore", "bye")
USER_MOVES = ("usr_inform", "usr_request", "usr_book", "usr_none", "usr_ack", "usr_wait")

PAD, BOS, SEP = "<pad>", "<bos>", "<sep>"


@dataclass(frozen=True)
class DomainSchema:
    name: str
    informable: dict[str, tuple[str, ...]]      # slot -> finite value vocabulary
    requestable: tuple[str, ...]
    request_values: dict[str, tuple[str, ...]]  # slot -> synthetic entity-attribute values
    entity_names: tuple[str, ...]
    bookable: bool

    def __post_init__(self):
        names = list(self.informable) + list(self.requestable)
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate slot names in domain {self.name!r}")
        for slot, vocab in self.informable.items():
            if not 4 <= len(vocab) <= 8:
                raise ValueError(f"{self.name}.{slot}: informable vocabulary must have 4-8 values")
        for slot in self.requestable:
            if not self.request_values.get(slot):
                raise ValueError(f"{self.name}.{slot}: empty requestable value list")

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "informable": {k: list(v) for k, v in self.informable.items()},
            "requestable": list(self.requestable),
            "request_values": {k: list(v) for k, v in self.request_values.items()},
            "entity_names": list(self.entity_names),
            "bookable": self.bookable,
        }

    @staticmethod
    def from_json(d: dict) -> "DomainSchema":
        return DomainSchema(
            name=d["name"],
            informable={k: tuple(v) for k, v in d["informable"].items()},
            requestable=tuple(d["requestable"]),
            request_values={k: tuple(v) for k, v in d["request_values"].items()},
            entity_names=tuple(d["entity_names"]),
            bookable=bool(d["bookable"]),
        )


RESTAURANT = DomainSchema(
    name="restaurant",
    informable={
        "food": ("british", "chinese", "french", "indian", "italian", "thai"),
        "pricerange": ("cheap", "moderate", "expensive", "luxury"),
        "area": ("centre", "north", "south", "east", "west"),
    },
    requestable=("address", "phone", "postcode", "ratings"),
    request_values={
        "address": ("king_street", "queen_road", "mill_lane", "station_way", "park_avenue"),
        "phone": ("01223111", "01223222", "01223333", "01223444", "01223555"),
        "postcode": ("cb11aa", "cb22bb", "cb33cc", "cb44dd", "cb55ee"),
        "ratings": ("rated_two", "rated_three", "rated_four", "rated_five", "rated_top"),
    },
    entity_names=("luca_bistro", "riverside_table", "golden_wok", "spice_garden", "casa_roma"),
    bookable=True,
)

HOTEL = DomainSchema(
    name="hotel",
    informable={
        "stars": ("onestar", "twostar", "threestar", "fourstar", "fivestar"),
        "pricetier": ("economy", "standard", "premium", "deluxe"),
        "district": ("downtown", "riverside", "uptown", "suburb", "airport"),
    },
    requestable=("location", "contact", "zipcode", "amenities"),
    request_values={
        "location": ("near_station", "near_river", "near_park", "near_market", "near_square"),
        "contact": ("07700111", "07700222", "07700333", "07700444", "07700555"),
        "zipcode": ("zz11", "zz22", "zz33", "zz44", "zz55"),
        "amenities": ("pool_gym", "spa_sauna", "wifi_parking", "bar_lounge", "garden_terrace"),
    },
    entity_names=("grand_palms", "city_nest", "harbor_inn", "maple_lodge", "sunrise_suites"),
    bookable=True,
)

ATTRACTION = DomainSchema(
    name="attraction",
    informable={
        "category": ("museum", "park", "theatre", "gallery", "cinema", "zoo"),
        "zone": ("centre", "north", "south", "east", "west"),
    },
    requestable=("entrancefee", "openhours", "website", "duration"),
    request_values={
        "entrancefee": ("free_entry", "two_pounds", "five_pounds", "eight_pounds", "ten_pounds"),
        "openhours": ("nine_to_five", "ten_to_six", "noon_to_eight", "eight_to_four", "ten_to_ten"),
        "website": ("site_one", "site_two", "site_three", "site_four", "site_five"),
        "duration": ("one_hour", "two_hours", "half_day", "full_day", "ninety_minutes"),
    },
    entity_names=("old_museum", "city_gardens", "royal_theatre", "glass_gallery", "star_cinema"),
    bookable=False,
)

PRESET_DOMAINS = {
    "1dom": (RESTAURANT,),
    "2dom": (RESTAURANT, HOTEL),
    "3dom": (RESTAURANT, HOTEL, ATTRACTION),
}

BOOKING_REFS = ("ref11", "ref22", "ref33", "ref44", "ref55")

# Synonym substitution targets; applied with probability `synonym_rate` per
# rendered occurrence. Keys and values are globally unique tokens so the
# mapping is invertible (bag-of-words oracles canonicalize through it).
SYNONYMS = {
    "restaurant": "eatery", "hotel": "lodging", "attraction": "sight",
    "food": "cuisine", "pricerange": "pricing", "area": "locality",
    "address": "street", "phone": "telephone", "postcode": "zip", "ratings": "reviews",
    "stars": "grade", "pricetier": "tier", "district": "quarter",
    "location": "whereabouts", "contact": "hotline", "zipcode": "postal",
    "amenities": "facilities",
    "category": "kind", "zone": "sector", "entrancefee": "admission",
    "openhours": "schedule", "website": "webpage", "duration": "timespan",
    "british": "english", "chinese": "sichuan", "french": "gallic",
    "indian": "tandoori", "italian": "trattoria", "thai": "siamese",
    "cheap": "lowcost", "moderate": "midrange", "expensive": "pricey", "luxury": "plush",
    "economy": "thrifty", "standard": "regular", "premium": "upscale", "deluxe": "opulent",
    "museum": "exhibits", "park": "gardens", "theatre": "playhouse",
    "gallery": "artspace", "cinema": "moviehouse", "zoo": "wildlife",
}
SYNONYMS_INV = {v: k for k, v in SYNONYMS.items()}

# Template token streams. Placeholders: D domain, S1/V1 and S2/V2 slot/value
# pairs, NAME offered entity, REF booking reference. Nested tuples are
# optional groups included only when a second slot is present. First tokens
# are unique per act type (disjoint head sets), so act types never share an
# opening word.
SYSTEM_TEMPLATES = {
    "inform": (
        ("here", "you", "go", "the", "D", "S1", "is", "V1", ("and", "S2", "is", "V2")),
        ("listed", "details", "for", "D", "S1", "shows", "V1", ("plus", "S2", "shows", "V2")),
        ("noted", "the", "S1", "for", "this", "D", "is", "V1", ("also", "S2", "is", "V2")),
    ),
    "request": (
        ("which", "S1", ("and", "S2"), "would", "you", "like", "for", "the", "D"),
        ("what", "S1", ("or", "S2"), "shall", "i", "use", "for", "the", "D"),
        ("wondering", "about", "your", "S1", ("and", "S2"), "preference", "for", "D"),
    ),
    "offer": (
        ("found", "a", "great", "D", "called", "NAME", "matching", "your", "needs"),
        ("suggest", "the", "D", "named", "NAME", "for", "you"),
        ("recommend", "NAME", "a", "fine", "D", "choice"),
    ),
    "book": (
        ("booked", "your", "D", "reference", "is", "REF"),
        ("reserved", "the", "D", "with", "code", "REF"),
        ("confirmed", "a", "booking", "for", "the", "D", "ref", "REF"),
    ),
    "reqmore": (
        ("anything", "else", "i", "can", "help", "with"),
        ("further", "requests", "for", "me", "today"),
        ("more", "help", "needed", "with", "something"),
    ),
    "bye": (
        ("goodbye", "and", "enjoy", "your", "day"),
        ("farewell", "thanks", "for", "visiting"),
        ("cheerio", "glad", "to", "assist"),
    ),
}

USER_TEMPLATES = {
    "usr_inform": (
        ("want", "the", "D", "with", "S1", "V1", ("and", "S2", "V2")),
        ("need", "a", "D", "where", "S1", "is", "V1", ("and", "S2", "is", "V2")),
        ("prefer", "S1", "to", "be", "V1", ("and", "S2", "V2"), "for", "the", "D"),
    ),
    "usr_request": (
        ("tell", "me", "the", "S1", ("and", "S2"), "of", "the", "D"),
        ("share", "the", "S1", ("plus", "S2"), "please"),
        ("give", "me", "its", "S1", ("and", "S2")),
    ),
    "usr_book": (
        ("reserve", "it", "for", "me", "please"),
        ("secure", "a", "booking", "there"),
        ("arrange", "the", "booking", "now"),
    ),
    "usr_none": (
        ("nothing", "else", "that", "is", "all"),
        ("done", "here", "thank", "you"),
        ("finished", "no", "other", "requests"),
    ),
    "usr_ack": (
        ("thanks", "that", "works",),
        ("great", "sounds", "good"),
        ("lovely", "very", "helpful"),
    ),
    "usr_wait": (
        ("okay", "go", "on"),
        ("hmm", "let", "me", "see"),
        ("alright", "continue",),
    ),
}

MAX_UTTERANCE_LEN = 24
_PLACEHOLDERS = {"D", "S1", "V1", "S2", "V2", "NAME", "REF"}


def flatten_template(tmpl, two_slots: bool = True):
    """Expand a template into a flat token stream; optional groups (nested
    tuples, the second-slot segments) are dropped when two_slots is False."""
    out = []
    for tok in tmpl:
        if isinstance(tok, tuple):
            if two_slots:
                out.extend(tok)
        else:
            out.append(tok)
    return out


@dataclass(frozen=True)
class SystemAction:
    """Discrete dialogue act: type, domain and a slot subset of size <= 2."""
    act: str
    domain: str
    slots: tuple[str, ...] = ()

    def label(self) -> str:
        parts = [self.act]
        if self.domain:
            parts.append(self.domain)
        if self.slots:
            parts.append("+".join(self.slots))
        return "-".join(parts)


class ActionSet:
    """The finite action inventory A with stable integer ids."""

    def __init__(self, domains: tuple[DomainSchema, ...]):
        self.domains = domains
        actions: list[SystemAction] = []
        for schema in domains:
            inf = list(schema.informable)
            req = list(schema.requestable)
            for s in inf:
                actions.append(SystemAction("request", schema.name, (s,)))
            for i in range(len(inf)):
                for j in range(i + 1, len(inf)):
                    actions.append(SystemAction("request", schema.name, (inf[i], inf[j])))
            for s in req:
                actions.append(SystemAction("inform", schema.name, (s,)))
            for i in range(len(req)):
                for j in range(i + 1, len(req)):
                    actions.append(SystemAction("inform", schema.name, (req[i], req[j])))
            actions.append(SystemAction("offer", schema.name))
            if schema.bookable:
                actions.append(SystemAction("book", schema.name))
        actions.append(SystemAction("reqmore", ""))
        actions.append(SystemAction("bye", ""))
        self.actions = tuple(actions)
        self._ids = {a: i for i, a in enumerate(actions)}

    def __len__(self):
        return len(self.actions)

    def __getitem__(self, action_id: int) -> SystemAction:
        return self.actions[action_id]

    def id_of(self, action: SystemAction) -> int:
        return self._ids[action]

    def find(self, act: str, domain: str = "", slots=()) -> int:
        return self._ids[SystemAction(act, domain, tuple(slots))]

    def labels(self) -> list[str]:
        return [a.label() for a in self.actions]

    def fingerprint(self) -> str:
        return f"{zlib.crc32('|'.join(self.labels()).encode()):08x}"


class StateLayout:
    """Ordered binary field list for encoding DialogueState to a vector.

    Per domain: active bit; per informable slot a stated bit plus a one-hot
    over (values + dontcare); per requestable slot pending/satisfied bits;
    offered / book_requested / booked flags. Globally: a 4-bucket one-hot
    of the turn counter (buckets of 5 turns) and the user-signaled-done bit.
    """

    TURN_BUCKETS = 4
    TURNS_PER_BUCKET = 5

    def __init__(self, domains: tuple[DomainSchema, ...]):
        self.domains = domains
        fields: list[str] = []
        self._index: dict[str, int] = {}
        for schema in domains:
            d = schema.name
            fields.append(f"{d}.active")
            for slot, vocab in schema.informable.items():
                fields.append(f"{d}.{slot}.stated")
                for v in vocab:
                    fields.append(f"{d}.{slot}={v}")
                fields.append(f"{d}.{slot}={DONTCARE}")
            for slot in schema.requestable:
                fields.append(f"{d}.{slot}.pending")
                fields.append(f"{d}.{slot}.satisfied")
            fields.append(f"{d}.offered")
            fields.append(f"{d}.book_requested")
            fields.append(f"{d}.booked")
        for b in range(self.TURN_BUCKETS):
            fields.append(f"turn.bucket{b}")
        fields.append("user_signaled_done")
        self.fields = tuple(fields)
        self._index = {f: i for i, f in enumerate(fields)}

    @property
    def width(self) -> int:
        return len(self.fields)

    def index(self, name: str) -> int:
        return self._index[name]


class Vocabulary:
    """Token <-> id mapping built deterministically from templates and schemas."""

    def __init__(self, domains: tuple[DomainSchema, ...]):
        tokens: list[str] = [PAD, BOS, SEP]
        seen = set(tokens)

        def put(tok: str):
            if tok not in seen:
                seen.add(tok)
                tokens.append(tok)

        for templates in (SYSTEM_TEMPLATES, USER_TEMPLATES):
            for tmpl_list in templates.values():
                for tmpl in tmpl_list:
                    for tok in flatten_template(tmpl):
                        if tok not in _PLACEHOLDERS:
                            put(tok)
        for schema in domains:
            put(schema.name)
            for slot, vocab in schema.informable.items():
                put(slot)
                for v in vocab:
                    put(v)
            put(DONTCARE)
            for slot in schema.requestable:
                put(slot)
                for v in schema.request_values[slot]:
                    put(v)
            for name in schema.entity_names:
                put(name)
        for ref in BOOKING_REFS:
            put(ref)
        for base, syn in sorted(SYNONYMS.items()):
            if base in seen:
                put(syn)
        self.tokens = tuple(tokens)
        self.ids = {t: i for i, t in enumerate(tokens)}

    def __len__(self):
        return len(self.tokens)

    def encode(self, words) -> list[int]:
        return [self.ids[w] for w in words]

    def decode(self, ids) -> list[str]:
        return [self.tokens[i] for i in ids]

    def to_json(self) -> dict:
        return {"vocab_version": 1, "tokens": list(self.tokens)}


@dataclass
class Preset:
    """A named, versioned bundle of domain schemas plus derived inventories."""

    name: str
    domains: tuple[DomainSchema, ...]
    actions: ActionSet = field(init=False)
    layout: StateLayout = field(init=False)
    vocab: Vocabulary = field(init=False)

    def __post_init__(self):
        self.actions = ActionSet(self.domains)
        self.layout = StateLayout(self.domains)
        self.vocab = Vocabulary(self.domains)

    def schema(self, domain: str) -> DomainSchema:
        for s in self.domains:
            if s.name == domain:
                return s
        raise KeyError(domain)

    def to_json(self) -> dict:
        return {
            "preset_version": PRESET_VERSION,
            "name": self.name,
            "domains": [s.to_json() for s in self.domains],
        }


def preset_to_json_text(preset: Preset) -> str:
    # key order is meaningful: slot declaration order fixes action ids and
    # the state layout, so no sort_keys here
    return json.dumps(preset.to_json(), indent=2) + "\n"


def preset_from_json(d: dict) -> Preset:
    version = d.get("preset_version")
    if version != PRESET_VERSION:
        raise ValueError(f"unsupported preset_version {version!r} (expected {PRESET_VERSION})")
    return Preset(d["name"], tuple(DomainSchema.from_json(s) for s in d["domains"]))


def load_preset(name: str) -> Preset:
    """Load a shipped preset (1dom / 2dom / 3dom) from its packaged JSON."""
    if name not in PRESET_DOMAINS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESET_DOMAINS)}")
    text = resources.files("semidial").joinpath(f"presets/{name}.json").read_text()
    return preset_from_json(json.loads(text))


def _stable_hash(parts) -> int:
    return zlib.crc32("|".join(parts).encode())


def db_value(schema: DomainSchema, slot: str, stated_real: dict[str, str]) -> str:
    """Synthetic database lookup: attribute value determined by the stated
    real constraints. Informing before all of a user's constraints are known
    therefore usually yields a value inconsistent with the goal."""
    items = sorted(f"{s}={v}" for s, v in stated_real.items())
    vocab = schema.request_values[slot]
    return vocab[_stable_hash([schema.name, slot] + items) % len(vocab)]


def db_entity(schema: DomainSchema, stated_real: dict[str, str]) -> str:
    items = sorted(f"{s}={v}" for s, v in stated_real.items())
    return schema.entity_names[_stable_hash([schema.name, "name"] + items) % len(schema.entity_names)]


def db_booking_ref(schema: DomainSchema, stated_real: dict[str, str]) -> str:
    items = sorted(f"{s}={v}" for s, v in stated_real.items())
    return BOOKING_REFS[_stable_hash([schema.name, "ref"] + items) % len(BOOKING_REFS)]
