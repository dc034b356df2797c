"""Procedural co-reference retrieval benchmark.

A sample reads: lead, location, three distractors (reflection, recipe line,
arithmetic), a prelude that asks back for the place, then the location again.
The model has to reproduce the location from far back in the context.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .host import ContractError
from .nn import Rng

POOL_KEYS = ("locations", "pairs", "philosophical", "culinary", "math")
SYLLABLES = (
    "za ri mel vor thu kai nox dra lum bre sil qua fen tor yth gal esh ori "
    "vash pel mir dun kes zor ath ula cyr ven obi rak sel tam wyn fro ise"
).split()

_OPENINGS = ["Beyond", "Past", "Across", "Under", "Beside", "Above", "Behind", "Near"]
_TERRAIN = ["the salt dunes", "the red cliffs", "the grey marsh", "the old pines", "the glass lake",
            "the iron hills", "the quiet bay", "the ash fields", "the high moor", "the cold river",
            "the white steppe", "the deep gorge", "the amber reef"]
_FEATURE = ["a lantern town", "a stone harbor", "a hidden valley", "a misty village", "a sunken city",
            "a bell tower", "a copper mine", "a silent abbey", "a tidal market", "a moss garden"]

_PHIL = [
    "Every {n1} hides a {a1} {n2}.",
    "A {a1} {n1} outlives the {n2}.",
    "We seek the {n1} and find the {n2}.",
    "The {a1} mind trusts the {n1}.",
    "No {n1} is {a1} to the {n2}.",
    "To doubt the {n1} is to meet the {n2}.",
]
_PHIL_N = ["truth", "silence", "memory", "river", "shadow", "dream", "word", "self", "hour", "light"]
_PHIL_A = ["quiet", "honest", "patient", "restless", "humble", "open", "wild", "still"]

_CUL = [
    "Simmer the {i1} with {i2} for {m} minutes.",
    "Fold {i1} into {i2} and bake for {m} minutes.",
    "Roast the {i1}, then add {i2} and salt.",
    "Whisk {i1} and {i2} until smooth.",
    "Toast the {i1} and serve with {i2}.",
]
_ING = ["garlic", "lentils", "butter", "basil", "onions", "rice", "honey", "pears", "leeks", "figs",
        "cream", "thyme", "beans", "plums"]

_MATH = [
    "{a} plus {b} is {s}.",
    "{a} times {b} is {p}.",
    "{c} minus {b} is {d}.",
    "Add {a} to {b} to get {s}.",
]


class BenchDataError(ValueError):
    pass


@dataclass
class BenchPools:
    locations: list[str]
    pairs: list[tuple[str, str]]  # (lead, prelude); index i of one matches i of the other
    philosophical: list[str]
    culinary: list[str]
    math: list[str]

    def sizes(self) -> tuple[int, ...]:
        return tuple(len(getattr(self, k)) for k in POOL_KEYS)

    def combinations(self) -> int:
        """Distinct context frames: a lead/prelude pair plus three distractors.

        The location is drawn on top of the frame.
        """
        _, n_pair, n_phil, n_cul, n_math = self.sizes()
        return n_pair * n_phil * n_cul * n_math

    def to_json(self) -> str:
        obj = {
            "locations": self.locations,
            "pairs": [list(p) for p in self.pairs],
            "philosophical": self.philosophical,
            "culinary": self.culinary,
            "math": self.math,
        }
        return json.dumps(obj, indent=1, ensure_ascii=False)


def load_pools(path: str | Path) -> BenchPools:
    """Read an override pool file: a JSON object of five named string arrays.

    ``pairs`` may be given either as ``[[lead, prelude], ...]`` or as two
    arrays ``leads`` and ``preludes``.
    """
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    if "pairs" in obj:
        pairs = [tuple(p) for p in obj["pairs"]]
    else:
        leads, preludes = obj["leads"], obj["preludes"]
        if len(leads) != len(preludes):
            raise BenchDataError("leads and preludes must have equal length")
        pairs = list(zip(leads, preludes))
    pools = BenchPools(list(obj["locations"]), pairs, list(obj["philosophical"]), list(obj["culinary"]), list(obj["math"]))
    if min(pools.sizes()) < 1:
        raise BenchDataError("every pool needs at least one entry")
    return pools


def _unique(rng: Rng, n: int, make, limit: int = 100_000) -> list[str]:
    out, seen = [], set()
    for _ in range(limit):
        if len(out) == n:
            return out
        s = make(rng)
        if s not in seen:
            seen.add(s)
            out.append(s)
    raise BenchDataError(f"could not draw {n} distinct entries")


def _pick(rng: Rng, seq):
    return seq[int(rng.integers(0, len(seq)))]


def _location(rng: Rng) -> str:
    k = int(rng.integers(2, 5))
    return "".join(_pick(rng, SYLLABLES) for _ in range(k))


def _pair(rng: Rng) -> str:
    return f"{_pick(rng, _OPENINGS)}|{_pick(rng, _TERRAIN)}|{_pick(rng, _FEATURE)}"


def _render_pair(key: str) -> tuple[str, str]:
    opening, terrain, feature = key.split("|")
    lead = f"{opening} {terrain} lies {feature} named"
    noun = feature.split(" ", 1)[1]
    prelude = f"The {noun} {opening.lower()} {terrain} was named"
    return lead, prelude


def _phil(rng: Rng) -> str:
    n1 = _pick(rng, _PHIL_N)
    n2 = _pick(rng, [w for w in _PHIL_N if w != n1])
    return _pick(rng, _PHIL).format(n1=n1, n2=n2, a1=_pick(rng, _PHIL_A))


def _cul(rng: Rng) -> str:
    i1 = _pick(rng, _ING)
    i2 = _pick(rng, [w for w in _ING if w != i1])
    return _pick(rng, _CUL).format(i1=i1, i2=i2, m=int(rng.integers(5, 60)))


def _math(rng: Rng) -> str:
    a, b = int(rng.integers(2, 40)), int(rng.integers(2, 20))
    c = a + b + int(rng.integers(0, 30))
    return _pick(rng, _MATH).format(a=a, b=b, s=a + b, p=a * b, c=c, d=c - b)


def build_pools(seed: int = 0, sizes=(100, 100, 100, 100, 100)) -> BenchPools:
    if min(sizes) < 1:
        raise BenchDataError("pool sizes must be >= 1")
    rng = Rng(seed, "bench-pools")
    n_loc, n_pair, n_phil, n_cul, n_math = sizes
    locations = _unique(rng.child("locations"), n_loc, _location)
    pair_keys = _unique(rng.child("pairs"), n_pair, _pair)
    return BenchPools(
        locations=locations,
        pairs=[_render_pair(k) for k in pair_keys],
        philosophical=_unique(rng.child("philosophical"), n_phil, _phil),
        culinary=_unique(rng.child("culinary"), n_cul, _cul),
        math=_unique(rng.child("math"), n_math, _math),
    )


@dataclass
class BenchSample:
    text: str
    location: str
    location_ids: list[int]
    first_span: tuple[int, int]  # token positions [start, end) of the first mention, BOS included
    prefix_ids: list[int]  # BOS + text up to the final mention
    seed: int
    parts: dict = field(default_factory=dict)

    @property
    def full_ids(self) -> list[int]:
        return self.prefix_ids + self.location_ids


def compose(lead: str, location: str, phil: str, cul: str, math: str, prelude: str) -> tuple[str, int, int]:
    head = f"{lead} {location}. {phil} {cul} {math} {prelude} "
    start = len(lead) + 1
    return head + location + ".", start, len(head)


def render_sample(pools: BenchPools, seed: int, tokenizer, max_tokens: int = 512, retries: int = 32) -> BenchSample:
    """Draw one sample; on overflow retry with the next seed, up to ``retries`` times."""
    for attempt in range(retries + 1):
        s = seed + attempt
        rng = Rng(s, "bench-samples")
        i = int(rng.integers(0, len(pools.pairs)))
        loc = _pick(rng, pools.locations)
        lead, prelude = pools.pairs[i]
        phil, cul, math = _pick(rng, pools.philosophical), _pick(rng, pools.culinary), _pick(rng, pools.math)
        text, first_start, final_start = compose(lead, loc, phil, cul, math, prelude)
        prefix_ids = tokenizer.encode(text[:final_start])
        loc_ids = tokenizer.tokenize(loc)
        # BOS + prefix + the continuation must fit the host context
        if len(prefix_ids) + len(loc_ids) < max_tokens and text.count(loc) == 2:
            return BenchSample(
                text=text,
                location=loc,
                location_ids=loc_ids,
                first_span=(first_start + 1, first_start + 1 + len(loc_ids)),
                prefix_ids=prefix_ids,
                seed=seed,
                parts={"pair": i, "phil": phil, "cul": cul, "math": math},
            )
    raise BenchDataError(f"no sample under {max_tokens} tokens after {retries} retries from seed {seed}")


def corpus_lines(pools: BenchPools, n: int, seed: int) -> list[str]:
    """Training text drawn from the same pools, one rendered sample per line."""
    rng = Rng(seed, "corpus")
    out = []
    for _ in range(n):
        i = int(rng.integers(0, len(pools.pairs)))
        lead, prelude = pools.pairs[i]
        text, _, _ = compose(
            lead,
            _pick(rng, pools.locations),
            _pick(rng, pools.philosophical),
            _pick(rng, pools.culinary),
            _pick(rng, pools.math),
            prelude,
        )
        out.append(text)
    return out


@dataclass(frozen=True)
class Score:
    accuracy: int
    coverage: float


def score_prediction(expected, produced) -> Score:
    expected, produced = list(expected), list(produced)
    if not expected:
        raise ContractError("expected location is empty")
    if len(produced) < len(expected):
        raise ContractError(f"produced {len(produced)} tokens, need {len(expected)}")
    hits = sum(1 for e, p in zip(expected, produced) if e == p)
    coverage = hits / len(expected)
    return Score(int(hits == len(expected)), coverage)


BUNDLED_CORPUS = Path(__file__).parent / "data" / "corpus.txt"
BUNDLED_POOL_SEED = 0
BUNDLED_CORPUS_SEED = 1
BUNDLED_CORPUS_LINES = 8000


def bundled_corpus_text() -> str:
    return "\n".join(corpus_lines(build_pools(BUNDLED_POOL_SEED), BUNDLED_CORPUS_LINES, BUNDLED_CORPUS_SEED)) + "\n"


if __name__ == "__main__":
    BUNDLED_CORPUS.parent.mkdir(parents=True, exist_ok=True)
    BUNDLED_CORPUS.write_text(bundled_corpus_text(), encoding="utf-8")
    print(f"wrote {BUNDLED_CORPUS}")
