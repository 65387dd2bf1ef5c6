"""Bundled desk-scale text corpus.

The toolkit ships with zero external assets: the corpus is generated
deterministically from a fixed word inventory, so every byte reproduces
from a seed. Two properties are deliberate. First, the vocabulary is
large and only mildly skewed, so a desk-scale model stays genuinely
capacity-limited instead of memorizing the distribution early. Second,
each paragraph introduces freshly invented character names that recur a
few sentences later; the name pool is effectively unbounded, so the only
way to predict a later occurrence is to copy it from earlier context,
which keeps the attention pathway load-bearing. Both matter downstream:
compression experiments need weight matrices whose spectra reflect real,
differentiated demand.

Splits come from disjoint seeds: train / calibration / eval.
"""

from functools import lru_cache

import numpy as np

TRAIN_SEED = 101
CALIB_SEED = 202
EVAL_SEED = 303

TRAIN_SIZE = 256 * 1024
CALIB_SIZE = 64 * 1024
EVAL_SIZE = 64 * 1024

_DET = ["the", "the", "a", "one", "this", "that", "every", "some", "each", "another"]
_ADJ = [
    "old", "small", "quiet", "bright", "heavy", "green", "cold", "warm", "long",
    "narrow", "patient", "hollow", "silver", "broken", "gentle", "distant", "pale",
    "rough", "steep", "amber", "crooked", "dusty", "empty", "faded", "golden",
    "grey", "hidden", "iron", "low", "misty", "mossy", "painted", "quick", "red",
    "round", "sleepy", "smooth", "sour", "sturdy", "tall", "thin", "tired",
    "wooden", "worn", "young", "blue", "deep", "dry", "early", "late",
]
_NOUN = [
    "river", "stone", "lantern", "garden", "mountain", "letter", "window", "harbor",
    "forest", "clock", "bridge", "meadow", "sailor", "miller", "teacher", "child",
    "bird", "horse", "road", "village", "boat", "tower", "field", "market",
    "candle", "wagon", "orchard", "mill", "gate", "well", "anchor", "attic",
    "barrel", "basket", "bell", "bench", "bottle", "cart", "cellar", "chapel",
    "chimney", "cloak", "coast", "compass", "corner", "courtyard", "creek", "crow",
    "dock", "door", "farm", "fence", "ferry", "flag", "flock", "fountain", "fox",
    "granary", "grove", "hammer", "hare", "hearth", "hill", "inn", "island",
    "kettle", "key", "kitchen", "ladder", "lamp", "lane", "ledger", "library",
    "lighthouse", "loom", "map", "mare", "morning", "needle", "oak", "oven",
    "path", "pier", "pond", "porch", "pulley", "quarry", "rain", "rope", "saddle",
    "shed", "ship", "shore", "smith", "spring", "stable", "stair", "storm",
    "stream", "table", "thread", "trail", "valley", "vine", "wall", "wharf",
]
_VERB = [
    "crosses", "watches", "carries", "follows", "remembers", "finds", "holds",
    "passes", "reaches", "leaves", "guards", "opens", "fills", "turns", "keeps",
    "greets", "answers", "repairs", "counts", "trades", "borrows", "builds",
    "catches", "cleans", "climbs", "closes", "gathers", "hides", "lifts", "lights",
    "measures", "mends", "moves", "names", "paints", "pulls", "rents", "rows",
    "sells", "sharpens", "shelters", "signals", "sketches", "steers", "stores",
    "studies", "sweeps", "tends", "visits", "weighs",
]
_VERB_PL = [
    "cross", "watch", "carry", "follow", "remember", "find", "hold", "pass",
    "reach", "leave", "guard", "open", "fill", "turn", "keep", "greet", "answer",
    "repair", "count", "trade", "borrow", "build", "catch", "clean", "climb",
    "close", "gather", "hide", "lift", "light", "measure", "mend", "move", "name",
    "paint", "pull", "rent", "row", "sell", "sharpen", "shelter", "signal",
    "sketch", "steer", "store", "study", "sweep", "tend", "visit", "weigh",
]
_ADV = [
    "slowly", "quietly", "again", "at last", "by morning", "before dark",
    "together", "without a word", "every spring", "after the rain", "at noon",
    "by the old wall", "in silence", "once more", "twice a day",
]
_PREP = ["near", "beyond", "under", "behind", "against", "along", "above",
         "toward", "across", "beside", "around", "below"]
_COUNT = ["two", "three", "four", "five", "six", "seven", "nine", "twelve"]

_ONSET = ["b", "br", "d", "dr", "f", "g", "gr", "h", "k", "l", "m", "n", "p",
          "r", "s", "t", "v", "w", "z", "th", "sh", "st", "mar", "cor", "bel",
          "tor", "ven", "gal"]
_VOWEL = ["a", "e", "i", "o", "u", "ai", "ea", "or", "an", "el", "is", "ur"]
_CODA = ["", "n", "r", "s", "m", "l", "k", "th", "d", "t"]


def _craft_words(seed: int, count: int, n_syllables: tuple[int, int]) -> list[str]:
    # A fixed pseudo-word inventory (stable across corpus splits) that
    # bulks the vocabulary out far beyond the hand-written lists: a
    # byte-level model has to spend genuine width on spelling them.
    rng = np.random.default_rng(seed)
    words: list[str] = []
    seen = set()
    while len(words) < count:
        parts = []
        for _ in range(int(rng.integers(*n_syllables))):
            parts.append(_ONSET[rng.integers(0, len(_ONSET))])
            parts.append(_VOWEL[rng.integers(0, len(_VOWEL))])
        w = "".join(parts) + _CODA[rng.integers(0, len(_CODA))]
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


_NOUN = _NOUN + _craft_words(seed=11, count=160, n_syllables=(2, 4))
_ADJ = _ADJ + _craft_words(seed=12, count=60, n_syllables=(2, 3))
_VERB = _VERB + [w + "s" for w in _craft_words(seed=13, count=50, n_syllables=(2, 3))]
_VERB_PL = _VERB_PL + _craft_words(seed=13, count=50, n_syllables=(2, 3))


def _pick(rng: np.random.Generator, words: list[str], skew: float = 0.6) -> str:
    # Mildly skewed frequencies; flatter than Zipf so the tail carries
    # real probability mass and the distribution stays hard to memorize.
    w = 1.0 / np.arange(1, len(words) + 1) ** skew
    return words[rng.choice(len(words), p=w / w.sum())]


def _make_name(rng: np.random.Generator) -> str:
    n_syll = int(rng.integers(2, 4))
    parts = []
    for _ in range(n_syll):
        parts.append(_ONSET[rng.integers(0, len(_ONSET))])
        parts.append(_VOWEL[rng.integers(0, len(_VOWEL))])
    name = "".join(parts) + _CODA[rng.integers(0, len(_CODA))]
    return name.capitalize()


def _noun_phrase(rng: np.random.Generator) -> str:
    det = _pick(rng, _DET, skew=0.9)
    noun = _pick(rng, _NOUN)
    if rng.random() < 0.18:
        det = _pick(rng, _COUNT, skew=0.3)
        noun = noun + "s"
    if rng.random() < 0.4:
        return f"{det} {_pick(rng, _ADJ)} {noun}"
    return f"{det} {noun}"


def _sentence(rng: np.random.Generator, names: list[str]) -> str:
    roll = rng.random()
    if roll < 0.22:
        subj = names[rng.integers(0, len(names))]
        text = f"{subj} {_pick(rng, _VERB)} {_noun_phrase(rng)}"
    elif roll < 0.34 and len(names) > 1:
        a, b = rng.permutation(len(names))[:2]
        text = f"{names[a]} and {names[b]} {_pick(rng, _VERB_PL)} {_noun_phrase(rng)}"
    elif roll < 0.46:
        obj = names[rng.integers(0, len(names))]
        text = f"{_noun_phrase(rng)} {_pick(rng, _VERB)} {obj}"
    elif roll < 0.52:
        who = names[rng.integers(0, len(names))]
        quote = f"{_noun_phrase(rng)} {_pick(rng, _VERB)} {_noun_phrase(rng)}"
        return f'{who} says, "{quote[0].upper() + quote[1:]}."'
    else:
        text = f"{_noun_phrase(rng)} {_pick(rng, _VERB)} {_noun_phrase(rng)}"
    if rng.random() < 0.35:
        text += f" {_pick(rng, _PREP, skew=0.8)} {_noun_phrase(rng)}"
    if rng.random() < 0.25:
        text += f" {_pick(rng, _ADV, skew=0.7)}"
    text = text[0].upper() + text[1:]
    return text + ("." if rng.random() < 0.9 else ";")


def _paragraph(rng: np.random.Generator) -> str:
    names = [_make_name(rng) for _ in range(int(rng.integers(1, 4)))]
    n_sentences = int(rng.integers(3, 7))
    return " ".join(_sentence(rng, names) for _ in range(n_sentences)) + "\n\n"


def generate_text(seed: int, size: int) -> bytes:
    """Deterministic ASCII prose of exactly `size` bytes."""
    rng = np.random.default_rng(seed)
    chunks: list[str] = []
    total = 0
    while total < size:
        para = _paragraph(rng)
        chunks.append(para)
        total += len(para)
    return "".join(chunks).encode("ascii")[:size]


@lru_cache(maxsize=None)
def builtin_split(name: str) -> bytes:
    """One of the bundled splits: 'train', 'calib', or 'eval'."""
    if name == "train":
        return generate_text(TRAIN_SEED, TRAIN_SIZE)
    if name == "calib":
        return generate_text(CALIB_SEED, CALIB_SIZE)
    if name == "eval":
        return generate_text(EVAL_SEED, EVAL_SIZE)
    raise ValueError(f"unknown builtin split {name!r} (expected train/calib/eval)")


def load_corpus(spec: str) -> bytes:
    """Resolve a corpus spec: 'builtin:<split>' or a filesystem path."""
    if spec.startswith("builtin:"):
        return builtin_split(spec.split(":", 1)[1])
    with open(spec, "rb") as fh:
        return fh.read()
