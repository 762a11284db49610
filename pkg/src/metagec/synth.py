"""Synthetic multi-domain learner corpora.

Sentences come from a small subject-verb-object template grammar with
articles, prepositional phrases and three tenses. Each domain corrupts clean
sentences with its own per-rule probabilities; the clean sentence is the
target and the corrupted one the source.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import DomainDataset, SentencePair, domain_rng

RULES = ("article_drop", "agreement_flip", "preposition_swap", "adjacent_swap", "function_insert")

SUBJECTS = [
    (("he",), "sg"), (("she",), "sg"), (("tom",), "sg"), (("mary",), "sg"),
    (("the", "teacher"), "sg"), (("my", "friend"), "sg"), (("the", "boy"), "sg"), (("a", "girl"), "sg"),
    (("they",), "pl"), (("we",), "pl"), (("the", "students"), "pl"), (("my", "parents"), "pl"),
    (("the", "children"), "pl"),
]
# base, third person singular, progressive
VERBS = [
    ("watch", "watches", "watching"), ("read", "reads", "reading"), ("buy", "buys", "buying"),
    ("open", "opens", "opening"), ("clean", "cleans", "cleaning"), ("draw", "draws", "drawing"),
    ("find", "finds", "finding"), ("bring", "brings", "bringing"), ("carry", "carries", "carrying"),
    ("paint", "paints", "painting"), ("sell", "sells", "selling"), ("wash", "washes", "washing"),
]
ADJECTIVES = ["red", "old", "new", "big", "small", "nice", "empty"]
NOUNS = ["book", "letter", "car", "picture", "window", "apple", "box", "cake", "bag", "door", "umbrella", "house", "card"]
PLACES = [
    ("in", ("the", "park")), ("in", ("the", "kitchen")), ("at", ("school",)), ("at", ("home",)),
    ("on", ("the", "table")), ("on", ("the", "bus")), ("in", ("the", "morning")), ("at", ("night",)),
    ("on", ("monday",)),
]
PREPOSITIONS = ("in", "on", "at")
ARTICLES = ("the", "a", "an")
INSERTABLE = ("the", "to", "of", "a")
TENSES = ("present", "past", "future")

_VERB_FORMS = {form: (i, slot) for i, forms in enumerate(VERBS) for slot, form in enumerate(forms)}


@dataclass(frozen=True)
class DomainProfile:
    """Per-rule corruption probabilities, in the order of :data:`RULES`."""

    domain: str
    probs: tuple[float, float, float, float, float]

    def __post_init__(self):
        if len(self.probs) != len(RULES):
            raise ValueError(f"{self.domain}: need {len(RULES)} rule probabilities")
        if any(not 0.0 <= p <= 1.0 for p in self.probs):
            raise ValueError(f"{self.domain}: probabilities must lie in [0, 1]")
        if not any(p > 0 for p in self.probs):
            raise ValueError(f"{self.domain}: at least one rule probability must be positive")

    def prob(self, rule: str) -> float:
        return self.probs[RULES.index(rule)]


# Analogues of the nine source L1s, in the order sources are added for the
# ablation (first five, then th, en-sg, en, vi). The first five mostly make
# article/agreement/preposition errors; the last four add word-order and
# spurious-word errors that the target domains also show.
#                          article agree  prep   swap   insert
SOURCE_PROFILES = [
    DomainProfile("ko",    (0.40, 0.20, 0.30, 0.00, 0.02)),
    DomainProfile("zh-tw", (0.30, 0.30, 0.30, 0.02, 0.00)),
    DomainProfile("ja",    (0.45, 0.15, 0.25, 0.00, 0.02)),
    DomainProfile("ma",    (0.20, 0.40, 0.30, 0.02, 0.00)),
    DomainProfile("bu",    (0.30, 0.30, 0.20, 0.02, 0.02)),
    DomainProfile("th",    (0.20, 0.20, 0.20, 0.35, 0.30)),
    DomainProfile("en-sg", (0.10, 0.20, 0.15, 0.40, 0.35)),
    DomainProfile("en",    (0.10, 0.10, 0.20, 0.35, 0.40)),
    DomainProfile("vi",    (0.25, 0.20, 0.15, 0.35, 0.35)),
]
VALID_PROFILE = DomainProfile("in", (0.30, 0.25, 0.25, 0.25, 0.25))
TEST_PROFILES = [
    DomainProfile("de", (0.20, 0.30, 0.20, 0.30, 0.25)),
    DomainProfile("ru", (0.35, 0.25, 0.20, 0.25, 0.25)),
    DomainProfile("fr", (0.25, 0.20, 0.30, 0.25, 0.30)),
    DomainProfile("mo", (0.30, 0.30, 0.15, 0.30, 0.25)),
]
# The pretraining corpus mixes these; it never shows word-order or spurious-word errors.
GENERAL_PROFILES = [
    DomainProfile("general", (0.35, 0.35, 0.10, 0.00, 0.00)),
    DomainProfile("general", (0.25, 0.40, 0.05, 0.00, 0.00)),
    DomainProfile("general", (0.40, 0.25, 0.08, 0.00, 0.00)),
]


def _article(next_word: str, definite: bool) -> str:
    if definite:
        return "the"
    return "an" if next_word[0] in "aeiou" else "a"


def generate_sentence(rng: np.random.Generator) -> list[str]:
    subject, number = SUBJECTS[rng.integers(len(SUBJECTS))]
    base, third, ing = VERBS[rng.integers(len(VERBS))]
    tense = TENSES[rng.integers(len(TENSES))]
    if tense == "present":
        verb = [third if number == "sg" else base]
    elif tense == "past":
        verb = ["was" if number == "sg" else "were", ing]
    else:
        verb = ["will", base]
    noun = NOUNS[rng.integers(len(NOUNS))]
    obj = [noun]
    if rng.random() < 0.4:
        obj = [ADJECTIVES[rng.integers(len(ADJECTIVES))], noun]
    # The object is definite exactly when a place phrase follows, so a dropped
    # article can be restored from context.
    place = PLACES[rng.integers(len(PLACES))] if rng.random() < 0.6 else None
    words = list(subject) + verb + [_article(obj[0], place is not None)] + obj
    if place is not None:
        words += [place[0], *place[1]]
    return words + ["."]


def _agreement_index(words: list[str]) -> int | None:
    for i, w in enumerate(words):
        if w in ("was", "were"):
            return i
        if i > 0 and words[i - 1] == "will" and w in _VERB_FORMS:
            return i
        if w in _VERB_FORMS and _VERB_FORMS[w][1] in (0, 1) and (i == 0 or words[i - 1] != "will"):
            return i
    return None


def _toggle(word: str) -> str:
    if word == "was":
        return "were"
    if word == "were":
        return "was"
    verb, slot = _VERB_FORMS[word]
    return VERBS[verb][1 - slot]


def corrupt(words: list[str], profile: DomainProfile, rng: np.random.Generator) -> list[str]:
    """Apply each rule once with its probability. Draws are made for every rule in a fixed order."""
    draws = rng.random(len(RULES))
    picks = rng.random(4)
    out = list(words)

    if draws[RULES.index("agreement_flip")] < profile.prob("agreement_flip"):
        i = _agreement_index(out)
        if i is not None:
            out[i] = _toggle(out[i])
    if draws[RULES.index("preposition_swap")] < profile.prob("preposition_swap"):
        spots = [i for i, w in enumerate(out) if w in PREPOSITIONS]
        if spots:
            i = spots[-1]
            others = [p for p in PREPOSITIONS if p != out[i]]
            out[i] = others[int(picks[0] * len(others))]
    if draws[RULES.index("article_drop")] < profile.prob("article_drop"):
        spots = [i for i, w in enumerate(out) if w in ARTICLES]
        if spots:
            del out[spots[int(picks[1] * len(spots))]]
    if draws[RULES.index("function_insert")] < profile.prob("function_insert"):
        at = int(picks[2] * len(out))  # before the final "."
        out.insert(at, INSERTABLE[int(picks[3] * len(INSERTABLE))])
    if draws[RULES.index("adjacent_swap")] < profile.prob("adjacent_swap") and len(out) >= 3:
        i = int(rng.integers(len(out) - 2))
        out[i], out[i + 1] = out[i + 1], out[i]
    return out


def synth_domain(profile: DomainProfile, n: int, rng_seed: int) -> DomainDataset:
    if n <= 0:
        raise ValueError("synth_domain needs n > 0")
    rng = domain_rng(rng_seed, profile.domain)
    pairs = []
    for k in range(n):
        target = generate_sentence(rng)
        source = corrupt(target, profile, rng)
        pairs.append(SentencePair(tuple(source), tuple(target), profile.domain, f"{profile.domain}:{k}"))
    return DomainDataset(profile.domain, pairs)


def synth_mixture(profiles: list[DomainProfile], n: int, rng_seed: int, domain: str = "general") -> DomainDataset:
    """Corpus where each sentence is corrupted by a profile drawn uniformly from ``profiles``."""
    rng = domain_rng(rng_seed, domain)
    pairs = []
    for k in range(n):
        target = generate_sentence(rng)
        profile = profiles[rng.integers(len(profiles))]
        source = corrupt(target, profile, rng)
        pairs.append(SentencePair(tuple(source), tuple(target), domain, f"{domain}:{k}"))
    return DomainDataset(domain, pairs)


def is_grammatical(words) -> bool:
    """Recognise sentences of the template grammar."""
    words = list(words)
    if not words or words[-1] != ".":
        return False
    body = words[:-1]
    for subject, number in SUBJECTS:
        if tuple(body[: len(subject)]) == subject:
            if _rest_ok(body[len(subject):], number):
                return True
    return False


def _rest_ok(rest: list[str], number: str) -> bool:
    for verb_len in (1, 2):
        verb, tail = rest[:verb_len], rest[verb_len:]
        if _verb_ok(verb, number) and _object_and_place_ok(tail):
            return True
    return False


def _verb_ok(verb: list[str], number: str) -> bool:
    if len(verb) == 1:
        info = _VERB_FORMS.get(verb[0])
        return info is not None and info[1] == (1 if number == "sg" else 0)
    aux, main = verb
    info = _VERB_FORMS.get(main)
    if info is None:
        return False
    if aux == "will":
        return info[1] == 0
    return aux == ("was" if number == "sg" else "were") and info[1] == 2


def _object_and_place_ok(tail: list[str]) -> bool:
    for obj_len in (2, 3):
        obj, place = tail[:obj_len], tail[obj_len:]
        if len(obj) != obj_len or obj[-1] not in NOUNS:
            continue
        if obj_len == 3 and obj[1] not in ADJECTIVES:
            continue
        if obj[0] != _article(obj[1], bool(place)):
            continue
        if not place or any(place == [p, *t] for p, t in PLACES):
            return True
    return False
