"""Planted-knowledge synthetic corpus.

Each fact pair is two articles that state the same facts about one invented
person, whose surname recurs across sentences as in an encyclopedia entry.
Every chunk of a fact article restates the facts in its own order among its
own filler prose, so an entity masked in one chunk is recoverable from the
other chunks of the pair. With ``person_per_chunk`` chunk i of either article
is instead about its own person i, so each fact occurs in exactly two chunks
and only the matching chunk of the partner article recovers it. Filler
articles talk about a small pool of shared places and years.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .masking import DEFAULT_MONTHS

_ONSETS = "b d f g h j k l m n p r s t v sk st br dr gr kr tr fl".split()
_VOWELS = "a e i o u y ae oe".split()
_CODAS = ["", "", "n", "r", "l", "s", "k", "m", "nd", "rt"]

COMMON_PLACES = "oslo bergen trondheim tromso stavanger bodo molde hamar alta narvik".split()
COMMON_ORGS = "storting nrk statoil telenor equinor".split()
MONTHS = [m for m in DEFAULT_MONTHS[:12]]

_FILLER_WORDS = (
    "the a large small old new river hill road town valley farm market house school "
    "church winter summer people many few some was were is are had has with near "
    "from over under after before during about known often later early"
).split()

_FACT_TEMPLATES = [
    ["{p1}", "{p2}", "was", "born", "in", "{place}", "in", "{y1}", "."],
    ["{p2}", "studied", "at", "{o1}", "{o2}", "."],
    ["in", "{y2}", "{p2}", "moved", "to", "{city}", "."],
    ["the", "wife", "of", "{p2}", ",", "{w1}", "{w2}", ",", "was", "born", "on", "{day}", "{month}", "{y3}", "."],
    ["later", "{p2}", "worked", "for", "{firm}", "in", "{town}", "."],
]

_FILLER_TEMPLATES = [
    ["the", "{cp}", "market", "was", "busy", "in", "{fy}", "."],
    ["many", "people", "from", "{cp}", "visited", "{cp2}", "."],
    ["in", "{fy}", "the", "{co}", "opened", "an", "office", "near", "{cp}", "."],
    ["the", "river", "near", "{cp}", "froze", "on", "{fd}", "{fm}", "."],
    ["a", "road", "from", "{cp}", "to", "{cp2}", "was", "built", "in", "{fy}", "."],
]


@dataclass
class SyntheticCorpus:
    articles: list[dict]
    gazetteer: list[str]
    planted: dict[str, list[str]]  # entity surface form -> article ids
    pairs: list[tuple[str, str]]


class _Names:
    def __init__(self, rng: np.random.Generator, reserved: set[str]):
        self.rng = rng
        self.used = set(reserved)

    def make(self) -> str:
        while True:
            n = int(self.rng.integers(2, 4))
            w = "".join(
                self.rng.choice(_ONSETS) + self.rng.choice(_VOWELS) + self.rng.choice(_CODAS)
                for _ in range(n)
            )
            if w not in self.used and len(w) >= 4:
                self.used.add(w)
                return w


def _fill(template: list[str], slots: dict[str, str]) -> list[str]:
    out = []
    for tok in template:
        if tok.startswith("{"):
            out.extend(slots[tok[1:-1]].split())
        else:
            out.append(tok)
    return out


def _filler_sentence(rng: np.random.Generator) -> list[str]:
    t = _FILLER_TEMPLATES[int(rng.integers(len(_FILLER_TEMPLATES)))]
    a, b = rng.choice(len(COMMON_PLACES), size=2, replace=False)
    slots = {
        "cp": COMMON_PLACES[a],
        "cp2": COMMON_PLACES[b],
        "co": str(rng.choice(COMMON_ORGS)),
        "fy": str(int(rng.integers(1900, 2000))),
        "fd": str(int(rng.integers(1, 29))),
        "fm": str(rng.choice(MONTHS)),
    }
    return _fill(t, slots)


def _pad_to(tokens: list[str], length: int, rng: np.random.Generator) -> list[str]:
    while len(tokens) < length:
        tokens = tokens + _filler_sentence(rng)
    return tokens[:length]


def _render(facts: list[list[str]], length: int, rng: np.random.Generator) -> list[str]:
    """The fact sentences in random order with filler sentences interleaved,
    padded to exactly ``length`` tokens."""
    blocks = [facts[j] for j in rng.permutation(len(facts))]
    size = sum(len(b) for b in blocks)
    if size > length:
        raise ValueError(f"chunk_len {length} too short for the fact block of {size} tokens")
    while True:
        extra = _filler_sentence(rng)
        if size + len(extra) > length - 4:
            break
        blocks.insert(int(rng.integers(len(blocks) + 1)), extra)
        size += len(extra)
    return _pad_to([w for b in blocks for w in b], length, rng)


def generate_synthetic_corpus(
    num_facts: int,
    seed: int,
    out_path: str | Path | None = None,
    num_fillers: int | None = None,
    chunk_len: int = 53,
    chunks_per_article: int = 2,
    person_per_chunk: bool = False,
) -> SyntheticCorpus:
    """Build (and optionally write) the corpus, gazetteer and month list.

    Articles are ``chunks_per_article * chunk_len`` tokens; every
    ``chunk_len`` segment of a fact article is its own rendering of the
    facts (of person i with ``person_per_chunk``). ``out_path`` is a
    directory receiving ``corpus.jsonl``, ``gazetteer.txt``, ``months.txt``
    and ``planted.json``.
    """
    if chunks_per_article < 1:
        raise ValueError(f"chunks_per_article must be >= 1, got {chunks_per_article}")
    if num_facts < 8:
        raise ValueError(f"num_facts must be >= 8, got {num_facts}")
    num_fillers = num_facts if num_fillers is None else num_fillers
    rng = np.random.default_rng(seed)
    reserved = set(COMMON_PLACES) | set(COMMON_ORGS) | set(DEFAULT_MONTHS) | set(_FILLER_WORDS)
    for t in _FACT_TEMPLATES + _FILLER_TEMPLATES:
        reserved.update(w for w in t if not w.startswith("{"))
    names = _Names(rng, reserved)
    used_years: set[str] = set()

    def year() -> str:
        while True:
            y = str(int(rng.integers(1000, 1900)))
            if y not in used_years:
                used_years.add(y)
                return y

    articles: list[dict] = []
    planted: dict[str, list[str]] = {}
    pairs = []
    gaz: set[str] = set(COMMON_PLACES) | set(COMMON_ORGS)
    def person() -> tuple[list[list[str]], list[str], list[str]]:
        slots = {
            "p1": names.make(), "p2": names.make(), "place": names.make(),
            "o1": names.make(), "o2": names.make(), "city": names.make(),
            "w1": names.make(), "w2": names.make(), "firm": names.make(),
            "town": names.make(),
            "y1": year(), "y2": year(), "y3": year(),
            "day": str(int(rng.integers(1, 29))), "month": str(rng.choice(MONTHS)),
        }
        entities = [
            f"{slots['p1']} {slots['p2']}", slots["p2"], slots["place"], f"{slots['o1']} {slots['o2']}",
            slots["city"], f"{slots['w1']} {slots['w2']}", slots["firm"], slots["town"],
        ]
        return [_fill(t, slots) for t in _FACT_TEMPLATES], entities, [slots["y1"], slots["y2"], slots["y3"]]

    def plant(ids, entities, years):
        for e in entities + years:
            planted[e] = list(ids)
        gaz.update(entities)

    for i in range(num_facts):
        ids = (f"fact{i:04d}a", f"fact{i:04d}b")
        texts: dict[str, list[str]] = {aid: [] for aid in ids}
        if person_per_chunk:
            for _ in range(chunks_per_article):
                facts, entities, years = person()
                for aid in ids:
                    texts[aid].extend(_render(facts, chunk_len, rng))
                plant(ids, entities, years)
        else:
            facts, entities, years = person()
            for aid in ids:
                for _ in range(chunks_per_article):
                    texts[aid].extend(_render(facts, chunk_len, rng))
            plant(ids, entities, years)
        for aid in ids:
            articles.append({"article_id": aid, "text": " ".join(texts[aid])})
        pairs.append(ids)
    for i in range(num_fillers):
        toks = _pad_to([], chunk_len * chunks_per_article, rng)
        articles.append({"article_id": f"filler{i:04d}", "text": " ".join(toks)})

    corpus = SyntheticCorpus(articles, sorted(gaz), planted, pairs)
    if out_path is not None:
        write_synthetic_corpus(corpus, out_path)
    return corpus


def write_synthetic_corpus(corpus: SyntheticCorpus, out_dir: str | Path) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "corpus": out / "corpus.jsonl",
        "gazetteer": out / "gazetteer.txt",
        "months": out / "months.txt",
        "planted": out / "planted.json",
    }
    with open(paths["corpus"], "w", encoding="utf-8") as fh:
        for a in corpus.articles:
            fh.write(json.dumps(a, ensure_ascii=False) + "\n")
    paths["gazetteer"].write_text("\n".join(corpus.gazetteer) + "\n", encoding="utf-8")
    paths["months"].write_text("\n".join(DEFAULT_MONTHS) + "\n", encoding="utf-8")
    paths["planted"].write_text(
        json.dumps({"entities": corpus.planted, "pairs": corpus.pairs}, indent=1), encoding="utf-8"
    )
    return paths
