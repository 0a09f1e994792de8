"""Salient span detection (gazetteer entities and dates) and mask planning."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import MASK_ID, Vocab, split_words

ENTITY, DATE = "entity", "date"

# 15% salient and 3.75% (= 3/80) random, kept as exact fractions
SALIENT_NUM, SALIENT_DEN = 15, 100
RANDOM_NUM, RANDOM_DEN = 3, 80
RANDOM_SPAN_MEAN = 3.0
RANDOM_SPAN_CAP = 10

DEFAULT_MONTHS = (
    "januar februar mars april mai juni juli august september oktober november desember "
    "january february march may june july october december"
).split()


class SampleRejected(Exception):
    """The sample has no salient span; the caller should draw another."""


@dataclass(frozen=True, order=True)
class Span:
    start: int
    end: int
    kind: str = ENTITY

    def __post_init__(self):
        if not (0 <= self.start < self.end):
            raise ValueError(f"invalid span [{self.start}, {self.end})")

    def __len__(self) -> int:
        return self.end - self.start

    def positions(self) -> range:
        return range(self.start, self.end)


@dataclass
class MaskingPlan:
    salient_spans_chosen: list[Span]
    random_spans_chosen: list[Span]
    seed: int | None = None

    @property
    def spans(self) -> list[Span]:
        return sorted(self.salient_spans_chosen + self.random_spans_chosen)

    def salient_tokens(self) -> int:
        return sum(len(s) for s in self.salient_spans_chosen)

    def random_tokens(self) -> int:
        return sum(len(s) for s in self.random_spans_chosen)


@dataclass
class MaskedQuery:
    token_ids: tuple[int, ...]
    mask_positions: tuple[int, ...]
    target_ids: tuple[int, ...]
    source_doc_id: int
    spans: tuple[Span, ...] = field(default=())

    def __len__(self) -> int:
        return len(self.token_ids)


@dataclass
class Gazetteer:
    """Entity surface forms (as word tuples) plus month names for dates."""

    entities: set[tuple[str, ...]]
    months: set[str] = field(default_factory=lambda: set(DEFAULT_MONTHS))

    def __post_init__(self):
        self.max_len = max((len(e) for e in self.entities), default=0)

    @classmethod
    def from_lines(cls, lines: Iterable[str], months: Iterable[str] | None = None) -> "Gazetteer":
        ents = {tuple(split_words(ln)) for ln in lines if ln.strip()}
        ents.discard(())
        m = set(DEFAULT_MONTHS) if months is None else {w.strip().lower() for w in months if w.strip()}
        return cls(ents, m)

    @classmethod
    def load(cls, path: str | Path, months_path: str | Path | None = None) -> "Gazetteer":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        months = None
        if months_path is not None:
            months = Path(months_path).read_text(encoding="utf-8").splitlines()
        return cls.from_lines(lines, months)


def _is_year(w: str) -> bool:
    return len(w) == 4 and w.isdigit() and 1000 <= int(w) <= 2099


def _is_day(w: str) -> bool:
    return 1 <= len(w) <= 2 and w.isdigit() and 1 <= int(w) <= 31


def _date_candidates(words: Sequence[str], months: set[str]) -> list[Span]:
    out = []
    n = len(words)
    for i, w in enumerate(words):
        if _is_year(w):
            out.append(Span(i, i + 1, DATE))
        if _is_day(w):
            j = i + 1
            if j < n and words[j] == ".":
                j += 1
            if j < n and words[j] in months:
                end = j + 1
                if end < n and _is_year(words[end]):
                    end += 1
                out.append(Span(i, end, DATE))
    return out


def _entity_candidates(words: Sequence[str], gaz: Gazetteer) -> list[Span]:
    out = []
    n = len(words)
    for i in range(n):
        for ln in range(min(gaz.max_len, n - i), 0, -1):
            if tuple(words[i : i + ln]) in gaz.entities:
                out.append(Span(i, i + ln, ENTITY))
                break
    return out


def detect_salient_spans(token_ids: Sequence[int], vocab: Vocab, gazetteer: Gazetteer) -> list[Span]:
    """Entity and date spans, overlaps resolved longest-first then leftmost."""
    words = [vocab.token(i) for i in token_ids]
    cands = _entity_candidates(words, gazetteer) + _date_candidates(words, gazetteer.months)
    cands.sort(key=lambda s: (-len(s), s.start))
    taken = np.zeros(len(words), dtype=bool)
    kept = []
    for s in cands:
        if not taken[s.start : s.end].any():
            taken[s.start : s.end] = True
            kept.append(s)
    return sorted(kept)


def salient_budget(real_length: int) -> int:
    return -(-SALIENT_NUM * real_length // SALIENT_DEN)


def random_budget(real_length: int) -> int:
    return -(-RANDOM_NUM * real_length // RANDOM_DEN)


def plan_masks(real_length: int, salient_spans: Sequence[Span], seed: int) -> MaskingPlan:
    """Pick salient spans up to the 15% budget (always at least one), then
    random spans up to the 3.75% budget over the remaining positions."""
    if not salient_spans:
        raise SampleRejected("no salient span in sample")
    for s in salient_spans:
        if s.end > real_length:
            raise ValueError(f"span {s} exceeds sequence length {real_length}")
    rng = np.random.default_rng(seed)

    budget = salient_budget(real_length)
    order = rng.permutation(len(salient_spans))
    used = np.zeros(real_length, dtype=bool)
    chosen: list[Span] = []
    total = 0
    for n, i in enumerate(order):
        s = salient_spans[i]
        if used[s.start : s.end].any():
            continue
        if n == 0 or total + len(s) <= budget:
            chosen.append(s)
            used[s.start : s.end] = True
            total += len(s)

    blocked = used.copy()
    for s in salient_spans:
        blocked[s.start : s.end] = True
    remaining = random_budget(real_length)
    randoms: list[Span] = []
    while remaining > 0:
        free = np.flatnonzero(~blocked)
        if free.size == 0:
            break
        start = int(free[rng.integers(free.size)])
        length = min(int(rng.geometric(1.0 / RANDOM_SPAN_MEAN)), RANDOM_SPAN_CAP, remaining)
        end = start
        while end < real_length and end - start < length and not blocked[end]:
            end += 1
        blocked[start:end] = True
        randoms.append(Span(start, end, "random"))
        remaining -= end - start
    return MaskingPlan(sorted(chosen), sorted(randoms), seed)


def apply_masks(token_ids: Sequence[int], plan: MaskingPlan, source_doc_id: int = -1) -> MaskedQuery:
    n = len(token_ids)
    spans = plan.spans
    if not spans:
        raise ValueError("masking plan has no spans")
    for s in spans:
        if s.end > n:
            raise IndexError(f"span [{s.start}, {s.end}) out of bounds for length {n}")
    positions = sorted(p for s in spans for p in s.positions())
    if len(set(positions)) != len(positions):
        raise ValueError("masking plan has overlapping spans")
    ids = list(token_ids)
    targets = tuple(ids[p] for p in positions)
    for p in positions:
        ids[p] = MASK_ID
    return MaskedQuery(tuple(ids), tuple(positions), targets, source_doc_id, tuple(spans))
