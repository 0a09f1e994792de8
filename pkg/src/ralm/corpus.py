"""Article ingestion, word-level vocabulary, tokenisation and chunking."""

from __future__ import annotations

import json
import logging
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

log = logging.getLogger(__name__)

PAD, MASK, CLS, SEP, UNK = "[PAD]", "[MASK]", "[CLS]", "[SEP]", "[UNK]"
RESERVED = (PAD, MASK, CLS, SEP, UNK)
PAD_ID, MASK_ID, CLS_ID, SEP_ID, UNK_ID = range(5)

# reserved markers, letter runs, digit runs, or any single symbol
_TOKEN_RE = re.compile(r"\[(?:PAD|MASK|CLS|SEP|UNK)\]|[^\W\d_]+|\d+|[^\w\s]|_")
_NO_SPACE_BEFORE = set(".,;:!?)]}%'\"")


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class Article:
    article_id: str
    text: str


@dataclass(frozen=True)
class Document:
    doc_id: int
    source_article_id: str
    token_ids: tuple[int, ...]
    real_length: int

    @property
    def tokens(self) -> tuple[int, ...]:
        """The non-padding prefix."""
        return self.token_ids[: self.real_length]


class Vocab:
    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[:5]) != RESERVED:
            raise CorpusError("vocabulary must start with the five reserved tokens")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise CorpusError("vocabulary contains duplicate tokens")

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def id(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    def token(self, i: int) -> str:
        return self.tokens[i]

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"{len(self.tokens)}\n")
            for t in self.tokens:
                fh.write(t + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        try:
            n = int(lines[0])
        except (ValueError, IndexError):
            raise CorpusError(f"{path}: first line must be the token count") from None
        tokens = lines[1 : n + 1]
        if len(tokens) != n:
            raise CorpusError(f"{path}: header says {n} tokens, found {len(tokens)}")
        return cls(tokens)


def load_corpus(path: str | Path) -> list[Article]:
    """Read newline-delimited JSON records with ``article_id`` and ``text``."""
    articles: list[Article] = []
    seen: set[str] = set()
    skipped = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                aid, text = rec["article_id"], rec["text"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise CorpusError(f"{path}:{lineno}: malformed record ({exc})") from None
            if not isinstance(aid, str) or not isinstance(text, str):
                raise CorpusError(f"{path}:{lineno}: article_id and text must be strings")
            if aid in seen:
                raise CorpusError(f"{path}:{lineno}: duplicate article_id {aid!r}")
            seen.add(aid)
            if not text.strip():
                skipped += 1
                continue
            articles.append(Article(aid, text))
    if skipped:
        log.info("skipped %d empty article(s) in %s", skipped, path)
    return articles


def split_words(text: str) -> list[str]:
    return [w if w in RESERVED else w.lower() for w in _TOKEN_RE.findall(text)]


def build_vocab(articles: Iterable[Article], max_size: int) -> Vocab:
    if max_size <= len(RESERVED):
        raise CorpusError(f"max_size must exceed {len(RESERVED)}, got {max_size}")
    counts: Counter[str] = Counter()
    for a in articles:
        counts.update(split_words(a.text))
    if not counts:
        raise CorpusError("cannot build a vocabulary from an empty corpus")
    for r in RESERVED:
        counts.pop(r, None)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    words = [w for w, _ in ranked[: max_size - len(RESERVED)]]
    return Vocab(list(RESERVED) + words)


def tokenize(text: str, vocab: Vocab) -> list[int]:
    return [vocab.id(w) for w in split_words(text)]


def detokenize(ids: Iterable[int], vocab: Vocab) -> str:
    out: list[str] = []
    for i in ids:
        tok = vocab.token(i)
        if out and tok not in _NO_SPACE_BEFORE:
            out.append(" ")
        out.append(tok)
    return "".join(out)


def chunk_article(
    article: Article, vocab: Vocab, chunk_len: int = 128, first_doc_id: int = 0
) -> list[Document]:
    """Split into consecutive ``chunk_len`` windows, padding only the last."""
    if chunk_len < 8:
        raise CorpusError(f"chunk_len must be >= 8, got {chunk_len}")
    ids = tokenize(article.text, vocab)
    docs = []
    for n, start in enumerate(range(0, len(ids), chunk_len)):
        piece = ids[start : start + chunk_len]
        real = len(piece)
        piece = piece + [PAD_ID] * (chunk_len - real)
        docs.append(Document(first_doc_id + n, article.article_id, tuple(piece), real))
    return docs


def chunk_corpus(articles: Sequence[Article], vocab: Vocab, chunk_len: int = 128) -> list[Document]:
    """Chunk every article; doc ids are a dense enumeration in corpus order."""
    docs: list[Document] = []
    for a in articles:
        docs.extend(chunk_article(a, vocab, chunk_len, first_doc_id=len(docs)))
    return docs
