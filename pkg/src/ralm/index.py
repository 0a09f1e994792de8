"""Exact flat inner-product index and candidate-set assembly."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .corpus import Document
from .encoders import EncoderParams, encode_docs
from .tensor import NumericalError, ShapeError, Tensor


class RetrievalError(ValueError):
    pass


def similarity(qvec, dvec, h_dim: int | None = None) -> float:
    q = np.asarray(qvec, dtype=np.float64)
    d = np.asarray(dvec, dtype=np.float64)
    if q.shape != d.shape or q.ndim != 1:
        raise ShapeError(f"similarity: vector shapes differ, {q.shape} and {d.shape}")
    h = q.shape[0] if h_dim is None else h_dim
    return float(q @ d) / math.sqrt(h)


@dataclass(frozen=True)
class FlatIndex:
    matrix: np.ndarray
    version: int
    built_at_step: int

    def __post_init__(self):
        self.matrix.setflags(write=False)

    @property
    def size(self) -> int:
        return self.matrix.shape[0]

    @property
    def h_dim(self) -> int:
        return self.matrix.shape[1]

    def scores(self, qvec: np.ndarray) -> np.ndarray:
        return (self.matrix @ np.asarray(qvec, dtype=np.float64)) / math.sqrt(self.h_dim)

    def save(self, path: str | Path) -> None:
        with open(path, "wb") as fh:
            fh.write(struct.pack("<qqq", self.size, self.h_dim, self.version))
            fh.write(np.ascontiguousarray(self.matrix, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path: str | Path, built_at_step: int = -1) -> "FlatIndex":
        raw = Path(path).read_bytes()
        n, h, version = struct.unpack("<qqq", raw[:24])
        body = np.frombuffer(raw, dtype="<f8", offset=24)
        if body.size != n * h:
            raise RetrievalError(f"{path}: expected {n}x{h} floats, found {body.size}")
        return cls(body.reshape(n, h).astype(np.float64), version, built_at_step)


def rebuild_index(
    doc_params: EncoderParams,
    corpus: Sequence[Document],
    step: int,
    previous: FlatIndex | None = None,
    batch_size: int = 64,
) -> FlatIndex:
    """Encode every document with the current parameters into a new snapshot."""
    if not corpus:
        raise RetrievalError("cannot index an empty corpus")
    rows = []
    with T.no_grad():
        for start in range(0, len(corpus), batch_size):
            rows.append(encode_docs(doc_params, corpus[start : start + batch_size]).data)
    matrix = np.concatenate(rows, axis=0)
    bad = ~np.isfinite(matrix).all(axis=1)
    if bad.any():
        raise NumericalError(f"non-finite embedding for doc_id {corpus[int(np.argmax(bad))].doc_id}")
    version = 1 if previous is None else previous.version + 1
    return FlatIndex(matrix, version, step)


def top_k_search(
    index: FlatIndex, qvec: np.ndarray, k: int, exclude_doc_id: int | None = None
) -> list[tuple[int, float]]:
    """Exhaustive top-k by score (ties to the lower doc id), excluding one id."""
    n = index.size
    if not 1 <= k <= n - 1:
        raise RetrievalError(f"k must lie in [1, {n - 1}], got {k}")
    s = index.scores(qvec)
    take = k + 1
    # partition finds the cutoff score; keeping every row at or above it is safe under ties
    if take < n:
        kth = np.partition(-s, take - 1)[take - 1]
        cand = np.flatnonzero(-s <= kth)
    else:
        cand = np.arange(n)
    order = cand[np.lexsort((cand, -s[cand]))][:take]
    out = [(int(i), float(s[i])) for i in order if i != exclude_doc_id]
    return out[:k]


@dataclass
class CandidateSet:
    doc_ids: list[int]
    fresh_embeddings: Tensor
    scores: Tensor
    log_probs: Tensor
    has_null: bool = True

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs.data)


def candidate_distribution(qvecs: Tensor, cand_vecs: Tensor) -> tuple[Tensor, Tensor]:
    """Scores ``[B, C]`` and log p(d|q) over each row's candidates."""
    scores = T.similarity_scores(qvecs.reshape(qvecs.shape[0], 1, qvecs.shape[1]), cand_vecs)
    return scores, T.log_softmax(scores, axis=-1)


def with_null(doc_vecs: Tensor, null_embedding: Tensor) -> Tensor:
    """Append the null embedding as the last candidate of every row."""
    B, _, H = doc_vecs.shape
    null = null_embedding.reshape(1, 1, H) + np.zeros((B, 1, H))
    return T.concat([doc_vecs, null], axis=1)


def assemble_candidates(
    query_vec: Tensor,
    index: FlatIndex,
    corpus: Sequence[Document],
    doc_params: EncoderParams,
    k: int,
    exclude_doc_id: int | None,
    null_embedding: Tensor | None = None,
    rng: np.random.Generator | None = None,
    train: bool = False,
) -> CandidateSet:
    """Select ids on the (possibly stale) index, then re-encode them fresh."""
    hits = top_k_search(index, query_vec.data, k, exclude_doc_id)
    ids = [i for i, _ in hits]
    fresh = encode_docs(doc_params, [corpus[i] for i in ids], rng, train)
    cand = fresh.reshape(1, len(ids), fresh.shape[1])
    if null_embedding is not None:
        cand = with_null(cand, null_embedding)
    scores, logp = candidate_distribution(query_vec.reshape(1, -1), cand)
    return CandidateSet(ids, cand[0], scores[0], logp[0], null_embedding is not None)
