"""Transformer encoders: query and document retrievers plus the MLM reader.

All three share one body (token + position embeddings, post-LN blocks with
multi-head self attention and a GELU feed-forward). Retrieval encoders pool
the first position through a linear projection; the reader projects masked
positions onto the vocabulary.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .corpus import CLS_ID, PAD_ID, SEP_ID, Document
from .masking import MaskedQuery
from .tensor import Tensor

QUERY, DOC, READER = "query", "doc", "reader"
_MAGIC = b"RALMCKPT"
_NEG = -1e9


class EncoderError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    layers: int = 2
    heads: int = 4
    h_dim: int = 64
    ffn_dim: int = 256
    max_positions: int = 259
    dropout: float = 0.0
    init_std: float = 0.05
    tie_mlm_head: bool = False  # True shares the token embedding as the output projection

    def __post_init__(self):
        if self.h_dim % self.heads:
            raise EncoderError(f"h_dim {self.h_dim} is not divisible by heads {self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise EncoderError(f"dropout must lie in [0, 1), got {self.dropout}")

    @staticmethod
    def reader_length(chunk_len: int) -> int:
        return 2 * chunk_len + 3


class EncoderParams:
    """Named trainable tensors of one encoder."""

    def __init__(self, kind: str, config: EncoderConfig, tensors: dict[str, Tensor]):
        if kind not in (QUERY, DOC, READER):
            raise EncoderError(f"unknown encoder kind {kind!r}")
        self.kind = kind
        self.config = config
        self.tensors = tensors
        for name, t in tensors.items():
            t.name = f"{kind}.{name}"

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.values())

    def named(self):
        return self.tensors.items()

    @property
    def null_embedding(self) -> Tensor:
        return self.tensors["null_doc"]

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self)

    def copy(self, kind: str | None = None) -> "EncoderParams":
        kind = kind or self.kind
        return EncoderParams(
            kind, self.config, {n: Tensor(t.data.copy(), requires_grad=True) for n, t in self.named()}
        )

    def zero_grad(self) -> None:
        for t in self:
            t.grad = None


def _body_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    H, F = cfg.h_dim, cfg.ffn_dim
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (cfg.vocab_size, H),
        "pos_emb": (cfg.max_positions, H),
        "emb_ln.g": (H,),
        "emb_ln.b": (H,),
    }
    for i in range(cfg.layers):
        p = f"layer{i}."
        for w in ("q", "k", "v", "o"):
            shapes[p + f"attn.w_{w}"] = (H, H)
            if w != "k":  # a key bias shifts every score in a row equally, so it never gets gradient
                shapes[p + f"attn.b_{w}"] = (H,)
        shapes.update({
            p + "ln1.g": (H,), p + "ln1.b": (H,),
            p + "ffn.w1": (H, F), p + "ffn.b1": (F,),
            p + "ffn.w2": (F, H), p + "ffn.b2": (H,),
            p + "ln2.g": (H,), p + "ln2.b": (H,),
        })
    return shapes


def param_shapes(kind: str, cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    shapes = _body_shapes(cfg)
    if kind == READER:
        if not cfg.tie_mlm_head:
            shapes["mlm.w"] = (cfg.h_dim, cfg.vocab_size)
        shapes["mlm.b"] = (cfg.vocab_size,)
    else:
        shapes["pool.w"] = (cfg.h_dim, cfg.h_dim)
        shapes["pool.b"] = (cfg.h_dim,)
    if kind == DOC:
        shapes["null_doc"] = (cfg.h_dim,)
    return shapes


def init_params(kind: str, cfg: EncoderConfig, rng: np.random.Generator) -> EncoderParams:
    tensors = {}
    for name, shape in param_shapes(kind, cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name == "null_doc" or leaf.startswith("b"):
            arr = np.zeros(shape)
        elif name == "pool.w":
            arr = np.eye(cfg.h_dim)
        elif leaf == "g":
            arr = np.ones(shape)
        else:
            arr = rng.normal(0.0, cfg.init_std, size=shape)
        tensors[name] = Tensor(arr, requires_grad=True)
    return EncoderParams(kind, cfg, tensors)


def derive_retriever(reader: EncoderParams, kind: str, rng: np.random.Generator) -> EncoderParams:
    """Retrieval encoder whose body starts from the reader's weights."""
    fresh = init_params(kind, reader.config, rng)
    for name, t in fresh.named():
        if name in reader.tensors:
            t.data = reader[name].data.copy()
    return fresh


# ---------------------------------------------------------------------------
# forward pass


def _pad_batch(seqs: Sequence[Sequence[int]], max_positions: int) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    if lengths.size == 0:
        raise EncoderError("empty batch")
    longest = int(lengths.max())
    if longest > max_positions:
        raise EncoderError(f"input of length {longest} exceeds max_positions {max_positions}")
    ids = np.full((len(seqs), longest), PAD_ID, dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
    return ids, lengths


def _attention(x: Tensor, p: EncoderParams, prefix: str, bias: np.ndarray) -> Tensor:
    B, L, H = x.shape
    nh = p.config.heads
    hd = H // nh

    def heads(name):
        y = x @ p[prefix + f"attn.w_{name}"]
        if name != "k":
            y = y + p[prefix + f"attn.b_{name}"]
        return y.reshape(B, L, nh, hd).transpose(0, 2, 1, 3)

    q, k, v = heads("q"), heads("k"), heads("v")
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(hd)) + bias
    ctx = T.softmax(scores, axis=-1) @ v
    ctx = ctx.transpose(0, 2, 1, 3).reshape(B, L, H)
    return ctx @ p[prefix + "attn.w_o"] + p[prefix + "attn.b_o"]


def encode_hidden(
    params: EncoderParams,
    ids: np.ndarray,
    lengths: np.ndarray,
    rng: np.random.Generator | None = None,
    train: bool = False,
) -> Tensor:
    """Final-layer hidden states ``[B, L, H]``; positions >= length are
    excluded as attention keys."""
    cfg = params.config
    B, L = ids.shape
    drop = cfg.dropout if train else 0.0
    bias = np.where(np.arange(L)[None, :] < lengths[:, None], 0.0, _NEG)[:, None, None, :]
    h = T.embedding(params["tok_emb"], ids) + params["pos_emb"][:L]
    h = T.layer_norm(h, params["emb_ln.g"], params["emb_ln.b"])
    h = T.dropout(h, drop, rng, train)
    for i in range(cfg.layers):
        p = f"layer{i}."
        a = T.dropout(_attention(h, params, p, bias), drop, rng, train)
        h = T.layer_norm(h + a, params[p + "ln1.g"], params[p + "ln1.b"])
        f = T.gelu(h @ params[p + "ffn.w1"] + params[p + "ffn.b1"])
        f = T.dropout(f @ params[p + "ffn.w2"] + params[p + "ffn.b2"], drop, rng, train)
        h = T.layer_norm(h + f, params[p + "ln2.g"], params[p + "ln2.b"])
    return h


def query_input(mq: MaskedQuery) -> list[int]:
    return [CLS_ID, *mq.token_ids, SEP_ID]


def doc_input(doc: Document) -> list[int]:
    return [CLS_ID, *doc.tokens, SEP_ID]


def reader_input(mq: MaskedQuery, doc: Document | None) -> list[int]:
    tail = [] if doc is None else list(doc.tokens)
    return [CLS_ID, *mq.token_ids, SEP_ID, *tail, SEP_ID]


def pooled_vectors(
    params: EncoderParams,
    seqs: Sequence[Sequence[int]],
    rng: np.random.Generator | None = None,
    train: bool = False,
) -> Tensor:
    if params.kind == READER:
        raise EncoderError("the reader has no pooling projection")
    ids, lengths = _pad_batch(seqs, params.config.max_positions)
    h = encode_hidden(params, ids, lengths, rng, train)
    return h[:, 0, :] @ params["pool.w"] + params["pool.b"]


def encode_queries(params, queries: Sequence[MaskedQuery], rng=None, train=False) -> Tensor:
    return pooled_vectors(params, [query_input(q) for q in queries], rng, train)


def encode_docs(params, docs: Sequence[Document], rng=None, train=False) -> Tensor:
    return pooled_vectors(params, [doc_input(d) for d in docs], rng, train)


def encode_query(params: EncoderParams, mq: MaskedQuery) -> Tensor:
    return encode_queries(params, [mq])[0]


def encode_doc(params: EncoderParams, doc: Document) -> Tensor:
    return encode_docs(params, [doc])[0]


def reader_batch_log_probs(
    params: EncoderParams,
    queries: Sequence[MaskedQuery],
    docs: Sequence[Document | None],
    rng: np.random.Generator | None = None,
    train: bool = False,
) -> tuple[Tensor, np.ndarray]:
    """Log-distributions over the vocabulary at every mask position of every
    ``[q; d]`` pair, stacked to ``[M, V]``, plus the pair index of each row."""
    if params.kind != READER:
        raise EncoderError(f"expected reader params, got {params.kind!r}")
    if len(queries) != len(docs):
        raise EncoderError("queries and documents must pair up")
    rows, cols = [], []
    for i, q in enumerate(queries):
        if not q.mask_positions:
            raise EncoderError("query has no mask positions")
        rows.extend([i] * len(q.mask_positions))
        cols.extend(p + 1 for p in q.mask_positions)  # shift past [CLS]
    seqs = [reader_input(q, d) for q, d in zip(queries, docs)]
    ids, lengths = _pad_batch(seqs, params.config.max_positions)
    h = encode_hidden(params, ids, lengths, rng, train)
    rows_a = np.asarray(rows, dtype=np.int64)
    picked = h[rows_a, np.asarray(cols, dtype=np.int64)]
    w = params["tok_emb"].transpose(1, 0) if params.config.tie_mlm_head else params["mlm.w"]
    logits = picked @ w + params["mlm.b"]
    return T.log_softmax(logits, axis=-1), rows_a


def reader_log_probs(params: EncoderParams, mq: MaskedQuery, doc: Document | None) -> Tensor:
    """``[|M_q|, V]`` log-probabilities for one query with one document
    (``None`` renders the null document)."""
    out, _ = reader_batch_log_probs(params, [mq], [doc])
    return out


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | Path, groups: dict[str, EncoderParams], extra: dict | None = None) -> None:
    """Write a manifest (names, shapes, configs) followed by the float64 payload."""
    entries, blobs = [], []
    configs = {}
    for gname, params in groups.items():
        configs[gname] = {"kind": params.kind, "config": asdict(params.config)}
        for name, t in params.named():
            entries.append({"name": f"{gname}/{name}", "shape": list(t.shape)})
            blobs.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    manifest = json.dumps(
        {"groups": configs, "tensors": entries, "extra": extra or {}}, sort_keys=True
    ).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for b in blobs:
            fh.write(b)


def read_manifest(path: str | Path) -> dict:
    with open(path, "rb") as fh:
        return _read_header(fh, path)


def _read_header(fh, path) -> dict:
    if fh.read(len(_MAGIC)) != _MAGIC:
        raise EncoderError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<Q", fh.read(8))
    return json.loads(fh.read(n).decode())


def load_checkpoint(path: str | Path) -> tuple[dict[str, EncoderParams], dict]:
    with open(path, "rb") as fh:
        manifest = _read_header(fh, path)
        payload = fh.read()
    groups: dict[str, dict[str, Tensor]] = {g: {} for g in manifest["groups"]}
    offset = 0
    for e in manifest["tensors"]:
        gname, name = e["name"].split("/", 1)
        count = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=offset).astype(np.float64)
        offset += 8 * count
        groups[gname][name] = Tensor(arr.reshape(e["shape"]), requires_grad=True)
    if offset != len(payload):
        raise EncoderError(f"{path}: payload size does not match manifest")
    out = {}
    for gname, meta in manifest["groups"].items():
        cfg = EncoderConfig(**meta["config"])
        out[gname] = EncoderParams(meta["kind"], cfg, groups[gname])
    return out, manifest.get("extra", {})
