"""Joint retriever/reader objective, AdamW, schedule, ICT warmup, reader export."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .corpus import CLS_ID, SEP_ID, Document, Vocab, tokenize
from .encoders import (
    DOC,
    QUERY,
    READER,
    EncoderConfig,
    EncoderParams,
    derive_retriever,
    encode_docs,
    encode_queries,
    init_params,
    load_checkpoint,
    pooled_vectors,
    reader_batch_log_probs,
    save_checkpoint,
)
from .index import FlatIndex, candidate_distribution, rebuild_index, top_k_search, with_null
from .masking import Gazetteer, MaskedQuery, SampleRejected, apply_masks, detect_salient_spans, plan_masks
from .tensor import NumericalError, Tensor


class TrainingError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    top_k: int = 7
    reindex_interval: int = 100
    batch_size: int = 1024
    peak_lr: float = 2e-5
    final_lr: float = 2e-6
    warmup_steps: int = 800
    total_steps: int = 50_000
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 42
    retrieval: bool = True
    null_document: bool = True
    retriever_lr_scale: float = 1.0  # query/doc encoders and null embedding step at lr * scale

    def __post_init__(self):
        if not 0.0 < self.final_lr <= self.peak_lr:
            raise TrainingError("learning rates must satisfy 0 < final_lr <= peak_lr")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise TrainingError("warmup_steps must be below total_steps")
        if self.top_k < 1:
            raise TrainingError("top_k must be at least 1")
        if self.retriever_lr_scale <= 0:
            raise TrainingError("retriever_lr_scale must be positive")


METRIC_COLUMNS = ("step", "loss", "nll", "perplexity", "lr", "null_prob_mass", "index_version")


@dataclass
class StepMetrics:
    step: int
    loss: float
    nll: float
    perplexity: float
    lr: float
    null_prob_mass: float
    index_version: int

    def row(self) -> list:
        return [getattr(self, c) for c in METRIC_COLUMNS]


# ---------------------------------------------------------------------------
# objective pieces


def marginalize(p_y_given_d, p_d_given_q) -> float:
    """p(y|q) = sum_d p(y|d,q) p(d|q), evaluated as a log-sum-exp."""
    pyd = np.asarray(p_y_given_d, dtype=np.float64)
    pdq = np.asarray(p_d_given_q, dtype=np.float64)
    if pyd.shape != pdq.shape or pyd.ndim != 1:
        raise TrainingError(f"shape mismatch {pyd.shape} vs {pdq.shape}")
    for name, arr in (("p(y|d,q)", pyd), ("p(d|q)", pdq)):
        if not np.all((arr >= 0.0) & (arr <= 1.0)):
            raise TrainingError(f"{name} values must lie in [0, 1]")
    if abs(pdq.sum() - 1.0) > 1e-9:
        raise TrainingError(f"p(d|q) sums to {pdq.sum()!r}, not 1")
    with np.errstate(divide="ignore"):
        terms = np.log(pyd) + np.log(pdq)
    m = terms.max()
    if not np.isfinite(m):
        return 0.0
    return float(np.exp(m + np.log(np.exp(terms - m).sum())))


def log_marginal(log_p_y_given_d: Tensor, log_p_d_given_q: Tensor) -> Tensor:
    return T.logsumexp(T.add(log_p_y_given_d, log_p_d_given_q), axis=-1)


def mlm_loss(log_p_y_given_q) -> Tensor:
    """Negative mean of per-query log p(y|q)."""
    lp = T.as_tensor(log_p_y_given_q)
    if lp.data.size == 0:
        raise TrainingError("empty batch")
    return -T.tmean(lp)


def leverage_weights(p_y_given_d, p_y_given_q: float) -> np.ndarray:
    """u(d) = p(y|d,q) / p(y|q) - 1."""
    if not p_y_given_q > 0.0:
        raise TrainingError("p(y|q) must be positive")
    return np.asarray(p_y_given_d, dtype=np.float64) / p_y_given_q - 1.0


def perplexity(mean_masked_nll: float) -> float:
    if not math.isfinite(mean_masked_nll):
        raise NumericalError(f"non-finite NLL {mean_masked_nll}")
    return math.exp(mean_masked_nll)


def lr_schedule(step: int, config: TrainConfig) -> float:
    """Linear warmup from 0 to the peak, then cosine decay to the final rate."""
    w, n = config.warmup_steps, config.total_steps
    if step < w:
        return config.peak_lr * step / w
    if step >= n:
        return config.final_lr
    frac = (step - w) / (n - w)
    return config.final_lr + (config.peak_lr - config.final_lr) * 0.5 * (1.0 + math.cos(math.pi * frac))


@dataclass
class AdamWMoments:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, arrays: Sequence[np.ndarray]) -> "AdamWMoments":
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], 0)


def adamw_update(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    moments: AdamWMoments,
    lr: float,
    config: TrainConfig,
    lr_scales: Sequence[float] | None = None,
) -> None:
    """One in-place AdamW step; decay is applied to the weights before the
    moment-based step. ``lr_scales`` optionally scales the rate per tensor."""
    if not (len(params) == len(grads) == len(moments.m)):
        raise TrainingError("params, grads and moments must align")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise T.ShapeError(f"adamw: param {p.shape} vs grad {g.shape}")
        if not np.isfinite(g).all():
            raise NumericalError("adamw: non-finite gradient")
    moments.t += 1
    b1, b2, eps, wd = config.beta1, config.beta2, config.adam_eps, config.weight_decay
    c1 = 1.0 - b1**moments.t
    c2 = 1.0 - b2**moments.t
    scales = [1.0] * len(params) if lr_scales is None else list(lr_scales)
    if len(scales) != len(params):
        raise TrainingError("lr_scales must align with params")
    for p, g, m, v, sc in zip(params, grads, moments.m, moments.v, scales):
        a = lr * sc
        if wd:
            p -= a * wd * p
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= a * (m / c1) / (np.sqrt(v / c2) + eps)


# ---------------------------------------------------------------------------
# state and sampling


@dataclass
class TrainState:
    config: TrainConfig
    reader: EncoderParams
    query: EncoderParams
    doc: EncoderParams
    corpus: list[Document]
    moments: AdamWMoments
    rng: np.random.Generator
    index: FlatIndex | None = None
    step: int = 0

    @property
    def null_embedding(self) -> Tensor:
        return self.doc.null_embedding

    def groups(self) -> dict[str, EncoderParams]:
        out = {"reader": self.reader, "doc": self.doc}
        if self.query is not self.doc:
            out["query"] = self.query
        return out

    def parameters(self) -> list[Tensor]:
        seen, out = set(), []
        for g in self.groups().values():
            for t in g:
                if id(t) not in seen:
                    seen.add(id(t))
                    out.append(t)
        return out

    def lr_scales(self) -> list[float]:
        reader = {id(t) for t in self.reader}
        r = self.config.retriever_lr_scale
        return [1.0 if id(t) in reader else r for t in self.parameters()]

    def zero_grad(self) -> None:
        T.zero_grads(self.parameters())


def init_state(
    enc_config: EncoderConfig,
    config: TrainConfig,
    corpus: Sequence[Document],
    share_retriever_weights: bool = False,
    rng: np.random.Generator | None = None,
) -> TrainState:
    """Random reader; retrieval encoders start from the reader's body weights."""
    rng = np.random.default_rng(config.seed) if rng is None else rng
    reader = init_params(READER, enc_config, rng)
    doc = derive_retriever(reader, DOC, rng)
    query = doc if share_retriever_weights else derive_retriever(reader, QUERY, rng)
    state = TrainState(config, reader, query, doc, list(corpus), AdamWMoments([], []), rng)
    state.moments = AdamWMoments.zeros_like([t.data for t in state.parameters()])
    return state


class QuerySampler:
    """Draws masked queries from corpus chunks that carry salient spans."""

    def __init__(self, docs: Sequence[Document], vocab: Vocab, gazetteer: Gazetteer):
        self.docs = list(docs)
        self.spans = [detect_salient_spans(d.tokens, vocab, gazetteer) for d in self.docs]
        if not any(self.spans):
            raise TrainingError("no document contains a salient span")

    def draw(self, rng: np.random.Generator) -> MaskedQuery:
        while True:
            i = int(rng.integers(len(self.docs)))
            seed = int(rng.integers(2**63))
            doc = self.docs[i]
            try:
                plan = plan_masks(doc.real_length, self.spans[i], seed)
            except SampleRejected:
                continue
            return apply_masks(doc.tokens, plan, doc.doc_id)

    def batch(self, rng: np.random.Generator, size: int) -> list[MaskedQuery]:
        return [self.draw(rng) for _ in range(size)]


# ---------------------------------------------------------------------------
# forward objective


@dataclass
class BatchForward:
    loss: Tensor
    log_p_y_given_q: Tensor
    log_p_y_given_d: Tensor
    log_p_d_given_q: Tensor
    candidate_ids: list[list[int]]
    token_log_probs: list[np.ndarray]  # per query: [C, |M_q|]
    has_null: bool

    def null_prob_mass(self) -> float:
        if not self.has_null:
            return 0.0
        return float(np.exp(self.log_p_d_given_q.data[:, -1]).mean())

    def masked_nll(self) -> float:
        """Mean over queries of the mean over masked tokens of -log of the
        per-token marginal."""
        lpd = self.log_p_d_given_q.data
        per_query = []
        for b, tok in enumerate(self.token_log_probs):
            terms = tok + lpd[b][:, None]
            m = terms.max(axis=0)
            lse = m + np.log(np.exp(terms - m).sum(axis=0))
            per_query.append(-lse.mean())
        return float(np.mean(per_query))


def _segment_matrix(sizes: Sequence[int]) -> np.ndarray:
    """``[len(sizes), sum(sizes)]`` indicator that sums consecutive runs."""
    out = np.zeros((len(sizes), int(sum(sizes))))
    start = 0
    for i, n in enumerate(sizes):
        out[i, start : start + n] = 1.0
        start += n
    return out


def forward_batch(
    state: TrainState,
    batch: Sequence[MaskedQuery],
    rng: np.random.Generator | None = None,
    train: bool = False,
) -> BatchForward:
    cfg = state.config
    if not batch:
        raise TrainingError("empty batch")
    B = len(batch)
    if cfg.retrieval:
        if state.index is None:
            raise TrainingError("index not built")
        qvecs = encode_queries(state.query, batch, rng, train)
        k = cfg.top_k
        cand_ids = [
            [i for i, _ in top_k_search(state.index, qvecs.data[b], k, q.source_doc_id)]
            for b, q in enumerate(batch)
        ]
        flat = encode_docs(state.doc, [state.corpus[i] for ids in cand_ids for i in ids], rng, train)
        cand = flat.reshape(B, k, flat.shape[-1])
        if cfg.null_document:
            cand = with_null(cand, state.null_embedding)
        _, log_pdq = candidate_distribution(qvecs, cand)
        docs_per_query = [
            [state.corpus[i] for i in ids] + ([None] if cfg.null_document else []) for ids in cand_ids
        ]
        has_null = cfg.null_document
    else:
        cand_ids = [[] for _ in batch]
        log_pdq = Tensor(np.zeros((B, 1)))
        docs_per_query = [[None] for _ in batch]
        has_null = True
    C = log_pdq.shape[1]

    pair_q, pair_d = [], []
    for q, docs in zip(batch, docs_per_query):
        for d in docs:
            pair_q.append(q)
            pair_d.append(d)
    logp, _ = reader_batch_log_probs(state.reader, pair_q, pair_d, rng, train)
    targets = np.concatenate([np.asarray(q.target_ids, dtype=np.int64) for q in pair_q])
    tok = logp[np.arange(targets.size), targets]
    sizes = [len(q.mask_positions) for q in pair_q]
    log_pyd = (T.matmul(Tensor(_segment_matrix(sizes)), tok.reshape(-1, 1))).reshape(B, C)
    log_pyq = log_marginal(log_pyd, log_pdq)
    loss = mlm_loss(log_pyq)

    token_lp, start = [], 0
    for q in batch:
        m = len(q.mask_positions)
        token_lp.append(tok.data[start : start + C * m].reshape(C, m))
        start += C * m
    return BatchForward(loss, log_pyq, log_pyd, log_pdq, cand_ids, token_lp, has_null)


def train_step(state: TrainState, batch: Sequence[MaskedQuery]) -> tuple[TrainState, StepMetrics]:
    """One joint update of reader, both encoders and the null embedding."""
    step = state.step + 1
    lr = lr_schedule(step, state.config)
    params = state.parameters()
    state.zero_grad()
    fwd = forward_batch(state, batch, state.rng, train=True)
    loss = fwd.loss.item()
    if not math.isfinite(loss):
        raise NumericalError(f"non-finite loss at step {step}")
    T.backprop(fwd.loss)
    grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    if not all(np.isfinite(g).all() for g in grads):
        state.zero_grad()
        raise NumericalError(f"non-finite gradient at step {step}")
    adamw_update([p.data for p in params], grads, state.moments, lr, state.config, state.lr_scales())
    state.step = step
    if state.config.retrieval and step % state.config.reindex_interval == 0:
        state.index = rebuild_index(state.doc, state.corpus, step, state.index)
    nll = fwd.masked_nll()
    metrics = StepMetrics(
        step=step,
        loss=loss,
        nll=nll,
        perplexity=perplexity(nll),
        lr=lr,
        null_prob_mass=fwd.null_prob_mass(),
        index_version=state.index.version if state.index is not None else 0,
    )
    return state, metrics


def closed_form_retriever_grads(state: TrainState, query: MaskedQuery) -> dict[str, np.ndarray]:
    """Gradient of log p(y|q) for retriever parameters via the leverage form
    sum_d u(d) p(d|q) grad sim(d, q), one backward pass per candidate."""
    if not state.config.retrieval:
        raise TrainingError("retrieval is disabled")
    with T.no_grad():
        fwd = forward_batch(state, [query])
    lpd = fwd.log_p_d_given_q.data[0]
    lpy = fwd.log_p_y_given_d.data[0]
    lpq = float(fwd.log_p_y_given_q.data[0])
    u = np.exp(lpy - lpq) - 1.0  # p(y|d,q)/p(y|q) - 1 without underflow
    weights = u * np.exp(lpd)
    ids = fwd.candidate_ids[0]
    retriever = [t for g in (state.query, state.doc) for t in g]
    retriever = list({id(t): t for t in retriever}.values())
    total = {t.name: np.zeros_like(t.data) for t in retriever}
    q_vec = None
    for c, w in enumerate(weights):
        T.zero_grads(retriever)
        q_vec = encode_queries(state.query, [query])[0]
        if c < len(ids):
            d_vec = encode_docs(state.doc, [state.corpus[ids[c]]])[0]
        else:
            d_vec = state.null_embedding
        T.backprop(T.similarity_scores(q_vec, d_vec))
        for t in retriever:
            if t.grad is not None:
                total[t.name] += w * t.grad
    T.zero_grads(retriever)
    return total


# ---------------------------------------------------------------------------
# inverse cloze warmup

_SENT_RE = re.compile(r"[^.!?]+[.!?]+|[^.!?]+$")


def split_sentences(text: str) -> list[str]:
    return [s.strip() for s in _SENT_RE.findall(text) if s.strip()]


@dataclass(frozen=True)
class ICTPair:
    query_text: str
    doc_text: str
    query_ids: tuple[int, ...]
    doc_ids: tuple[int, ...]


def ict_pairs(
    texts: Sequence[str], rng: np.random.Generator, vocab: Vocab, chunk_len: int = 128
) -> list[ICTPair]:
    """One (sentence, surrounding context) pair per text with at least two sentences.

    The context is a ``chunk_len`` window of the text with the sentence
    removed, placed at random so that it covers the gap. A fixed window size
    keeps the context length from revealing the length of the sentence.
    """
    out = []
    for text in texts:
        sents = split_sentences(text)
        if len(sents) < 2:
            continue
        j = int(rng.integers(len(sents)))
        rest = " ".join(s for i, s in enumerate(sents) if i != j)
        q_ids = tuple(tokenize(sents[j], vocab))[:chunk_len]
        pieces = [tokenize(s, vocab) for i, s in enumerate(sents) if i != j]
        d_all = [t for p in pieces for t in p]
        if len(d_all) > chunk_len:
            gap = sum(len(p) for p in pieces[:j])
            lo, hi = max(0, gap - chunk_len), min(gap, len(d_all) - chunk_len)
            start = int(rng.integers(lo, hi + 1))
            d_all = d_all[start : start + chunk_len]
        d_ids = tuple(d_all)
        if q_ids and d_ids:
            out.append(ICTPair(sents[j], rest, q_ids, d_ids))
    return out


def ict_loss(scores: Tensor) -> Tensor:
    """In-batch cross-entropy with the matching document on the diagonal."""
    B = scores.shape[0]
    if scores.shape != (B, B):
        raise T.ShapeError(f"ict_loss: expected a square score matrix, got {scores.shape}")
    logp = T.log_softmax(scores, axis=-1)
    return -T.tmean(logp[np.arange(B), np.arange(B)])


def ict_scores(query_params, doc_params, batch: Sequence[ICTPair], rng=None, train=False) -> Tensor:
    qv = pooled_vectors(query_params, [[CLS_ID, *p.query_ids, SEP_ID] for p in batch], rng, train)
    dv = pooled_vectors(doc_params, [[CLS_ID, *p.doc_ids, SEP_ID] for p in batch], rng, train)
    return (qv @ dv.transpose(1, 0)) * (1.0 / math.sqrt(qv.shape[1]))


def ict_step(query_params, doc_params, batch: Sequence[ICTPair], rng=None, train=False) -> float:
    """Forward, then backprop the in-batch loss into both encoders' grads."""
    if len(batch) < 2:
        raise TrainingError("ICT needs a batch of at least 2 pairs")
    loss = ict_loss(ict_scores(query_params, doc_params, batch, rng, train))
    T.backprop(loss)
    return loss.item()


def ict_recall_at_1(query_params, doc_params, batch: Sequence[ICTPair]) -> float:
    with T.no_grad():
        s = ict_scores(query_params, doc_params, batch).data
    return float(np.mean(np.argmax(s, axis=1) == np.arange(len(batch))))


def run_ict_warmup(
    query_params: EncoderParams,
    doc_params: EncoderParams,
    texts: Sequence[str],
    vocab: Vocab,
    steps: int,
    batch_size: int,
    lr: float,
    rng: np.random.Generator,
    chunk_len: int = 128,
    weight_decay: float = 0.0,
) -> list[float]:
    """Constant-rate AdamW on the ICT loss; returns the loss per step."""
    if len(texts) < 2:
        raise TrainingError("ICT warmup needs at least two texts")
    params = list({id(t): t for g in (query_params, doc_params) for t in g}.values())
    moments = AdamWMoments.zeros_like([t.data for t in params])
    cfg = TrainConfig(peak_lr=lr, final_lr=lr, warmup_steps=0, total_steps=max(steps, 1),
                      weight_decay=weight_decay)
    losses = []
    size = min(batch_size, len(texts))
    for _ in range(steps):
        chosen = rng.choice(len(texts), size=size, replace=False)
        batch = ict_pairs([texts[i] for i in chosen], rng, vocab, chunk_len)
        if len(batch) < 2:
            continue
        T.zero_grads(params)
        losses.append(ict_step(query_params, doc_params, batch, rng, train=True))
        grads = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in params]
        adamw_update([t.data for t in params], grads, moments, lr, cfg)
    T.zero_grads(params)
    return losses


# ---------------------------------------------------------------------------
# reader export


def extract_reader(state: TrainState, path: str | Path) -> Path:
    """Serialise the reader alone."""
    path = Path(path)
    save_checkpoint(path, {"reader": state.reader}, extra={"step": state.step})
    return path


def load_reader(path: str | Path) -> EncoderParams:
    groups, _ = load_checkpoint(path)
    if set(groups) != {"reader"}:
        raise TrainingError(f"{path}: expected only reader tensors, found {sorted(groups)}")
    return groups["reader"]
