"""Experiment configs, resumable pre-training runs, ablations and smoothing."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
import time
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import Article, Vocab, build_vocab, chunk_corpus, load_corpus
from .encoders import EncoderConfig, load_checkpoint, save_checkpoint
from .index import FlatIndex, rebuild_index
from .masking import Gazetteer
from .tensor import NumericalError
from .training import (
    METRIC_COLUMNS,
    AdamWMoments,
    QuerySampler,
    TrainConfig,
    TrainState,
    init_state,
    run_ict_warmup,
    train_step,
)

log = logging.getLogger(__name__)

PACKAGE_DIR = Path(__file__).resolve().parent
CONFIG_DIR = PACKAGE_DIR / "configs"
AXES = ("null_doc", "ict", "k_sweep")
K_SWEEP = (4, 8, 16)
SMOOTH_SKIP = ("step", "index_version")


class ConfigError(ValueError):
    pass


_BOOL = {"on": True, "true": True, "yes": True, "1": True, "off": False, "false": False, "no": False, "0": False}


@dataclass(frozen=True)
class ExperimentConfig:
    corpus: str
    gazetteer: str
    months: str = ""
    chunk_len: int = 53
    vocab_size: int = 5000
    # encoder
    layers: int = 2
    heads: int = 4
    h_dim: int = 64
    ffn_dim: int = 256
    dropout: float = 0.0
    init_std: float = 0.05
    share_retriever: bool = False
    # optimisation
    batch_size: int = 8
    peak_lr: float = 1e-3
    final_lr: float = 1e-4
    warmup_steps: int = 100
    total_steps: int = 2000
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    retriever_lr_scale: float = 0.02
    reindex_interval: int = 100
    checkpoint_every: int = 100
    # ablation flags; k counts every candidate, the null document included
    retrieval: bool = True
    null_document: bool = True
    ict_warmup: bool = True
    k: int = 8
    ict_steps: int = 1000
    ict_batch: int = 16
    ict_lr: float = 1e-3
    seed: int = 42
    out: str = "runs/default"
    base_dir: str = "."  # resolves relative paths; not part of the canonical form

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.retrieval and self.k < 2:
            raise ConfigError("retrieval needs k >= 2 (at least one real document plus the null slot)")
        for name in ("chunk_len", "batch_size", "total_steps", "checkpoint_every", "reindex_interval"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        try:
            self.encoder_config(1)
            self.train_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    # -- derived configs

    @property
    def top_k(self) -> int:
        return self.k - 1

    def encoder_config(self, vocab_size: int) -> EncoderConfig:
        return EncoderConfig(
            vocab_size=vocab_size, layers=self.layers, heads=self.heads, h_dim=self.h_dim,
            ffn_dim=self.ffn_dim, max_positions=EncoderConfig.reader_length(self.chunk_len),
            dropout=self.dropout, init_std=self.init_std,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            top_k=max(self.top_k, 1), reindex_interval=self.reindex_interval, batch_size=self.batch_size,
            peak_lr=self.peak_lr, final_lr=self.final_lr, warmup_steps=self.warmup_steps,
            total_steps=self.total_steps, weight_decay=self.weight_decay, beta1=self.beta1,
            beta2=self.beta2, adam_eps=self.adam_eps, seed=self.seed, retrieval=self.retrieval,
            null_document=self.null_document, retriever_lr_scale=self.retriever_lr_scale,
        )

    def path(self, value: str) -> Path:
        p = Path(value)
        return p if p.is_absolute() else Path(self.base_dir) / p

    @property
    def out_dir(self) -> Path:
        return self.path(self.out)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    # -- text form

    def canonical(self) -> str:
        """Sorted ``key = value`` lines; the output directory is left out so
        the same experiment hashes alike wherever it is written."""
        lines = []
        for f in sorted(fields(self), key=lambda f: f.name):
            if f.name in ("out", "base_dir"):
                continue
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical().encode("utf-8")).hexdigest()

    def to_text(self) -> str:
        return self.canonical() + f"out = {self.out}\n"

    @classmethod
    def from_text(cls, text: str, base_dir: str | Path = ".") -> "ExperimentConfig":
        types = {f.name: f.type for f in fields(cls)}
        values: dict[str, object] = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types or key == "base_dir":
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            if key in values:
                raise ConfigError(f"line {lineno}: duplicate key {key!r}")
            values[key] = _parse(key, value, types[key], lineno)
        for required in ("corpus", "gazetteer"):
            if required not in values:
                raise ConfigError(f"missing required key {required!r}")
        return cls(base_dir=str(base_dir), **values)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        path = resolve_config_path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_text(text, path.parent)


def _format(value) -> str:
    if isinstance(value, bool):
        return "on" if value else "off"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(key: str, value: str, typ, lineno: int):
    typ = typ if isinstance(typ, str) else typ.__name__
    try:
        if typ == "bool":
            return _BOOL[value.lower()]
        if typ == "int":
            return int(value)
        if typ == "float":
            return float(value)
    except (KeyError, ValueError):
        raise ConfigError(f"line {lineno}: bad {typ} for {key!r}: {value!r}") from None
    return value


def resolve_config_path(path: str | Path) -> Path:
    """A file path, or the stem of a bundled config (``toy``, ``planted``)."""
    p = Path(path)
    if p.exists():
        return p
    bundled = CONFIG_DIR / f"{path}.cfg"
    if bundled.exists():
        return bundled
    raise ConfigError(f"config {path} not found")


@dataclass(frozen=True)
class RunSummary:
    config_hash: str
    final_ema_loss: float
    final_perplexity: float
    wall_clock_seconds: float
    metrics_csv: str
    steps: int = 0
    final_ema_nll: float = float("nan")
    ict_final_loss: float | None = None

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


# ---------------------------------------------------------------------------
# smoothing


def ema(values: Sequence[float], alpha: float = 0.99) -> list[float]:
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    if len(values) == 0:
        raise ValueError("cannot smooth an empty series")
    out = [float(values[0])]
    for x in values[1:]:
        out.append(alpha * out[-1] + (1.0 - alpha) * float(x))
    return out


def read_metrics(path: str | Path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty metrics file")
    return rows[0], rows[1:]


def emit_smoothed(metrics_csv: str | Path, alpha: float = 0.99, out_path: str | Path | None = None) -> Path:
    """EMA-smooth every metric column except step and index version."""
    header, rows = read_metrics(metrics_csv)
    if not rows:
        raise ValueError(f"{metrics_csv}: no metric rows to smooth")
    cols = list(zip(*rows))
    out_cols = []
    for name, col in zip(header, cols):
        out_cols.append(list(col) if name in SMOOTH_SKIP else ema([float(x) for x in col], alpha))
    out = Path(out_path) if out_path else Path(metrics_csv).with_name(Path(metrics_csv).stem + "_smoothed.csv")
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(zip(*out_cols))
    return out


# ---------------------------------------------------------------------------
# data loading


@dataclass
class RunData:
    articles: list[Article]
    vocab: Vocab
    docs: list
    gazetteer: Gazetteer


def load_run_data(cfg: ExperimentConfig) -> RunData:
    articles = load_corpus(cfg.path(cfg.corpus))
    if not articles:
        raise ConfigError(f"{cfg.corpus}: corpus has no usable articles")
    vocab = build_vocab(articles, cfg.vocab_size)
    docs = chunk_corpus(articles, vocab, cfg.chunk_len)
    try:
        gaz = Gazetteer.load(cfg.path(cfg.gazetteer), cfg.path(cfg.months) if cfg.months else None)
    except OSError as exc:
        raise ConfigError(f"cannot read gazetteer: {exc}") from None
    return RunData(articles, vocab, docs, gaz)


# ---------------------------------------------------------------------------
# checkpoints


def _atomic_write(path: Path, write) -> None:
    tmp = path.with_name(path.name + ".tmp")
    write(tmp)
    os.replace(tmp, path)


def save_run_checkpoint(state: TrainState, ckpt_dir: Path, config_hash: str) -> None:
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    _atomic_write(ckpt_dir / "params.ckpt", lambda p: save_checkpoint(p, state.groups(), {"step": state.step}))

    def moments(p):
        arrays = {f"m{i}": a for i, a in enumerate(state.moments.m)}
        arrays.update({f"v{i}": a for i, a in enumerate(state.moments.v)})
        with open(p, "wb") as fh:
            np.savez(fh, t=np.array(state.moments.t), **arrays)

    _atomic_write(ckpt_dir / "moments.npz", moments)
    if state.index is not None:
        _atomic_write(ckpt_dir / "index.bin", state.index.save)
    meta = {
        "step": state.step,
        "config_hash": config_hash,
        "rng": state.rng.bit_generator.state,
        "index": None if state.index is None else {"version": state.index.version, "built_at_step": state.index.built_at_step},
    }
    # written last: its presence marks a complete checkpoint
    _atomic_write(ckpt_dir / "state.json", lambda p: p.write_text(json.dumps(meta, indent=1), encoding="utf-8"))


def load_run_checkpoint(state: TrainState, ckpt_dir: Path, config_hash: str) -> TrainState:
    meta = json.loads((ckpt_dir / "state.json").read_text(encoding="utf-8"))
    if meta["config_hash"] != config_hash:
        raise ConfigError(f"{ckpt_dir}: checkpoint belongs to a different config")
    groups, extra = load_checkpoint(ckpt_dir / "params.ckpt")
    if extra.get("step") != meta["step"]:
        raise ConfigError(f"{ckpt_dir}: parameter and state files disagree on the step")
    for gname, params in state.groups().items():
        if gname not in groups:
            raise ConfigError(f"{ckpt_dir}: missing parameter group {gname}")
        for name, t in params.named():
            t.data = groups[gname][name].data.copy()
    with np.load(ckpt_dir / "moments.npz") as z:
        n = len(state.moments.m)
        state.moments = AdamWMoments([z[f"m{i}"] for i in range(n)], [z[f"v{i}"] for i in range(n)], int(z["t"]))
    if meta["index"] is not None:
        state.index = FlatIndex.load(ckpt_dir / "index.bin", meta["index"]["built_at_step"])
    state.rng.bit_generator.state = meta["rng"]
    state.step = meta["step"]
    return state


# ---------------------------------------------------------------------------
# runs


def _write_rows(path: Path, rows: Iterable[list], header: Sequence[str] | None = None, mode: str = "a") -> None:
    with open(path, mode, newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        if header is not None:
            w.writerow(header)
        w.writerows(rows)


def _truncate_metrics(path: Path, step: int) -> None:
    header, rows = read_metrics(path)
    kept = [r for r in rows if int(r[0]) <= step]
    _write_rows(path, kept, header, mode="w")


def ict_rng(cfg: ExperimentConfig) -> np.random.Generator:
    """A stream of its own, so toggling ICT leaves the training batches unchanged."""
    return np.random.default_rng([cfg.seed, 1])


def run_pretrain(cfg: ExperimentConfig) -> RunSummary:
    """ICT warmup (optional), then joint training, resuming from the last
    checkpoint under ``cfg.out`` when one exists for the same config."""
    t0 = time.perf_counter()
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    ckpt_dir = out / "checkpoint"
    metrics_path = out / "metrics.csv"
    digest = cfg.config_hash()

    data = load_run_data(cfg)
    (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    data.vocab.save(out / "vocab.txt")
    tcfg = cfg.train_config()
    state = init_state(
        cfg.encoder_config(len(data.vocab)), tcfg, data.docs, cfg.share_retriever, np.random.default_rng(cfg.seed)
    )
    sampler = QuerySampler(data.docs, data.vocab, data.gazetteer)

    ict_final = None
    if (ckpt_dir / "state.json").exists():
        load_run_checkpoint(state, ckpt_dir, digest)
        _truncate_metrics(metrics_path, state.step)
        log.info("resumed at step %d", state.step)
    else:
        if cfg.ict_warmup and cfg.retrieval and cfg.ict_steps > 0:
            losses = run_ict_warmup(
                state.query, state.doc, [a.text for a in data.articles], data.vocab, cfg.ict_steps,
                cfg.ict_batch, cfg.ict_lr, ict_rng(cfg), cfg.chunk_len,
            )
            _write_rows(out / "ict_losses.csv", ([i + 1, x] for i, x in enumerate(losses)), ["step", "loss"], "w")
            ict_final = losses[-1] if losses else None
        if cfg.retrieval:
            state.index = rebuild_index(state.doc, state.corpus, 0)
        _write_rows(metrics_path, [], METRIC_COLUMNS, mode="w")

    while state.step < tcfg.total_steps:
        batch = sampler.batch(state.rng, tcfg.batch_size)
        # a failed step leaves the parameters untouched; the error carries the step
        state, m = train_step(state, batch)
        _write_rows(metrics_path, [m.row()])
        if state.step % cfg.checkpoint_every == 0 or state.step == tcfg.total_steps:
            save_run_checkpoint(state, ckpt_dir, digest)

    smoothed = emit_smoothed(metrics_path, 0.99, out / "metrics_smoothed.csv")
    header, rows = read_metrics(smoothed)
    last = dict(zip(header, rows[-1]))
    summary = RunSummary(
        config_hash=digest,
        final_ema_loss=float(last["loss"]),
        final_perplexity=float(last["perplexity"]),
        wall_clock_seconds=time.perf_counter() - t0,
        metrics_csv=str(metrics_path),
        steps=len(rows),
        final_ema_nll=float(last["nll"]),
        ict_final_loss=ict_final,
    )
    (out / "summary.json").write_text(json.dumps(summary.to_json(), indent=1), encoding="utf-8")
    return summary


def ablation_variants(base: ExperimentConfig, axis: str) -> list[tuple[str, ExperimentConfig]]:
    if axis not in AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; choose from {', '.join(AXES)}")
    root = Path(base.out) / axis
    if axis == "null_doc":
        opts = [("null_on", {"null_document": True}), ("null_off", {"null_document": False})]
    elif axis == "ict":
        opts = [("ict_on", {"ict_warmup": True}), ("ict_off", {"ict_warmup": False})]
    else:
        opts = [(f"k{k}", {"k": k}) for k in K_SWEEP]
    return [(name, base.replace(retrieval=True, out=str(root / name), **kw)) for name, kw in opts]


def run_ablation(base: ExperimentConfig, axis: str) -> dict[str, RunSummary]:
    """Every variant with the base seed; writes ``comparison.csv`` aligned by step."""
    variants = ablation_variants(base, axis)
    summaries = {name: run_pretrain(cfg) for name, cfg in variants}
    columns: dict[str, list] = {}
    steps = None
    for name, cfg in variants:
        header, rows = read_metrics(cfg.out_dir / "metrics_smoothed.csv")
        _, raw = read_metrics(cfg.out_dir / "metrics.csv")
        col = {h: [r[i] for r in rows] for i, h in enumerate(header)}
        if steps is None:
            steps = col["step"]
        elif col["step"] != steps:
            raise ConfigError(f"variant {name} logged different steps")
        columns[f"loss_{name}"] = [r[header.index("loss")] for r in raw]
        columns[f"ema_loss_{name}"] = col["loss"]
        columns[f"ema_perplexity_{name}"] = col["perplexity"]
        columns[f"null_prob_mass_{name}"] = [r[header.index("null_prob_mass")] for r in raw]
    root = base.out_dir / axis
    root.mkdir(parents=True, exist_ok=True)
    _write_rows(root / "comparison.csv", zip(steps, *columns.values()), ["step", *columns], mode="w")
    report = {name: s.to_json() for name, s in summaries.items()}
    if axis == "k_sweep":
        report["k8_k16_ema_loss_gap"] = abs(summaries["k8"].final_ema_loss - summaries["k16"].final_ema_loss)
    (root / "ablation.json").write_text(json.dumps(report, indent=1), encoding="utf-8")
    return summaries


def ict_only(cfg: ExperimentConfig) -> dict:
    """ICT warmup alone; saves both retrieval encoders and the loss curve."""
    from .training import ict_pairs, ict_recall_at_1

    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    data = load_run_data(cfg)
    state = init_state(
        cfg.encoder_config(len(data.vocab)), cfg.train_config(), data.docs, cfg.share_retriever,
        np.random.default_rng(cfg.seed),
    )
    texts = [a.text for a in data.articles]
    losses = run_ict_warmup(
        state.query, state.doc, texts, data.vocab, cfg.ict_steps, cfg.ict_batch, cfg.ict_lr, ict_rng(cfg), cfg.chunk_len
    )
    _write_rows(out / "ict_losses.csv", ([i + 1, x] for i, x in enumerate(losses)), ["step", "loss"], "w")
    groups = {"doc": state.doc} if state.query is state.doc else {"query": state.query, "doc": state.doc}
    save_checkpoint(out / "retriever.ckpt", groups, {"ict_steps": cfg.ict_steps})
    eval_pairs = ict_pairs(texts[: cfg.ict_batch], np.random.default_rng(cfg.seed + 1), data.vocab, cfg.chunk_len)
    report = {
        "final_loss": losses[-1] if losses else math.nan,
        "recall_at_1": ict_recall_at_1(state.query, state.doc, eval_pairs) if len(eval_pairs) >= 2 else math.nan,
        "batch": len(eval_pairs),
    }
    (out / "ict_summary.json").write_text(json.dumps(report, indent=1), encoding="utf-8")
    return report


__all__ = [
    "ConfigError", "ExperimentConfig", "RunSummary", "NumericalError", "ema", "emit_smoothed",
    "run_pretrain", "run_ablation", "ablation_variants", "ict_only", "resolve_config_path",
]
