import numpy as np
import pytest

from ralm.corpus import Article, Document, Vocab, RESERVED, build_vocab, chunk_corpus
from ralm.encoders import EncoderConfig
from ralm.index import rebuild_index
from ralm.masking import MaskedQuery, MaskingPlan, Span, apply_masks
from ralm.training import TrainConfig, init_state

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def micro_vocab(size=50) -> Vocab:
    return Vocab(list(RESERVED) + [f"w{i}" for i in range(size - len(RESERVED))])


def micro_corpus(rng, n_docs=16, chunk_len=8, vocab_size=50) -> tuple[Vocab, list[Document]]:
    vocab = micro_vocab(vocab_size)
    docs = []
    for i in range(n_docs):
        ids = tuple(int(x) for x in rng.integers(len(RESERVED), vocab_size, size=chunk_len))
        docs.append(Document(i, f"a{i}", ids, chunk_len))
    return vocab, docs


def micro_query(rng, doc: Document, n_masks=2) -> MaskedQuery:
    pos = sorted(rng.choice(doc.real_length, size=n_masks, replace=False).tolist())
    spans = [Span(p, p + 1) for p in pos]
    return apply_masks(doc.tokens, MaskingPlan(spans, [], 0), doc.doc_id)


def micro_state(seed=0, top_k=4, h_dim=8, layers=2, heads=2, ffn_dim=16, jitter=0.1, **train_kw):
    """Tiny joint model with every tensor perturbed off its structured init,
    so no gradient is zero by symmetry alone."""
    rng = np.random.default_rng(seed)
    vocab, docs = micro_corpus(rng)
    ec = EncoderConfig(vocab_size=len(vocab), layers=layers, heads=heads, h_dim=h_dim, ffn_dim=ffn_dim,
                       max_positions=EncoderConfig.reader_length(8), init_std=0.3)
    tc = TrainConfig(top_k=top_k, batch_size=1, peak_lr=1e-3, final_lr=1e-4, warmup_steps=1,
                     total_steps=10, seed=seed, **train_kw)
    state = init_state(ec, tc, docs, rng=rng)
    for t in state.parameters():
        t.data = t.data + jitter * rng.standard_normal(t.shape)
    state.index = rebuild_index(state.doc, docs, 0)
    query = micro_query(rng, docs[int(rng.integers(len(docs)))])
    return state, query, vocab


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_articles():
    texts = [
        "Ola Nordmann was born in Bergen in 1921. He moved to Oslo on 3 mai 1950.",
        "Kari Nordmann studied in Trondheim. She worked for Telenor in 1974!",
        "The river near Hamar froze on 12. januar 1888. Many people came.",
        "Nothing salient here at all. Just words.",
    ]
    return [Article(f"t{i}", t) for i, t in enumerate(texts)]


@pytest.fixture(scope="session")
def toy_vocab(toy_articles):
    return build_vocab(toy_articles, 500)


@pytest.fixture(scope="session")
def toy_docs(toy_articles, toy_vocab):
    return chunk_corpus(toy_articles, toy_vocab, 16)


@pytest.fixture(scope="session")
def toy_ablations(tmp_path_factory):
    """Every ablation axis on the bundled toy config, run once per session."""
    from ralm.harness import AXES, ExperimentConfig, run_ablation

    base = ExperimentConfig.load("toy").replace(out=str(tmp_path_factory.mktemp("ablate")))
    return base, {axis: run_ablation(base, axis) for axis in AXES}
