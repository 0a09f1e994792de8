import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ralm import harness
from ralm.cli import main
from ralm.harness import ConfigError, ExperimentConfig, ablation_variants, ema, emit_smoothed, run_pretrain
from ralm.training import METRIC_COLUMNS, load_reader


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def _toy(tmp_path, **kw):
    return ExperimentConfig.load("toy").replace(out=str(tmp_path / "run"), **kw)


# -- configs


def test_config_round_trip_and_hash(tmp_path):
    cfg = ExperimentConfig.load("toy")
    again = ExperimentConfig.from_text(cfg.to_text(), cfg.base_dir)
    assert again == cfg and again.config_hash() == cfg.config_hash()
    assert cfg.replace(out="elsewhere").config_hash() == cfg.config_hash()
    assert cfg.replace(seed=1).config_hash() != cfg.config_hash()
    assert len(cfg.config_hash()) == 64
    assert "retrieval = on" in cfg.canonical()


def test_config_hash_pinned_to_canonical_text():
    cfg = ExperimentConfig(corpus="c.jsonl", gazetteer="g.txt")
    import hashlib

    assert cfg.config_hash() == hashlib.sha256(cfg.canonical().encode("utf-8")).hexdigest()
    assert cfg.canonical().splitlines() == sorted(cfg.canonical().splitlines())


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_text("corpus = a\n")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_text("corpus = a\ngazetteer = b\nbogus = 1\n")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_text("corpus = a\ngazetteer = b\nk = 2\nk = 3\n")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_text("corpus = a\ngazetteer = b\nk = four\n")
    with pytest.raises(ConfigError):
        ExperimentConfig(corpus="a", gazetteer="b", k=0)
    assert ExperimentConfig(corpus="a", gazetteer="b", k=8).top_k == 7


def test_ablation_variants_are_independent():
    base = ExperimentConfig.load("toy").replace(null_document=False)
    names = [n for n, _ in ablation_variants(base, "k_sweep")]
    assert names == ["k4", "k8", "k16"]
    assert all(not c.null_document for _, c in ablation_variants(base, "ict"))
    with pytest.raises(ConfigError):
        ablation_variants(base, "nope")


# -- smoothing


def test_ema_examples():
    assert ema([3.0] * 5) == [3.0] * 5
    assert ema([0.0, 1.0], 0.99) == pytest.approx([0.0, 0.01], abs=1e-15)
    with pytest.raises(ValueError):
        ema([])
    with pytest.raises(ValueError):
        ema([1.0], 1.0)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=60), st.floats(0.01, 0.99))
def test_ema_stays_in_prefix_range(xs, alpha):
    out = ema(xs, alpha)
    for t, v in enumerate(out):
        lo, hi = min(xs[: t + 1]), max(xs[: t + 1])
        assert lo - 1e-9 * (1 + abs(lo)) <= v <= hi + 1e-9 * (1 + abs(hi))


def test_emit_smoothed_keeps_step_columns(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("step,loss,index_version\n1,0,1\n2,1,1\n", encoding="utf-8")
    rows = _rows(emit_smoothed(p, 0.99))
    assert rows[0] == ["step", "loss", "index_version"]
    assert [r[0] for r in rows[1:]] == ["1", "2"]
    assert float(rows[2][1]) == pytest.approx(0.01)
    (tmp_path / "e.csv").write_text("step,loss\n", encoding="utf-8")
    with pytest.raises(ValueError):
        emit_smoothed(tmp_path / "e.csv")


# -- runs


@pytest.fixture(scope="module")
def toy_run(tmp_path_factory):
    cfg = ExperimentConfig.load("toy").replace(out=str(tmp_path_factory.mktemp("toy") / "run"))
    return cfg, run_pretrain(cfg)


def test_toy_run_writes_200_rows(toy_run):
    cfg, summary = toy_run
    rows = _rows(cfg.out_dir / "metrics.csv")
    assert rows[0] == list(METRIC_COLUMNS) and len(rows) == 201
    assert [int(r[0]) for r in rows[1:]] == list(range(1, 201))
    assert summary.steps == 200 and math.isfinite(summary.final_ema_loss)
    losses = [float(r[1]) for r in rows[1:]]
    assert ema(losses)[-1] < losses[0]
    for name in ("summary.json", "config.txt", "vocab.txt", "metrics_smoothed.csv", "ict_losses.csv"):
        assert (cfg.out_dir / name).exists()
    assert json.loads((cfg.out_dir / "summary.json").read_text())["config_hash"] == cfg.config_hash()
    versions = [int(r[-1]) for r in rows[1:]]
    assert versions == sorted(versions) and len(set(versions)) == 5


def test_same_seed_same_csv(tmp_path):
    short = _toy(tmp_path, total_steps=30, warmup_steps=5, ict_steps=10)
    run_pretrain(short)
    first = (short.out_dir / "metrics.csv").read_bytes()
    again = short.replace(out=str(tmp_path / "again"))
    run_pretrain(again)
    assert (again.out_dir / "metrics.csv").read_bytes() == first


def test_resume_after_crash_matches_uninterrupted(tmp_path, monkeypatch):
    cfg = _toy(tmp_path, total_steps=80, checkpoint_every=20, ict_steps=10)
    full = cfg.replace(out=str(tmp_path / "full"))
    run_pretrain(full)

    real_step = harness.train_step

    def crashing(state, batch):
        if state.step == 47:
            raise KeyboardInterrupt
        return real_step(state, batch)

    monkeypatch.setattr(harness, "train_step", crashing)
    with pytest.raises(KeyboardInterrupt):
        run_pretrain(cfg)
    assert len(_rows(cfg.out_dir / "metrics.csv")) == 48
    monkeypatch.setattr(harness, "train_step", real_step)
    run_pretrain(cfg)
    assert (cfg.out_dir / "metrics.csv").read_bytes() == (full.out_dir / "metrics.csv").read_bytes()


def test_checkpoint_from_other_config_rejected(tmp_path):
    cfg = _toy(tmp_path, total_steps=20, warmup_steps=5, checkpoint_every=10, ict_steps=0)
    run_pretrain(cfg)
    with pytest.raises(ConfigError):
        run_pretrain(cfg.replace(seed=7))


def test_no_retrieval_run_has_unit_null_mass(tmp_path):
    cfg = _toy(tmp_path, total_steps=10, warmup_steps=5, retrieval=False)
    run_pretrain(cfg)
    rows = _rows(cfg.out_dir / "metrics.csv")[1:]
    assert all(float(r[5]) == 1.0 for r in rows)
    assert not (cfg.out_dir / "ict_losses.csv").exists()


# -- ablations


def test_ablation_csvs_aligned(toy_ablations):
    base, results = toy_ablations
    for axis, variants in results.items():
        rows = _rows(base.out_dir / axis / "comparison.csv")
        header = rows[0]
        assert header[0] == "step"
        assert [int(r[0]) for r in rows[1:]] == list(range(1, 201))
        for name in variants:
            assert f"loss_{name}" in header and f"ema_loss_{name}" in header
    k = json.loads((base.out_dir / "k_sweep" / "ablation.json").read_text())
    assert math.isfinite(k["k8_k16_ema_loss_gap"])


def test_null_off_mass_identically_zero(toy_ablations):
    base, _ = toy_ablations
    rows = _rows(base.out_dir / "null_doc" / "comparison.csv")
    col = rows[0].index("null_prob_mass_null_off")
    assert all(float(r[col]) == 0.0 for r in rows[1:])
    on = rows[0].index("null_prob_mass_null_on")
    assert all(0.0 < float(r[on]) < 1.0 for r in rows[1:])


def test_ict_on_not_worse_early(toy_ablations):
    base, results = toy_ablations
    rows = _rows(base.out_dir / "ict" / "comparison.csv")
    on, off = rows[0].index("ema_loss_ict_on"), rows[0].index("ema_loss_ict_off")
    early = rows[len(rows) // 4]  # end of the first quarter of the run
    assert float(early[on]) <= float(early[off])
    assert all(math.isfinite(s.final_ema_loss) for s in results["ict"].values())


# -- command line


def test_cli_exit_codes(tmp_path, capsys):
    assert main(["pretrain", "--config", str(tmp_path / "missing.cfg")]) == 1
    bad = tmp_path / "bad.cfg"
    bad.write_text("corpus = x\n", encoding="utf-8")
    assert main(["pretrain", "--config", str(bad)]) == 1
    assert main(["pretrain", "--config", "toy", "--k", "0", "--out", str(tmp_path / "k0")]) == 1


def test_cli_numerical_failure_exits_2(tmp_path, monkeypatch):
    from ralm.tensor import NumericalError

    def boom(state, batch):
        raise NumericalError(f"non-finite loss at step {state.step + 1}")

    monkeypatch.setattr(harness, "train_step", boom)
    code = main(["pretrain", "--config", "toy", "--steps", "5", "--no-ict", "--out", str(tmp_path / "nan")])
    assert code == 2


def test_cli_pretrain_extract_smooth(tmp_path, capsys):
    run = tmp_path / "r"
    assert main(["pretrain", "--config", "toy", "--steps", "12", "--no-ict", "--k", "3", "--out", str(run)]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["steps"] == 12
    assert main(["extract-reader", "--out", str(run)]) == 0
    reader = load_reader(run / "reader.ckpt")
    assert "mlm.w" in reader.tensors and "pool.w" not in reader.tensors
    assert main(["smooth", str(run / "metrics.csv"), "--out", str(tmp_path / "s.csv")]) == 0
    assert len(_rows(tmp_path / "s.csv")) == 13
    assert main(["gen-corpus", "--out", str(tmp_path / "syn"), "--num-facts", "8", "--seed", "1"]) == 0
    assert (tmp_path / "syn" / "gazetteer.txt").exists()
    assert main(["extract-reader", "--out", str(tmp_path / "nothing")]) == 1


def test_cli_ict_warmup(tmp_path, capsys):
    out = tmp_path / "ict"
    assert main(["ict-warmup", "--config", "toy", "--out", str(out)]) == 0
    report = json.loads(capsys.readouterr().out)
    assert np.isfinite(report["final_loss"]) and (out / "retriever.ckpt").exists()
