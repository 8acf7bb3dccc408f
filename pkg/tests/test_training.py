import json
import math

import numpy as np
import pytest

from conftest import synthetic_examples
from onestop.inference import generate_question
from onestop.training import (
    ConfigError,
    NonFiniteLossError,
    TrainConfig,
    build_model,
    evaluate_loss,
    load_model,
    run_schedule,
    run_stage,
    save_model,
)
from onestop.transformer import ModelConfig


@pytest.fixture(scope="module")
def corpus():
    return synthetic_examples(12, seed=3)


def small_model(corpus, seed=0, dropout=0.0):
    m = build_model(corpus, seed=seed)
    cfg = ModelConfig.toy(m.cfg.vocab_size, d_model=32, d_ff=64, dropout=dropout)
    return build_model(corpus, cfg, seed=seed)


def quick(**kw):
    base = dict(batch_size=4, epochs=1, base_lr=1e-3, dropout=0.0, seed=0)
    base.update(kw)
    return TrainConfig(**base)


@pytest.mark.parametrize("lam", [1.0, 0.0, 0.5, 0.2])
def test_logged_total_follows_the_weighting(corpus, lam):
    report = run_stage(small_model(corpus), corpus, lam, quick(epochs=2), stage="joint")
    assert len(report.steps) == 6
    for rec in report.steps:
        assert rec["lambda"] == lam
        groups = rec["phi_start"] + rec["phi_end"]
        assert rec["phi_total"] == pytest.approx(lam * rec["phi_lm"] + (1 - lam) * groups, abs=1e-6)
        if lam == 1.0:
            assert abs(rec["phi_total"] - rec["phi_lm"]) <= 1e-6
        if lam == 0.0:
            assert abs(rec["phi_total"] - groups) <= 1e-6
        if lam == 0.5:
            assert abs(rec["phi_total"] - (rec["phi_lm"] + groups) / 2) <= 1e-6


def test_lm_head_gets_no_gradient_at_lambda_zero(corpus):
    model = small_model(corpus)
    lb, _, _ = model.forward_train(corpus[0], 0.0)
    assert lb.phi_lm > 0  # still computed
    lb.objective.backward()
    assert model.lm_bias.grad is None or not np.any(model.lm_bias.grad)
    assert np.any(model.embed.grad)  # the shared embedding still learns through the encoder
    model.zero_grad()
    lb, _, _ = model.forward_train(corpus[0], 0.2)
    lb.objective.backward()
    assert np.any(model.lm_bias.grad)


def test_same_seed_gives_identical_first_step(corpus):
    runs = [run_stage(small_model(corpus, dropout=0.1), corpus, 0.2, quick(dropout=0.1), stage="joint") for _ in range(2)]
    assert runs[0].steps[0] == runs[1].steps[0]


def test_training_without_dropout_is_reproducible(corpus):
    models = []
    for _ in range(2):
        m = small_model(corpus)
        run_schedule(corpus, quick(), model=m)
        models.append(m.state_dict())
    for k in models[0]:
        np.testing.assert_array_equal(models[0][k], models[1][k])


def test_stage_order_is_enforced():
    with pytest.raises(ConfigError):
        TrainConfig(stages=("joint", "qg"))
    with pytest.raises(ConfigError):
        TrainConfig(stages=("qg", "qg"))
    with pytest.raises(ConfigError):
        TrainConfig(stages=("warmup",))
    with pytest.raises(ConfigError):
        TrainConfig(stages=())
    with pytest.raises(ConfigError):
        TrainConfig(lam=1.2)


def test_joint_only_is_plain_joint_training(corpus):
    model, reports = run_schedule(corpus, quick(stages=("joint",)), model=small_model(corpus))
    assert list(reports) == ["joint"] and reports["joint"].lam == 0.2


def test_stages_run_in_order_with_their_weights(corpus, tmp_path):
    cfg = quick(log_path=str(tmp_path / "log.jsonl"), checkpoint_dir=str(tmp_path / "ck"))
    _, reports = run_schedule(corpus, cfg, model=small_model(corpus))
    assert [(s, r.lam) for s, r in reports.items()] == [("qg", 1.0), ("span", 0.0), ("joint", 0.2)]
    lines = [json.loads(line) for line in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert [rec["stage"] for rec in lines] == ["qg"] * 3 + ["span"] * 3 + ["joint"] * 3
    assert set(lines[0]) == {"stage", "step", "phi_lm", "phi_start", "phi_end", "phi_total", "lambda", "lr"}
    assert sorted(p.name for p in (tmp_path / "ck").iterdir()) == ["joint-epoch1.npz", "qg-epoch1.npz", "span-epoch1.npz"]


def test_best_epoch_is_restored(corpus):
    model = small_model(corpus)
    report = run_stage(model, corpus, 0.2, quick(epochs=4, patience=10), stage="joint")
    vals = [e["phi_total"] for e in report.epochs]
    assert report.best_val == min(vals) and report.best_epoch == 1 + int(np.argmin(vals))
    again = evaluate_loss(model, corpus, 0.2)["phi_total"]
    assert again == pytest.approx(report.best_val, rel=1e-5)


def test_patience_stops_early(corpus):
    # a huge learning rate keeps validation loss from improving after the first epoch
    report = run_stage(small_model(corpus), corpus, 0.2, quick(epochs=10, patience=2, base_lr=5.0, clip_norm=1e3),
                       stage="joint")
    assert len(report.epochs) < 10
    assert len(report.epochs) - report.best_epoch == 2


def test_non_finite_loss_names_the_batch(corpus):
    model = small_model(corpus)
    model.w_start.data[:] = np.nan
    with pytest.raises(NonFiniteLossError) as info:
        run_stage(model, corpus, 0.2, quick(), stage="span")
    err = info.value
    assert err.stage == "span" and err.epoch == 1 and err.batch_index == 0 and len(err.ids) == 4


def test_empty_corpus_is_rejected(corpus):
    with pytest.raises(ConfigError):
        run_stage(small_model(corpus), [], 0.2, quick())


def test_denoising_initialisation_runs(corpus):
    _, reports = run_schedule(corpus, quick(init="denoise", stages=("joint",)), model=small_model(corpus))
    assert list(reports) == ["denoise", "joint"] and reports["denoise"].lam == 1.0


def test_save_and_load_model(corpus, tmp_path):
    model = small_model(corpus)
    path = save_model(model, tmp_path / "m.npz")
    loaded = load_model(path)
    assert loaded.vocab.itos == model.vocab.itos and loaded.cfg == model.cfg
    doc = model.vocab.encode(corpus[0].document)
    assert generate_question(doc, loaded).ids == generate_question(doc, model).ids


def test_overfit_corpus_is_memorised(overfit_run):
    examples, model, reports, _ = overfit_run
    joint = reports["joint"]
    assert len(joint.steps) <= 300
    train = evaluate_loss(model, examples, 0.2)
    assert train["phi_total"] < 0.05
    assert train["span_em"] >= 0.95
    assert all(math.isfinite(r["phi_total"]) for r in joint.steps)
