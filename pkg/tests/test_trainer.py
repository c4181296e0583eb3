from dataclasses import replace

import numpy as np
import pytest

import catr.trainer as trainer_mod
from catr.autodiff import Tape
from catr.dataset import ConfounderSpec, generate_semisynthetic
from catr.kernels import KernelConfig, median_heuristic
from catr.neuralcore import finite_difference_check, zero_network
from catr.trainer import (
    TrainConfig,
    TrainingError,
    batch_objective,
    evaluate_nuisances,
    evaluation_objective,
    init_model,
    load_model,
    save_model,
    token_importance,
    train,
    write_history_csv,
)

SMALL = dict(selector_hidden=(6,), trunk_widths=(8, 6), batch_size=32, learning_rate=5e-3)


def _cfg(**kw):
    return TrainConfig(**{**SMALL, **kw})


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(eta=0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=8)
    with pytest.raises(ValueError):
        TrainConfig(mu=-1)
    with pytest.raises(ValueError):
        TrainConfig(sparsity_kind="l0")


def test_zero_epochs_returns_initial_model(small_data):
    ds, _, _ = small_data
    cfg = _cfg(max_epochs=0)
    model = train(ds, cfg)
    assert model.history == []
    ref = init_model(ds.d, cfg)
    for a, b in zip(model.parameters(), ref.parameters()):
        np.testing.assert_array_equal(a, b)


def test_switched_off_terms_record_zero(small_data):
    ds, _, _ = small_data
    model = train(ds, _cfg(mu=0.0, gamma=0.0, max_epochs=3))
    assert len(model.history) == 3
    assert all(r["hsic"] == 0.0 and r["l_sparse"] == 0.0 for r in model.history)


def test_loss_decomposition(small_data):
    ds, _, _ = small_data
    cfg = _cfg(mu=0.3, gamma=2.0)
    model = init_model(ds.d, cfg)
    idx = np.arange(40)
    u = np.random.default_rng(0).random((40, ds.l_max))
    total, sup, sparse, hsic = batch_objective(
        model, ds.embeddings[idx].astype(float), ds.lengths[idx], ds.treatment[idx].astype(float),
        ds.outcome[idx].astype(float), u, cfg, Tape(),
    )
    assert total.value == pytest.approx(sup.value + 0.3 * sparse.value + 2.0 * hsic.value, abs=1e-10)


def test_full_objective_gradient(small_data):
    ds, _, _ = small_data
    cfg = _cfg(mu=0.1, gamma=1.0)
    model = init_model(ds.d, cfg)
    idx = np.arange(32)
    emb, lengths = ds.embeddings[idx].astype(float), ds.lengths[idx]
    t, y = ds.treatment[idx].astype(float), ds.outcome[idx].astype(float)
    u = np.random.default_rng(1).random((32, ds.l_max))
    # freeze the bandwidth at its value for the initial parameters
    probe = Tape()
    _, _, _, _ = batch_objective(model, emb, lengths, t, y, u, replace(cfg, gamma=0.0), probe)
    from catr.heads import pool_masked, predict, residuals
    from catr.rationalizer import sample_relaxed_mask, score_tokens

    a = score_tokens(model.selector, emb, lengths)
    s = sample_relaxed_mask(a.value, cfg.eta, u=u, mask=a.value > 0)
    r = residuals([v.value for v in predict(model.predictor, pool_masked(emb, s))], t, y)
    fixed = replace(cfg, kernel=KernelConfig(bandwidth_mode="fixed", sigma=median_heuristic(r.rY)))

    def loss(tape):
        return batch_objective(model, emb, lengths, t, y, u, fixed, tape)[0]

    assert finite_difference_check(loss, model.parameters()) <= 1e-4


def test_single_arm_split_rejected(small_data):
    ds, _, _ = small_data
    only_treated = np.flatnonzero(ds.treatment == 1)
    split = (only_treated[:100], np.arange(10), np.arange(10, 20))
    with pytest.raises(ValueError, match="arm"):
        train(ds, _cfg(max_epochs=1), split=split)


def test_non_finite_loss_aborts(small_data, monkeypatch):
    ds, _, _ = small_data

    def bad(*args, **kwargs):
        tape = args[-1]
        x = tape.constant(np.array(np.nan))
        return x, x, 0.0, 0.0

    monkeypatch.setattr(trainer_mod, "batch_objective", bad)
    with pytest.raises(TrainingError, match="epoch 0, batch 0"):
        train(ds, _cfg(max_epochs=2))


def test_training_is_deterministic(small_data):
    ds, _, _ = small_data
    a = train(ds, _cfg(max_epochs=3, seed=5))
    b = train(ds, _cfg(max_epochs=3, seed=5))
    assert a.history == b.history
    for x, y in zip(a.parameters(), b.parameters()):
        np.testing.assert_array_equal(x, y)


def test_early_stopping_semantics(small_data):
    ds, _, _ = small_data
    model = train(ds, _cfg(max_epochs=60, patience=3, learning_rate=0.05))
    vals = [r["val_total"] for r in model.history]
    best = model.best_epoch
    assert vals[best] == min(vals)
    assert len(vals) <= best + 1 + 3
    # restored parameters reproduce the best validation objective
    _, val_idx, _ = model.split
    assert evaluation_objective(model, ds.subset(val_idx))["total"] == pytest.approx(vals[best], rel=1e-12)


def test_training_improves_on_reference_data():
    ds, _ = generate_semisynthetic(ConfounderSpec(), 2000, seed=0)
    cfg = TrainConfig(selector_hidden=(16,), trunk_widths=(32, 16), learning_rate=1e-2, max_epochs=15)
    model = train(ds, cfg)
    _, val_idx, _ = model.split
    initial = evaluation_objective(init_model(ds.d, cfg), ds.subset(val_idx), cfg)["total"]
    assert model.history[model.best_epoch]["val_total"] < initial


def test_nuisance_evaluation(small_data):
    ds, _, _ = small_data
    model = train(ds, _cfg(max_epochs=2))
    sub = ds.subset(np.arange(64))
    a, b = evaluate_nuisances(model, sub), evaluate_nuisances(model, sub)
    np.testing.assert_array_equal(a.g_hat, b.g_hat)
    for i in range(64):
        one = evaluate_nuisances(model, sub.subset([i]))
        assert one.g_hat[0] == pytest.approx(a.g_hat[i], abs=1e-12)
        assert one.q1_hat[0] == pytest.approx(a.q1_hat[i], abs=1e-12)


def test_zero_model_gives_half(small_data):
    ds, _, _ = small_data
    model = init_model(ds.d, _cfg())
    model.predictor.head_g = zero_network(model.predictor.head_g.widths, "sigmoid")
    np.testing.assert_array_equal(evaluate_nuisances(model, ds).g_hat, 0.5)


def test_importance_ties_are_lexicographic(small_data):
    ds, _, _ = small_data
    model = init_model(ds.d, _cfg())
    model.selector = zero_network(model.selector.widths)
    ranked = token_importance(model, ds, 5)
    vocab = sorted({tok for doc in ds.tokens for tok in doc})
    assert [w for w, _ in ranked] == vocab[:5]
    assert all(s == 0.5 for _, s in ranked)


def test_importance_averages_occurrences(small_data, monkeypatch):
    ds, _, _ = small_data
    sub = ds.subset([0])
    scores = np.zeros((1, sub.l_max))
    toks = list(sub.tokens[0])
    toks[0], toks[1] = "alpha", "alpha"
    sub.tokens = [toks]
    scores[0, 0], scores[0, 1] = 0.2, 0.8
    monkeypatch.setattr(trainer_mod, "selection_scores", lambda m, d: scores)
    imp = dict(token_importance(None, sub, None))
    assert imp["alpha"] == pytest.approx(0.5)


def test_wordpieces_are_merged():
    words = trainer_mod._words(["sep", "##sis", "shock"], np.array([0.2, 0.4, 0.9]))
    assert words == [("sepsis", pytest.approx(0.3)), ("shock", 0.9)]


def test_model_round_trip(small_data, tmp_path):
    ds, _, _ = small_data
    model = train(ds, _cfg(max_epochs=1))
    save_model(model, tmp_path / "m.ckpt")
    back = load_model(tmp_path / "m.ckpt", model.config)
    np.testing.assert_allclose(
        evaluate_nuisances(back, ds).g_hat, evaluate_nuisances(model, ds).g_hat, rtol=1e-5
    )
    write_history_csv(model, tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "epoch,l_sup,l_sparse,hsic,total,val_total" and len(lines) == 2
