import math

import numpy as np
import pytest

from tssr import numerics as nx
from tssr.data import ContentTable, leave_one_out_split
from tssr.data import InteractionSequence
from tssr.model import as_leaves, frozen_rows, init_params
from tssr.synthgen import SynthConfig, generate
from tssr.training import OptimizerState, TrainConfig, adam_step, compute_losses, train

from conftest import tiny_batch, tiny_config, tiny_content


def test_adam_first_step():
    p = {"w": np.array([1.0])}
    adam_step(p, {"w": np.array([2.0])}, OptimizerState(), lr=0.1)
    assert abs(p["w"][0] - (1.0 - 0.1 * 2 / (2 + 1e-8))) < 1e-15


def test_adam_zero_gradient_and_zero_lr_are_fixed_points():
    p = {"w": np.array([1.0, -2.0])}
    adam_step(p, {"w": np.zeros(2)}, OptimizerState(), lr=0.1)
    assert p["w"].tolist() == [1.0, -2.0]
    adam_step(p, {"w": np.array([3.0, 1.0])}, OptimizerState(), lr=0.0)
    assert p["w"].tolist() == [1.0, -2.0]


def test_adam_two_steps_match_recurrence():
    b1, b2, eps, lr, g = 0.9, 0.999, 1e-8, 0.01, 0.5
    p = {"w": np.array([0.0])}
    state = OptimizerState()
    w = m = v = 0.0
    for t in (1, 2):
        adam_step(p, {"w": np.array([g])}, state, lr=lr)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    assert abs(p["w"][0] - w) < 1e-15


def test_adam_non_finite_gradient_names_tensor():
    with pytest.raises(nx.NonFiniteError, match="emb"):
        adam_step({"emb": np.zeros(2)}, {"emb": np.array([np.nan, 0.0])}, OptimizerState())


def test_pad_rows_stay_zero_after_adam():
    cfg = tiny_config()
    params = init_params(cfg, tiny_content(cfg), seed=0)
    batch, _ = tiny_batch(cfg)
    state = OptimizerState()
    contrast = TrainConfig(mode="tssr").contrast()
    for _ in range(5):
        P = as_leaves(params, list(params))
        _, total, _ = compute_losses(batch, P, cfg, contrast)
        total.backward()
        # the PAD row gets no gradient anyway; inject one to show it is dropped
        grads = {k: P[k].grad for k in params}
        grads["M_id"][cfg.pad] = 1.0
        adam_step(params, grads, state, lr=0.01, frozen=frozen_rows(cfg))
    assert np.all(params["M_id"][cfg.pad] == 0) and np.all(params["content_rows"][cfg.pad] == 0)


def test_contrastive_losses_rejected_outside_tssr():
    cfg = tiny_config("id")
    params = init_params(cfg, seed=0)
    batch, _ = tiny_batch(cfg)
    from tssr.objectives import ContrastConfig
    with pytest.raises(ValueError):
        compute_losses(batch, as_leaves(params), cfg, ContrastConfig())


@pytest.fixture(scope="module")
def small_synth():
    data = generate(SynthConfig(n_users=300, n_items=40, n_clusters=5, dim_raw=8, seed=3))
    seqs = [InteractionSequence(str(u), list(s)) for u, s in enumerate(data.sequences)]
    split = leave_one_out_split(seqs, n_items=40)
    table = ContentTable(8, np.vstack([data.content, np.zeros((1, 8))]))
    return split, table


def small_config(**kw):
    base = dict(d=16, n_heads=2, n_uni_layers=1, n_multi_layers=1, batch_size=64, max_epochs=3,
                learning_rate=1e-3, seed=5)
    base.update(kw)
    return TrainConfig(**base)


def test_id_only_history_has_zero_contrastive_terms(small_synth):
    split, _ = small_synth
    result = train(small_config(mode="id", lambda1=0, lambda2=0), split)
    assert all(r["L_u"] == 0 and r["L_i"] == 0 for r in result.history)
    assert result.model_config.mode.value == "id"


def test_same_seed_same_history_and_params(small_synth):
    split, table = small_synth
    cfg = small_config(mode="tssr", dtype="float64", max_epochs=2)
    a = train(cfg, split, table)
    b = train(cfg, split, table)
    strip = lambda h: [{k: v for k, v in r.items() if k != "wall_ms"} for r in h]
    assert strip(a.history) == strip(b.history)
    for k in a.params:
        assert np.array_equal(a.params[k], b.params[k])
    c = train(small_config(mode="tssr", dtype="float64", max_epochs=2, seed=6), split, table)
    assert strip(c.history) != strip(a.history)


def test_total_loss_decreases_over_first_epochs(small_synth):
    split, table = small_synth
    result = train(small_config(mode="tssr", max_epochs=5, patience=100), split, table)
    totals = [r["total"] for r in result.history]
    assert len(totals) == 5 and all(b < a for a, b in zip(totals, totals[1:]))
    assert np.all(result.params["M_id"][-1] == 0)


def test_patience_stops_and_keeps_best_epoch(small_synth):
    split, _ = small_synth
    # lr 0 leaves the model unchanged, so validation never improves after epoch 1
    result = train(small_config(mode="id", learning_rate=0.0, max_epochs=50, patience=3), split)
    assert len(result.history) == 4 and result.best_epoch == 1


def test_train_fraction_subsamples(small_synth):
    split, _ = small_synth
    full = train(small_config(mode="id", max_epochs=1, batch_size=1000), split)
    part = train(small_config(mode="id", max_epochs=1, batch_size=1000, train_fraction=0.5), split)
    assert full.history[0]["total"] != part.history[0]["total"]


def test_mode_requires_content(small_synth):
    split, _ = small_synth
    with pytest.raises(ValueError):
        train(small_config(mode="content"), split)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(tau=-1)
    assert TrainConfig(mode="hybrid").contrast().lambda1 == 0
    assert TrainConfig().learning_rate == 1e-4 and TrainConfig().batch_size == 256
