import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from tssr import TSSRRecommender
from tssr.model import load_checkpoint
from tssr.synthgen import SynthConfig, generate


@pytest.fixture(scope="module")
def synth():
    return generate(SynthConfig(n_users=200, n_items=30, n_clusters=3, dim_raw=4, seed=5))


def small(**kw):
    base = dict(d=8, n_heads=2, n_uni_layers=1, n_multi_layers=1, batch_size=64, max_epochs=2,
                learning_rate=1e-3)
    base.update(kw)
    return TSSRRecommender(**base)


def test_params_round_trip():
    rec = small(mode="hybrid", tau=0.2)
    params = rec.get_params()
    assert params["mode"] == "hybrid" and params["tau"] == 0.2
    twin = clone(rec)
    assert twin.get_params() == params
    rec.set_params(d=16)
    assert rec.d == 16 and rec.train_config().d == 16


def test_unfitted_raises():
    with pytest.raises(NotFittedError):
        small().predict([[1, 2, 3]])


def test_fit_predict_transform(synth):
    train = [s[:-1] for s in synth.sequences]
    rec = small(mode="tssr").fit(train, content=synth.content, n_items=30)
    assert rec.n_items_ == 30 and len(rec.history_) == 2
    hist = [s[:-1] for s in synth.sequences[:5]]
    top = rec.predict(hist, k=4)
    scores = rec.decision_function(hist)
    assert top.shape == (5, 4) and scores.shape == (5, 30)
    for r in range(5):
        assert list(top[r]) == list(np.argsort(-scores[r], kind="stable")[:4])
    assert rec.transform(hist).shape == (5, 8)
    assert 0.0 <= rec.score(synth.sequences[:50]) <= 1.0


def test_id_mode_needs_no_content_but_content_mode_does(synth):
    train = [s[:-1] for s in synth.sequences]
    small(mode="id").fit(train, n_items=30)
    with pytest.raises(ValueError):
        small(mode="content").fit(train, n_items=30)


def test_input_validation(synth):
    rec = small(mode="id")
    with pytest.raises(ValueError):
        rec.fit([[0, 1], [2, 40]], n_items=30)
    with pytest.raises(ValueError):
        rec.fit([[0, 1], [2]], n_items=30)
    with pytest.raises(ValueError):
        small(mode="tssr").fit([[0, 1, 2]], content=np.ones((5, 3)), n_items=30)


def test_validation_set_drives_selection(synth):
    train = [s[:-2] for s in synth.sequences]
    val = [s[:-1] for s in synth.sequences]
    rec = small(mode="id", max_epochs=3).fit(train, n_items=30, X_val=val)
    assert rec.history_[0]["val_ndcg10"] is not None
    assert 1 <= rec.best_epoch_ <= 3


def test_save_round_trip(synth, tmp_path):
    rec = small(mode="id").fit([s[:-1] for s in synth.sequences], n_items=30)
    path = str(tmp_path / "m.tssr")
    rec.save(path)
    params, config = load_checkpoint(path)
    assert config["model"]["n_items"] == 30 and config["train"]["mode"] == "id"
    np.testing.assert_allclose(params["M_id"], rec.model_.params["M_id"], rtol=1e-6)
