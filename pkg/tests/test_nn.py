import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conservattack import nn
from conservattack.exceptions import ConfigError, DataError, ModelFormatError


def _dense_bn_count(d, hidden=nn.HIDDEN_STACK):
    total, prev = 0, d
    for w in hidden:
        total += prev * w + w + 2 * w
        prev = w
    return total + prev + 1


@pytest.mark.parametrize("arch,expected", [("higgs", 42_163), ("ttww", 59_263)])
def test_trainable_parameter_counts_match_published(arch, expected):
    assert nn.build(arch).trainable_param_count == expected
    assert _dense_bn_count(nn.ARCHITECTURES[arch]) == expected


def test_donut_architecture():
    m = nn.build("donut")
    assert m.input_dim == 2 and m.trainable_param_count == _dense_bn_count(2)


def test_build_rejects_unknown_and_bad_chains():
    with pytest.raises(ConfigError):
        nn.build("resnet")
    with pytest.raises(ConfigError):
        nn.MlpModel([nn.LayerSpec("dense", 3, 2), nn.LayerSpec("dense", 3, 1), nn.LayerSpec("sigmoid")])
    with pytest.raises(ConfigError):
        nn.MlpModel([nn.LayerSpec("dense", 3, 2)])
    with pytest.raises(ConfigError):
        nn.LayerSpec("conv")


def test_same_seed_same_weights():
    a, b = nn.build("donut", seed=4), nn.build("donut", seed=4)
    assert np.array_equal(a.flat_parameters(), b.flat_parameters())
    assert not np.array_equal(a.flat_parameters(), nn.build("donut", seed=5).flat_parameters())


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 1000))
def test_input_gradient_matches_finite_differences(seed):
    r = np.random.default_rng(seed)
    model = nn.MlpModel(nn.stack_spec(4, hidden=(6, 5)), seed=seed)
    # give batch norm non-trivial running statistics
    model.logits(r.normal(size=(64, 4)), training=True)
    x, y = r.normal(size=4), int(r.integers(2))
    g = nn.input_gradient(model, x, y)

    def loss(v):
        z = model.logits(v[None, :])[0]
        return np.logaddexp(0.0, z) - y * z

    h = 1e-6
    fd = np.array([(loss(x + h * e) - loss(x - h * e)) / (2 * h) for e in np.eye(4)])
    assert np.allclose(g, fd, rtol=1e-5, atol=1e-7)


def test_training_reduces_loss_and_separates_donut(small_donut):
    tr, va = small_donut.split_subset("train"), small_donut.split_subset("val")
    model, hist = nn.train(nn.build("donut", seed=0), tr.features, tr.labels,
                           nn.TrainConfig(epochs=15, seed=0), va.features, va.labels)
    assert hist.train_loss[-1] < hist.train_loss[0]
    _, labels = nn.predict(model, va.features)
    assert np.mean(labels == va.labels) > 0.85


def test_training_is_deterministic(small_donut):
    tr = small_donut.split_subset("train")
    cfg = nn.TrainConfig(epochs=3, seed=2)
    a, _ = nn.train(nn.build("donut", seed=2), tr.features, tr.labels, cfg)
    b, _ = nn.train(nn.build("donut", seed=2), tr.features, tr.labels, cfg)
    assert np.array_equal(a.flat_parameters(), b.flat_parameters())


def test_early_stopping_restores_best(small_donut):
    tr, va = small_donut.split_subset("train"), small_donut.split_subset("val")
    _, hist = nn.train(nn.build("donut", seed=1), tr.features, tr.labels,
                       nn.TrainConfig(epochs=200, early_stop_patience=2, learning_rate=1e-2, seed=1),
                       va.features, va.labels)
    assert hist.stopped_early
    assert hist.best_epoch == int(np.argmin(hist.val_loss))


def test_train_config_validation():
    with pytest.raises(ConfigError):
        nn.TrainConfig(learning_rate=0)
    with pytest.raises(ConfigError):
        nn.TrainConfig(optimizer="rmsprop")
    with pytest.raises(ConfigError, match="unknown"):
        nn.TrainConfig.from_dict({"epochs": 2, "lr": 0.1})


def test_predict_rejects_wrong_width(tiny_model):
    with pytest.raises(DataError):
        nn.predict(tiny_model, np.zeros((2, 5)))


def test_predict_threshold_semantics(tiny_model):
    X = np.random.default_rng(0).normal(size=(20, 3))
    scores, labels = nn.predict(tiny_model, X, threshold=float(np.median(nn.predict(tiny_model, X)[0])))
    assert np.all((scores >= np.median(scores)) == labels.astype(bool))


def test_save_load_roundtrip(tmp_path, donut_model):
    path = nn.save(donut_model, tmp_path / "m.json")
    back = nn.load(path, input_dim=2)
    X = np.random.default_rng(0).uniform(size=(50, 2))
    assert np.array_equal(nn.predict(back, X)[0], nn.predict(donut_model, X)[0])


def test_load_detects_corruption(tmp_path, tiny_model):
    path = nn.save(tiny_model, tmp_path / "m.json")
    payload = path.with_suffix(".bin")
    raw = bytearray(payload.read_bytes())
    raw[5] ^= 0xFF
    payload.write_bytes(bytes(raw))
    with pytest.raises(ModelFormatError, match="corrupt"):
        nn.load(path)
    payload.write_bytes(bytes(raw[:-8]))
    with pytest.raises(ModelFormatError):
        nn.load(path)


def test_load_rejects_bad_manifest(tmp_path, tiny_model):
    path = nn.save(tiny_model, tmp_path / "m.json")
    with pytest.raises(ModelFormatError, match="inputs"):
        nn.load(path, input_dim=7)
    meta = json.loads(path.read_text())
    meta["format_version"] = 99
    path.write_text(json.dumps(meta))
    with pytest.raises(ModelFormatError, match="version"):
        nn.load(path)
    path.write_text("{not json")
    with pytest.raises(ModelFormatError):
        nn.load(path)
    path.with_suffix(".bin").unlink()
    with pytest.raises(ModelFormatError):
        nn.load(tmp_path / "missing.json")


def test_classifier_facade(small_donut):
    tr = small_donut.split_subset("train")
    clf = nn.MLPBinaryClassifier(architecture="donut", max_epochs=5, random_state=0).fit(tr.features, tr.labels)
    proba = clf.predict_proba(tr.features[:10])
    assert proba.shape == (10, 2) and np.allclose(proba.sum(1), 1.0)
    assert set(np.unique(clf.predict(tr.features))) <= {0, 1}
    assert clf.get_params()["architecture"] == "donut"
    with pytest.raises(DataError):
        nn.MLPBinaryClassifier().fit(np.zeros((4, 2)), np.array([0, 1, 2, 1]))


def _logistic(d, seed=0):
    return nn.MlpModel(nn.stack_spec(d, hidden=()), seed=seed)


def test_logistic_gradient_closed_form():
    m = _logistic(3, seed=2)
    W, b = m.params[0]["W"][0], m.params[0]["b"][0]
    x = np.array([0.3, -1.2, 2.0])
    for y in (0, 1):
        s = 1 / (1 + np.exp(-(W @ x + b)))
        assert np.allclose(nn.input_gradient(m, x, y), (s - y) * W, rtol=1e-12, atol=0)


def test_tied_duplicate_features_get_equal_gradients():
    m = _logistic(2)
    m.params[0]["W"][:] = 0.7
    g = nn.input_gradient(m, np.array([0.4, 0.4]), 1)
    assert g[0] == g[1]


def test_zero_weights_score_one_half_and_label_one(tiny_model):
    m = tiny_model.copy()
    m.load_flat_parameters(np.zeros_like(m.flat_parameters()))
    # batch norm with zero running variance still maps zeros to zero
    scores, labels = nn.predict(m, np.random.default_rng(0).normal(size=(5, 3)))
    assert np.all(scores == 0.5) and np.all(labels == 1)


def test_batch_of_one_equals_row_of_batch(donut_model):
    X = np.random.default_rng(1).uniform(size=(30, 2))
    full = nn.predict(donut_model, X)[0]
    # per-row up to BLAS kernel rounding; repeated calls are bitwise stable
    single = np.array([nn.predict(donut_model, X[i:i + 1])[0][0] for i in range(30)])
    assert np.allclose(single, full, rtol=0, atol=1e-12)
    assert np.array_equal(nn.predict(donut_model, X)[0], full)


def test_zero_epochs_returns_model_unchanged(small_donut):
    tr = small_donut.split_subset("train")
    m = nn.build("donut", seed=3)
    before = m.flat_parameters()
    out, _ = nn.train(m, tr.features, tr.labels, nn.TrainConfig(epochs=0))
    assert np.array_equal(out.flat_parameters(), before)


def test_full_batch_gd_on_convex_fit_is_monotone():
    r = np.random.default_rng(0)
    X = r.normal(size=(200, 3))
    y = (X @ [1.0, -2.0, 0.5] + 0.3 * r.normal(size=200) > 0).astype(int)
    _, hist = nn.train(_logistic(3), X, y, nn.TrainConfig(epochs=50, batch_size=200, optimizer="sgd",
                                                           learning_rate=0.1))
    assert np.all(np.diff(hist.train_loss) <= 1e-12)
