import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trafficattack import dataset as ds
from trafficattack.autodiff import AdamState, Tensor
from trafficattack.errors import (ConfigurationError, CoverageError, DegenerateDataError, DimensionError,
                                  DivergenceError, FormatError, SingularSystemError)
from trafficattack.model_zoo import (GraphGRUModel, HAModel, ModelBundle, build_adjacency, fit_lr,
                                     load_model, save_model)
from trafficattack.model_zoo.training import TrainConfig, rmse_loss, train_model, train_step

from helpers import START, gradient_descent_lr, model_gradient_error
from helpers import network as _network
from helpers import windows as _windows

# -- adjacency ---------------------------------------------------------------


def test_adjacency_hand_example():
    adj = build_adjacency(_network([[0, 0], [1, 0], [3, 0]]))
    assert adj.sigma_dist ** 2 == pytest.approx(2 / 3, abs=1e-12)
    assert adj.weights[0, 1] == pytest.approx(np.exp(-1.5), abs=1e-9)
    assert adj.weights[0, 1] == pytest.approx(0.22313, abs=1e-5)
    assert adj.weights[1, 2] == pytest.approx(np.exp(-3.0), abs=1e-9)
    np.testing.assert_array_equal(np.diag(adj.weights), 1.0)


def test_adjacency_squared_variant():
    adj = build_adjacency(_network([[0, 0], [1, 0], [3, 0]]), squared=True)
    assert adj.weights[0, 2] == pytest.approx(np.exp(-9 / (2 / 3)), abs=1e-12)


@given(seed=st.integers(0, 2**31), n=st.integers(3, 12))
@settings(max_examples=40, deadline=None)
def test_adjacency_properties(seed, n):
    pts = np.random.default_rng(seed).uniform(0, 20, size=(n, 2))
    w = build_adjacency(_network(pts)).weights
    np.testing.assert_array_equal(w, w.T)
    np.testing.assert_array_equal(np.diag(w), 1.0)
    assert (w >= 0).all() and (w <= 1).all()


def test_adjacency_degenerate_geometry():
    # an equilateral triangle has identical distances, so sigma is 0
    with pytest.raises(DegenerateDataError):
        build_adjacency(_network([[0, 0], [1, 0], [0.5, np.sqrt(3) / 2]]))


# -- linear regression ------------------------------------------------------------


def test_lr_recovers_constructed_weights():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(80, 12, 3))
    y = np.repeat(2.0 * x[:, -1:, :], 12, axis=1)
    model = fit_lr(_windows(x, y))
    expected = np.zeros((12, 12))
    expected[:, -1] = 2.0
    for j in range(3):
        np.testing.assert_allclose(model.weights[j], expected, atol=1e-9)
    assert np.sqrt(((model.predict(x) - y) ** 2).mean()) < 1e-6


def test_lr_constant_series_gives_intercept_only_fit():
    x = np.full((30, 12, 2), 7.0)
    model = fit_lr(_windows(x, x))
    np.testing.assert_allclose(model.predict(np.full((2, 12, 2), 7.0)), 7.0)
    assert not model.weights.any()


def test_lr_rank_deficiency_raises():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(8, 12, 1))  # fewer samples than coefficients
    with pytest.raises(SingularSystemError):
        fit_lr(_windows(x, x))
    col = rng.normal(size=(40, 1, 1))
    with pytest.raises(SingularSystemError):
        fit_lr(_windows(np.repeat(col, 12, axis=1), np.repeat(col, 12, axis=1)))


@given(a=st.floats(-2, 2), seed=st.integers(0, 1000))
@settings(max_examples=30, deadline=None)
def test_lr_is_affine(a, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(40, 12, 2))
    model = fit_lr(_windows(x, rng.normal(size=(40, 12, 2))))
    x1, x2 = rng.normal(size=(3, 12, 2)), rng.normal(size=(3, 12, 2))
    lhs = model.predict(a * x1 + (1 - a) * x2)
    rhs = a * model.predict(x1) + (1 - a) * model.predict(x2)
    np.testing.assert_allclose(lhs, rhs, atol=1e-8)


def test_lr_matches_gradient_descent_oracle():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(200, 12, 2))
    true_w = rng.normal(size=(2, 12, 12)) * 0.3
    y = np.einsum("bin,noi->bon", x, true_w) + 0.5 + 0.1 * rng.normal(size=(200, 12, 2))
    closed = fit_lr(_windows(x, y)).predict(x)
    iterative = gradient_descent_lr(x, y)
    assert np.sqrt(((closed - iterative) ** 2).mean()) < 1e-4


# -- historical average -----------------------------------------------------------


def _history(values):
    values = np.asarray(values, dtype=np.float64).reshape(-1, 1)
    return ds.FlowSeries(values, START, ("s0",))


def test_ha_hand_mean():
    values = np.zeros(5 * 168)
    hour = 4 * 168 + 5
    for k, v in zip(range(1, 5), [100, 110, 90, 100]):
        values[hour - 168 * k] = v
    model = HAModel(_history(values))
    t0 = START + (hour - 12)
    out = model.predict(np.zeros((1, 12, 1)), np.array([t0]))
    assert out[0, 0, 0] == 100.0


def test_ha_constant_history_and_input_independence():
    model = HAModel(_history(np.full(6 * 168, 42.0)))
    times = START + np.array([4 * 168, 4 * 168 + 17, 5 * 168])
    rng = np.random.default_rng(0)
    a = model.predict(rng.uniform(0, 900, size=(3, 12, 1)), times)
    b = model.predict(rng.uniform(0, 900, size=(3, 12, 1)), times)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(a, 42.0)


def test_ha_coverage():
    model = HAModel(_history(np.ones(6 * 168)))
    with pytest.raises(CoverageError):
        model.predict(np.zeros((1, 12, 1)), np.array([START + 100]))
    relaxed = HAModel(_history(np.arange(6 * 168.0)), min_periods=1)
    out = relaxed.predict(np.zeros((1, 12, 1)), np.array([START + 200]))
    # target hour 212 has one earlier week, hour 44
    assert out[0, 0, 0] == 44.0


# -- graph GRU ------------------------------------------------------------------


def _gru(variant, n=3, hidden=4, seed=0, **kw):
    rng = np.random.default_rng(seed + 100)
    adj = build_adjacency(_network(rng.uniform(0, 20, size=(n, 2)))).weights
    return GraphGRUModel(n, hidden, variant=variant, adjacency=adj if variant == "fixed" else None,
                         seed=seed, **kw)


@pytest.mark.parametrize("variant", ["fixed", "adaptive"])
@pytest.mark.parametrize("batch", [1, 5])
def test_gru_output_shape(variant, batch):
    model = _gru(variant, n=4, hidden=8)
    assert model.predict(np.zeros((batch, 12, 4))).shape == (batch, 12, 4)
    with pytest.raises(DimensionError):
        model.predict(np.zeros((batch, 12, 5)))


@pytest.mark.parametrize("variant", ["fixed", "adaptive"])
@pytest.mark.parametrize("seed", range(3))
def test_gru_gradients(variant, seed):
    model = _gru(variant, seed=seed)
    x = np.random.default_rng(seed).normal(size=(2, 12, 3))
    assert model_gradient_error(model, x, np.random.default_rng(seed + 50)) <= 1e-4


@pytest.mark.parametrize("variant", ["fixed", "adaptive"])
def test_gru_zero_fixed_point(variant):
    model = _gru(variant, n=4, hidden=8, init="zeros")
    np.testing.assert_array_equal(model.predict(np.zeros((3, 12, 4))), 0.0)


def test_adaptive_adjacency_rows_sum_to_one():
    model = _gru("adaptive", n=6, hidden=4, seed=3)
    np.testing.assert_allclose(model.effective_adjacency().sum(axis=1), 1.0, atol=1e-12)
    fixed = _gru("fixed", n=6, hidden=4, seed=3)
    np.testing.assert_allclose(fixed.effective_adjacency().sum(axis=1), 1.0, atol=1e-12)


def test_gru_parameter_count():
    n, h = 5, 8
    fixed = _gru("fixed", n=n, hidden=h)
    expected = 2 * (2 * n * 3 * h + h * 3 * h + 3 * h) + h * n + n
    assert fixed.n_parameters() == expected
    assert _gru("adaptive", n=n, hidden=h).n_parameters() == expected + n * n


def _clean_batch(size, stride=7):
    series, _ = ds.generate_synthetic(5, 10, seed=0, noise_scale=0.0)
    w = ds.make_windows(series)
    norm = ds.fit_normalizer(w.inputs)
    return norm.apply(w.inputs[:size * stride:stride]), norm.apply(w.targets[:size * stride:stride])


@pytest.mark.parametrize("variant", ["fixed", "adaptive"])
def test_single_adam_step_descends(variant):
    x, y = _clean_batch(24, stride=1)
    model = _gru(variant, n=5, hidden=32)
    before = rmse_loss(model.forward(Tensor(x)), y).item()
    train_step(model, x, y, AdamState.for_params(model.parameters()), 0.005)
    assert rmse_loss(model.forward(Tensor(x)), y).item() < before


@pytest.mark.slow
@pytest.mark.parametrize("variant", ["fixed", "adaptive"])
def test_overfit_single_batch(variant):
    x, y = _clean_batch(8)
    model = _gru(variant, n=5, hidden=32)
    state = AdamState.for_params(model.parameters())
    for _ in range(200):
        train_step(model, x, y, state, 0.005)
    assert np.sqrt(((model.predict(x) - y) ** 2).mean()) < 0.05 * y.std()


def test_training_is_deterministic_and_frozen_predict_is_pure():
    x, y = _clean_batch(30, stride=1)
    curves, preds = [], []
    for _ in range(2):
        model = _gru("adaptive", n=5, hidden=8, seed=4)
        curves.append(train_model(model, x, y, TrainConfig(batch_size=8, epochs=3, seed=9)).loss_curve)
        preds.append(model.predict(x))
        np.testing.assert_array_equal(model.predict(x), preds[-1])
    assert curves[0] == curves[1]
    np.testing.assert_array_equal(preds[0], preds[1])


def test_training_divergence_names_epoch():
    x, y = _clean_batch(8, stride=1)
    model = _gru("fixed", n=5, hidden=8)
    with pytest.raises(DivergenceError, match="epoch 0"), np.errstate(all="ignore"):
        train_model(model, x, y * 1e300, TrainConfig(batch_size=8, epochs=2))
    with pytest.raises(ConfigurationError):
        TrainConfig(learning_rate=0.0)


# -- save / load ------------------------------------------------------------------


def _all_kinds():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(40, 12, 3))
    lr = fit_lr(_windows(x, rng.normal(size=(40, 12, 3))), model_id="lr-test")
    series, _ = ds.generate_synthetic(3, 36, seed=1)
    ha = HAModel(series, model_id="ha-test")
    norm = ds.Normalizer(500.0, 120.0)
    return {
        "gru-fixed": ModelBundle(_gru("fixed"), norm),
        "gru-adaptive": ModelBundle(_gru("adaptive", seed=2), norm),
        "lr": ModelBundle(lr, norm),
        "ha": ModelBundle(ha, None),
    }


@pytest.mark.parametrize("name", ["gru-fixed", "gru-adaptive", "lr", "ha"])
def test_save_load_round_trip(tmp_path, name):
    bundle = _all_kinds()[name]
    path = save_model(tmp_path / f"{name}.npz", bundle, extra={"note": "x"})
    back = load_model(path)
    assert back.model_id == bundle.model_id
    assert back.normalizer == bundle.normalizer
    probe = np.random.default_rng(3).uniform(0, 1000, size=(4, 12, 3))
    times = START + 5 * 168 + np.arange(4)
    np.testing.assert_array_equal(back.predict_raw(probe, times), bundle.predict_raw(probe, times))


def test_truncated_or_foreign_file(tmp_path):
    path = save_model(tmp_path / "m.npz", _all_kinds()["gru-fixed"])
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(FormatError):
        load_model(path)
    other = tmp_path / "other.npz"
    np.savez(other, meta=np.array('{"format": "something-else"}'))
    with pytest.raises(FormatError):
        load_model(other)
    with pytest.raises(FormatError):
        load_model(tmp_path / "missing.npz")


def test_version_mismatch(tmp_path):
    import json
    path = save_model(tmp_path / "m.npz", _all_kinds()["lr"])
    with np.load(path) as z:
        arrays = {k: z[k] for k in z.files}
    meta = json.loads(str(arrays.pop("meta")))
    meta["version"] = 99
    np.savez(path, meta=np.array(json.dumps(meta)), **arrays)
    with pytest.raises(FormatError, match="version"):
        load_model(path)
