import numpy as np
import pytest

from hevtem import cycles, predictor
from hevtem.dcr import StyleLabel
from hevtem.errors import LengthMismatch, NonFiniteLoss, ShapeError

MICRO = predictor.PredictorConfig(history_len=8, horizon=3, max_positions=16,
                                  heads=2, key_dim=4, hidden_dim=16,
                                  batch_size=8, epochs=3)
NORM = predictor.Normalization(10.0, 4.0, 0.0, 0.8)


def rand_window(rng, cfg=MICRO, label=StyleLabel.URBAN):
    v = rng.uniform(0.0, 25.0, cfg.history_len)
    a = rng.normal(0.0, 0.8, cfg.history_len)
    return predictor.build_input(v, a, label, NORM, cfg.history_len)


# ---------------------------------------------------------------------------
# input construction
# ---------------------------------------------------------------------------

def test_build_input_one_hot_rows():
    rng = np.random.default_rng(0)
    win = rand_window(rng, label=StyleLabel.URBAN)
    assert np.all(win.x[2] == 1.0)
    assert np.all(win.x[3] == 0.0)
    assert np.all(win.x[4] == 0.0)
    assert np.allclose(win.x[2:].sum(axis=0), 1.0)


def test_build_input_zero_at_mean():
    v = np.full(MICRO.history_len, NORM.v_mean)
    a = np.zeros(MICRO.history_len)
    win = predictor.build_input(v, a, StyleLabel.CITY, NORM, MICRO.history_len)
    assert np.all(win.x[0] == 0.0)


def test_normalization_round_trip():
    v = np.linspace(0.0, 30.0, 60)
    assert np.allclose(NORM.denorm_v(NORM.norm_v(v)), v, atol=1e-12)


def test_build_input_length_mismatch():
    with pytest.raises(LengthMismatch):
        predictor.build_input(np.zeros(5), np.zeros(8), StyleLabel.URBAN,
                              NORM, 8)


# ---------------------------------------------------------------------------
# forward pass structure
# ---------------------------------------------------------------------------

def test_attention_rows_sum_to_one_and_causal_mask():
    rng = np.random.default_rng(1)
    w = predictor.init_weights(MICRO, NORM, seed=3)
    win = rand_window(rng)
    attn = predictor.attention_weights(win, w)
    assert attn.shape == (2, 8, 8)
    assert np.allclose(attn.sum(axis=-1), 1.0, atol=1e-12)
    for h in range(2):
        upper = np.triu_indices(8, k=1)
        assert np.all(attn[h][upper] == 0.0)


def test_causality_bit_exact():
    rng = np.random.default_rng(2)
    w = predictor.init_weights(MICRO, NORM, seed=4)
    win = rand_window(rng)
    base = predictor.encoded_states(win, w)
    for t_perturb in (3, 5, 7):
        x2 = win.x.copy()
        x2[0, t_perturb] += 1.7
        pert = predictor.encoded_states(predictor.InputWindow(x2), w)
        assert np.array_equal(base[:t_perturb], pert[:t_perturb])
        assert not np.array_equal(base[t_perturb], pert[t_perturb])


def test_forward_deterministic_and_clamped():
    rng = np.random.default_rng(3)
    w = predictor.init_weights(MICRO, NORM, seed=5)
    win = rand_window(rng)
    f1 = predictor.forward(win, w)
    f2 = predictor.forward(win, w)
    assert np.array_equal(f1.speeds_m_s, f2.speeds_m_s)
    assert len(f1) == MICRO.horizon
    assert np.all(f1.speeds_m_s >= 0.0)
    assert np.all(np.isfinite(f1.speeds_m_s))


def test_forward_shape_error():
    w = predictor.init_weights(MICRO, NORM, seed=6)
    with pytest.raises(ShapeError):
        predictor.forward(predictor.InputWindow(np.zeros((4, 8))), w)


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------

def test_analytic_gradient_matches_central_differences():
    rng = np.random.default_rng(7)
    w = predictor.init_weights(MICRO, NORM, seed=8)
    x_batch = np.stack([rand_window(rng).x.T for _ in range(4)])
    targets = NORM.norm_v(rng.uniform(0.0, 25.0, (4, MICRO.horizon)))

    _, grads = predictor.loss_and_grads(x_batch, targets, w)

    h = 1e-5
    worst = 0.0
    for name in predictor.PARAM_NAMES:
        arr = w.params[name]
        idx = [np.unravel_index(k, arr.shape)
               for k in rng.choice(arr.size, size=min(6, arr.size),
                                   replace=False)]
        # positional rows beyond the window length get exactly zero gradient
        if name == "pos":
            idx = [(int(rng.integers(0, MICRO.history_len)), j)
                   for _, j in idx]
        ga, gf = [], []
        for ij in idx:
            orig = arr[ij]
            arr[ij] = orig + h
            up, _ = predictor.loss_and_grads(x_batch, targets, w)
            arr[ij] = orig - h
            down, _ = predictor.loss_and_grads(x_batch, targets, w)
            arr[ij] = orig
            gf.append((up - down) / (2 * h))
            ga.append(grads[name][ij])
        ga, gf = np.array(ga), np.array(gf)
        rel = np.linalg.norm(ga - gf) / max(np.linalg.norm(gf), 1e-10)
        worst = max(worst, rel)
    assert worst < 1e-4, worst


# ---------------------------------------------------------------------------
# training behavior
# ---------------------------------------------------------------------------

def constant_speed_dataset(cfg, value=12.0, n=80):
    win_v = np.full(cfg.history_len, value)
    win_a = np.zeros(cfg.history_len)
    norm = predictor.Normalization(value, 1.0, 0.0, 1.0)
    win = predictor.build_input(win_v, win_a, StyleLabel.URBAN, norm,
                                cfg.history_len)
    windows = [win] * n
    targets = np.full((n, cfg.horizon), value)
    return windows, targets, norm


def test_train_constant_speed_converges():
    cfg = predictor.PredictorConfig(history_len=8, horizon=3, max_positions=16,
                                    heads=2, key_dim=4, hidden_dim=16,
                                    batch_size=16, epochs=10,
                                    learning_rate=3e-3)
    windows, targets, norm = constant_speed_dataset(cfg)
    result = predictor.train(windows, targets, cfg, norm, seed=0)
    forecast = predictor.forward(windows[0], result.weights)
    err = predictor.rmse(forecast.speeds_m_s, targets[0])
    assert err < 0.05


def test_train_deterministic():
    cfg = MICRO
    windows, targets, norm = constant_speed_dataset(cfg, n=40)
    a = predictor.train(windows, targets, cfg, norm, seed=1)
    b = predictor.train(windows, targets, cfg, norm, seed=1)
    for name in predictor.PARAM_NAMES:
        assert np.array_equal(a.weights.params[name], b.weights.params[name])
    assert np.array_equal(a.train_loss, b.train_loss)


def test_train_non_finite_loss_aborts():
    cfg = predictor.PredictorConfig(history_len=8, horizon=3, max_positions=16,
                                    heads=2, key_dim=4, hidden_dim=16,
                                    batch_size=8, epochs=5,
                                    learning_rate=1e200)
    windows, targets, norm = constant_speed_dataset(cfg, n=40)
    targets = targets + np.linspace(0, 5, targets.shape[0])[:, None]
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(NonFiniteLoss) as exc:
            predictor.train(windows, targets, cfg, norm, seed=2)
    assert exc.value.epoch >= 0


def proxy_classify(v_his):
    """Mean-speed thresholds standing in for the fitted recognizer."""
    mean = float(np.mean(v_his))
    if mean < 6.0:
        return StyleLabel.CITY
    if mean < 18.0:
        return StyleLabel.URBAN
    return StyleLabel.HIGHWAY


@pytest.fixture(scope="module")
def trained_mixed_model():
    cfg = predictor.PredictorConfig(history_len=30, horizon=5,
                                    max_positions=64, heads=2, key_dim=8,
                                    hidden_dim=32, batch_size=64, epochs=12,
                                    learning_rate=2e-3)
    train_cycles = [cycles.generate_mixed_cycle(500, seed=100 + k)
                    for k in range(6)]
    norm = predictor.fit_normalization(train_cycles)
    windows, targets = predictor.windows_from_speed_cycles(
        train_cycles, proxy_classify, cfg, norm, stride=3)
    result = predictor.train(windows, np.array(targets), cfg, norm, seed=3)
    return cfg, norm, result


def test_train_loss_descends(trained_mixed_model):
    _, _, result = trained_mixed_model
    assert result.train_loss[-1] <= result.train_loss[0] * 1.05


def test_style_sensitivity(trained_mixed_model):
    cfg, norm, result = trained_mixed_model
    v = cycles.generate_cycle("urban", cfg.history_len, seed=9)
    a = np.empty_like(v)
    a[0] = v[0]
    a[1:] = np.diff(v)
    forecasts = {}
    for label in (StyleLabel.URBAN, StyleLabel.HIGHWAY, StyleLabel.CITY):
        win = predictor.build_input(v, a, label, norm, cfg.history_len)
        forecasts[label] = predictor.forward(win, result.weights).speeds_m_s
    assert not np.array_equal(forecasts[StyleLabel.URBAN],
                              forecasts[StyleLabel.HIGHWAY])
    assert not np.array_equal(forecasts[StyleLabel.URBAN],
                              forecasts[StyleLabel.CITY])


def test_trained_not_worse_than_persistence(trained_mixed_model):
    cfg, norm, result = trained_mixed_model
    held = cycles.generate_mixed_cycle(400, seed=777)
    ws, ts = predictor.windows_from_speed_cycles(
        [held], proxy_classify, cfg, norm, stride=5)
    model_preds = [predictor.forward(w, result.weights).speeds_m_s for w in ws]
    pers_preds = [predictor.predict_persistence(
        norm.denorm_v(w.x[0]), cfg.horizon).speeds_m_s for w in ws]
    assert predictor.rmse(model_preds, ts) <= predictor.rmse(pers_preds, ts)


# ---------------------------------------------------------------------------
# baseline, metric, serialization
# ---------------------------------------------------------------------------

def test_persistence_examples():
    f = predictor.predict_persistence([3.0, 7.0, 12.5])
    assert np.array_equal(f.speeds_m_s, np.full(5, 12.5))
    empty = predictor.predict_persistence([4.0], horizon=0)
    assert len(empty) == 0
    with pytest.raises(LengthMismatch):
        predictor.predict_persistence([])


def test_persistence_constant_series_zero_rmse():
    v = np.full(20, 9.0)
    f = predictor.predict_persistence(v)
    assert predictor.rmse(f.speeds_m_s, np.full(5, 9.0)) == 0.0


def test_rmse_examples():
    assert predictor.rmse([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert predictor.rmse([2.0, 3.0], [1.0, 2.0]) == 1.0
    assert predictor.rmse([3.0, 4.0], [0.0, 0.0]) == pytest.approx(
        np.sqrt(12.5), rel=1e-12)
    with pytest.raises(LengthMismatch):
        predictor.rmse([1.0], [1.0, 2.0])


def test_weights_json_round_trip():
    w = predictor.init_weights(MICRO, NORM, seed=11)
    back = predictor.weights_from_json(predictor.weights_to_json(w))
    for name in predictor.PARAM_NAMES:
        assert np.array_equal(back.params[name], w.params[name])
    rng = np.random.default_rng(12)
    win = rand_window(rng)
    assert np.array_equal(predictor.forward(win, w).speeds_m_s,
                          predictor.forward(win, back).speeds_m_s)
