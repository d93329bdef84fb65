from dataclasses import replace

import numpy as np
import pytest

import predictor
from predictor import (PARAM_ORDER, WEIGHT_KEYS, EDModel, LstmCell, TrainConfig, TrainingError, bank_pairs,
                       cell_step, compute_loss, init_params, loss_and_grads, pair_seed, predict_batch,
                       predict_sequence, train, train_bank)
from quantizer import one_hot_array


def _one_hot_batch(rng, batch, length, v):
    return one_hot_array(rng.integers(0, v, size=(batch, length)), v)


def _model(rng, v=6, n_h=5, l_i=4, l_o=3):
    return EDModel(params=init_params(v, n_h, rng), v=v, n_h=n_h, l_i=l_i, l_o=l_o)


# ============ Cell ============

def test_cell_step_with_zero_weights():
    n_h, v = 3, 4
    cell = LstmCell(np.zeros((4 * n_h, v)), np.zeros((4 * n_h, n_h)), np.zeros(4 * n_h))
    c_prev = np.array([1.0, -2.0, 0.5])
    h, c = cell_step(cell, np.ones(v), np.zeros(n_h), c_prev)
    # all gates at 0.5, candidate 0
    np.testing.assert_allclose(c, 0.5 * c_prev)
    np.testing.assert_allclose(h, 0.5 * np.tanh(0.5 * c_prev))


def test_cell_step_shape_errors():
    cell = LstmCell(np.zeros((8, 3)), np.zeros((8, 2)), np.zeros(8))
    with pytest.raises(ValueError, match="features"):
        cell_step(cell, np.zeros(4), np.zeros(2), np.zeros(2))
    with pytest.raises(ValueError, match="state size"):
        cell_step(cell, np.zeros(3), np.zeros(3), np.zeros(2))


def test_cell_step_matches_gate_formulas(rng):
    n_h, v = 4, 5
    W = rng.normal(size=(4 * n_h, v))
    U = rng.normal(size=(4 * n_h, n_h))
    b = rng.normal(size=4 * n_h)
    x = rng.normal(size=v)
    h_prev = rng.uniform(-1, 1, size=n_h)
    c_prev = rng.normal(size=n_h)

    h, c = cell_step(LstmCell(W, U, b), x, h_prev, c_prev)

    expected_h, expected_c = np.empty(n_h), np.empty(n_h)
    for unit in range(n_h):
        def gate(block):
            row = block * n_h + unit
            return sum(W[row, a] * x[a] for a in range(v)) + sum(U[row, a] * h_prev[a] for a in range(n_h)) + b[row]
        i = 1.0 / (1.0 + np.exp(-gate(0)))
        f = 1.0 / (1.0 + np.exp(-gate(1)))
        g = np.tanh(gate(2))
        o = 1.0 / (1.0 + np.exp(-gate(3)))
        expected_c[unit] = f * c_prev[unit] + i * g
        expected_h[unit] = o * np.tanh(expected_c[unit])
    np.testing.assert_allclose(c, expected_c, rtol=0, atol=1e-12)
    np.testing.assert_allclose(h, expected_h, rtol=0, atol=1e-12)


def test_hidden_state_stays_in_unit_range(rng):
    n_h, v = 6, 4
    cell = LstmCell(50 * rng.normal(size=(4 * n_h, v)), 50 * rng.normal(size=(4 * n_h, n_h)),
                    50 * rng.normal(size=4 * n_h))
    h, c = np.zeros(n_h), np.zeros(n_h)
    for _ in range(30):
        h, c = cell_step(cell, rng.normal(size=v), h, c)
        assert np.all(np.abs(h) <= 1.0)


def test_cell_rejects_non_finite():
    W = np.zeros((8, 3))
    W[0, 0] = np.nan
    with pytest.raises(ValueError, match="non-finite"):
        LstmCell(W, np.zeros((8, 2)), np.zeros(8))


# ============ Gradients ============

@pytest.mark.parametrize("include_biases", [False, True])
def test_bptt_gradients_match_finite_differences(include_biases):
    rng = np.random.default_rng(42)
    v, n_h, l_i, l_o, lam = 8, 4, 3, 3, 0.001
    params = init_params(v, n_h, rng)
    for key in PARAM_ORDER:
        # keep the l1 kink out of reach of the finite-difference step
        tiny = np.abs(params[key]) < 1e-3
        params[key][tiny] = 1e-3
    inputs = _one_hot_batch(rng, 2, l_i, v)
    targets = _one_hot_batch(rng, 2, l_o, v)

    def objective(p):
        q, q_l1, _ = loss_and_grads(p, inputs, targets, lam, True, include_biases)
        return q + q_l1

    _, _, grads = loss_and_grads(params, inputs, targets, lam, True, include_biases)
    step = 1e-5
    worst = 0.0
    for key in PARAM_ORDER:
        flat = params[key].reshape(-1)
        for idx in range(flat.size):
            original = flat[idx]
            flat[idx] = original + step
            plus = objective(params)
            flat[idx] = original - step
            minus = objective(params)
            flat[idx] = original
            numeric = (plus - minus) / (2 * step)
            analytic = grads[key].reshape(-1)[idx]
            worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-4))
    assert worst <= 1e-4


def test_l1_term_only_counts_weights_by_default(rng):
    params = init_params(4, 3, rng)
    inputs = _one_hot_batch(rng, 1, 2, 4)
    targets = _one_hot_batch(rng, 1, 2, 4)
    _, q_l1, _ = loss_and_grads(params, inputs, targets, 0.5, True, False)
    weights = sum(np.abs(params[k]).sum() for k in ('enc_W', 'enc_U', 'dec_W', 'dec_U', 'dense_W'))
    assert q_l1 == pytest.approx(0.5 * weights)
    _, q_l1_all, _ = loss_and_grads(params, inputs, targets, 0.5, True, True)
    assert q_l1_all == pytest.approx(0.5 * sum(np.abs(p).sum() for p in params.values()))


# ============ Loss & Inference ============

def test_uniform_prediction_loss_is_log_v(rng):
    model = _model(rng, v=8)
    probs = np.full((2, 3, 8), 1 / 8)
    targets = _one_hot_batch(rng, 2, 3, 8)
    q, _ = compute_loss(model, probs, targets, lam=0.0)
    assert q == pytest.approx(np.log(8))


def test_loss_rejects_unnormalised_probs(rng):
    model = _model(rng, v=4)
    with pytest.raises(ValueError, match="not normalised"):
        compute_loss(model, np.full((1, 3, 4), 0.3), _one_hot_batch(rng, 1, 3, 4), lam=0.0)


def test_loss_clamps_zero_probability(rng):
    model = _model(rng, v=2)
    probs = np.array([[[1.0, 0.0]]])
    targets = np.array([[[0.0, 1.0]]])
    q, _ = compute_loss(model, probs, targets, lam=0.0)
    assert np.isfinite(q) and q == pytest.approx(-np.log(1e-12))


def test_predict_batch_rows_are_distributions(rng):
    model = _model(rng)
    probs, levels = predict_batch(model, _one_hot_batch(rng, 5, 4, 6))
    assert probs.shape == (5, 3, 6) and levels.shape == (5, 3)
    np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-6)
    np.testing.assert_array_equal(levels, np.argmax(probs, axis=-1))


def test_predict_sequence_matches_batch(rng):
    model = _model(rng)
    histories = _one_hot_batch(rng, 3, 4, 6)
    _, batch_levels = predict_batch(model, histories)
    for k in range(3):
        _, levels = predict_sequence(model, histories[k])
        np.testing.assert_array_equal(levels, batch_levels[k])


def test_free_run_feeds_back_its_own_argmax(rng):
    v, n_h, l_i, l_o = 6, 5, 4, 3
    model = _model(rng, v=v, n_h=n_h, l_i=l_i, l_o=l_o)
    history = _one_hot_batch(rng, 1, l_i, v)[0]
    p = model.params
    encoder = LstmCell(p['enc_W'], p['enc_U'], p['enc_b'])
    decoder = LstmCell(p['dec_W'], p['dec_U'], p['dec_b'])

    h, c = np.zeros(n_h), np.zeros(n_h)
    for x in history:
        h, c = cell_step(encoder, x, h, c)
    x = np.zeros(v)
    replayed, replayed_levels = [], []
    for _ in range(l_o):
        h, c = cell_step(decoder, x, h, c)
        logits = p['dense_W'] @ h + p['dense_b']
        probs = np.exp(logits - logits.max())
        probs /= probs.sum()
        replayed.append(probs)
        replayed_levels.append(int(np.argmax(probs)))
        x = np.eye(v)[replayed_levels[-1]]

    probs, levels = predict_sequence(model, history)
    np.testing.assert_allclose(probs, np.array(replayed), rtol=0, atol=1e-12)
    assert levels.tolist() == replayed_levels


def test_untaught_objective_scores_free_run_predictions(rng):
    model = _model(rng)
    inputs = _one_hot_batch(rng, 4, 4, 6)
    targets = _one_hot_batch(rng, 4, 3, 6)
    q, _, _ = loss_and_grads(model.params, inputs, targets, 0.0, teacher_forcing=False)
    probs, _ = predict_batch(model, inputs)
    expected, _ = compute_loss(model, probs, targets, lam=0.0)
    assert q == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize("level", [0, 3, 5])
def test_dominant_output_bias_fixes_every_level(rng, level):
    params = {key: np.zeros(shape) for key, shape in predictor.param_shapes(6, 4).items()}
    params['dense_b'][level] = 10.0
    model = EDModel(params=params, v=6, n_h=4, l_i=4, l_o=5)
    _, levels = predict_batch(model, _one_hot_batch(rng, 7, 4, 6))
    assert np.all(levels == level)


def test_predict_rejects_non_one_hot(rng):
    model = _model(rng)
    bad = np.full((1, 4, 6), 0.5)
    with pytest.raises(ValueError, match="one-hot"):
        predict_batch(model, bad)


def test_predict_rejects_wrong_history_length(rng):
    model = _model(rng)
    with pytest.raises(ValueError):
        predict_batch(model, _one_hot_batch(rng, 1, 5, 6))


# ============ Weight Files ============

def test_weight_bytes_roundtrip(rng):
    model = _model(rng)
    rounded = {k: p.astype(np.float32).astype(np.float64) for k, p in model.params.items()}
    model = EDModel(params=rounded, v=6, n_h=5, l_i=4, l_o=3, pair=(1, 2))
    restored = EDModel.from_bytes(model.to_bytes(), v=6, n_h=5, l_i=4, l_o=3, pair=(1, 2))
    for key in PARAM_ORDER:
        np.testing.assert_array_equal(restored.params[key], model.params[key])
    assert restored.to_bytes() == model.to_bytes()


def test_weight_blob_size_checked(rng):
    blob = _model(rng).to_bytes()
    with pytest.raises(ValueError, match="expected"):
        EDModel.from_bytes(blob[:-4], v=6, n_h=5, l_i=4, l_o=3)


def test_model_rejects_wrong_shapes(rng):
    params = init_params(6, 5, rng)
    params['dense_W'] = np.zeros((6, 4))
    with pytest.raises(ValueError, match="dense_W"):
        EDModel(params=params, v=6, n_h=5, l_i=4, l_o=3)


# ============ Training ============

def _constant_dataset(n, l_i, l_o, v, level):
    inputs = one_hot_array(np.full((n, l_i), level), v)
    targets = one_hot_array(np.full((n, l_o), level), v)
    return inputs, targets


def test_training_reduces_loss():
    inputs, targets = _constant_dataset(16, 4, 3, 6, level=2)
    cfg = TrainConfig(epochs=40, n_h=6, learning_rate=0.02, batch_size=8, rng_seed=1)
    model, curve = train(inputs, targets, cfg)
    assert curve[-1] < 0.5 * curve[0]
    _, levels = predict_batch(model, inputs[:1])
    assert levels.tolist() == [[2, 2, 2]]


def _cycle_windows(start, stop, l_i, l_o, period=4):
    levels = np.arange(stop + l_i + l_o) % period
    starts = range(start, stop)
    inputs = np.array([levels[s:s + l_i] for s in starts])
    targets = np.array([levels[s + l_i:s + l_i + l_o] for s in starts])
    return inputs, targets


def test_period_four_cycle_is_continued():
    v, l_i, l_o = 4, 6, 4
    train_in, train_out = _cycle_windows(0, 31, l_i, l_o)
    cfg = TrainConfig(epochs=150, n_h=8, learning_rate=0.03, batch_size=8, l1_lambda=0.0, rng_seed=0)
    model, _ = train(one_hot_array(train_in, v), one_hot_array(train_out, v), cfg)

    held_in, held_out = _cycle_windows(41, 57, l_i, l_o)
    _, levels = predict_batch(model, one_hot_array(held_in, v))
    np.testing.assert_array_equal(levels, held_out)


def test_single_example_is_memorised():
    rng = np.random.default_rng(11)
    inputs = _one_hot_batch(rng, 1, 5, 8)
    targets = _one_hot_batch(rng, 1, 5, 8)
    # lr 1e-3 is too slow to memorise within 200 single-example steps
    cfg = TrainConfig(epochs=200, n_h=16, learning_rate=0.03, batch_size=1, l1_lambda=0.0, rng_seed=0)
    model, curve = train(inputs, targets, cfg)
    assert curve[-1] <= 0.01
    _, levels = predict_batch(model, inputs)
    np.testing.assert_array_equal(levels, np.argmax(targets, axis=-1))


def test_l1_penalty_shrinks_weights():
    rng = np.random.default_rng(5)
    inputs = _one_hot_batch(rng, 24, 4, 6)
    targets = _one_hot_batch(rng, 24, 3, 6)
    cfg = TrainConfig(epochs=20, n_h=6, learning_rate=0.01, batch_size=8, rng_seed=2)

    def weight_norm(model):
        return sum(np.abs(model.params[k]).sum() for k in WEIGHT_KEYS)

    plain, _ = train(inputs, targets, replace(cfg, l1_lambda=0.0))
    sparse, _ = train(inputs, targets, replace(cfg, l1_lambda=1.0))
    assert weight_norm(sparse) < weight_norm(plain)


def test_objective_falls_over_fifty_epochs():
    rng = np.random.default_rng(8)
    v, l_i, l_o = 16, 8, 4
    t = np.arange(400)
    wave = np.sin(2 * np.pi * t / 25) + 0.2 * rng.normal(size=t.size)
    levels = np.clip(np.floor((wave + 1.5) / 3.0 * v), 0, v - 1).astype(int)
    starts = range(0, t.size - l_i - l_o, 4)
    inputs = one_hot_array(np.array([levels[s:s + l_i] for s in starts]), v)
    targets = one_hot_array(np.array([levels[s + l_i:s + l_i + l_o] for s in starts]), v)
    _, curve = train(inputs, targets, TrainConfig(epochs=50, n_h=8, rng_seed=3))
    assert len(curve) == 50
    assert curve[49] <= curve[0]


def test_training_is_deterministic():
    rng = np.random.default_rng(0)
    inputs = _one_hot_batch(rng, 12, 4, 5)
    targets = _one_hot_batch(rng, 12, 2, 5)
    cfg = TrainConfig(epochs=3, n_h=4, batch_size=5, rng_seed=9)
    first, curve_a = train(inputs, targets, cfg)
    second, curve_b = train(inputs, targets, cfg)
    assert first.to_bytes() == second.to_bytes()
    assert curve_a == curve_b


def test_training_without_teacher_forcing_runs():
    rng = np.random.default_rng(3)
    inputs = _one_hot_batch(rng, 6, 3, 4)
    targets = _one_hot_batch(rng, 6, 2, 4)
    model, curve = train(inputs, targets, TrainConfig(epochs=2, n_h=3, teacher_forcing=False))
    assert len(curve) == 2 and model.l_o == 2


def test_training_reports_epochs():
    inputs, targets = _constant_dataset(4, 3, 2, 4, level=1)
    seen = []
    train(inputs, targets, TrainConfig(epochs=3, n_h=3), on_epoch=lambda epoch, loss: seen.append(epoch))
    assert seen == [1, 2, 3]


def test_non_finite_loss_raises(monkeypatch):
    inputs, targets = _constant_dataset(4, 3, 2, 4, level=1)

    def broken(params, *args, **kwargs):
        return float('nan'), 0.0, {k: np.zeros_like(p) for k, p in params.items()}

    monkeypatch.setattr(predictor, "loss_and_grads", broken)
    with pytest.raises(TrainingError, match="epoch 1, batch 0"):
        train(inputs, targets, TrainConfig(epochs=2, n_h=3))


def test_empty_dataset_rejected():
    with pytest.raises(ValueError, match="empty"):
        train(np.zeros((0, 3, 4)), np.zeros((0, 2, 4)), TrainConfig(epochs=1, n_h=3))


@pytest.mark.parametrize("field, value", [("epochs", 0), ("l1_lambda", -0.1), ("n_h", 0)])
def test_train_config_validation(field, value):
    with pytest.raises(ValueError, match=field):
        TrainConfig(**{field: value}).validate()


# ============ Bank ============

def test_bank_pairs_row_major():
    assert bank_pairs(2, 3) == [(0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (1, 2)]


def test_pair_seeds_differ():
    seeds = {pair_seed(0, pair) for pair in bank_pairs(3, 3)}
    assert len(seeds) == 9


def _bank_levels(rng, n=8, l_i=3, l_o=2, m=2, q=2, v=5):
    return rng.integers(0, v, size=(n, l_i, m, q)), rng.integers(0, v, size=(n, l_o, m, q))


def test_bank_has_one_model_per_pair():
    inputs, targets = _bank_levels(np.random.default_rng(0))
    bank = train_bank(inputs, targets, 5, TrainConfig(epochs=1, n_h=3))
    assert [model.pair for model in bank] == bank_pairs(2, 2)
    assert all(model.l_i == 3 and model.l_o == 2 for model in bank)


def test_single_pair_bank_matches_direct_training():
    inputs, targets = _bank_levels(np.random.default_rng(6), m=1, q=1)
    cfg = TrainConfig(epochs=2, n_h=3, rng_seed=5)
    [banked] = train_bank(inputs, targets, 5, cfg)
    direct, _ = train(one_hot_array(inputs[:, :, 0, 0], 5), one_hot_array(targets[:, :, 0, 0], 5),
                      replace(cfg, rng_seed=pair_seed(5, (0, 0))))
    assert banked.to_bytes() == direct.to_bytes()


def test_bank_is_independent_of_worker_count():
    inputs, targets = _bank_levels(np.random.default_rng(1))
    cfg = TrainConfig(epochs=2, n_h=3, rng_seed=4)
    serial = train_bank(inputs, targets, 5, cfg, workers=1)
    parallel = train_bank(inputs, targets, 5, cfg, workers=2)
    assert [m.to_bytes() for m in serial] == [m.to_bytes() for m in parallel]


def test_bank_resumes_completed_pairs():
    inputs, targets = _bank_levels(np.random.default_rng(2))
    cfg = TrainConfig(epochs=1, n_h=3)
    full = train_bank(inputs, targets, 5, cfg)
    done = []
    resumed = train_bank(inputs, targets, 5, cfg, completed={(0, 0): full[0], (0, 1): full[1]},
                         on_pair_done=lambda pair, model, curve: done.append(pair))
    assert done == [(1, 0), (1, 1)]
    assert [m.to_bytes() for m in resumed] == [m.to_bytes() for m in full]


def test_bank_rejects_inconsistent_tensors():
    rng = np.random.default_rng(0)
    inputs, targets = _bank_levels(rng)
    with pytest.raises(ValueError):
        train_bank(inputs, targets[:4], 5, TrainConfig(epochs=1, n_h=3))
