import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from avdub.nn_core import (MAGIC, OptimizerState, ParameterSet, TrainLog, checkpoint_bytes,
                           finite_difference_check, init_parameters, load_checkpoint, optimizer_step,
                           parse_checkpoint, save_checkpoint, value_and_grad)


def adam_reference(p, g, m, v, t, lr, b1=0.9, b2=0.999, eps=1e-8, wd=0.0):
    # plain-python AdamW written from the textbook update
    m = b1 * m + (1 - b1) * g
    v = b2 * v + (1 - b2) * g * g
    mhat = m / (1 - b1 ** t)
    vhat = v / (1 - b2 ** t)
    p = p - lr * wd * p
    return p - lr * mhat / (vhat ** 0.5 + eps), m, v


def test_init_is_deterministic_and_bounded():
    a = init_parameters([("w", [2, 2])], seed=7)
    b = init_parameters([("w", [2, 2])], seed=7)
    assert a.to_bytes() == b.to_bytes()
    w = init_parameters([("w", (3, 4))], seed=1)["w"]
    assert np.all(np.abs(w) <= 0.5)


def test_init_rejects_duplicate_names():
    with pytest.raises(ValueError, match="duplicate"):
        init_parameters([("w", (2,)), ("w", (3,))], seed=0)


def test_adding_a_parameter_leaves_others_unchanged():
    a = init_parameters([("w", (3, 3))], seed=4)
    b = init_parameters([("u", (5,)), ("w", (3, 3))], seed=4)
    assert np.array_equal(a["w"], b["w"])


def test_zero_gradient_is_a_fixed_point():
    params = init_parameters([("w", (3, 2)), ("b", (2,))], seed=0)
    state = OptimizerState.create(params, weight_decay=0.0)
    new, state = optimizer_step(params, params.zeros_like(), state)
    assert new == params
    assert state.step == 1


def test_adam_first_step_matches_hand_update():
    params = ParameterSet({"p": np.array([1.0])})
    state = OptimizerState.create(params, lr=2e-4, weight_decay=0.0)
    new, state = optimizer_step(params, ParameterSet({"p": np.array([1.0])}), state)
    expected, _, _ = adam_reference(1.0, 1.0, 0.0, 0.0, 1, 2e-4)
    assert new["p"][0] == pytest.approx(expected, abs=1e-15)
    # frozen: bias correction makes the first step exactly lr / (1 + eps)
    assert new["p"][0] == pytest.approx(1.0 - 2e-4 / (1 + 1e-8), abs=1e-15)


def test_adam_matches_reference_over_several_steps():
    rng = np.random.default_rng(3)
    p = rng.normal(size=4)
    params = ParameterSet({"p": p.copy()})
    state = OptimizerState.create(params, lr=1e-2, weight_decay=0.05)
    m = v = np.zeros(4)
    for t in range(1, 6):
        g = rng.normal(size=4)
        params, state = optimizer_step(params, ParameterSet({"p": g}), state)
        p, m, v = adam_reference(p, g, m, v, t, 1e-2, wd=0.05)
    np.testing.assert_allclose(params["p"], p, rtol=0, atol=1e-14)


def test_two_steps_shrink_convex_quadratic():
    params = ParameterSet({"p": np.array([2.0])})
    state = OptimizerState.create(params, lr=0.1, weight_decay=0.0)
    sizes = [2.0]
    for _ in range(2):
        params, state = optimizer_step(params, ParameterSet({"p": params["p"].copy()}), state)
        sizes.append(abs(params["p"][0]))
    assert sizes[0] > sizes[1] > sizes[2]


def test_optimizer_converges_on_shifted_quadratic():
    params = ParameterSet({"p": np.array([0.0])})
    state = OptimizerState.create(params, lr=0.05, weight_decay=0.0)
    for _ in range(200):
        params, state = optimizer_step(params, ParameterSet({"p": 2 * (params["p"] - 3)}), state)
    assert abs(params["p"][0] - 3) < 0.1


def test_optimizer_rejects_bad_gradients():
    params = ParameterSet({"w": np.ones(3)})
    state = OptimizerState.create(params)
    with pytest.raises(ValueError, match="shape"):
        optimizer_step(params, ParameterSet({"w": np.ones(4)}), state)
    with pytest.raises(FloatingPointError, match="'w'"):
        optimizer_step(params, ParameterSet({"w": np.array([1.0, np.nan, 0.0])}), state)


def test_state_mirrors_parameters():
    params = init_parameters([("a", (2, 3)), ("b", (4,))], seed=0)
    state = OptimizerState.create(params)
    _, state = optimizer_step(params, params.map(np.ones_like), state)
    assert state.m.shapes() == params.shapes() == state.v.shapes()


def test_fd_check_polynomial():
    params = ParameterSet({"p": np.array([1.0, 2.0])})
    err = finite_difference_check(lambda p: value_and_grad(lambda t: (t["p"] ** 2).sum(), p), params)
    assert err < 1e-8
    assert np.allclose(value_and_grad(lambda t: (t["p"] ** 2).sum(), params)[1]["p"], [2.0, 4.0])


def test_fd_check_detects_wrong_gradient():
    params = ParameterSet({"p": np.array([1.0, 2.0])})
    wrong = lambda p: (float((p["p"] ** 2).sum()), ParameterSet({"p": 3 * p["p"]}))  # noqa: E731
    assert finite_difference_check(wrong, params) > 0.1


def test_checkpoint_round_trip(tmp_path):
    params = init_parameters([("enc.w", (3, 4)), ("enc.b", (4,))], seed=2)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, params, {"kind": "test"})
    loaded, meta = load_checkpoint(path)
    assert loaded == params and meta == {"kind": "test"}
    assert loaded.names() == params.names()
    assert path.read_bytes().startswith(MAGIC)
    assert checkpoint_bytes(params, {"kind": "test"}) == path.read_bytes()


def test_checkpoint_rejects_garbage():
    with pytest.raises(ValueError):
        parse_checkpoint(b"not a checkpoint")
    data = checkpoint_bytes(init_parameters([("w", (2, 2))], seed=0))
    with pytest.raises(ValueError):
        parse_checkpoint(data[:-8])


def test_train_log_csv():
    log = TrainLog()
    log.add(0, 1.5, dur=0.5)
    log.add(10, 1.0, dur=0.25)
    assert log.to_csv().splitlines() == ["step,loss,dur", "0,1.5,0.5", "10,1.0,0.25"]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=6), st.integers(0, 2**31))
def test_serialization_round_trips_bit_exactly(values, seed):
    params = ParameterSet({"x": np.array(values), "y": init_parameters([("y", (2,))], seed)["y"]})
    loaded, _ = parse_checkpoint(checkpoint_bytes(params))
    assert loaded.to_bytes() == params.to_bytes()


def test_default_dtype_is_float64():
    assert torch.get_default_dtype() == torch.float64
