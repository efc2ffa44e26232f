import pytest
import numpy as np

from kspace_loupe.autodiff import ParamStore
from kspace_loupe.optim import EPSILON, AdamState, OptimizerError, adam_step


def test_first_step_moves_by_learning_rate_against_gradient(rng):
    params = ParamStore({"w": rng.standard_normal(6)})
    before = params["w"].copy()
    grads = {"w": rng.standard_normal(6)}
    adam_step(params, grads, AdamState.for_params(params), lr=0.01)
    np.testing.assert_allclose(params["w"] - before, -0.01 * np.sign(grads["w"]), rtol=1e-6)


def test_zero_gradient_leaves_parameters_unchanged(rng):
    params = ParamStore({"w": rng.standard_normal(4)})
    before = params["w"].copy()
    state = AdamState.for_params(params)
    adam_step(params, {"w": np.zeros(4)}, state, lr=0.1)
    np.testing.assert_array_equal(params["w"], before)
    assert state.t == 1


def test_constant_gradient_trace():
    params = ParamStore({"p": np.asarray(1.0)})
    state = AdamState.for_params(params)
    step = 0.1 * 0.1 / (0.1 + EPSILON)
    for k in range(1, 4):
        adam_step(params, {"p": np.asarray(0.1)}, state, lr=0.1)
        assert float(params["p"]) == pytest.approx(1.0 - k * step, abs=1e-12)


def test_group_learning_rates_by_prefix(rng):
    params = ParamStore({"pattern.w": np.zeros(3), "dc.rho": np.asarray(0.0)})
    grads = {"pattern.w": np.ones(3), "dc.rho": np.asarray(1.0)}
    adam_step(params, grads, AdamState.for_params(params), lr=0.001, group_lr={"pattern.": 0.5})
    np.testing.assert_allclose(params["pattern.w"], -0.5, rtol=1e-6)
    assert float(params["dc.rho"]) == pytest.approx(-0.001, rel=1e-6)


def test_bad_gradients_change_nothing(rng):
    params = ParamStore({"a": np.ones(2), "b": np.ones(2)})
    state = AdamState.for_params(params)
    with pytest.raises(OptimizerError, match="Non-finite"):
        adam_step(params, {"a": np.ones(2), "b": np.array([1.0, np.nan])}, state, lr=0.1)
    np.testing.assert_array_equal(params["a"], np.ones(2))
    assert state.t == 0
    with pytest.raises(OptimizerError, match="Missing"):
        adam_step(params, {"a": np.ones(2)}, state, lr=0.1)
    with pytest.raises(OptimizerError, match="shape"):
        adam_step(params, {"a": np.ones(3), "b": np.ones(2)}, state, lr=0.1)
