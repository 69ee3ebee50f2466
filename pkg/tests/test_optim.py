import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from semicap.errors import ShapeError
from semicap.optim import RmspropState, clip_by_global_norm, global_norm, rmsprop_update, tree_sum


def test_zero_gradient_leaves_params():
    p = {"w": np.array([1.0, -2.0])}
    out = rmsprop_update(p, {"w": np.zeros(2)}, RmspropState())
    assert np.array_equal(out["w"], p["w"])


def test_first_step_closed_form():
    # acc = 0.1 g^2, step = lr g / (sqrt(0.1) |g| + eps)
    g = 0.37
    st_ = RmspropState()
    out = rmsprop_update({"w": np.array([0.0])}, {"w": np.array([g])}, st_)
    assert out["w"][0] == pytest.approx(-1e-4 * g / (np.sqrt(0.1) * g + 1e-8), rel=1e-12)
    assert st_.acc["w"][0] == pytest.approx(0.1 * g * g)


def test_repeated_gradient_step_tends_to_lr():
    # iterate the accumulator recurrence directly as the oracle
    g, st_ = 2.5, RmspropState()
    w = {"w": np.array([0.0])}
    acc = 0.0
    for _ in range(200):
        prev = w["w"][0]
        w = rmsprop_update(w, {"w": np.array([g])}, st_)
        acc = 0.9 * acc + 0.1 * g * g
        assert prev - w["w"][0] == pytest.approx(1e-4 * g / (np.sqrt(acc) + 1e-8), rel=1e-9)
    assert prev - w["w"][0] == pytest.approx(1e-4, rel=1e-6)


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        rmsprop_update({"w": np.zeros(2)}, {"w": np.zeros(3)}, RmspropState())


def test_dtype_preserved_and_missing_grad_passthrough():
    p = {"a": np.ones(2, np.float32), "b": np.ones(1, np.float32)}
    out = rmsprop_update(p, {"a": np.ones(2, np.float32)}, RmspropState())
    assert out["a"].dtype == np.float32 and out["b"] is p["b"]


@given(arrays(np.float64, 5, elements=st.floats(-1e3, 1e3)), st.floats(0.1, 10))
def test_accumulator_nonnegative_and_clip_bound(g, max_norm):
    s = RmspropState()
    rmsprop_update({"w": np.zeros(5)}, {"w": g}, s)
    assert np.all(s.acc["w"] >= 0)
    clipped = clip_by_global_norm({"w": g}, max_norm)
    assert global_norm(clipped) <= max_norm * (1 + 1e-9)
    if global_norm({"w": g}) <= max_norm:
        assert np.array_equal(clipped["w"], g)


def test_global_norm():
    assert global_norm({"a": np.array([3.0]), "b": np.array([[4.0]])}) == 5.0


@given(st.lists(arrays(np.float64, 3, elements=st.floats(-10, 10)), min_size=1, max_size=9))
def test_tree_sum_matches_sum(parts):
    maps = [{"x": p} for p in parts]
    assert np.allclose(tree_sum(maps)["x"], np.sum(parts, axis=0))
    assert np.array_equal(tree_sum(maps)["x"], tree_sum(list(maps))["x"])


def test_tree_sum_empty():
    assert tree_sum([]) == {}
