import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mofu.harness.sampling import NonFiniteSampleError, initial_noise, sample


class Field:
    latent_shape = (2, 3, 2, 2)

    def __init__(self, fn):
        self.fn = fn
        self.calls = []

    def __call__(self, x, t, cond, e):
        self.calls.append(t)
        return self.fn(x, t)


def test_zero_field_returns_noise():
    m = Field(lambda x, t: np.zeros_like(x))
    assert np.array_equal(sample(m, None, None, 5, seed=3), initial_noise(m.latent_shape, 3))


def test_single_step():
    m = Field(lambda x, t: 0.5 * x + t)
    n = initial_noise(m.latent_shape, 1)
    assert np.array_equal(sample(m, None, None, 1, seed=1), n - (0.5 * n + 1.0))
    assert m.calls == [1.0]


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 40), st.floats(-3, 3))
def test_constant_field(steps, c):
    m = Field(lambda x, t: np.full_like(x, c))
    out = sample(m, None, None, steps, seed=0)
    assert np.max(np.abs(out - (initial_noise(m.latent_shape, 0) - c))) < 1e-12


def test_time_grid_and_path():
    m = Field(lambda x, t: x * 0 + t)
    x, path = sample(m, None, None, 4, seed=[2, 5], return_path=True)
    assert m.calls == [1.0, 0.75, 0.5, 0.25]
    assert len(path) == 5 and np.array_equal(path[-1], x)
    assert np.array_equal(path[0], initial_noise(m.latent_shape, [2, 5]))


def test_deterministic():
    m = Field(lambda x, t: np.sin(x) * t)
    assert np.array_equal(sample(m, None, None, 6, seed=4), sample(m, None, None, 6, seed=4))


def test_errors():
    with pytest.raises(ValueError):
        sample(Field(lambda x, t: x), None, None, 0)
    with pytest.raises(ValueError):
        sample(Field(lambda x, t: x[:1]), None, None, 2)
    with pytest.raises(NonFiniteSampleError):
        sample(Field(lambda x, t: x * np.inf), None, None, 2)
