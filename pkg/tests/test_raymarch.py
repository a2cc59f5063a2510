import numpy as np
import pytest

from diffiso.raymarch import RaySampleSet, volume_render_ray


def test_opaque_single_sample():
    samples = RaySampleSet(density=[1e6], step=[1.0], color=[[1.0, 0.0, 0.0]])
    color, t_final = volume_render_ray(samples)
    assert np.allclose(color, [1.0, 0.0, 0.0])
    assert t_final == pytest.approx(0.0, abs=1e-12)


def test_two_sample_telescoping():
    # first sample absorbs half, second is opaque
    samples = RaySampleSet(density=[np.log(2), 1e9], step=[1.0, 1.0],
                           color=[[1, 0, 0], [0, 1, 0]])
    color, t_final = volume_render_ray(samples)
    assert np.allclose(color, [0.5, 0.5, 0.0], atol=1e-12)
    assert t_final == pytest.approx(0.0, abs=1e-12)


def test_constant_color_closed_form():
    rng = np.random.default_rng(7)
    density = rng.uniform(0, 3, 40)
    step = rng.uniform(0.01, 0.2, 40)
    c = np.array([0.3, 0.6, 0.9])
    samples = RaySampleSet(density=density, step=step,
                           color=np.tile(c, (40, 1)))
    color, t_final = volume_render_ray(samples)
    # independent brute-force accumulation, sample by sample
    trans = 1.0
    acc = np.zeros(3)
    for sigma, delta in zip(density, step):
        alpha = 1 - np.exp(-sigma * delta)
        acc += trans * alpha * c
        trans *= np.exp(-sigma * delta)
    assert np.allclose(color, acc, atol=1e-12)
    closed = c * (1 - np.exp(-np.sum(density * step)))
    assert np.allclose(color, closed, atol=1e-10)


def test_weight_normalization_property():
    rng = np.random.default_rng(42)
    for _ in range(200):
        n = rng.integers(1, 64)
        samples = RaySampleSet(density=rng.uniform(0, 5, n),
                               step=rng.uniform(1e-3, 0.5, n),
                               color=rng.uniform(0, 1, (n, 3)))
        tau = samples.density * samples.step
        t_i = np.exp(-np.concatenate([[0.0], np.cumsum(tau[:-1])]))
        weights = t_i * (1 - np.exp(-tau))
        _, t_final = volume_render_ray(samples)
        assert abs(weights.sum() + t_final - 1.0) < 1e-12


def test_invariant_validation():
    with pytest.raises(ValueError):
        RaySampleSet(density=[-1.0], step=[1.0], color=[[0, 0, 0]])
    with pytest.raises(ValueError):
        RaySampleSet(density=[1.0], step=[0.0], color=[[0, 0, 0]])
    with pytest.raises(ValueError):
        RaySampleSet(density=[1.0], step=[1.0], color=[[0, 0, 2.0]])
