"""Magnetization recurrence against a fine-step integrator, plus dictionaries."""

import numpy as np
import pytest

from nnocp.bloch import (
    DICTIONARY_GRIDS,
    Dictionary,
    ExactBlochModel,
    SequenceSpec,
    bloch_derivative,
    bloch_series,
    bloch_series_batch,
    build_dictionary,
    dictionary_grid,
)


def rotate_x(m, phi):
    c, s = np.cos(phi), np.sin(phi)
    return np.array([m[0], c * m[1] - s * m[2], s * m[1] + c * m[2]])


def integrate_relaxation(m, t1, t2, me, duration, steps=200):
    """Classical fourth-order integration of the relaxation,
    independent of the closed-form factors used by the recurrence."""
    h = duration / steps
    rate = np.array([-1.0 / t2, -1.0 / t2, -1.0 / t1])
    drive = np.array([0.0, 0.0, me / t1])

    def rhs(v):
        return rate * v + drive

    for _ in range(steps):
        k1 = rhs(m)
        k2 = rhs(m + 0.5 * h * k1)
        k3 = rhs(m + 0.5 * h * k2)
        k4 = rhs(m + h * k3)
        m = m + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return m


def reference_series(t1, t2, seq):
    m = seq.m0_array()
    out = np.empty((seq.length, 3))
    for l in range(seq.length):
        sign = -1.0 if l % 2 == 0 else 1.0
        m = rotate_x(m, sign * seq.flips[l])
        m = integrate_relaxation(m, t1, t2, seq.me, seq.tr)
        out[l] = m
    return out


def test_series_matches_fine_step_integrator():
    seq = SequenceSpec()
    for t1, t2 in ((800.0, 100.0), (3900.0, 1500.0), (600.0, 90.0)):
        got = bloch_series((t1, t2), seq)
        want = reference_series(t1, t2, seq)
        np.testing.assert_allclose(got, want, atol=1e-10)


def test_zero_flip_longitudinal_recovery():
    t1, t2 = 500.0, 80.0
    seq = SequenceSpec(length=10, flips=np.zeros(10))
    got = bloch_series((t1, t2), seq)
    e1 = np.exp(-seq.tr / t1)
    ls = np.arange(1, 11)
    np.testing.assert_allclose(got[:, 2], 1.0 - 2.0 * e1 ** ls, atol=1e-14)
    assert np.all(got[:, :2] == 0.0)


def test_huge_relaxation_times_reduce_to_pure_rotations():
    seq = SequenceSpec()
    got = bloch_series((1e12, 1e12), seq)
    np.testing.assert_allclose(np.linalg.norm(got, axis=1), 1.0, atol=1e-8)


def test_first_component_stays_zero_for_x_axis_pulses():
    rng = np.random.default_rng(0)
    t1 = rng.uniform(100.0, 4000.0, size=30)
    t2 = rng.uniform(20.0, 1500.0, size=30)
    series = bloch_series_batch(t1, t2, SequenceSpec())
    assert np.all(series[:, :, 0] == 0.0)


def test_derivative_matches_differences():
    seq = SequenceSpec()
    for t1, t2 in ((800.0, 100.0), (3000.0, 1500.0)):
        d1, d2 = bloch_derivative((t1, t2), seq)
        h1, h2 = 1e-3 * t1, 1e-3 * t2
        fd1 = (bloch_series((t1 + h1, t2), seq) - bloch_series((t1 - h1, t2), seq)) / (2 * h1)
        fd2 = (bloch_series((t1, t2 + h2), seq) - bloch_series((t1, t2 - h2), seq)) / (2 * h2)
        np.testing.assert_allclose(d1, fd1, rtol=2e-5, atol=1e-12)
        np.testing.assert_allclose(d2, fd2, rtol=2e-5, atol=1e-12)


def test_nonpositive_relaxation_extends_by_zero():
    seq = SequenceSpec(length=5)
    series = bloch_series_batch([0.0, 400.0, 0.0], [50.0, 0.0, 0.0], seq)
    assert np.all(np.isfinite(series))
    np.testing.assert_array_equal(series[1, :, :2], 0.0)  # T2 = 0: no transverse
    np.testing.assert_array_equal(series[0, :, 2], 1.0)   # T1 = 0: instant recovery
    np.testing.assert_array_equal(series[2], np.tile([0.0, 0.0, 1.0], (5, 1)))
    with pytest.raises(ValueError):
        bloch_series((0.0, 100.0), seq)
    with pytest.raises(ValueError):
        bloch_series((100.0, -1.0), seq)


def test_sequence_spec_validation():
    with pytest.raises(ValueError):
        SequenceSpec(length=0)
    with pytest.raises(ValueError):
        SequenceSpec(tr=0.0)
    with pytest.raises(ValueError):
        SequenceSpec(length=4, flips=np.zeros(3))
    with pytest.raises(ValueError):
        SequenceSpec(length=2, flips=np.array([np.nan, 0.1]))
    with pytest.raises(ValueError):
        SequenceSpec(m0=(0.0, 1.0))
    assert SequenceSpec().flips.shape == (20,)
    np.testing.assert_allclose(SequenceSpec().flips, np.pi / 4.0)


def test_dictionary_counts_are_exact():
    seq = SequenceSpec()
    sizes = {"small": 247, "medium": 962, "large": 9191}
    for name, count in sizes.items():
        t1v, t2v = dictionary_grid(name)
        assert t1v.size * t2v.size == count
        d = build_dictionary(t1v, t2v, seq)
        assert len(d) == count
        assert d.series.shape == (count, 20, 3)


def test_dictionary_grid_ranges_and_order():
    t1v, t2v = dictionary_grid("small")
    assert t1v.max() == 4800.0  # 400 does not divide 5000: endpoint dropped
    assert t2v.max() == 1800.0
    t1m, t2m = dictionary_grid("medium")
    assert t1m.max() == 5000.0 and t2m.max() == 1800.0
    with pytest.raises(ValueError):
        dictionary_grid("huge")
    d = build_dictionary(t1v, t2v, SequenceSpec())
    # T1-major layout: the first block walks the T2 grid at T1 = 0
    np.testing.assert_array_equal(d.t1[: t2v.size], 0.0)
    np.testing.assert_array_equal(d.t2[: t2v.size], t2v)
    assert d.complex_atoms().shape == (len(d), 20)
    assert np.all(d.complex_atoms().real == 0.0)  # transverse x-component


def test_exact_model_jacobian_agrees_with_single_point_derivatives():
    seq = SequenceSpec(length=6)
    model = ExactBlochModel(seq)
    theta = np.array([[700.0, 90.0], [2500.0, 900.0]])
    val, jac = model.series_jacobian(theta)
    assert val.shape == (2, 6, 2) and jac.shape == (2, 6, 2, 2)
    np.testing.assert_allclose(val, model.series(theta), atol=0.0)
    d1, d2 = bloch_derivative(theta[0], seq)
    np.testing.assert_allclose(jac[0, :, :, 0], d1[:, :2], atol=1e-14)
    np.testing.assert_allclose(jac[0, :, :, 1], d2[:, :2], atol=1e-14)
    assert model.length == 6
