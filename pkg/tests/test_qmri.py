"""Sampling masks, k-space pipeline, derivatives, and the map reconstruction."""

import numpy as np
import pytest

from nnocp.bloch import ExactBlochModel, SequenceSpec, build_dictionary, dictionary_grid
from nnocp.exceptions import ConfigError
from nnocp.mlp import Mlp, MinMaxScaler
from nnocp import qmri
from nnocp.qmri import (
    Drnn,
    GaussNewtonHessian,
    KSpaceData,
    QmriImage,
    RegWeights,
    box_bounds,
    cartesian_mask,
    dft2,
    dictionary_match_init,
    forward_operator,
    generate_kspace,
    idft2,
    load_kspace,
    load_mask,
    load_phantom,
    model_relative_error,
    qmri_gradient,
    qmri_objective,
    relative_errors,
    save_kspace,
    save_mask,
    save_phantom,
    synth_phantom,
)


def constant_image(shape, t1, t2, rho):
    return QmriImage(np.full(shape, t1), np.full(shape, t2), np.full(shape, rho))


def short_model(length=6):
    return ExactBlochModel(SequenceSpec(length=length))


# ---------------------------------------------------------------------------
# transforms and masks
# ---------------------------------------------------------------------------

def test_dft_is_unitary_with_adjoint_inverse():
    rng = np.random.default_rng(1)
    z = rng.normal(size=(16, 16)) + 1j * rng.normal(size=(16, 16))
    w = rng.normal(size=(16, 16)) + 1j * rng.normal(size=(16, 16))
    assert np.linalg.norm(dft2(z)) == pytest.approx(np.linalg.norm(z), rel=1e-13)
    np.testing.assert_allclose(idft2(dft2(z)), z, atol=1e-13)
    assert np.vdot(dft2(z), w) == pytest.approx(np.vdot(z, idft2(w)), rel=1e-12)


def test_interleaved_mask_covers_rows_uniformly():
    mask = cartesian_mask((64, 64), 0.25, seed=3, frames=20)
    assert mask.shape == (20, 64, 64) and mask.dtype == bool
    rows = mask[:, :, 0]
    assert np.all(rows.sum(axis=1) == 16)               # exact density per frame
    assert np.all(rows.any(axis=0))                     # union covers every row
    per_row = mask.all(axis=2) == mask.any(axis=2)
    assert np.all(per_row)                              # whole rows only
    np.testing.assert_array_equal(
        mask, cartesian_mask((64, 64), 0.25, seed=3, frames=20))
    assert not np.array_equal(
        mask, cartesian_mask((64, 64), 0.25, seed=4, frames=20))


def test_random_and_single_masks():
    single = cartesian_mask((64, 32), 0.25, seed=0)
    assert single.shape == (64, 32)
    assert single[:, 0].sum() == 16
    stack = cartesian_mask((64, 32), 0.25, seed=0, frames=5, scheme="random")
    assert stack.shape == (5, 64, 32)
    assert np.all(stack[:, :, 0].sum(axis=1) == 16)
    assert not np.array_equal(stack[0], stack[1])


def test_mask_validation():
    with pytest.raises(ValueError):
        cartesian_mask((8, 8), 0.0)
    with pytest.raises(ValueError):
        cartesian_mask((8, 8), 1.5)
    with pytest.raises(ValueError):
        cartesian_mask((8, 8), 0.25, frames=4, scheme="radial")


def test_mask_io_round_trip(tmp_path):
    path = tmp_path / "mask.csv"
    stack = cartesian_mask((16, 8), 0.25, seed=2, frames=4)
    save_mask(path, stack)
    np.testing.assert_array_equal(load_mask(path, frames=4), stack)
    single = cartesian_mask((16, 8), 0.5, seed=2)
    save_mask(path, single)
    np.testing.assert_array_equal(load_mask(path), single)
    with pytest.raises(ConfigError):
        load_mask(path, frames=3)  # 16 rows not divisible by 3
    path.write_text("0,1\n2,0\n")
    with pytest.raises(ConfigError):
        load_mask(path)


# ---------------------------------------------------------------------------
# forward model and measurement synthesis
# ---------------------------------------------------------------------------

def test_forward_operator_linear_in_rho_and_masked():
    model = short_model()
    mask = cartesian_mask((12, 12), 0.25, seed=1, frames=model.length)
    img = constant_image((12, 12), 800.0, 100.0, 4000.0)
    doubled = QmriImage(img.t1, img.t2, 2.0 * img.rho)
    d1 = forward_operator(img, model, mask)
    d2 = forward_operator(doubled, model, mask)
    np.testing.assert_allclose(d2.frames, 2.0 * d1.frames, rtol=1e-12)
    assert np.all(d1.frames[~mask] == 0.0)


def test_generate_kspace_noise_seeding():
    model = short_model()
    truth = constant_image((12, 12), 900.0, 120.0, 3000.0)
    mask = cartesian_mask((12, 12), 0.5, seed=0, frames=model.length)
    clean = generate_kspace(truth, model, mask, 0.0)
    np.testing.assert_array_equal(clean.frames,
                                  forward_operator(truth, model, mask).frames)
    a = generate_kspace(truth, model, mask, 5.0, seed=3)
    b = generate_kspace(truth, model, mask, 5.0, seed=3)
    c = generate_kspace(truth, model, mask, 5.0, seed=4)
    np.testing.assert_array_equal(a.frames, b.frames)
    assert not np.array_equal(a.frames, c.frames)
    assert a.meta["sigma"] == 5.0 and a.meta["seed"] == 3


def test_kspace_data_masks_and_validation():
    frames = np.ones((3, 4, 4), dtype=complex)
    mask2d = np.zeros((4, 4), dtype=bool)
    mask2d[1] = True
    data = KSpaceData(frames, mask2d)
    assert np.all(data.frames[:, 0, :] == 0.0)
    assert np.all(data.frames[:, 1, :] == 1.0)
    assert data.mask_stack().shape == (3, 4, 4)
    with pytest.raises(ValueError):
        KSpaceData(np.ones((4, 4)), mask2d)
    with pytest.raises(ValueError):
        KSpaceData(frames, np.zeros((5, 4), dtype=bool))


def test_kspace_io_round_trip(tmp_path):
    model = short_model()
    truth = constant_image((8, 8), 700.0, 90.0, 2500.0)
    mask = cartesian_mask((8, 8), 0.5, seed=5, frames=model.length)
    data = generate_kspace(truth, model, mask, 2.0, seed=5)
    path = tmp_path / "scan.bin"
    save_kspace(path, data)
    back = load_kspace(path)
    np.testing.assert_allclose(back.frames, data.frames, rtol=1e-6, atol=1e-6)
    np.testing.assert_array_equal(back.mask, data.mask)
    assert back.meta["seed"] == 5 and back.meta["sigma"] == 2.0
    (tmp_path / "scan.bin").write_bytes(b"\x00" * 16)
    with pytest.raises(ConfigError):
        load_kspace(path)


def test_phantom_io_round_trip_and_errors(tmp_path):
    truth = synth_phantom(16)
    path = tmp_path / "phantom.csv"
    save_phantom(path, truth)
    back = load_phantom(path)
    np.testing.assert_array_equal(back.stack(), truth.stack())
    path.write_text("1.0,2.0\n3.0,4.0\n")  # 2 rows: not divisible by 3
    with pytest.raises(ConfigError):
        load_phantom(path)
    path.write_text("1.0,2.0\n3.0\n4.0,5.0\n")
    with pytest.raises(ConfigError, match="columns"):
        load_phantom(path)
    path.write_text("1.0,x\n1.0,2.0\n3.0,4.0\n")
    with pytest.raises(ConfigError, match="not a number"):
        load_phantom(path)


def test_synthetic_phantom_structure():
    truth = synth_phantom(64)
    assert truth.shape == (64, 64)
    assert truth.in_box()
    assert truth.rho.max() > 5000.0
    background = truth.rho < 1.0
    assert background.mean() > 0.2  # the hull leaves an empty margin
    with pytest.raises(ValueError):
        synth_phantom(4)


# ---------------------------------------------------------------------------
# objective, gradient, Gauss-Newton Hessian
# ---------------------------------------------------------------------------

def misfit_setup(shape=(10, 10), length=6, sigma=4.0):
    model = short_model(length)
    truth = constant_image(shape, 850.0, 110.0, 3500.0)
    truth.t1[2:5, 3:7] = 1400.0
    truth.t2[2:5, 3:7] = 300.0
    truth.rho[5:8, 2:5] = 4500.0
    mask = cartesian_mask(shape, 0.5, seed=2, frames=length)
    data = generate_kspace(truth, model, mask, sigma, seed=2)
    weights = RegWeights(alpha0=(1e-8, 1e-8, 1e-8), alpha1=(1e-6, 1e-6, 1e-6))
    return model, truth, data, weights


def test_objective_zero_at_truth_without_noise_or_weights():
    model = short_model()
    truth = constant_image((8, 8), 800.0, 100.0, 3000.0)
    mask = np.ones((8, 8), dtype=bool)
    data = generate_kspace(truth, model, mask, 0.0)
    zero_w = RegWeights(alpha0=(0, 0, 0), alpha1=(0, 0, 0))
    assert qmri_objective(truth, model, data, zero_w) == pytest.approx(0.0, abs=1e-18)
    mass = RegWeights(alpha0=(2.0, 0, 0), alpha1=(0, 0, 0))
    expected = 0.5 * 2.0 * float(np.sum(truth.t1 ** 2))
    assert qmri_objective(truth, model, data, mass) == pytest.approx(expected, rel=1e-12)


def test_gradient_matches_directional_differences():
    model, truth, data, weights = misfit_setup()
    stack = truth.stack() * np.array([1.05, 0.93, 1.02])[:, None, None]
    grad = qmri_gradient(stack, model, data, weights)
    rng = np.random.default_rng(7)
    scale = np.array([60.0, 25.0, 200.0])[:, None, None]
    for _ in range(4):
        v = rng.normal(size=stack.shape) * scale
        eps = 1e-4
        jp = qmri_objective(stack + eps * v, model, data, weights)
        jm = qmri_objective(stack - eps * v, model, data, weights)
        fd = (jp - jm) / (2.0 * eps)
        exact = float(np.sum(grad * v))
        assert fd == pytest.approx(exact, rel=2e-4)


def test_gauss_newton_hessian_symmetric_with_exact_diagonal():
    model, truth, data, weights = misfit_setup()
    stack = truth.stack()
    frozen = qmri._FrozenModel(model, stack)
    grid = qmri.qmri_grid(stack.shape[1:])
    hess = GaussNewtonHessian(frozen, stack, data, weights, grid)
    rng = np.random.default_rng(9)
    a = rng.normal(size=stack.shape)
    b = rng.normal(size=stack.shape)
    assert float(np.sum(hess(a) * b)) == pytest.approx(
        float(np.sum(a * hess(b))), rel=1e-10)
    assert float(np.sum(hess(a) * a)) > 0.0

    diag = hess.diagonal()
    n = stack.size
    for flat in rng.choice(n, size=12, replace=False):
        e = np.zeros(n)
        e[flat] = 1.0
        probe = hess(e.reshape(stack.shape)).ravel()[flat]
        assert probe == pytest.approx(diag.ravel()[flat], rel=1e-10, abs=1e-15)


# ---------------------------------------------------------------------------
# initialization and reconstruction
# ---------------------------------------------------------------------------

def test_matched_filter_recovers_its_own_atoms():
    seq = SequenceSpec()
    model = ExactBlochModel(seq)
    t1v, t2v = dictionary_grid("medium")
    dictionary = build_dictionary(t1v, t2v, seq)
    truth = constant_image((8, 8), 800.0, 100.0, 5000.0)  # on the medium grid
    data = generate_kspace(truth, model, np.ones((8, 8), dtype=bool), 0.0)
    init = dictionary_match_init(data, dictionary)
    np.testing.assert_array_equal(init.t1, 800.0)
    np.testing.assert_array_equal(init.t2, 100.0)
    np.testing.assert_allclose(init.rho, 5000.0, rtol=1e-10)


def test_matched_filter_output_stays_in_box_under_subsampled_noise():
    seq = SequenceSpec()
    model = ExactBlochModel(seq)
    t1v, t2v = dictionary_grid("small")
    dictionary = build_dictionary(t1v, t2v, seq)
    truth = synth_phantom(16)
    mask = cartesian_mask((16, 16), 0.25, seed=0, frames=seq.length)
    data = generate_kspace(truth, model, mask, 30.0, seed=0)
    init = dictionary_match_init(data, dictionary)
    assert init.in_box()
    assert np.all(np.isfinite(init.stack()))


def test_truth_is_near_fixed_point_of_reconstruction():
    model = short_model(8)
    truth = constant_image((12, 12), 900.0, 140.0, 3000.0)
    truth.rho[4:8, 4:8] = 4000.0
    mask = np.ones((12, 12), dtype=bool)
    data = generate_kspace(truth, model, mask, 0.0)
    rec, hist = qmri.solve_qmri_sqp(data, model, truth,
                                    params=qmri.QmriSqpParams(max_outer=5))
    errs = relative_errors(rec, truth)
    assert hist.status in ("converged", "stationary")
    assert max(errs.values()) <= 1e-6


def test_relative_errors_ignore_empty_background():
    truth = QmriImage(np.full((6, 6), 1000.0), np.full((6, 6), 200.0),
                      np.zeros((6, 6)))
    truth.rho[2:4, 2:4] = 5000.0
    rec = QmriImage(truth.t1 + 500.0, truth.t2.copy(), truth.rho.copy())
    rec.t1[truth.rho > 0] = truth.t1[truth.rho > 0]  # wrong only off-support
    errs = relative_errors(rec, truth)
    assert errs["t1"] == 0.0 and errs["t2"] == 0.0 and errs["rho"] == 0.0
    with pytest.raises(ValueError):
        relative_errors(rec, QmriImage(truth.t1, truth.t2, np.zeros((6, 6))))


def test_box_bounds_cover_phantom_tissues():
    lo, up = box_bounds()
    assert lo.shape == (3,) and up.shape == (3,)
    assert np.all(lo < up)
    truth = synth_phantom(32)
    s = truth.stack()
    assert np.all(s >= lo[:, None, None]) and np.all(s <= up[:, None, None])


# ---------------------------------------------------------------------------
# surrogate series networks
# ---------------------------------------------------------------------------

def tiny_drnn(frames=3):
    rng = np.random.default_rng(0)
    nets = []
    for _ in range(frames):
        w1 = rng.normal(scale=0.5, size=(4, 2))
        w2 = rng.normal(scale=0.5, size=(2, 4))
        nets.append(Mlp([w1, w2], [rng.normal(size=4), rng.normal(size=2)],
                        ["tansig"]))
    in_sc = MinMaxScaler([0.0, 0.0], [5000.0, 1800.0])
    out_scs = [MinMaxScaler([-1.0, -1.0], [1.0, 1.0]) for _ in range(frames)]
    return Drnn(nets, in_sc, out_scs)


def test_drnn_series_jacobian_matches_differences():
    drnn = tiny_drnn()
    theta = np.array([[800.0, 100.0], [2400.0, 700.0]])
    val, jac = drnn.series_jacobian(theta)
    assert val.shape == (2, 3, 2) and jac.shape == (2, 3, 2, 2)
    np.testing.assert_allclose(val, drnn.series(theta), atol=0.0)
    for j, h in ((0, 1.0), (1, 0.5)):
        tp, tm = theta.copy(), theta.copy()
        tp[:, j] += h
        tm[:, j] -= h
        fd = (drnn.series(tp) - drnn.series(tm)) / (2.0 * h)
        np.testing.assert_allclose(jac[:, :, :, j], fd, atol=1e-7)


def test_drnn_save_load_round_trip(tmp_path):
    drnn = tiny_drnn()
    qmri.save_drnn(tmp_path / "net", drnn)
    back = qmri.load_drnn(tmp_path / "net")
    theta = np.array([[1234.5, 321.0], [4321.0, 55.5]])
    np.testing.assert_allclose(back.series(theta), drnn.series(theta), atol=1e-12)
    assert back.length == drnn.length
    with pytest.raises(ValueError):
        Drnn(drnn.nets, drnn.in_scaler, drnn.out_scalers[:-1])


def test_model_relative_error_basics():
    model = short_model()
    thetas = np.array([[800.0, 100.0], [1500.0, 400.0]])
    assert model_relative_error(model, model, thetas) == 0.0

    class Zero:
        def series(self, t):
            return np.zeros((len(t), 6, 2))

    assert model_relative_error(Zero(), model, thetas) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        model_relative_error(model, Zero(), thetas)
