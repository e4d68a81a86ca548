from __future__ import annotations

import numpy as np
import pytest
from scipy.ndimage import correlate, gaussian_filter
from scipy.optimize import fsolve

from drrreg.geometry import EulerPose
from drrreg.similarity import (
    METRICS,
    SOBEL_X,
    SimilarityConfig,
    combined,
    gncc,
    is_degenerate,
    landscape,
    landscape_csv,
    metric_value_and_grad,
    mncc,
    ncc,
    pool,
    similarity_gradient_wrt_pose,
)

from conftest import rel_err


# ---------------------------------------------------------------- oracles


def ncc_oracle(a, b):
    return float(np.corrcoef(np.ravel(a), np.ravel(b))[0, 1])


def pool_oracle(a):
    H, W = a.shape
    return a.reshape(H // 2, 2, W // 2, 2).mean(axis=(1, 3))


def mncc_oracle(a, b, L):
    vals = []
    for _ in range(L):
        vals.append(ncc_oracle(a, b))
        a, b = pool_oracle(a), pool_oracle(b)
    return float(np.mean(vals))


def gncc_oracle(a, b):
    kx = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], float)
    gx = ncc_oracle(correlate(a, kx, mode="nearest"), correlate(b, kx, mode="nearest"))
    gy = ncc_oracle(correlate(a, kx.T, mode="nearest"), correlate(b, kx.T, mode="nearest"))
    return 0.5 * (gx + gy)


def random_pair(seed, shape=(32, 48)):
    rng = np.random.default_rng(seed)
    a = gaussian_filter(rng.normal(size=shape), 2.0) + 0.2 * rng.normal(size=shape)
    b = 0.7 * a + gaussian_filter(rng.normal(size=shape), 1.0)
    return a, b


# ---------------------------------------------------------------- NCC


def test_ncc_examples():
    a, _ = random_pair(0)
    assert ncc(a, a) == pytest.approx(1.0, abs=1e-9)
    assert ncc(a, -a) == pytest.approx(-1.0, abs=1e-9)
    assert ncc(a, a + 17.0) == pytest.approx(1.0, abs=1e-9)


def test_ncc_matches_corrcoef():
    for seed in range(5):
        a, b = random_pair(seed)
        assert ncc(a, b) == pytest.approx(ncc_oracle(a, b), abs=1e-7)


def test_ncc_degenerate_constant_pair():
    a = np.full((4, 4), 3.0)
    assert ncc(a, np.full((4, 4), -1.0)) == 0.0
    assert is_degenerate(a, a) and not is_degenerate(a, np.eye(4))


def test_shape_mismatch():
    with pytest.raises(ValueError, match="shapes differ"):
        ncc(np.ones((3, 3)), np.ones((3, 4)))


# ---------------------------------------------------------------- mNCC


def test_mncc_two_levels_by_hand():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(4, 4)), rng.normal(size=(4, 4))
    want = 0.5 * (ncc_oracle(a, b) + ncc_oracle(pool_oracle(a), pool_oracle(b)))
    assert mncc(a, b, 2) == pytest.approx(want, abs=1e-7)


def test_mncc_properties():
    a, b = random_pair(2, (64, 64))
    for L in (1, 2, 3, 4, 6):
        assert mncc(a, a, L) == pytest.approx(1.0, abs=1e-9)
        assert mncc(a, b, L) == pytest.approx(mncc_oracle(a, b, L), abs=1e-7)
    assert mncc(a, b, 1) == ncc(a, b)


def test_mncc_level_limit():
    a = np.random.default_rng(3).normal(size=(4, 4))
    mncc(a, a, 2)
    with pytest.raises(ValueError, match="pyramid levels"):
        mncc(a, a, 3)


def test_pool_odd_sizes_edge_padded():
    a = np.arange(15.0).reshape(3, 5)
    padded = np.pad(a, ((0, 1), (0, 1)), mode="edge")
    assert np.array_equal(pool(a, 2), pool_oracle(padded))
    with pytest.raises(ValueError):
        pool(a, 3)


# ---------------------------------------------------------------- gNCC


def test_gncc_matches_scipy_sobel():
    for seed in range(3):
        a, b = random_pair(seed)
        assert gncc(a, b) == pytest.approx(gncc_oracle(a, b), abs=1e-7)


def test_gncc_properties():
    a, b = random_pair(4)
    assert gncc(a, a) == pytest.approx(1.0, abs=1e-9)
    assert gncc(a + 5.0, b) == pytest.approx(gncc(a, b), abs=1e-12)
    assert gncc(a, b - 2.0) == pytest.approx(gncc(a, b), abs=1e-12)
    with pytest.raises(ValueError):
        gncc(np.ones((2, 5)), np.ones((2, 5)))


def test_gncc_edge_shift_below_one():
    a = np.zeros((16, 16))
    a[:, 8:] = 1.0
    b = np.roll(a, 1, axis=1)
    b[:, 0] = 0.0
    assert gncc(a, b) < 1.0


def test_sobel_kernel_orientation():
    ramp = np.tile(np.arange(6.0), (5, 1))  # increases along columns
    assert np.all(correlate(ramp, SOBEL_X, mode="nearest")[:, 1:-1] == 8.0)


# ---------------------------------------------------------------- combined


def test_combined_examples():
    a, b = random_pair(5)
    for metric in METRICS:
        assert combined(a, a, SimilarityConfig(metric)) == pytest.approx(1.0, abs=1e-9)
    assert combined(a, b, SimilarityConfig("ncc")) == ncc(a, b)


def test_combined_blended_pair_point_seven():
    rng = np.random.default_rng(6)
    a = gaussian_filter(rng.normal(size=(64, 64)), 3.0)
    a /= a.std()
    low = gaussian_filter(rng.normal(size=a.shape), 6.0)
    low /= low.std()
    high = rng.normal(size=a.shape)

    def blend(w):
        return a + w[0] * low + w[1] * high

    def resid(w):
        b = blend(w)
        return [mncc_oracle(a, b, 4) - 0.8, gncc_oracle(a, b) - 0.6]

    w, info, ok, msg = fsolve(resid, [0.5, 0.3], full_output=True, xtol=1e-13)
    assert ok == 1, msg
    b = blend(w)
    assert mncc(a, b) == pytest.approx(0.8, abs=1e-7)
    assert gncc(a, b) == pytest.approx(0.6, abs=1e-7)
    assert combined(a, b) == pytest.approx(0.7, abs=1e-7)


@pytest.mark.parametrize("metric", METRICS)
def test_affine_invariance_symmetry_range(metric):
    cfg = SimilarityConfig(metric)
    a, b = random_pair(7, (64, 64))
    base = combined(a, b, cfg)
    for s in (0.1, 0.5, 3.0, 10.0):
        for c in (-4.0, 0.0, 9.0):
            assert combined(s * a + c, b, cfg) == pytest.approx(base, abs=1e-6)
            assert combined(a, s * b + c, cfg) == pytest.approx(base, abs=1e-6)
    assert combined(b, a, cfg) == pytest.approx(base, abs=1e-9)
    rng = np.random.default_rng(8)
    for _ in range(20):
        x, y = rng.normal(size=(2, 16, 16))
        assert -1.0 <= combined(x, y, cfg) <= 1.0


def test_config_validation():
    with pytest.raises(ValueError):
        SimilarityConfig("mi")
    with pytest.raises(ValueError):
        SimilarityConfig(pyramid_levels=0)
    with pytest.raises(ValueError):
        SimilarityConfig(epsilon=0.0)


# ---------------------------------------------------------------- pixel gradients


@pytest.mark.parametrize("metric", METRICS)
def test_pixel_gradient_matches_fd(metric):
    cfg = SimilarityConfig(metric, pyramid_levels=3)
    a, b = random_pair(9, (17, 23))  # odd sizes exercise the padding adjoints
    _, g = metric_value_and_grad(a, b, cfg)
    rng = np.random.default_rng(10)
    for _ in range(12):
        i, j = rng.integers(0, a.shape[0]), rng.integers(0, a.shape[1])
        h = 1e-6
        ap, am = a.copy(), a.copy()
        ap[i, j] += h
        am[i, j] -= h
        fd = (combined(ap, b, cfg) - combined(am, b, cfg)) / (2 * h)
        assert g[i, j] == pytest.approx(fd, rel=1e-5, abs=1e-9)


# ---------------------------------------------------------------- pose gradients


def _scalar_fd(target, v, k, e, frame, cfg, j, h):
    p = np.array(e.params)
    lo, hi = p.copy(), p.copy()
    lo[j] -= h
    hi[j] += h
    f = lambda q: similarity_gradient_wrt_pose(target, v, k, EulerPose.from_params(q), cfg=cfg,
                                               chart="euler_zxy", frame=frame)[0]
    return (f(hi) - f(lo)) / (2 * h)


@pytest.mark.parametrize("metric", ["mncc_gncc_mean", "ncc"])
def test_pose_gradient_matches_scalar_fd(smooth, det64, carm, metric):
    v = smooth[0]
    cfg = SimilarityConfig(metric)
    target = similarity_gradient_wrt_pose(np.zeros((64, 64)), v, det64, EulerPose(10, -5, 3, 4, -650, 2),
                                          frame=carm)[2]
    e = EulerPose(14, -9, 6, 9, -630, -6)
    _, grad, _ = similarity_gradient_wrt_pose(target, v, det64, e, cfg=cfg, chart="euler_zxy", frame=carm)
    fd = [_scalar_fd(target, v, det64, e, carm, cfg, j, 1e-3 if j < 3 else 1e-2) for j in range(6)]
    assert rel_err(grad, fd) < 1e-2


def test_pose_gradient_vanishes_at_optimum(sphere_in_box, det64, carm, gt_pose, target64):
    v = sphere_in_box[0]
    _, g0, _ = similarity_gradient_wrt_pose(target64, v, det64, gt_pose, frame=carm)
    off = EulerPose(*(np.array(gt_pose.params) + [2, -2, 1, 3, 5, -3]))
    _, g1, _ = similarity_gradient_wrt_pose(target64, v, det64, off, frame=carm)
    assert np.linalg.norm(g0) < 1e-6 * np.linalg.norm(g1)


def test_ncc_gradient_flips_with_negated_target(sphere_in_box, det64, carm, gt_pose, target64):
    v = sphere_in_box[0]
    cfg = SimilarityConfig("ncc")
    e = EulerPose(*(np.array(gt_pose.params) + [3, 1, -2, 4, 8, 2]))
    _, g_pos, _ = similarity_gradient_wrt_pose(target64, v, det64, e, cfg=cfg, frame=carm)
    neg = -target64.pixels
    _, g_neg, _ = similarity_gradient_wrt_pose(neg, v, det64, e, cfg=cfg, frame=carm)
    assert np.allclose(g_neg, -g_pos, rtol=1e-9, atol=1e-15)


# ---------------------------------------------------------------- landscape


def test_landscape_rows_and_zero_offset(sphere_in_box, det64, carm, gt_pose, target64):
    v = sphere_in_box[0]
    rows = landscape(target64, v, det64, gt_pose, steps=11, frame=carm)
    assert len(rows) == 6 * 11
    for axis in ("alpha", "beta", "gamma", "x", "y", "z"):
        sweep = [r for r in rows if r[0] == axis]
        best = max(sweep, key=lambda r: r[3])
        assert best[1] == 0.0, axis
        assert best[3] == pytest.approx(combined(target64, target64), abs=1e-12)
    csv = landscape_csv(rows)
    assert csv.splitlines()[0] == "axis,offset,metric,value"
    assert len(csv.splitlines()) == 67
