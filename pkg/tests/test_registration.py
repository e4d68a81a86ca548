from __future__ import annotations

import json

import numpy as np
import pytest

from drrreg.geometry import EulerPose, Frame, Intrinsics, Pose, euler_to_pose, pose_to_euler
from drrreg.metrics import mtre
from drrreg.registration import (
    PARAM_NAMES,
    PRESETS,
    TRACE_HEADER,
    AdamState,
    InitStrategy,
    RefineConfig,
    RegistrationError,
    adam_step,
    apply_increment,
    downsample_image,
    initialize,
    refine,
    register,
    sample_poses,
    score,
)
from drrreg.renderer import make_rays, render_trilinear
from drrreg.volume import Volume

from oracles import se3_perturbed

FAST = RefineConfig(scales=(4, 2, 1), max_iters_per_scale=40)


# ---------------------------------------------------------------- Adam


def adam_oracle(grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Textbook bias-corrected Adam, one scalar parameter at a time."""
    m = v = 0.0
    out = []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        out.append(lr * (m / (1 - b1**t)) / ((v / (1 - b2**t)) ** 0.5 + eps))
    return out


def test_adam_matches_textbook_recurrence():
    rng = np.random.default_rng(0)
    G = rng.normal(size=(7, 6))
    lr = np.array([0.1, 0.1, 0.1, 2.0, 8.0, 2.0])
    state, got = AdamState(), []
    for g in G:
        state, inc = adam_step(state, g, lr)
        got.append(inc)
    for j in range(6):
        assert np.allclose(np.array(got)[:, j], adam_oracle(G[:, j], lr[j]), rtol=1e-13, atol=0)


def test_adam_first_step_is_lr():
    lr = np.array([0.01, 0.01, 0.01, 2.0, 8.0, 2.0])
    for g in (np.full(6, 3.0), np.array([-0.5, 2, 1e3, -7, 0.02, 1])):
        _, inc = adam_step(AdamState(), g, lr)
        assert np.allclose(np.abs(inc), lr, rtol=1e-6)


def test_adam_zero_gradient_never_moves():
    state = AdamState()
    for _ in range(20):
        state, inc = adam_step(state, np.zeros(6), np.ones(6))
        assert not inc.any()


def test_adam_identical_gradients_do_not_grow():
    g = np.array([0.3, -1.0, 2.0, 0.01, 5.0, -0.2])
    s1, inc1 = adam_step(AdamState(), g, np.ones(6))
    _, inc2 = adam_step(s1, g, np.ones(6))
    assert np.all(np.abs(inc2) <= np.abs(inc1) * (1 + 1e-15))


def test_adam_rejects_non_finite():
    with pytest.raises(FloatingPointError):
        adam_step(AdamState(), np.array([0, 0, np.nan, 0, 0, 0]), np.ones(6))


def test_apply_increment_se3_matches_expm():
    rng = np.random.default_rng(1)
    T = euler_to_pose(EulerPose(20, -30, 10, 4, -700, 6))
    for _ in range(5):
        xi = rng.normal(size=6) * [0.1, 0.1, 0.1, 5, 5, 5]
        got = apply_increment(T, xi, "se3").camera_to_world()
        assert np.allclose(got, se3_perturbed(T.rotation, T.translation, xi), atol=1e-9)


def test_apply_increment_euler_adds_parameters():
    e = EulerPose(10, 20, 30, 1, -600, 3)
    inc = np.array([0.5, -0.25, 1.0, 2.0, -3.0, 0.5])
    out = pose_to_euler(apply_increment(euler_to_pose(e), inc, "euler_zxy"))
    assert np.allclose(out.params, np.array(e.params) + inc, atol=1e-9)


# ---------------------------------------------------------------- config


def test_refine_config_json_round_trip_and_unknown_keys():
    cfg = RefineConfig(scales=(4, 1), n_samples=(64, 128), chart="euler_zxy")
    d = json.loads(json.dumps(cfg.to_json()))
    assert RefineConfig.from_json(d) == cfg
    with pytest.raises(ValueError, match="unknown"):
        RefineConfig.from_json({**d, "momentum": 0.5})


@pytest.mark.parametrize("bad", [
    dict(scales=(4, 2)), dict(scales=(2, 4, 1)), dict(scales=()), dict(lr_rot_deg=0.0),
    dict(plateau_tol=-1.0), dict(beta1=1.0), dict(chart="quat"), dict(n_samples=(10,)),
])
def test_refine_config_validation(bad):
    with pytest.raises(ValueError):
        RefineConfig(**bad)


def test_default_config_values():
    cfg = RefineConfig()
    assert cfg.scales == (8, 4, 2, 1) and cfg.chart == "se3"
    assert (cfg.lr_rot_deg, cfg.lr_trans_mm, cfg.depth_lr_multiplier) == (0.5, 2.0, 4.0)
    assert (cfg.beta1, cfg.beta2, cfg.adam_eps) == (0.9, 0.999, 1e-8)
    assert (cfg.plateau_window, cfg.plateau_tol, cfg.max_iters_per_scale) == (10, 1e-4, 150)
    lr = cfg.learning_rates("euler_zxy")
    assert np.allclose(lr, [0.5, 0.5, 0.5, 2.0, 8.0, 2.0])


def test_init_strategy_json_and_validation():
    s = InitStrategy.preset("skull", n_starts=8, seed=3)
    assert InitStrategy.from_json(json.loads(json.dumps(s.to_json()))) == s
    f = InitStrategy.fixed(EulerPose(1, 2, 3, 4, 5, 6))
    assert InitStrategy.from_json(json.loads(json.dumps(f.to_json()))) == f
    with pytest.raises(ValueError):
        InitStrategy("fixed")
    with pytest.raises(ValueError):
        InitStrategy("multistart", ranges={**PRESETS["pelvis"], "x": (5.0, -5.0)})
    with pytest.raises(ValueError):
        InitStrategy.from_json({**s.to_json(), "temperature": 1})
    with pytest.raises(ValueError):
        InitStrategy.preset("knee")


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_preset_draws_within_ranges(name):
    poses = sample_poses(PRESETS[name], 500, 11)
    P = np.array([p.params for p in poses])
    for j, key in enumerate(PARAM_NAMES):
        lo, hi = PRESETS[name][key]
        assert P[:, j].min() >= lo and P[:, j].max() <= hi
    assert [p.params.tolist() for p in sample_poses(PRESETS[name], 5, 11)] == P[:5].tolist()


def test_pelvis_preset_table():
    assert PRESETS["pelvis"] == {"alpha": (-45.0, 45.0), "beta": (-45.0, 45.0), "gamma": (-15.0, 15.0),
                                 "x": (-150.0, 150.0), "y": (-1000.0, -450.0), "z": (-150.0, 150.0)}


# ---------------------------------------------------------------- initialize


def test_initialize_fixed_and_multistart(sphere_in_box, det64, target64, gt_pose):
    v = sphere_in_box[0]
    [(p, s)] = initialize(InitStrategy.fixed(gt_pose), target64, v, det64, FAST)
    assert p == gt_pose and s == score(target64, v, det64, gt_pose, FAST, scale=4)
    strat = InitStrategy.preset("pelvis", n_starts=12, seed=5)
    a = initialize(strat, target64, v, det64, FAST)
    b = initialize(strat, target64, v, det64, FAST)
    assert [x[0] for x in a] == [x[0] for x in b] and [x[1] for x in a] == [x[1] for x in b]
    assert [x[1] for x in a] == sorted((x[1] for x in a), reverse=True)
    with pytest.raises(ValueError):
        initialize(InitStrategy("multistart", ranges=None, n_starts=2), target64, v, det64, FAST)


# ---------------------------------------------------------------- refine


def test_downsample_and_scale_consistency(smooth, carm):
    k = Intrinsics(1000.0, 64, 64, (4.8, 4.8))
    pose = carm.to_world(EulerPose(10, -5, 3, 4, -650, 2))
    v = smooth[0]
    full = render_trilinear(v, make_rays(k, pose)).pixels
    half = render_trilinear(v, make_rays(k.downsample(2), pose)).pixels
    pooled = downsample_image(full, 2)
    assert np.allclose(pooled[0, 0], full[:2, :2].mean())
    assert np.mean(np.abs(half - pooled)) / np.mean(np.abs(pooled)) < 0.02
    with pytest.raises(ValueError):
        downsample_image(full[:63], 2)


def test_max_iters_zero_returns_init(sphere_in_box, det64, target64, gt_pose):
    init = EulerPose(*(np.array(gt_pose.params) + [2, 1, -1, 3, 5, -2]))
    pose, trace = refine(target64, sphere_in_box[0], det64, init,
                         RefineConfig(scales=(1,), max_iters_per_scale=0), Frame.carm())
    assert np.array_equal(pose.camera_to_world(), euler_to_pose(init).camera_to_world())
    assert trace.records == []


def test_zero_volume_returns_init(det64, target64, gt_pose):
    v = Volume(np.zeros((8, 8, 8)), (10, 10, 10), (-40, -40, -40))
    pose, trace = refine(target64, v, det64, gt_pose, RefineConfig(scales=(2, 1), max_iters_per_scale=15))
    assert np.array_equal(pose.camera_to_world(), euler_to_pose(gt_pose).camera_to_world())
    assert all(r.grad_norm == 0.0 for r in trace.records)


def test_refine_trace_bookkeeping(sphere_in_box, det64, target64, gt_pose, carm):
    init = EulerPose(*(np.array(gt_pose.params) + [3, -2, 2, 4, 10, -3]))
    cfg = FAST
    pose, trace = refine(target64, sphere_in_box[0], det64, init, cfg, carm)
    assert trace.to_csv().splitlines()[0] == ",".join(TRACE_HEADER)
    assert TRACE_HEADER == ("scale", "iter", "metric", "alpha", "beta", "gamma", "x", "y", "z", "grad_norm", "ms")
    for f, reason in (t.split(":") for t in trace.termination.split(",")):
        recs = [r for r in trace.records if r.scale == int(f)]
        assert [r.iter for r in recs] == list(range(len(recs)))
        if reason == "plateau":
            assert len(recs) > cfg.plateau_window
    finest = [r for r in trace.records if r.scale == 1]
    assert trace.final_metric == max(r.metric for r in finest)
    best = max(finest, key=lambda r: r.metric)
    assert np.allclose(pose_to_euler(pose).params, best.params, atol=1e-9)
    assert all(np.isfinite(r.metric) for r in trace.records)


def test_refine_improves_from_near_optimum(sphere_in_box, det64, target64, gt_pose, carm):
    X = sphere_in_box[1]
    init = EulerPose(*(np.array(gt_pose.params) + [0.5, -0.5, 0.3, 1.0, 2.0, -1.0]))
    pose, trace = refine(target64, sphere_in_box[0], det64, init, FAST, carm)
    gt_w = carm.to_world(gt_pose)
    assert mtre(gt_w, carm.to_world(pose), X) <= mtre(gt_w, carm.to_world(init), X)
    assert trace.final_metric >= score(target64, sphere_in_box[0], det64, init, FAST, carm, scale=1)


def test_refine_is_deterministic(sphere_in_box, det64, target64, gt_pose, carm):
    init = EulerPose(*(np.array(gt_pose.params) + [2, 2, -2, -3, 8, 3]))
    a, ta = refine(target64, sphere_in_box[0], det64, init, FAST, carm)
    b, tb = refine(target64, sphere_in_box[0], det64, init, FAST, carm)
    assert np.array_equal(a.camera_to_world(), b.camera_to_world())
    assert [r.metric for r in ta.records] == [r.metric for r in tb.records]


def test_gimbal_lock_switches_chart(sphere_in_box, det64, target64, carm):
    cfg = RefineConfig(scales=(2, 1), max_iters_per_scale=3, chart="euler_zxy")
    _, trace = refine(target64, sphere_in_box[0], det64, EulerPose(0, 90, 0, 0, -700, 0), cfg, carm)
    assert any("gimbal lock" in e for e in trace.events)


def test_non_finite_metric_raises_with_trace(sphere_in_box, det64, gt_pose, carm):
    bad = np.zeros((64, 64))
    bad[3, 3] = np.inf
    with pytest.raises(RegistrationError) as info:
        refine(bad, sphere_in_box[0], det64, gt_pose, RefineConfig(scales=(1,), max_iters_per_scale=5), carm)
    assert info.value.trace.termination == "non-finite"
    assert len(info.value.trace.records) == 1


def test_target_shape_checked(sphere_in_box, det64, gt_pose):
    with pytest.raises(ValueError, match="does not match"):
        refine(np.zeros((32, 64)), sphere_in_box[0], det64, gt_pose)


# ---------------------------------------------------------------- register


def test_register_fixed_top1_equals_refine(sphere_in_box, det64, target64, gt_pose, carm):
    init = EulerPose(*(np.array(gt_pose.params) + [1, -1, 1, 2, 4, -2]))
    res = register(target64, sphere_in_box[0], det64, InitStrategy.fixed(init), FAST, 1, carm,
                   gt_world_pose=carm.to_world(gt_pose), fiducials=sphere_in_box[1])
    pose, trace = refine(target64, sphere_in_box[0], det64, init, FAST, carm)
    assert np.array_equal(res.pose.camera_to_world(), pose.camera_to_world())
    assert res.metric == trace.final_metric
    assert res.report.mtre_mm == mtre(carm.to_world(gt_pose), res.world_pose, sphere_in_box[1])
    with pytest.raises(ValueError, match="top_r"):
        register(target64, sphere_in_box[0], det64, InitStrategy.fixed(init), FAST, 2, carm)


@pytest.mark.slow
def test_multistart_recovers_pose(sphere_in_box, det256, gt_pose):
    # pelvis ranges are wide; success needs one of 64 draws near the capture basin
    v, fid, _ = sphere_in_box
    frame = Frame.carm(v.isocenter())
    gt_w = frame.to_world(gt_pose)
    target = render_trilinear(v, make_rays(det256, gt_w))
    res = register(target, v, det256, InitStrategy.preset("pelvis", 64, 0), RefineConfig(), 4, frame,
                   gt_world_pose=gt_w, fiducials=fid)
    assert len(res.candidates) == 64
    assert res.report.mtre_mm < 1.0
