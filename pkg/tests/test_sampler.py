import math

import numpy as np
import pytest

from conflictgen.core import InvalidInput
from conflictgen.guidance import GuidanceConfig, GuidanceContext, GuidanceObjective
from conflictgen.mining import mine_scene
from conflictgen.sampler import (
    Adam,
    ConstantVelocityDenoiser,
    DenoiserContext,
    PlanGuidance,
    SamplerConfig,
    SceneFailure,
    best_of_candidates,
    closed_loop_rollout,
    constant_velocity,
    constant_velocity_denoiser,
    cosine_schedule,
    derive_seeds,
    forward_noise,
    guided_denoise_step,
    integrate_accel,
    integrate_accel_adjoint,
    rollout_batch,
    select_candidate,
    smooth3,
)
from conflictgen.suite import generate_suite
from helpers import line, scene, target, track

FAST = SamplerConfig(diffusion_steps=4, candidates_per_scene=3)


# ---------------------------------------------------------------- schedule


def test_cosine_schedule_invariants():
    s = cosine_schedule(100)
    assert abs(s.alpha_bar[0] - 1.0) <= 1e-6
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert s.alpha_bar[100] < 0.01
    assert len(s.alpha_bar) == 101
    with pytest.raises(InvalidInput):
        cosine_schedule(0)


def test_posterior_coefficients():
    s = cosine_schedule(10)
    coef0, coefk, var = s.posterior
    ab, beta = s.alpha_bar, s.betas
    for k in range(1, 11):
        assert coef0[k] == pytest.approx(math.sqrt(ab[k - 1]) * beta[k] / (1 - ab[k]))
        assert coefk[k] == pytest.approx(math.sqrt(ab[k] / ab[k - 1]) * (1 - ab[k - 1]) / (1 - ab[k]))
        assert var[k] == pytest.approx((1 - ab[k - 1]) / (1 - ab[k]) * beta[k])
    assert var[1] == pytest.approx(0.0, abs=1e-12)


def test_forward_noise_examples():
    s = cosine_schedule(50)
    x0 = np.random.default_rng(0).normal(size=(3, 7, 2))
    np.testing.assert_allclose(forward_noise(x0, 20, np.zeros_like(x0), s), math.sqrt(s.alpha_bar[20]) * x0)
    np.testing.assert_array_equal(forward_noise(x0, 0, np.ones_like(x0), s), x0)
    with pytest.raises(InvalidInput):
        forward_noise(x0, 3, np.zeros((3, 7)), s)
    with pytest.raises(InvalidInput):
        forward_noise(x0, 51, np.zeros_like(x0), s)


# ---------------------------------------------------------------- denoiser


def test_smooth3_preserves_lines():
    x = line((1, 2), (3, -1), 9)
    np.testing.assert_allclose(smooth3(x), x, atol=1e-12)


def test_denoiser_fixed_point():
    s = cosine_schedule(20)
    hist = line((-3, 0), (1, 0), 4, dt=1.0)[None] - [0, 0]
    hist = hist - hist[:, -1:]
    cv, held = constant_velocity(hist, T=10)
    assert not held.any()
    for k in (1, 7, 20):
        np.testing.assert_allclose(constant_velocity_denoiser(cv, k, hist, s), cv, atol=1e-12)


def test_denoiser_pure_noise_is_smoothed_sample():
    s = cosine_schedule(100)
    hist = np.zeros((1, 5, 2))
    x = np.random.default_rng(1).normal(size=(1, 8, 2))
    out = constant_velocity_denoiser(x, 100, hist, s)
    np.testing.assert_allclose(out, smooth3(x), atol=1e-3)


def test_denoiser_clean_end_is_constant_velocity():
    s = cosine_schedule(100)
    hist = (np.arange(-4, 1)[:, None] * [0.2, 0.0])[None]  # 2 m/s at dt 0.1
    x = np.random.default_rng(2).normal(size=(1, 6, 2))
    out = constant_velocity_denoiser(x, 0, hist, s)
    np.testing.assert_allclose(out[0, :, 0], 0.2 * np.arange(1, 7))
    np.testing.assert_allclose(out[0, :, 1], 0.0)


def test_denoiser_missing_history_holds_agent():
    hist = np.array([[[5.0, 5.0], [0.0, 0.0]]])
    cv, held = constant_velocity(hist, valid=np.array([[False, True]]), T=4)
    assert held.all()
    np.testing.assert_array_equal(cv, 0.0)


# -------------------------------------------------------------------- Adam


def test_adam_first_step_is_signed_lr():
    p = np.array([1.0, -2.0, 3.0])
    Adam(3).step(p, np.array([0.5, -4.0, 0.0]), 0.1)
    np.testing.assert_allclose(p, [0.9, -1.9, 3.0], atol=1e-7)


def test_adam_matches_hand_recursion():
    rng = np.random.default_rng(3)
    grads = rng.normal(size=(5, 4))
    p = np.zeros(4)
    opt = Adam(4)
    m = v = np.zeros(4)
    ref = np.zeros(4)
    for t, g in enumerate(grads, 1):
        opt.step(p, g, 0.01)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(p, ref, rtol=1e-12)


def test_integrate_accel_adjoint_identity():
    rng = np.random.default_rng(4)
    a, g = rng.normal(size=(2, 3, 11, 2))
    lhs = np.sum(integrate_accel(a, 0.1) * g)
    rhs = np.sum(a * integrate_accel_adjoint(g, 0.1))
    assert lhs == pytest.approx(rhs, rel=1e-12)


# ------------------------------------------------------------ guided step


def _plan_setup(B=4, T=20, A=3, cfg=SamplerConfig(future_len=20), guidance=GuidanceConfig(), seed=0):
    """Identity-frame plan with agent 1 as adversary approaching a crossing."""
    rng = np.random.default_rng(seed)
    sched = cosine_schedule(10)
    hist = np.zeros((B, A, 4, 2))
    hist[:, 0] = (np.arange(-3, 1)[:, None] * [0.5, 0.0])
    hist[:, 1] = (np.arange(-3, 1)[:, None] * [0.0, 0.4])
    dctx = DenoiserContext(hist, np.ones((A, 4), bool), sched, T)
    rot = np.broadcast_to(np.eye(2), (B, A, 2, 2)).copy()
    pos = np.zeros((B, A, 2))
    pos[:, 1] = (6.0, -6.0)
    tgt = target(agent_id=1, c=(6.0, 0.0), tau_e=11, tau_a=16)
    obj = GuidanceObjective(GuidanceContext(tgt, 0.6, T), guidance, T)
    plan = PlanGuidance(lambda k: obj, 0, 1, rot, pos, cfg, 0.1)
    x = rng.normal(size=(B, A, T, 2))
    return plan, obj, dctx, x


def test_zero_guidance_step_is_bitwise_unguided():
    plan, _, dctx, x = _plan_setup(guidance=GuidanceConfig(strength=0.0))
    den = ConstantVelocityDenoiser()
    for k in (5, 1):
        r1 = [np.random.default_rng(s) for s in range(4)]
        r2 = [np.random.default_rng(s) for s in range(4)]
        guided, g0 = guided_denoise_step(x, k, den, dctx, r1, plan)
        plain, p0 = guided_denoise_step(x, k, den, dctx, r2, None)
        assert guided.tobytes() == plain.tobytes() and g0.tobytes() == p0.tobytes()


def test_guided_step_decreases_loss():
    plan, obj, dctx, x = _plan_setup()
    x0 = ConstantVelocityDenoiser()(x, 5, dctx)
    before = obj.total(obj.parts(*plan.world_pair(x0)))
    after = obj.total(obj.parts(*plan.world_pair(plan.apply(x0, 5))))
    assert np.all(after < before)


def test_perturbation_touches_only_adversary_and_respects_cap():
    cfg = SamplerConfig(future_len=20, perturb_norm_cap=0.05, perturb_lr=5.0)
    plan, _, dctx, x = _plan_setup(cfg=cfg)
    x0 = ConstantVelocityDenoiser()(x, 3, dctx)
    out = plan.apply(x0, 1)
    diff = out - x0
    assert not np.delete(diff, 1, axis=1).any()
    assert diff[:, 1].any()
    norms = np.sqrt((plan.delta**2).sum(axis=(1, 2)))
    assert np.all(norms <= 0.05 * (1 + 1e-12))


def test_step_range_checked():
    _, _, dctx, x = _plan_setup()
    with pytest.raises(InvalidInput):
        guided_denoise_step(x, 0, ConstantVelocityDenoiser(), dctx, [np.random.default_rng(0)] * 4)


# -------------------------------------------------------------- rollouts


def test_stationary_agents_stay_near_rest():
    n = 31 + 50
    s = scene([track(0, np.zeros((n, 2)), yaws=0.0), track(1, np.full((n, 2), 20.0), yaws=0.0)], history_len=31)
    results = rollout_batch(s, None, list(range(20)), None, SamplerConfig())
    for r in results:
        assert np.abs(r.positions - [[[0, 0]], [[20, 20]]]).max() < 0.5


def _crossing(n_future=40, history=31):
    n = history + n_future
    ego = track(0, line((-6.5 * 0.1 * (history - 1) - 20, -2), (6.5, 0), n))
    adv = track(1, line((2, -5.0 * 0.1 * (history - 1) - 20), (0, 5.0), n))
    return scene([ego, adv], history_len=history, scene_id="cross")


def test_progress_sequence():
    s = _crossing(n_future=100)
    tgt = mine_scene(s)
    r = closed_loop_rollout(s, tgt, 0, GuidanceConfig(), SamplerConfig(diffusion_steps=1, guidance_steps=1))
    assert [d["progress"] for d in r.diagnostics] == pytest.approx([0.05 * i for i in range(1, 21)])
    assert [d["t_global"] for d in r.diagnostics] == list(range(0, 100, 5))
    assert r.horizon == 100 and r.positions.shape == (2, 100, 2)


def test_rollout_determinism_and_batch_independence():
    s = _crossing()
    tgt = mine_scene(s)
    a = rollout_batch(s, tgt, [3, 7], GuidanceConfig(), FAST)
    b = rollout_batch(s, tgt, [7], GuidanceConfig(), FAST)
    c = closed_loop_rollout(s, tgt, 7, GuidanceConfig(), FAST)
    assert a[1].positions.tobytes() == b[0].positions.tobytes() == c.positions.tobytes()
    assert a[1].diagnostics == c.diagnostics


def test_guided_needs_target():
    with pytest.raises(InvalidInput):
        rollout_batch(_crossing(), None, [0], GuidanceConfig(), FAST)


def test_short_history_is_padded_and_flagged():
    s = _crossing(history=3)
    r = closed_loop_rollout(s, mine_scene(s), 0, None, FAST)
    assert "history_padded" in r.flags


def test_guided_crossing_beats_unguided():
    s = generate_suite(1, 0)[0]
    tgt = mine_scene(s)
    cfg = SamplerConfig(diffusion_steps=12)
    seeds = list(range(100))
    g = rollout_batch(s, tgt, seeds, GuidanceConfig(), cfg)
    u = rollout_batch(s, tgt, seeds, None, cfg)
    wins = sum(a.min_distance < b.min_distance for a, b in zip(g, u))
    assert wins >= 90


# --------------------------------------------------------------- selection


def test_selection_key_example():
    sums = [
        {"seed": 1, "min_distance": 2.0, "collided": False},
        {"seed": 2, "min_distance": 0.0, "collided": True},
        {"seed": 3, "min_distance": 1.5, "collided": False},
    ]
    assert select_candidate(sums) == 1
    assert select_candidate(sums[::-1]) == 1
    assert select_candidate([dict(s, aborted=True) for s in sums]) is None


def test_selection_permutation_invariant():
    rng = np.random.default_rng(5)
    sums = [{"seed": i, "min_distance": float(rng.uniform(0, 3)), "collided": bool(rng.random() < 0.3)} for i in range(12)]
    best = sums[select_candidate(sums)]
    for _ in range(5):
        perm = list(rng.permutation(sums))
        assert perm[select_candidate(perm)] == best


def test_best_of_one_equals_single_rollout():
    s = _crossing()
    tgt = mine_scene(s)
    cfg = SamplerConfig(diffusion_steps=3, candidates_per_scene=1)
    best = best_of_candidates(s, tgt, 11, GuidanceConfig(), cfg)
    single = closed_loop_rollout(s, tgt, derive_seeds(11, 1)[0], GuidanceConfig(), cfg)
    assert best.positions.tobytes() == single.positions.tobytes()
    assert best.selected == 0 and len(best.candidates) == 1


def test_best_of_picks_collision_or_closest():
    s = _crossing()
    tgt = mine_scene(s)
    best = best_of_candidates(s, tgt, 2, GuidanceConfig(), FAST)
    assert best.candidates[best.selected] == best.summary()
    assert select_candidate(best.candidates) == best.selected


def test_all_candidates_aborted_is_scene_failure():
    s = _crossing()

    def broken(x_k, k, ctx):
        return np.full_like(x_k, np.nan)

    with pytest.raises(SceneFailure):
        best_of_candidates(s, mine_scene(s), 0, GuidanceConfig(), FAST, denoiser=broken)


def test_sampler_config_validation_and_json():
    with pytest.raises(InvalidInput):
        SamplerConfig(candidates_per_scene=0)
    with pytest.raises(InvalidInput):
        SamplerConfig(perturb_lr=0)
    with pytest.raises(InvalidInput):
        SamplerConfig.from_json({"nope": 1})
    cfg = SamplerConfig(diffusion_steps=7)
    assert SamplerConfig.from_json(cfg.to_json()) == cfg
