"""Guided denoising sampler and closed-loop rollout.

Trajectories live in per-agent local frames anchored at each agent's last
committed pose, shaped ``(B, A, T, 2)`` with ``B`` independent candidates.
Every candidate owns its own ``numpy.random.Generator``; candidates never
share random state, so a candidate's result does not depend on which
other candidates are batched with it.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from functools import cached_property
from typing import Callable, Optional, Sequence

import numpy as np

from .core import InvalidInput, Scene, obb_overlap_arrays
from .guidance import GuidanceConfig, GuidanceContext, GuidanceObjective
from .mining import ConflictTarget

log = logging.getLogger(__name__)

YAW_MIN_STEP = 0.05  # meters of displacement needed to update heading


@dataclass(frozen=True)
class SamplerConfig:
    guidance_steps: int = 30
    perturb_lr: float = 0.001
    perturb_norm_cap: float = 100.0
    final_step_lr: float = 0.3
    final_step_iters: int = 1
    intermediate_guidance: bool = True
    output_stage_guidance: bool = False
    candidates_per_scene: int = 16
    action_horizon: int = 5
    history_len: int = 31
    future_len: int = 52
    dt: float = 0.1
    diffusion_steps: int = 100
    rollout_len: Optional[int] = None  # None: the scene's own future length

    def __post_init__(self):
        counts = ("candidates_per_scene", "action_horizon", "history_len", "future_len", "diffusion_steps")
        for name in counts:
            if getattr(self, name) < 1:
                raise InvalidInput(f"{name} must be positive")
        if self.guidance_steps < 0 or self.final_step_iters < 0:
            raise InvalidInput("iteration counts must be non-negative")
        if self.perturb_lr <= 0 or self.final_step_lr <= 0 or self.perturb_norm_cap <= 0 or self.dt <= 0:
            raise InvalidInput("learning rates, norm cap and dt must be positive")
        if self.rollout_len is not None and self.rollout_len < 1:
            raise InvalidInput("rollout_len must be positive")
        if self.action_horizon > self.future_len:
            raise InvalidInput("action_horizon cannot exceed future_len")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, data: dict) -> "SamplerConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidInput(f"unknown sampler options {sorted(unknown)}")
        return cls(**data)


# ------------------------------------------------------------- schedule


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    K: int
    alpha_bar: np.ndarray  # (K + 1,)

    @cached_property
    def betas(self) -> np.ndarray:
        """``beta[k]`` for k = 1..K (index 0 unused, set to 0)."""
        ab = self.alpha_bar
        return np.concatenate([[0.0], 1.0 - ab[1:] / ab[:-1]])

    @cached_property
    def posterior(self):
        """Per-step ``(coef_x0, coef_xk, variance)`` arrays indexed by k."""
        ab, beta = self.alpha_bar, self.betas
        coef0 = np.zeros(self.K + 1)
        coefk = np.zeros(self.K + 1)
        var = np.zeros(self.K + 1)
        for k in range(1, self.K + 1):
            coef0[k] = math.sqrt(ab[k - 1]) * beta[k] / (1.0 - ab[k])
            coefk[k] = math.sqrt(1.0 - beta[k]) * (1.0 - ab[k - 1]) / (1.0 - ab[k])
            var[k] = (1.0 - ab[k - 1]) / (1.0 - ab[k]) * beta[k]
        return coef0, coefk, var


def cosine_schedule(K: int = 100, s: float = 0.008) -> NoiseSchedule:
    if K < 1:
        raise InvalidInput("schedule needs K >= 1")
    k = np.arange(K + 1)
    f = np.cos((k / K + s) / (1 + s) * np.pi / 2) ** 2
    raw = f / f[0]
    beta = np.clip(1.0 - raw[1:] / raw[:-1], 0.0, 0.999)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - beta)])
    return NoiseSchedule(K, alpha_bar)


def forward_noise(x0, k: int, eps, sched: NoiseSchedule) -> np.ndarray:
    x0, eps = np.asarray(x0, float), np.asarray(eps, float)
    if x0.shape != eps.shape:
        raise InvalidInput(f"shape mismatch {x0.shape} vs {eps.shape}")
    if not 0 <= k <= sched.K:
        raise InvalidInput(f"step {k} outside [0, {sched.K}]")
    ab = sched.alpha_bar[k]
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


# ------------------------------------------------------------- denoiser


def smooth3(x) -> np.ndarray:
    """3-point moving average along the step axis (-2).

    Ends are padded by linear extrapolation, so straight lines at constant
    speed are left untouched.
    """
    x = np.asarray(x, float)
    if x.shape[-2] < 2:
        return x.copy()
    first = 2.0 * x[..., :1, :] - x[..., 1:2, :]
    last = 2.0 * x[..., -1:, :] - x[..., -2:-1, :]
    padded = np.concatenate([first, x, last], axis=-2)
    return (padded[..., :-2, :] + padded[..., 1:-1, :] + padded[..., 2:, :]) / 3.0


def constant_velocity(history, valid=None, T: int = 52):
    """Extrapolate each agent from its last two valid history points.

    ``history`` is ``(..., A, L, 2)`` in the agent's local frame (the
    anchor, i.e. the current position, is the origin).  Returns
    ``(cv, held)`` where ``cv`` is ``(..., A, T, 2)`` and ``held`` marks
    agents that lacked two valid points and are held in place.
    """
    hist = np.asarray(history, float)
    L = hist.shape[-2]
    if valid is None:
        valid = np.ones(hist.shape[-3:-1], bool)
    valid = np.asarray(valid, bool)
    idx = np.arange(L)
    last = np.where(valid, idx, -1).max(axis=-1)
    prev = np.where(valid & (idx < last[..., None]), idx, -1).max(axis=-1)
    held = (last < 0) | (prev < 0)
    li, pi = np.maximum(last, 0), np.maximum(prev, 0)
    p_last = np.take_along_axis(hist, np.broadcast_to(li[..., None, None], hist.shape[:-2] + (1, 2)), -2)[..., 0, :]
    p_prev = np.take_along_axis(hist, np.broadcast_to(pi[..., None, None], hist.shape[:-2] + (1, 2)), -2)[..., 0, :]
    gap = np.maximum(li - pi, 1)
    vel = np.where(held[..., None], 0.0, (p_last - p_prev) / gap[..., None])
    steps = np.arange(1, T + 1, dtype=float)[:, None]
    cv = p_last[..., None, :] + steps * vel[..., None, :]
    return cv, held


def blend_denoise(x_k, k: int, cv, sched: NoiseSchedule) -> np.ndarray:
    ab = sched.alpha_bar[k]
    return ab * cv + (1.0 - ab) * smooth3(x_k)


def constant_velocity_denoiser(x_k, k: int, history, sched: NoiseSchedule, valid=None) -> np.ndarray:
    """Analytic x0 estimate: noise-level blend of constant velocity and a smoothed sample."""
    x_k = np.asarray(x_k, float)
    cv, held = constant_velocity(history, valid, x_k.shape[-2])
    if np.any(held):
        log.debug("constant-velocity denoiser: %d agent(s) held in place", int(np.count_nonzero(held)))
    return blend_denoise(x_k, k, cv, sched)


@dataclass(eq=False)
class DenoiserContext:
    """What a denoiser may condition on: local history plus the schedule."""

    history: np.ndarray  # (B, A, L, 2)
    valid: np.ndarray  # (A, L) or (B, A, L)
    schedule: NoiseSchedule
    horizon: int

    @cached_property
    def cv(self):
        return constant_velocity(self.history, self.valid, self.horizon)


Denoiser = Callable[[np.ndarray, int, DenoiserContext], np.ndarray]


class ConstantVelocityDenoiser:
    """Default denoiser; caches the extrapolation once per plan."""

    def __call__(self, x_k, k, ctx: DenoiserContext):
        return blend_denoise(x_k, k, ctx.cv[0], ctx.schedule)


# ----------------------------------------------------------------- Adam


class Adam:
    """Bias-corrected Adam over an array parameter, updated in place."""

    def __init__(self, shape, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def step(self, param, grad, lr):
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        param -= lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return param


# ------------------------------------------------------- guided stepping


def _rotate(v, rot):
    """``v @ rot.T`` with one rotation per leading index (``v``: (..., T, 2), ``rot``: (..., 2, 2))."""
    r = rot[..., None, :, :]
    x, y = v[..., 0], v[..., 1]
    return np.stack([r[..., 0, 0] * x + r[..., 0, 1] * y, r[..., 1, 0] * x + r[..., 1, 1] * y], -1)


def _rotate_back(v, rot):
    """``v @ rot``: world-frame vectors into the local frame."""
    r = rot[..., None, :, :]
    x, y = v[..., 0], v[..., 1]
    return np.stack([r[..., 0, 0] * x + r[..., 1, 0] * y, r[..., 0, 1] * x + r[..., 1, 1] * y], -1)


def _to_world(local, rot, pos):
    return _rotate(local, rot) + pos[..., None, :]


def _to_local_vec(vec, rot):
    return _rotate_back(vec, rot)


def integrate_accel(accel, dt):
    """Offsets produced by per-step acceleration perturbations: ``dt^2`` times a double cumulative sum."""
    return (dt * dt) * np.cumsum(np.cumsum(accel, axis=-2), axis=-2)


def integrate_accel_adjoint(grad, dt):
    """Transpose of :func:`integrate_accel` (reverse double cumulative sum)."""
    rev = grad[..., ::-1, :]
    return (dt * dt) * np.cumsum(np.cumsum(rev, axis=-2), axis=-2)[..., ::-1, :]


class PlanGuidance:
    """Perturbation state for one plan.

    The adversary offset ``delta`` is parameterised by per-step
    accelerations (m/s^2) that are integrated twice, so Adam updates reach
    the offset as smooth speed changes starting at the first planned
    step.  Both the parameters and their Adam moments persist across the
    denoising steps of a plan.  ``objective_for(k)`` returns the
    objective used at denoising step k.
    """

    def __init__(
        self,
        objective_for: Callable[[int], GuidanceObjective],
        ego_row: int,
        adv_row: int,
        rot: np.ndarray,
        pos: np.ndarray,
        cfg: SamplerConfig,
        dt: float,
    ):
        self.objective_for = objective_for
        self.ego_row, self.adv_row = ego_row, adv_row
        self.rot, self.pos = rot, pos  # (B, A, 2, 2), (B, A, 2)
        self.cfg = cfg
        self.dt = dt
        B, T = rot.shape[0], cfg.future_len
        self.accel = np.zeros((B, T, 2))
        self.delta = np.zeros((B, T, 2))
        self.adam = Adam((B, T, 2))
        self.aborted = np.zeros(B, bool)

    def _optimise(self, obj, x0, iters, lr):
        rot_a, pos_a = self.rot[:, self.adv_row], self.pos[:, self.adv_row]
        ego_w = _to_world(x0[:, self.ego_row], self.rot[:, self.ego_row], self.pos[:, self.ego_row])
        xe = ego_w[:, obj.ie]
        base = x0[:, self.adv_row]
        cap = self.cfg.perturb_norm_cap
        for _ in range(iters):
            adv_w = _to_world(base + self.delta, rot_a, pos_a)
            g = _to_local_vec(obj.adv_gradient(adv_w, xe), rot_a)
            g = integrate_accel_adjoint(g, self.dt)
            bad = ~np.all(np.isfinite(g), axis=(1, 2))
            if bad.any():
                self.aborted |= bad
                g[bad] = 0.0
            self.adam.step(self.accel, g, lr)
            self.delta = integrate_accel(self.accel, self.dt)
            norm = np.sqrt(np.sum(self.delta * self.delta, axis=(1, 2)))
            over = norm > cap
            if over.any():
                scale = np.where(over, cap / np.where(over, norm, 1.0), 1.0)[:, None, None]
                self.accel *= scale
                self.delta *= scale

    def apply(self, x0, k):
        """Run the inner loop at step ``k`` and return the perturbed x0."""
        obj = self.objective_for(k)
        if self.cfg.intermediate_guidance:
            self._optimise(obj, x0, self.cfg.guidance_steps, self.cfg.perturb_lr)
        if k == 1 and self.cfg.final_step_iters:
            self._optimise(obj, x0, self.cfg.final_step_iters, self.cfg.final_step_lr)
        out = x0.copy()
        out[:, self.adv_row] += self.delta
        return out

    def refine_output(self, x, k=1):
        """Optional single extra pass on the final sample."""
        before = self.delta.copy()
        self._optimise(self.objective_for(k), x - self._delta_rows(before), self.cfg.guidance_steps, self.cfg.perturb_lr)
        return x + self._delta_rows(self.delta - before)

    def _delta_rows(self, d):
        out = np.zeros((d.shape[0], self.rot.shape[1]) + d.shape[1:])
        out[:, self.adv_row] = d
        return out

    def world_pair(self, x0):
        ego = _to_world(x0[:, self.ego_row], self.rot[:, self.ego_row], self.pos[:, self.ego_row])
        adv = _to_world(x0[:, self.adv_row], self.rot[:, self.adv_row], self.pos[:, self.adv_row])
        return ego, adv


def _draw(rngs, shape):
    if isinstance(rngs, np.random.Generator):
        return rngs.standard_normal(shape)
    return np.stack([g.standard_normal(shape) for g in rngs])


def guided_denoise_step(
    x_k,
    k: int,
    denoiser: Denoiser,
    dctx: DenoiserContext,
    rng,
    guidance: Optional[PlanGuidance] = None,
):
    """One reverse step ``x_k -> x_{k-1}``; returns ``(x_{k-1}, x0_hat)``.

    ``rng`` is one Generator per candidate (or a single Generator for an
    unbatched ``(A, T, 2)`` state).  Noise is drawn on every step, even
    when the posterior variance is zero, so guided and unguided runs
    consume identical streams.
    """
    sched = dctx.schedule
    if not 1 <= k <= sched.K:
        raise InvalidInput(f"step {k} outside [1, {sched.K}]")
    x0 = denoiser(x_k, k, dctx)
    if guidance is not None:
        x0 = guidance.apply(x0, k)
    coef0, coefk, var = sched.posterior
    z = _draw(rng, x_k.shape[1:] if not isinstance(rng, np.random.Generator) else x_k.shape)
    x_prev = coef0[k] * x0 + coefk[k] * x_k + math.sqrt(var[k]) * z
    return x_prev, x0


# -------------------------------------------------------------- rollout


@dataclass(eq=False)
class RolloutResult:
    scene_id: str
    agent_ids: list
    extents: np.ndarray  # (A, 2)
    positions: np.ndarray  # (A, H, 2) world frame
    yaws: np.ndarray  # (A, H)
    valid: np.ndarray  # (A, H)
    dt: float
    seed: int
    adversary_id: Optional[int]
    guided: bool
    min_distance: float
    collided: bool
    diagnostics: list = field(default_factory=list)
    flags: tuple = ()
    aborted: bool = False
    selected: int = 0
    candidates: list = field(default_factory=list)

    @property
    def horizon(self) -> int:
        return self.positions.shape[1]

    def summary(self) -> dict:
        return {
            "seed": self.seed,
            "min_distance": self.min_distance,
            "collided": self.collided,
            "aborted": self.aborted,
        }


def derive_seeds(base_seed: int, n: int) -> list[int]:
    return np.random.SeedSequence(base_seed).generate_state(n).tolist()


def selection_key(summary: dict):
    """Collision first, then smaller ego/adversary distance, then seed."""
    return (not summary["collided"], summary["min_distance"], summary["seed"])


def select_candidate(summaries: Sequence[dict]) -> Optional[int]:
    live = [i for i, s in enumerate(summaries) if not s.get("aborted", False)]
    if not live:
        return None
    return min(live, key=lambda i: selection_key(summaries[i]))


def _initial_history(scene: Scene, L: int):
    """Last ``L`` history steps per agent, padded at the front by replication."""
    h = scene.history_len
    pos = np.stack([a.positions[:h] for a in scene.agents])
    yaw = np.stack([a.yaws[:h] for a in scene.agents])
    val = np.stack([a.valid[:h] for a in scene.agents])
    flags = []
    if h < L:
        flags.append("history_padded")
        if h == 0:
            pos = np.stack([a.positions[:1] for a in scene.agents])
            yaw = np.stack([a.yaws[:1] for a in scene.agents])
            val = np.zeros((len(scene.agents), 1), bool)
            h = 1
        pad = L - h
        pos = np.concatenate([np.repeat(pos[:, :1], pad, 1), pos], 1)
        yaw = np.concatenate([np.repeat(yaw[:, :1], pad, 1), yaw], 1)
        val = np.concatenate([np.repeat(val[:, :1], pad, 1), val], 1)
    return pos[:, -L:], yaw[:, -L:], val[:, -L:], flags


def _min_distance_and_collision(pos, yaw, valid, extents, adv_row):
    """Per-candidate ego/adversary minimum distance and ego collision flag."""
    ego = pos[:, 0]  # (B, H, 2)
    if adv_row is None:
        min_d = np.full(pos.shape[0], math.inf)
    else:
        both = valid[0] & valid[adv_row]
        d = np.linalg.norm(ego - pos[:, adv_row], axis=-1)
        min_d = np.where(both, d, np.inf).min(axis=-1)
    collided = np.zeros(pos.shape[0], bool)
    for i in range(1, pos.shape[1]):
        hit = obb_overlap_arrays(ego, yaw[:, 0], extents[0], pos[:, i], yaw[:, i], extents[i])
        collided |= np.any(hit & valid[0] & valid[i], axis=-1)
    return min_d, collided


def rollout_batch(
    scene: Scene,
    target: Optional[ConflictTarget],
    seeds: Sequence[int],
    guidance: Optional[GuidanceConfig] = None,
    sampler: SamplerConfig = SamplerConfig(),
    denoiser: Optional[Denoiser] = None,
) -> list[RolloutResult]:
    """Closed-loop rollouts, one per seed, simulated together.

    ``guidance=None`` gives the unguided baseline; the random streams are
    consumed identically either way, so equal seeds give paired runs.
    """
    if guidance is not None and target is None:
        raise InvalidInput("guided rollout needs a mined target")
    cfg = sampler
    denoiser = denoiser or ConstantVelocityDenoiser()
    sched = cosine_schedule(cfg.diffusion_steps)
    B, A, T, L = len(seeds), len(scene.agents), cfg.future_len, cfg.history_len
    H = cfg.rollout_len or scene.future_len
    if H < 1:
        raise InvalidInput("scene has no future steps to roll out")
    rngs = [np.random.default_rng(s) for s in seeds]
    flags = []
    if abs(scene.dt - cfg.dt) > 1e-12:
        flags.append("dt_mismatch")

    h_pos, h_yaw, h_val, hist_flags = _initial_history(scene, L)
    flags += hist_flags
    active = h_val.any(axis=1)
    if not active.all():
        flags.append("inactive_agents")
    # Rolling buffers: history window followed by committed rollout steps.
    pos = np.broadcast_to(np.concatenate([h_pos, np.zeros((A, H, 2))], 1), (B, A, L + H, 2)).copy()
    yaw = np.broadcast_to(np.concatenate([h_yaw, np.zeros((A, H))], 1), (B, A, L + H)).copy()
    val = np.concatenate([h_val, np.repeat(active[:, None], H, 1)], 1)
    for i in range(A):
        # anchor inactive agents at their first recorded pose
        last = np.flatnonzero(h_val[i])
        j = last[-1] if len(last) else L - 1
        pos[:, i, L - 1] = h_pos[i, j]
        yaw[:, i, L - 1] = h_yaw[i, j]

    adv_row = scene.index_of(target.agent_id) if target is not None else None
    extents = np.array([a.extent for a in scene.agents])
    diags = [[] for _ in range(B)]
    aborted = np.zeros(B, bool)
    held_any = False

    n_plans = -(-H // cfg.action_horizon)
    for r in range(n_plans):
        t0 = r * cfg.action_horizon
        cur = L - 1 + t0
        window = slice(cur - L + 1, cur + 1)
        anchor_pos = pos[:, :, cur]
        rot = np.stack([np.stack([np.cos(yaw[:, :, cur]), -np.sin(yaw[:, :, cur])], -1),
                        np.stack([np.sin(yaw[:, :, cur]), np.cos(yaw[:, :, cur])], -1)], -2)
        hist_local = _rotate_back(pos[:, :, window] - anchor_pos[:, :, None], rot)
        dctx = DenoiserContext(hist_local, val[:, window], sched, T)
        held_any |= bool(np.any(dctx.cv[1] & active))

        p_plan = min(1.0, (t0 + cfg.action_horizon) / H)
        plan = None
        if guidance is not None:
            prefix_e = pos[:, 0, cur - 2 : cur + 1]
            prefix_a = pos[:, adv_row, cur - 2 : cur + 1]
            cache = {}

            def objective_for(k, _t0=t0, _pe=prefix_e, _pa=prefix_a, _p=p_plan):
                p = _p if guidance.progress_source == "rollout" else (sched.K - k + 1) / sched.K
                if p not in cache:
                    ctx = GuidanceContext(target, p, H, tau_offset=_t0, drivable=scene.drivable,
                                          ego_prefix=_pe, adv_prefix=_pa)
                    cache[p] = GuidanceObjective(ctx, guidance, T)
                return cache[p]

            plan = PlanGuidance(objective_for, 0, adv_row, rot, anchor_pos, cfg, scene.dt)

        x = np.stack([g.standard_normal((A, T, 2)) for g in rngs])
        x0 = x
        for k in range(sched.K, 0, -1):
            x, x0 = guided_denoise_step(x, k, denoiser, dctx, rngs, plan)
        if plan is not None and cfg.output_stage_guidance:
            x = plan.refine_output(x)

        if plan is not None:
            obj = plan.objective_for(1)
            ego_w, adv_w = plan.world_pair(x)
            parts = obj.parts(ego_w, adv_w)
            total = obj.total(parts)
            bad = ~np.isfinite(total) | plan.aborted
            aborted |= bad
            tau_hat = obj.taus
            for b in range(B):
                diags[b].append({
                    "t_global": t0,
                    "progress": p_plan,
                    "stage_multiplier": obj.m,
                    "tau_e_hat": int(tau_hat[0]),
                    "tau_a_hat": int(tau_hat[1]),
                    "lambda_s": obj.weights.lambda_s,
                    "lambda_t": obj.weights.lambda_t,
                    "lambda_j": obj.weights.lambda_j,
                    "conflict_active": bool(obj.active),
                    "loss": float(total[b]),
                    "spatial": float(parts.spatial[b]),
                    "sync": float(parts.sync[b]),
                    "jerk": float(parts.jerk[b]),
                    "map": float(parts.map[b]),
                })

        n = min(cfg.action_horizon, H - t0)
        world = _to_world(x[:, :, :n], rot, anchor_pos)
        for s in range(n):
            prev_pos, prev_yaw = pos[:, :, cur + s], yaw[:, :, cur + s]
            step = world[:, :, s] - prev_pos
            moved = np.hypot(step[..., 0], step[..., 1]) > YAW_MIN_STEP
            new_yaw = np.where(moved, np.arctan2(step[..., 1], step[..., 0]), prev_yaw)
            pos[:, :, cur + s + 1] = np.where(active[None, :, None], world[:, :, s], prev_pos)
            yaw[:, :, cur + s + 1] = np.where(active[None, :], new_yaw, prev_yaw)

    if held_any:
        flags.append("held_agents")
    out_pos, out_yaw, out_val = pos[:, :, L:], yaw[:, :, L:], val[:, L:]
    min_d, collided = _min_distance_and_collision(out_pos, out_yaw, out_val, extents, adv_row)
    results = []
    for b, seed in enumerate(seeds):
        results.append(
            RolloutResult(
                scene_id=scene.scene_id,
                agent_ids=[a.agent_id for a in scene.agents],
                extents=extents,
                positions=out_pos[b],
                yaws=out_yaw[b],
                valid=out_val,
                dt=scene.dt,
                seed=int(seed),
                adversary_id=None if target is None else target.agent_id,
                guided=guidance is not None,
                min_distance=float(min_d[b]),
                collided=bool(collided[b]),
                diagnostics=diags[b],
                flags=tuple(flags + (["aborted"] if aborted[b] else [])),
                aborted=bool(aborted[b]),
            )
        )
    return results


def closed_loop_rollout(scene, target, seed: int, guidance=None, sampler=SamplerConfig(), denoiser=None) -> RolloutResult:
    return rollout_batch(scene, target, [seed], guidance, sampler, denoiser)[0]


class SceneFailure(RuntimeError):
    """Every candidate rollout for a scene aborted."""


def best_of_candidates(scene, target, base_seed: int, guidance=None, sampler=SamplerConfig(), denoiser=None) -> RolloutResult:
    """Best of ``candidates_per_scene`` seeded rollouts by :func:`selection_key`."""
    seeds = derive_seeds(base_seed, sampler.candidates_per_scene)
    results = rollout_batch(scene, target, seeds, guidance, sampler, denoiser)
    summaries = [r.summary() for r in results]
    idx = select_candidate(summaries)
    if idx is None:
        raise SceneFailure(f"scene {scene.scene_id}: all {len(seeds)} candidates aborted")
    best = results[idx]
    best.selected = idx
    best.candidates = summaries
    return best
