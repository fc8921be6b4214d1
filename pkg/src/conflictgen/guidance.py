"""Progressive conflict-aware guidance objective and its analytic gradient.

The objective pulls the ego and adversary positions at their (possibly
compressed) arrival steps onto the conflict point and onto each other,
scaled by a stage multiplier of rollout progress, plus a jerk penalty and
a constant off-road penalty.  All array functions accept arbitrary leading
batch axes: trajectories are ``(..., T, 2)`` in world coordinates.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from fractions import Fraction
from typing import NamedTuple, Optional

import numpy as np

from .core import DrivableArea, InvalidInput, _segment_distance, offroad_distance, points_in_drivable
from .mining import FALLBACK_WEIGHT, INTERSECTION, LEAD_BRAKING, ConflictTarget, ConflictType

log = logging.getLogger(__name__)

SAFE_NORM_EPS = 1e-9

_JSON_KEYS = {
    "enable_progressive": "pg",
    "enable_conflict_aware": "cw",
    "enable_adaptive_timing": "atc",
    "enable_jerk": "jr",
}


@dataclass(frozen=True)
class GuidanceConfig:
    enable_progressive: bool = True
    enable_conflict_aware: bool = True
    enable_adaptive_timing: bool = True
    enable_jerk: bool = True
    map_weight: float = 2.0
    stage_breaks: tuple[float, float] = (0.3, 0.7)
    stage_levels: tuple[float, float, float] = (0.2, 1.5, 3.0)
    compression_start: float = 0.5
    # mined weight is only applied as a conflict-term scale when asked for
    collision_weight: float = FALLBACK_WEIGHT
    use_target_weight: bool = False
    strength: float = 1.0
    progress_source: str = "rollout"  # or "denoise"

    def __post_init__(self):
        b0, b1 = self.stage_breaks
        l0, l1, l2 = self.stage_levels
        if not 0 < b0 < b1 < 1:
            raise InvalidInput("stage_breaks must satisfy 0 < b0 < b1 < 1")
        if not 0 < l0 <= l1 <= l2:
            raise InvalidInput("stage_levels must be positive and ascending")
        if self.map_weight < 0 or self.strength < 0:
            raise InvalidInput("map_weight and strength must be non-negative")
        if self.progress_source not in ("rollout", "denoise"):
            raise InvalidInput(f"unknown progress_source {self.progress_source!r}")
        object.__setattr__(self, "stage_breaks", tuple(float(b) for b in self.stage_breaks))
        object.__setattr__(self, "stage_levels", tuple(float(v) for v in self.stage_levels))

    def to_json(self) -> dict:
        out = {}
        for k, v in asdict(self).items():
            out[_JSON_KEYS.get(k, k)] = list(v) if isinstance(v, tuple) else v
        return out

    @classmethod
    def from_json(cls, data: dict) -> "GuidanceConfig":
        inverse = {v: k for k, v in _JSON_KEYS.items()}
        known = cls.__dataclass_fields__
        kwargs = {}
        for k, v in data.items():
            name = inverse.get(k, k)
            if name not in known:
                raise InvalidInput(f"unknown guidance option {k!r}")
            kwargs[name] = tuple(v) if isinstance(v, list) else v
        return cls(**kwargs)


class BaseWeights(NamedTuple):
    lambda_s: float
    lambda_t: float
    lambda_j: float


class LossParts(NamedTuple):
    spatial: np.ndarray
    sync: np.ndarray
    jerk: np.ndarray
    map: np.ndarray


@dataclass
class GuidanceContext:
    """Everything the objective needs besides the two trajectories.

    ``tau_offset`` is the number of steps already committed in the
    rollout; arrival steps are mapped into the current plan by
    subtracting it.  ``ego_prefix``/``adv_prefix`` are committed positions
    that precede the plan and only enter the jerk term.
    """

    target: ConflictTarget
    progress: float
    horizon: int
    weights: Optional[BaseWeights] = None
    tau_offset: int = 0
    drivable: Optional[DrivableArea] = None
    ego_prefix: Optional[np.ndarray] = None
    adv_prefix: Optional[np.ndarray] = None


def base_weights(ctype: ConflictType, score: float, conflict_aware: bool = True) -> BaseWeights:
    s = score
    label = ctype.label if conflict_aware else None
    if label == INTERSECTION:
        return BaseWeights(max(2.0 * s, 0.3), max(1.5 * s, 0.2), 0.3)
    if label == LEAD_BRAKING:
        return BaseWeights(max(2.5 * s, 0.3), max(0.8 * s, 0.2), 0.8)
    # rear_approach and the ablation default share one row
    return BaseWeights(max(1.5 * s, 0.3), max(1.0 * s, 0.2), 0.5)


def stage_multiplier(p: float, cfg: GuidanceConfig = GuidanceConfig()) -> float:
    if not cfg.enable_progressive:
        return 1.0
    if not 0.0 <= p <= 1.0:
        log.warning("progress %r outside [0, 1]; clamped", p)
        p = min(max(p, 0.0), 1.0)
    b0, b1 = cfg.stage_breaks
    l0, l1, l2 = cfg.stage_levels
    if p < b0:
        return l0
    if p < b1:
        return l0 + (p - b0) / (b1 - b0) * (l1 - l0)
    return l1 + (p - b1) / (1.0 - b1) * (l2 - l1)


def _round_half_up(x) -> int:
    return math.floor(x + Fraction(1, 2))


def compress_arrival_times(tau_e: int, tau_a: int, p: float, horizon: int, atc: bool = True, start: float = 0.5):
    """Shrink the arrival gap by ``(1 - p)`` once ``p >= start``.

    Only the later agent moves; the result is rounded half-up and clamped
    to ``[0, horizon - 1]``.
    """
    if not atc or p < start:
        return int(tau_e), int(tau_a)
    # exact arithmetic on the binary value of p, so .5 ties round the same way everywhere
    gap = abs(tau_e - tau_a) * (1 - Fraction(p))
    if tau_e <= tau_a:
        te, ta = tau_e, _round_half_up(tau_e + gap)
    else:
        te, ta = _round_half_up(tau_a + gap), tau_a
    hi = horizon - 1
    return min(max(te, 0), hi), min(max(ta, 0), hi)


# ---------------------------------------------------------------- terms


def _norm(v):
    return np.sqrt(v[..., 0] * v[..., 0] + v[..., 1] * v[..., 1])


def _unit(v):
    n = _norm(v)
    return v / np.maximum(n, SAFE_NORM_EPS)[..., None]


def _with_prefix(traj, prefix):
    if prefix is None:
        return traj
    prefix = np.broadcast_to(prefix, traj.shape[:-2] + np.shape(prefix)[-2:])
    return np.concatenate([prefix, traj], axis=-2)


def _jerk_mean(full):
    if full.shape[-2] < 4:
        return np.zeros(full.shape[:-2])
    j = np.diff(full, n=3, axis=-2)
    return _norm(j).mean(axis=-1)


def _jerk_grad(full, n_plan):
    """Gradient of the mean jerk norm, restricted to the last ``n_plan`` rows."""
    n = full.shape[-2] - 3
    if n < 1:
        return np.zeros(full.shape[:-2] + (n_plan, 2))
    u = _unit(np.diff(full, n=3, axis=-2)) / n
    g = np.zeros_like(full)
    g[..., 3:, :] += u
    g[..., 2:-1, :] -= 3.0 * u
    g[..., 1:-2, :] += 3.0 * u
    g[..., :-3, :] -= u
    return g[..., -n_plan:, :]


class OffroadTracker:
    """Exact ``offroad_distance`` for slowly moving points.

    A reference evaluation stores each on-road point's clearance to the
    boundary; later queries only re-evaluate points that are off-road or
    have moved at least their clearance, since no other point can have
    changed side.
    """

    def __init__(self, area: DrivableArea, refresh_fraction: float = 0.25):
        self.area = area
        self.refresh_fraction = refresh_fraction
        self.ref = None

    def _reference(self, pts):
        starts, ends = self.area.edges
        self.off = ~points_in_drivable(pts, self.area)
        clear = _segment_distance(pts, starts, ends)[0].min(axis=-1)
        self.clear = np.where(self.off, 0.0, clear)
        self.ref = pts.copy()

    def __call__(self, pts):
        if self.ref is None or self.ref.shape != pts.shape:
            self._reference(pts)
        moved = _norm(pts - self.ref)
        need = self.off | (moved >= self.clear)
        if np.count_nonzero(need) > self.refresh_fraction * need.size:
            self._reference(pts)
            need = self.off
        dist = np.zeros(pts.shape[:-1])
        near = pts.copy()
        if need.any():
            dist[need], near[need] = offroad_distance(pts[need], self.area)
        return dist, near


class GuidanceObjective:
    """Pre-resolved objective for one context/config and plan length ``T``.

    Building this once per denoising step keeps the inner optimisation
    loop down to a handful of array operations.
    """

    def __init__(self, ctx: GuidanceContext, cfg: GuidanceConfig, T: int):
        tgt = ctx.target
        self.T = T
        self.weights = ctx.weights or base_weights(tgt.type, tgt.score, cfg.enable_conflict_aware)
        self.m = stage_multiplier(ctx.progress, cfg)
        self.taus = compress_arrival_times(
            tgt.tau_e, tgt.tau_a, ctx.progress, ctx.horizon, cfg.enable_adaptive_timing, cfg.compression_start
        )
        # arrival steps are mapped into the current plan; those past its end
        # are clamped to the last step, while an arrival that is already
        # committed switches the conflict term off for this plan
        self.ie = min(max(self.taus[0] - ctx.tau_offset, 0), T - 1)
        self.ia = min(max(self.taus[1] - ctx.tau_offset, 0), T - 1)
        self.active = min(self.taus) >= ctx.tau_offset
        self.c = np.asarray(tgt.conflict_point, float)
        conflict_scale = 1.0
        if cfg.use_target_weight:
            conflict_scale = abs(tgt.guidance_weight) / abs(cfg.collision_weight)
        self.strength = cfg.strength
        self.conflict_coef = cfg.strength * conflict_scale * self.m if self.active else 0.0
        self.jerk_on = cfg.enable_jerk
        self.map_weight = cfg.map_weight if ctx.drivable is not None and not ctx.drivable.empty else 0.0
        self.drivable = ctx.drivable
        self._adv_offroad = OffroadTracker(ctx.drivable) if self.map_weight else None
        self.ego_prefix = ctx.ego_prefix
        self.adv_prefix = ctx.adv_prefix

    # -- loss

    def parts(self, ego, adv) -> LossParts:
        xe = ego[..., self.ie, :]
        xa = adv[..., self.ia, :]
        spatial = _norm(xe - self.c) + _norm(xa - self.c)
        sync = _norm(xe - xa)
        if self.jerk_on:
            jerk = _jerk_mean(_with_prefix(ego, self.ego_prefix)) + _jerk_mean(_with_prefix(adv, self.adv_prefix))
        else:
            jerk = np.zeros_like(sync)
        if self.map_weight:
            de, _ = offroad_distance(ego, self.drivable)
            da, _ = offroad_distance(adv, self.drivable)
            map_part = self.map_weight * (np.sum(de * de, -1) + np.sum(da * da, -1)) / (2 * self.T)
        else:
            map_part = np.zeros_like(sync)
        return LossParts(spatial, sync, jerk, map_part)

    def total(self, parts: LossParts):
        lam = self.weights
        return (
            self.conflict_coef * (lam.lambda_s * parts.spatial + lam.lambda_t * parts.sync)
            + self.strength * (lam.lambda_j * parts.jerk + parts.map)
        )

    # -- gradient

    def _map_grad(self, traj, query=None):
        d, near = (query or (lambda q: offroad_distance(q, self.drivable)))(traj)
        coef = self.strength * self.map_weight * 2.0 / (2 * self.T)
        return np.where((d > 0)[..., None], coef * (traj - near), 0.0)

    def adv_gradient(self, adv, xe):
        """Gradient with respect to the adversary only; ``xe`` is the ego arrival point."""
        lam = self.weights
        g = np.zeros_like(adv)
        xa = adv[..., self.ia, :]
        g[..., self.ia, :] = self.conflict_coef * (lam.lambda_s * _unit(xa - self.c) - lam.lambda_t * _unit(xe - xa))
        if self.jerk_on and self.strength:
            g += (self.strength * lam.lambda_j) * _jerk_grad(_with_prefix(adv, self.adv_prefix), self.T)
        if self.map_weight and self.strength:
            g += self._map_grad(adv, self._adv_offroad)
        return g

    def gradient(self, ego, adv):
        lam = self.weights
        ge = np.zeros_like(ego)
        xe = ego[..., self.ie, :]
        ge[..., self.ie, :] = self.conflict_coef * (
            lam.lambda_s * _unit(xe - self.c) + lam.lambda_t * _unit(xe - adv[..., self.ia, :])
        )
        if self.jerk_on and self.strength:
            ge += (self.strength * lam.lambda_j) * _jerk_grad(_with_prefix(ego, self.ego_prefix), self.T)
        if self.map_weight and self.strength:
            ge += self._map_grad(ego)
        return ge, self.adv_gradient(adv, xe)


def _check(traj):
    arr = np.asarray(traj, float)
    if arr.ndim < 2 or arr.shape[-1] != 2:
        raise InvalidInput("trajectories must have shape (..., T, 2)")
    if not np.all(np.isfinite(arr)):
        raise InvalidInput("non-finite trajectory")
    return arr


def guidance_loss(ego_traj, adv_traj, ctx: GuidanceContext, cfg: GuidanceConfig = GuidanceConfig()):
    """Total guidance loss and its ``LossParts``.

    ``spatial``, ``sync`` and ``jerk`` are unweighted; ``map`` already
    includes the map weight.
    """
    ego, adv = _check(ego_traj), _check(adv_traj)
    obj = GuidanceObjective(ctx, cfg, ego.shape[-2])
    parts = obj.parts(ego, adv)
    total = obj.total(parts)
    if np.ndim(total) == 0:
        return float(total), LossParts(*(float(p) for p in parts))
    return total, parts


def guidance_gradient(ego_traj, adv_traj, ctx: GuidanceContext, cfg: GuidanceConfig = GuidanceConfig()):
    """Analytic ``(d total / d ego, d total / d adv)``, same shapes as the inputs."""
    ego, adv = _check(ego_traj), _check(adv_traj)
    return GuidanceObjective(ctx, cfg, ego.shape[-2]).gradient(ego, adv)
