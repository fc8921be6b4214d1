"""Offline conflict mining: pick the single agent whose behaviour keeps a scene safe.

For every non-ego agent the ego/agent pair is searched for its closest
spatio-temporal encounter over the ground-truth future, the interaction is
classified (intersection vs. following), scored, filtered into priority
tiers, and the best candidate becomes the adversarial target.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import NamedTuple, Optional

import numpy as np

from .core import AgentTrack, InvalidInput, Scene

log = logging.getLogger(__name__)

INTERSECTION = "intersection"
FOLLOWING = "following"
REAR_APPROACH = "rear_approach"
LEAD_BRAKING = "lead_braking"
NO_SUBTYPE = "none"

FALLBACK_WEIGHT = -50.0


@dataclass(frozen=True)
class ConflictType:
    kind: str
    subtype: str = NO_SUBTYPE

    def __post_init__(self):
        if self.kind not in (INTERSECTION, FOLLOWING):
            raise InvalidInput(f"unknown conflict kind {self.kind!r}")
        if self.subtype not in (NO_SUBTYPE, REAR_APPROACH, LEAD_BRAKING):
            raise InvalidInput(f"unknown conflict subtype {self.subtype!r}")
        if (self.subtype != NO_SUBTYPE) != (self.kind == FOLLOWING):
            raise InvalidInput("subtype must be set exactly for following conflicts")

    @property
    def label(self) -> str:
        """Subtype for following conflicts, kind otherwise."""
        return self.subtype if self.kind == FOLLOWING else self.kind


@dataclass(frozen=True)
class MiningRules:
    min_joint_steps: int = 5
    cos_threshold: float = 0.8
    tier1_dt_max: float = 5.0
    tier2_dmin_max: float = 10.0
    tier3_dmin_max: float = 12.0
    score_min: float = 0.05

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value <= 0:
                raise InvalidInput(f"mining rule {name} must be positive")


@dataclass(frozen=True)
class CandidateConflict:
    agent_id: int
    conflict_point: tuple[float, float]
    tau_e: int
    tau_a: int
    d_min: float
    delta_t: float
    v_rel: float
    score: float
    type: ConflictType
    tier: int
    flags: tuple[str, ...] = ()


@dataclass(frozen=True)
class ConflictTarget(CandidateConflict):
    guidance_weight: float = FALLBACK_WEIGHT

    def to_json(self, scene_id: str) -> dict:
        return {
            "scene_id": scene_id,
            "adversary_id": self.agent_id,
            "conflict_point": list(self.conflict_point),
            "tau_e": self.tau_e,
            "tau_a": self.tau_a,
            "d_min": self.d_min,
            "delta_t": self.delta_t,
            "v_rel": self.v_rel,
            "score": self.score,
            "type": self.type.kind,
            "subtype": self.type.subtype,
            "tier": self.tier,
            "guidance_weight": self.guidance_weight,
            "flags": list(self.flags),
        }

    @classmethod
    def from_json(cls, rec: dict) -> "ConflictTarget":
        return cls(
            agent_id=int(rec["adversary_id"]),
            conflict_point=(float(rec["conflict_point"][0]), float(rec["conflict_point"][1])),
            tau_e=int(rec["tau_e"]),
            tau_a=int(rec["tau_a"]),
            d_min=float(rec.get("d_min", 0.0)),
            delta_t=float(rec.get("delta_t", 0.0)),
            v_rel=float(rec.get("v_rel", 0.0)),
            score=float(rec["score"]),
            type=ConflictType(rec["type"], rec.get("subtype", NO_SUBTYPE)),
            tier=int(rec["tier"]),
            flags=tuple(rec.get("flags", ())),
            guidance_weight=float(rec["guidance_weight"]),
        )


class Encounter(NamedTuple):
    tau_e: int
    tau_a: int
    d_min: float
    conflict_point: tuple[float, float]


def joint_valid_steps(ego: AgentTrack, other: AgentTrack, start: int = 0) -> list[int]:
    """Steps (relative to ``start``) where both agents are valid."""
    if len(ego) != len(other):
        raise InvalidInput("tracks have different timeline lengths")
    both = ego.valid[start:] & other.valid[start:]
    return np.flatnonzero(both).tolist()


def closest_encounter(ego: AgentTrack, other: AgentTrack, valid, start: int = 0) -> Optional[Encounter]:
    """Closest pair ``(t_e, t_a)`` over ``valid x valid``.

    Ties resolve to the first pair in row-major (t_e, then t_a) order.
    Returns ``None`` when there are no valid steps.
    """
    steps = np.asarray(valid, dtype=int)
    if steps.size == 0:
        return None
    pe = ego.positions[start + steps]
    pa = other.positions[start + steps]
    dx = pe[:, None, 0] - pa[None, :, 0]
    dy = pe[:, None, 1] - pa[None, :, 1]
    dist = np.sqrt(dx * dx + dy * dy)
    i, j = np.unravel_index(np.argmin(dist), dist.shape)
    a, b = pe[i], pa[j]
    c = ((a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0)
    return Encounter(int(steps[i]), int(steps[j]), float(dist[i, j]), c)


def _step_velocity(positions: np.ndarray, t: int, dt: float):
    if t >= 1:
        return (positions[t] - positions[t - 1]) / dt, False
    return (positions[1] - positions[0]) / dt, True


def relative_speed(ego: AgentTrack, other: AgentTrack, tau_e: int, tau_a: int, dt: float, start: int = 0):
    """Norm of the velocity difference at the two arrival steps.

    Returns ``(v_rel, degenerate)``; ``degenerate`` is set when a step 0
    forced a forward difference in place of the backward one.
    """
    fe = ego.positions[start:]
    fa = other.positions[start:]
    ve, dege = _step_velocity(fe, tau_e, dt)
    va, dega = _step_velocity(fa, tau_a, dt)
    dvx, dvy = ve[0] - va[0], ve[1] - va[1]
    return math.sqrt(dvx * dvx + dvy * dvy), (dege or dega)


def _direction(track: AgentTrack, start: int):
    idx = np.flatnonzero(track.valid[start:])
    if len(idx) < 2:
        return None
    pos = track.positions[start:]
    return pos[idx[-1]] - pos[idx[0]]


def classify_conflict(
    ego: AgentTrack,
    other: AgentTrack,
    t_ref: Optional[int] = None,
    start: int = 0,
    cos_threshold: float = 0.8,
):
    """Classify the pair from coarse travel directions.

    ``t_ref`` is the (future-relative) step at which the along-track
    ordering is read; it defaults to the first jointly valid step.
    Returns ``(ConflictType, degenerate)``.
    """
    de, da = _direction(ego, start), _direction(other, start)
    if de is None or da is None:
        raise InvalidInput("each track needs two valid future steps")
    ne = math.sqrt(de[0] * de[0] + de[1] * de[1])
    na = math.sqrt(da[0] * da[0] + da[1] * da[1])
    if ne == 0.0 or na == 0.0:
        return ConflictType(INTERSECTION), True
    cos = (de[0] * da[0] + de[1] * da[1]) / (ne * na)
    if not cos > cos_threshold:
        return ConflictType(INTERSECTION), False
    if t_ref is None:
        joint = joint_valid_steps(ego, other, start)
        t_ref = joint[0] if joint else 0
    rel = other.positions[start + t_ref] - ego.positions[start + t_ref]
    along = rel[0] * de[0] + rel[1] * de[1]
    subtype = REAR_APPROACH if along < 0 else LEAD_BRAKING
    return ConflictType(FOLLOWING, subtype), False


def conflict_score(ctype: ConflictType, v_rel: float, delta_t: float, d_min: float) -> float:
    if ctype.kind == INTERSECTION:
        return v_rel / (delta_t + 0.5)
    return v_rel / (d_min + 1.0)


def assign_tier(ctype: ConflictType, delta_t: float, d_min: float, score: float, rules: MiningRules = MiningRules()):
    """Tier 1/2/3, or ``None`` when the candidate is rejected."""
    if score < rules.score_min:
        return None
    if ctype.kind == INTERSECTION:
        return 1 if delta_t < rules.tier1_dt_max else None
    if ctype.subtype == REAR_APPROACH:
        return 2 if d_min < rules.tier2_dmin_max else None
    return 3 if d_min < rules.tier3_dmin_max else None


def guidance_weight(ctype: Optional[ConflictType], score: float) -> float:
    if ctype is None:
        return FALLBACK_WEIGHT
    s = min(score, 1.0)
    if ctype.kind == INTERSECTION:
        return -80.0 - 40.0 * s
    return -60.0 - 30.0 * s


def select_target(candidates) -> Optional[ConflictTarget]:
    """Lowest tier first, then highest score, then smallest agent id."""
    if not candidates:
        return None
    best = min(candidates, key=lambda c: (c.tier, -c.score, c.agent_id))
    fields = {f: getattr(best, f) for f in CandidateConflict.__dataclass_fields__}
    return ConflictTarget(**fields, guidance_weight=guidance_weight(best.type, best.score))


def mine_candidates(scene: Scene, rules: MiningRules = MiningRules()) -> list[CandidateConflict]:
    """Every ego/agent pair that survives tier filtering."""
    ego = scene.ego
    start = scene.history_len
    out = []
    for other in scene.agents[1:]:
        steps = joint_valid_steps(ego, other, start)
        if len(steps) < rules.min_joint_steps:
            continue
        enc = closest_encounter(ego, other, steps, start)
        delta_t = abs(enc.tau_e - enc.tau_a) * scene.dt
        v_rel, deg_v = relative_speed(ego, other, enc.tau_e, enc.tau_a, scene.dt, start)
        ctype, deg_c = classify_conflict(ego, other, enc.tau_e, start, rules.cos_threshold)
        score = conflict_score(ctype, v_rel, delta_t, enc.d_min)
        tier = assign_tier(ctype, delta_t, enc.d_min, score, rules)
        if tier is None:
            continue
        flags = tuple(f for f, on in (("tau0_forward_difference", deg_v), ("zero_direction", deg_c)) if on)
        out.append(
            CandidateConflict(
                agent_id=other.agent_id,
                conflict_point=enc.conflict_point,
                tau_e=enc.tau_e,
                tau_a=enc.tau_a,
                d_min=enc.d_min,
                delta_t=delta_t,
                v_rel=v_rel,
                score=score,
                type=ctype,
                tier=tier,
                flags=flags,
            )
        )
    return out


def mine_scene(scene: Scene, rules: MiningRules = MiningRules()) -> Optional[ConflictTarget]:
    """Adversarial target for ``scene`` or ``None`` for an invalid mining case."""
    if not scene.ego.valid[scene.history_len:].any():
        log.debug("scene %s: ego has no valid future", scene.scene_id)
        return None
    return select_target(mine_candidates(scene, rules))


# ---------------------------------------------------------- edge features


class EdgeFeatures(NamedTuple):
    dp: np.ndarray
    dv: np.ndarray
    ttc: float
    tti: float
    d_int: float
    v_int: float

    def to_array(self) -> np.ndarray:
        return np.array([*self.dp, *self.dv, self.ttc, self.tti, self.d_int, self.v_int])


def edge_features(
    ego: AgentTrack,
    other: AgentTrack,
    t: int,
    target: ConflictTarget,
    dt: float,
    start: int = 0,
    eps: float = 1e-6,
) -> EdgeFeatures:
    """Pairwise interaction features at future step ``t``.

    TTC is the current gap over the closing speed (``inf`` when the pair
    is not closing, 0 when the centres coincide); TTI is the signed time
    until the other agent's mined arrival step.
    """
    if not (ego.valid[start + t] and other.valid[start + t]):
        raise InvalidInput(f"step {t} is not valid for both agents")
    fe, fa = ego.positions[start:], other.positions[start:]
    dp = fa[t] - fe[t]
    dv = _step_velocity(fa, t, dt)[0] - _step_velocity(fe, t, dt)[0]
    gap = float(np.hypot(*dp))
    if gap == 0.0:
        ttc = 0.0
    else:
        closing = -float(dp @ dv) / gap
        ttc = gap / max(closing, eps) if closing > 0 else math.inf
    tti = (target.tau_a - t) * dt
    d_int = float(np.hypot(*(fa[t] - np.asarray(target.conflict_point))))
    v_int = float(np.hypot(*_step_velocity(fa, target.tau_a, dt)[0]))
    return EdgeFeatures(dp, dv, ttc, tti, d_int, v_int)
