"""Trajectory and safety metrics: ADE, FDE, off-road rate, collision rate, hard-braking rate.

All metrics honour per-step validity masks.  Trajectory containers hold
``positions (A, T, 2)``, ``yaws (A, T)``, ``valid (A, T)`` and
``extents (A, 2)`` with agent row 0 being the ego.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .core import DrivableArea, InvalidInput, Scene, obb_overlap_arrays, points_in_drivable

log = logging.getLogger(__name__)

HARD_BRAKE_THRESHOLD = -3.0  # m/s^2
CSV_COLUMNS = ("scene_id", "horizon_s", "ade", "fde", "orr", "collided", "hbr")


class UndefinedMetric(InvalidInput):
    """A metric has nothing to average over."""


class TrajectorySet(NamedTuple):
    positions: np.ndarray
    yaws: np.ndarray
    valid: np.ndarray
    extents: np.ndarray
    dt: float

    def truncate(self, steps: int) -> "TrajectorySet":
        return TrajectorySet(self.positions[:, :steps], self.yaws[:, :steps], self.valid[:, :steps], self.extents, self.dt)

    @property
    def num_steps(self) -> int:
        return self.positions.shape[1]


def trajectories_from_scene(scene: Scene, future_only: bool = True) -> TrajectorySet:
    start = scene.history_len if future_only else 0
    return TrajectorySet(
        np.stack([a.positions[start:] for a in scene.agents]),
        np.stack([a.yaws[start:] for a in scene.agents]),
        np.stack([a.valid[start:] for a in scene.agents]),
        np.array([a.extent for a in scene.agents]),
        scene.dt,
    )


def trajectories_from_rollout(result) -> TrajectorySet:
    return TrajectorySet(result.positions, result.yaws, result.valid, np.asarray(result.extents), result.dt)


def _displacements(pred, ref, valid):
    pred, ref = np.asarray(pred, float), np.asarray(ref, float)
    if pred.shape != ref.shape:
        raise InvalidInput(f"prediction shape {pred.shape} differs from reference {ref.shape}")
    valid = np.broadcast_to(np.asarray(valid, bool), pred.shape[:-1])
    return np.linalg.norm(pred - ref, axis=-1), valid


def ade(pred, ref, valid) -> float:
    """Mean over agents of each agent's mean displacement on its valid steps."""
    d, valid = _displacements(pred, ref, valid)
    counts = valid.sum(axis=-1)
    agents = counts > 0
    if not agents.any():
        raise UndefinedMetric("ADE needs at least one valid (agent, step)")
    per_agent = np.where(valid, d, 0.0).sum(axis=-1)[agents] / counts[agents]
    return float(per_agent.mean())


def fde(pred, ref, valid) -> float:
    """Mean over agents of the displacement at each agent's last valid step."""
    d, valid = _displacements(pred, ref, valid)
    agents = valid.any(axis=-1)
    if not agents.any():
        raise UndefinedMetric("FDE needs at least one valid (agent, step)")
    T = valid.shape[-1]
    last = T - 1 - np.argmax(valid[..., ::-1], axis=-1)
    final = np.take_along_axis(d, last[..., None], -1)[..., 0]
    return float(final[agents].mean())


def orr(pred, valid, area: DrivableArea) -> float:
    """Fraction of valid waypoints outside the drivable area."""
    if area is None or area.empty:
        raise UndefinedMetric("off-road rate needs a drivable area")
    pts = np.asarray(pred, float)
    valid = np.broadcast_to(np.asarray(valid, bool), pts.shape[:-1])
    n = np.count_nonzero(valid)
    if n == 0:
        raise UndefinedMetric("off-road rate needs at least one valid waypoint")
    outside = ~points_in_drivable(pts[valid], area)
    return float(np.count_nonzero(outside) / n)


def scene_collided(traj: TrajectorySet) -> bool:
    """Does the ego box overlap any other valid agent's box at any step?"""
    pos, yaw, val, ext = traj.positions, traj.yaws, traj.valid, traj.extents
    for i in range(1, pos.shape[0]):
        both = val[0] & val[i]
        if not both.any():
            continue
        hit = obb_overlap_arrays(pos[0, both], yaw[0, both], ext[0], pos[i, both], yaw[i, both], ext[i])
        if hit.any():
            return True
    return False


def collision_rate(trajs: Sequence[TrajectorySet]) -> float:
    if not trajs:
        return 0.0
    return sum(scene_collided(t) for t in trajs) / len(trajs)


def longitudinal_acceleration(positions, yaws, dt: float, projection: str = "magnitude"):
    """Longitudinal acceleration signal for one agent, one value per acceleration step.

    ``magnitude``: ``|a| * cos(yaw)``.  ``heading``: ``a . (cos yaw, sin yaw)``.
    The acceleration at step t uses positions t, t+1, t+2 and the yaw at t.
    """
    pos = np.asarray(positions, float)
    vel = np.diff(pos, axis=0) / dt
    acc = np.diff(vel, axis=0) / dt
    psi = np.asarray(yaws, float)[: len(acc)]
    if projection == "magnitude":
        return np.linalg.norm(acc, axis=-1) * np.cos(psi)
    if projection == "heading":
        return acc[:, 0] * np.cos(psi) + acc[:, 1] * np.sin(psi)
    raise InvalidInput(f"unknown hbr projection {projection!r}")


def scene_hbr(
    traj: TrajectorySet,
    projection: str = "magnitude",
    ego_only: bool = False,
    threshold: float = HARD_BRAKE_THRESHOLD,
) -> Optional[float]:
    """Hard-braking events over valid acceleration steps, or ``None`` if there are none."""
    rows = [0] if ego_only else range(traj.positions.shape[0])
    events = total = 0
    for i in rows:
        v = traj.valid[i]
        if len(v) < 3:
            continue
        ok = v[:-2] & v[1:-1] & v[2:]
        if not ok.any():
            continue
        a_lon = longitudinal_acceleration(traj.positions[i], traj.yaws[i], traj.dt, projection)
        events += int(np.count_nonzero(a_lon[ok] < threshold))
        total += int(np.count_nonzero(ok))
    if total == 0:
        return None
    return events / total


def hard_braking_rate(trajs: Sequence[TrajectorySet], projection: str = "magnitude", ego_only: bool = False) -> float:
    """Mean of per-scene rates; scenes without valid acceleration steps are excluded."""
    rates = [scene_hbr(t, projection, ego_only) for t in trajs]
    kept = [r for r in rates if r is not None]
    if len(kept) < len(rates):
        log.warning("%d scene(s) without valid acceleration steps excluded from HBR", len(rates) - len(kept))
    if not kept:
        raise UndefinedMetric("no scene has a valid acceleration step")
    return float(np.mean(kept))


# ---------------------------------------------------------------- reports


@dataclass
class EvalCase:
    scene_id: str
    pred: TrajectorySet
    ref: TrajectorySet
    area: DrivableArea


@dataclass
class MetricsReport:
    per_scene: dict = field(default_factory=dict)
    aggregate: dict = field(default_factory=dict)
    horizons: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {"per_scene": self.per_scene, "aggregate": self.aggregate, "horizons": self.horizons, "flags": self.flags}

    def rows(self) -> list[dict]:
        """Flat rows, one per scene per horizon (the full length when no horizons were asked for)."""
        out = []
        blocks = self.horizons or {"full": {"per_scene": self.per_scene}}
        for key, block in blocks.items():
            for sid in sorted(block["per_scene"]):
                m = block["per_scene"][sid]
                out.append({"scene_id": sid, "horizon_s": m["horizon_s"], **{c: m[c] for c in CSV_COLUMNS[2:]}})
        return out


def _score_case(case: EvalCase, projection: str, ego_only: bool) -> dict:
    pred, ref = case.pred, case.ref
    valid = pred.valid & ref.valid
    hbr = scene_hbr(pred, projection, ego_only)
    return {
        "horizon_s": round(pred.num_steps * pred.dt, 9),
        "ade": ade(pred.positions, ref.positions, valid),
        "fde": fde(pred.positions, ref.positions, valid),
        "orr": orr(pred.positions, pred.valid, case.area) if case.area is not None and not case.area.empty else None,
        "collided": scene_collided(pred),
        "hbr": hbr,
    }


def _aggregate(per_scene: dict) -> dict:
    def mean(key):
        vals = [m[key] for m in per_scene.values() if m[key] is not None]
        return float(np.mean(vals)) if vals else None

    return {
        "ade": mean("ade"),
        "fde": mean("fde"),
        "orr": mean("orr"),
        "cr": float(np.mean([m["collided"] for m in per_scene.values()])) if per_scene else None,
        "hbr": mean("hbr"),
        "num_scenes": len(per_scene),
    }


def _block(cases, projection, ego_only, flags):
    per_scene = {}
    for case in cases:
        try:
            per_scene[case.scene_id] = _score_case(case, projection, ego_only)
        except UndefinedMetric as exc:
            flags.append(f"{case.scene_id}: {exc}")
            continue
        if per_scene[case.scene_id]["hbr"] is None:
            flags.append(f"{case.scene_id}: no valid acceleration steps, excluded from hbr")
    return per_scene


def per_horizon(cases: Sequence[EvalCase], horizons: Sequence[float], projection: str = "magnitude", ego_only: bool = False):
    """Recompute every metric on prefixes of ``horizons`` seconds.

    Horizons longer than a case's data are skipped for that case with a
    warning.  Returns ``(blocks, flags)`` keyed by the horizon formatted as
    a string.
    """
    blocks, flags = {}, []
    for h in horizons:
        kept = []
        for case in cases:
            steps = int(round(h / case.pred.dt))
            if steps < 1 or steps > min(case.pred.num_steps, case.ref.num_steps):
                log.warning("horizon %gs skipped for %s", h, case.scene_id)
                flags.append(f"{case.scene_id}: horizon {h:g}s exceeds data, skipped")
                continue
            kept.append(EvalCase(case.scene_id, case.pred.truncate(steps), case.ref.truncate(steps), case.area))
        per_scene = _block(kept, projection, ego_only, flags)
        blocks[f"{h:g}"] = {"per_scene": per_scene, "aggregate": _aggregate(per_scene)}
    return blocks, flags


def evaluate(
    cases: Sequence[EvalCase],
    horizons: Sequence[float] = (),
    projection: str = "magnitude",
    ego_only: bool = False,
) -> MetricsReport:
    report = MetricsReport()
    report.per_scene = _block(cases, projection, ego_only, report.flags)
    report.aggregate = _aggregate(report.per_scene)
    if horizons:
        report.horizons, flags = per_horizon(cases, horizons, projection, ego_only)
        report.flags += flags
    return report
