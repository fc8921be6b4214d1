"""Synthetic scene suite: crossings, rear approaches and lead-braking setups.

Every scene is safe as recorded (the would-be adversary arrives late or
keeps its distance), so guidance is needed to produce a collision.  All
agents drive at constant velocity; the randomness is in speeds, gaps and
small lateral offsets, drawn from a per-scene seeded generator.
"""

from __future__ import annotations

import numpy as np

from .core import AgentTrack, DrivableArea, Scene

CAR = (4.5, 1.9)
KINDS = ("crossing", "crossing", "crossing", "rear_approach", "lead_braking")

_ROAD_HALF = 6.0
_ROAD_LEN = 250.0


def cross_road(half: float = _ROAD_HALF, length: float = _ROAD_LEN) -> DrivableArea:
    h, L = half, length
    ring = [
        (-L, -h), (-h, -h), (-h, -L), (h, -L), (h, -h), (L, -h),
        (L, h), (h, h), (h, L), (-h, L), (-h, h), (-L, h),
    ]
    return DrivableArea((np.array(ring),))


def straight_road(half: float = _ROAD_HALF, length: float = _ROAD_LEN) -> DrivableArea:
    ring = [(-length, -half), (length, -half), (length, half), (-length, half)]
    return DrivableArea((np.array(ring),))


def _track(agent_id, start, velocity, n_steps, dt) -> AgentTrack:
    t = np.arange(n_steps)[:, None] * dt
    pos = np.asarray(start, float) + t * np.asarray(velocity, float)
    yaw = np.full(n_steps, np.arctan2(velocity[1], velocity[0]))
    return AgentTrack(agent_id, CAR, pos, yaw, np.ones(n_steps, bool))


def crossing_scene(scene_id, rng, history_len=31, future_len=80, dt=0.1) -> Scene:
    """Ego eastbound, adversary northbound, adversary reaching the crossing late."""
    n = history_len + future_len
    v_e = rng.uniform(6.5, 8.5)
    v_a = rng.uniform(4.5, 6.0)
    lane_e = -2.0 + rng.uniform(-0.2, 0.2)
    lane_a = 2.0 + rng.uniform(-0.2, 0.2)
    # future-relative arrival at the crossing point (seconds)
    t_e = rng.uniform(5.0, 5.6)
    t_a = t_e + rng.uniform(1.3, 1.8)
    t_hist = (history_len - 1) * dt
    ego = _track(0, (lane_a - v_e * (t_hist + t_e), lane_e), (v_e, 0.0), n, dt)
    adv = _track(1, (lane_a, lane_e - v_a * (t_hist + t_a)), (0.0, v_a), n, dt)
    gap = rng.uniform(25.0, 35.0)
    trail = _track(2, (ego.positions[0, 0] - gap, lane_e), (v_e, 0.0), n, dt)
    return Scene(scene_id, [ego, adv, trail], dt, cross_road(), history_len, future_len)


def rear_approach_scene(scene_id, rng, history_len=31, future_len=80, dt=0.1) -> Scene:
    """A follower slowly closing on the ego from behind."""
    n = history_len + future_len
    v_e = rng.uniform(6.0, 8.0)
    dv = rng.uniform(0.2, 0.45)
    gap = rng.uniform(10.0, 14.0)
    x0 = -v_e * (history_len - 1) * dt
    ego = _track(0, (x0, 0.0), (v_e, 0.0), n, dt)
    follower = _track(1, (x0 - gap - dv * (history_len - 1) * dt, rng.uniform(-0.2, 0.2)), (v_e + dv, 0.0), n, dt)
    lead = _track(2, (x0 + rng.uniform(35.0, 45.0), 0.0), (v_e, 0.0), n, dt)
    return Scene(scene_id, [ego, follower, lead], dt, straight_road(), history_len, future_len)


def lead_braking_scene(scene_id, rng, history_len=31, future_len=80, dt=0.1) -> Scene:
    """The ego slowly closing on a leader ahead."""
    n = history_len + future_len
    v_l = rng.uniform(6.0, 8.0)
    dv = rng.uniform(0.2, 0.6)
    gap = rng.uniform(12.0, 16.0)
    x0 = -v_l * (history_len - 1) * dt
    ego = _track(0, (x0 - gap - dv * (history_len - 1) * dt, 0.0), (v_l + dv, 0.0), n, dt)
    leader = _track(1, (x0, rng.uniform(-0.2, 0.2)), (v_l, 0.0), n, dt)
    trail = _track(2, (ego.positions[0, 0] - rng.uniform(35.0, 45.0), 0.0), (v_l + dv, 0.0), n, dt)
    return Scene(scene_id, [ego, leader, trail], dt, straight_road(), history_len, future_len)


_BUILDERS = {
    "crossing": crossing_scene,
    "rear_approach": rear_approach_scene,
    "lead_braking": lead_braking_scene,
}


def generate_suite(n_scenes: int = 30, seed: int = 0, history_len: int = 31, future_len: int = 80, dt: float = 0.1):
    """``n_scenes`` scenes cycling through crossing, crossing, crossing, rear, lead."""
    scenes = []
    for i in range(n_scenes):
        kind = KINDS[i % len(KINDS)]
        rng = np.random.default_rng([seed, i])
        scenes.append(_BUILDERS[kind](f"{kind}_{i:03d}", rng, history_len, future_len, dt))
    return scenes
