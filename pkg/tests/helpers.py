"""Small scene builders shared by the tests."""

from __future__ import annotations

import numpy as np

from conflictgen.core import AgentTrack, DrivableArea, Scene
from conflictgen.mining import ConflictTarget, ConflictType

CAR = (4.5, 1.9)


def track(agent_id, positions, valid=None, yaws=None, extent=CAR):
    pos = np.asarray(positions, float).reshape(-1, 2)
    if yaws is None:
        d = np.diff(pos, axis=0, append=pos[-1:] + (pos[-1:] - pos[-2:-1] if len(pos) > 1 else 0))
        yaws = np.where(np.hypot(d[:, 0], d[:, 1]) > 0, np.arctan2(d[:, 1], d[:, 0]), 0.0)
    if valid is None:
        valid = np.ones(len(pos), bool)
    return AgentTrack(agent_id, extent, pos, np.broadcast_to(yaws, len(pos)), valid)


def line(start, velocity, n, dt=0.1):
    t = np.arange(n)[:, None] * dt
    return np.asarray(start, float) + t * np.asarray(velocity, float)


def scene(tracks, dt=0.1, history_len=0, drivable=None, scene_id="s"):
    n = len(tracks[0])
    return Scene(scene_id, list(tracks), dt, drivable or DrivableArea(), history_len, n - history_len)


def square(half):
    return np.array([[-half, -half], [half, -half], [half, half], [-half, half]], float)


def target(agent_id=1, c=(0.0, 0.0), tau_e=10, tau_a=12, score=1.0, kind="intersection", subtype="none", tier=1):
    return ConflictTarget(
        agent_id=agent_id, conflict_point=tuple(c), tau_e=tau_e, tau_a=tau_a, d_min=0.0,
        delta_t=abs(tau_e - tau_a) * 0.1, v_rel=1.0, score=score, type=ConflictType(kind, subtype),
        tier=tier, guidance_weight=-100.0,
    )
