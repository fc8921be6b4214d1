"""Reference implementations used only by the tests.

Each oracle is written from the formula definitions with plain loops or a
different algorithm than the package, so agreement is evidence rather
than tautology.
"""

from __future__ import annotations

import math
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

# ------------------------------------------------------------------ mining


def brute_mine(scene, rules):
    """Exhaustive pair/timestep scan; returns a dict of target fields or None."""
    h, dt = scene.history_len, scene.dt
    ego = scene.agents[0]
    T = scene.num_steps - h
    if not any(bool(ego.valid[h + t]) for t in range(T)):
        return None

    def fut(track, t):
        return float(track.positions[h + t][0]), float(track.positions[h + t][1])

    def vel(track, t):
        if t >= 1:
            a, b = fut(track, t - 1), fut(track, t)
        else:
            a, b = fut(track, 0), fut(track, 1)
        return (b[0] - a[0]) / dt, (b[1] - a[1]) / dt

    def direction(track):
        idx = [t for t in range(T) if track.valid[h + t]]
        a, b = fut(track, idx[0]), fut(track, idx[-1])
        return b[0] - a[0], b[1] - a[1]

    cands = []
    for other in scene.agents[1:]:
        joint = [t for t in range(T) if ego.valid[h + t] and other.valid[h + t]]
        if len(joint) < rules.min_joint_steps:
            continue
        best = None
        for te in joint:
            for ta in joint:
                pe, pa = fut(ego, te), fut(other, ta)
                dx, dy = pe[0] - pa[0], pe[1] - pa[1]
                d = math.sqrt(dx * dx + dy * dy)
                if best is None or d < best[0]:
                    best = (d, te, ta, ((pe[0] + pa[0]) / 2.0, (pe[1] + pa[1]) / 2.0))
        d_min, te, ta, c = best
        delta_t = abs(te - ta) * dt
        ve, va = vel(ego, te), vel(other, ta)
        dvx, dvy = ve[0] - va[0], ve[1] - va[1]
        v_rel = math.sqrt(dvx * dvx + dvy * dvy)
        de, da = direction(ego), direction(other)
        ne = math.sqrt(de[0] * de[0] + de[1] * de[1])
        na = math.sqrt(da[0] * da[0] + da[1] * da[1])
        cos = 0.0 if ne == 0 or na == 0 else (de[0] * da[0] + de[1] * da[1]) / (ne * na)
        if cos > rules.cos_threshold:
            pe, pa = fut(ego, te), fut(other, te)
            along = (pa[0] - pe[0]) * de[0] + (pa[1] - pe[1]) * de[1]
            kind, sub = "following", ("rear_approach" if along < 0 else "lead_braking")
            score = v_rel / (d_min + 1.0)
        else:
            kind, sub = "intersection", "none"
            score = v_rel / (delta_t + 0.5)
        if score < rules.score_min:
            continue
        if kind == "intersection" and delta_t < rules.tier1_dt_max:
            tier = 1
        elif sub == "rear_approach" and d_min < rules.tier2_dmin_max:
            tier = 2
        elif sub == "lead_braking" and d_min < rules.tier3_dmin_max:
            tier = 3
        else:
            continue
        cands.append(
            dict(
                agent_id=other.agent_id, conflict_point=c, tau_e=te, tau_a=ta, d_min=d_min,
                delta_t=delta_t, v_rel=v_rel, score=score, kind=kind, subtype=sub, tier=tier,
            )
        )
    if not cands:
        return None
    cands.sort(key=lambda c: (c["tier"], -c["score"], c["agent_id"]))
    best = cands[0]
    s = min(best["score"], 1.0)
    best["guidance_weight"] = -80.0 - 40.0 * s if best["kind"] == "intersection" else -60.0 - 30.0 * s
    return best


# -------------------------------------------------------------- formulas


def score_oracle(kind, v_rel, delta_t, d_min):
    return v_rel / (delta_t + 0.5) if kind == "intersection" else v_rel / (d_min + 1.0)


def weight_oracle(kind, s):
    if kind is None:
        return -50.0
    base, slope = (-80.0, 40.0) if kind == "intersection" else (-60.0, 30.0)
    return base - slope * min(s, 1.0)


BASE_TABLE = {
    "intersection": (2.0, 1.5, 0.3),
    "rear_approach": (1.5, 1.0, 0.5),
    "lead_braking": (2.5, 0.8, 0.8),
    None: (1.5, 1.0, 0.5),
}


def base_weights_oracle(label, s):
    a, b, j = BASE_TABLE[label]
    return max(a * s, 0.3), max(b * s, 0.2), j


def stage_oracle(p):
    return float(np.interp(p, [0.0, 0.3, 0.7, 1.0], [0.2, 0.2, 1.5, 3.0]))


def compress_oracle(tau_e, tau_a, p, horizon, atc=True):
    if not atc or p < 0.5:
        return tau_e, tau_a
    gap = Decimal(abs(tau_e - tau_a)) * (Decimal(1) - Decimal(p))
    early = min(tau_e, tau_a)
    moved = int((Decimal(early) + gap).quantize(Decimal(1), rounding=ROUND_HALF_UP))
    moved = min(max(moved, 0), horizon - 1)
    early = min(max(early, 0), horizon - 1)
    return (early, moved) if tau_e <= tau_a else (moved, early)


def tier_oracle(kind, subtype, delta_t, d_min, s):
    if s < 0.05:
        return None
    if kind == "intersection":
        return 1 if delta_t < 5.0 else None
    if subtype == "rear_approach":
        return 2 if d_min < 10.0 else None
    return 3 if d_min < 12.0 else None


# ---------------------------------------------------------------- geometry


def _box_frame(p, center, yaw):
    c, s = math.cos(yaw), math.sin(yaw)
    dx, dy = p[..., 0] - center[0], p[..., 1] - center[1]
    return dx * c + dy * s, -dx * s + dy * c


def _box_depth(p, center, yaw, ext):
    """Signed inside-depth (positive inside) and outside distance of points to a box."""
    lx, ly = _box_frame(p, center, yaw)
    hl, hw = ext[0] / 2.0, ext[1] / 2.0
    depth = np.minimum(hl - np.abs(lx), hw - np.abs(ly))
    ox, oy = np.maximum(np.abs(lx) - hl, 0.0), np.maximum(np.abs(ly) - hw, 0.0)
    return depth, np.hypot(ox, oy)


def raster_overlap(a, b, floor=2.5e-7, max_cells=4_000_000):
    """Adaptive rasterisation of two boxes ``(center, yaw, extent)``.

    Pixels of a quadtree are coloured by their centre's depth in each box;
    both depth functions are 1-Lipschitz, so a pixel of half-diagonal r is
    certainly inside a box when its depth is >= r and certainly outside
    when its distance is > r.  Undecided pixels are split.  Returns True,
    False, or None when pixels reach the ``floor`` half-diagonal undecided,
    which can only happen when the boxes' separation or overlap depth is
    below about ``2 * floor``.
    """

    def aabb(box):
        c, yaw, (L, W) = box
        hx = abs(math.cos(yaw)) * L / 2 + abs(math.sin(yaw)) * W / 2
        hy = abs(math.sin(yaw)) * L / 2 + abs(math.cos(yaw)) * W / 2
        return c[0] - hx, c[0] + hx, c[1] - hy, c[1] + hy

    ax0, ax1, ay0, ay1 = aabb(a)
    bx0, bx1, by0, by1 = aabb(b)
    x0, x1, y0, y1 = max(ax0, bx0), min(ax1, bx1), max(ay0, by0), min(ay1, by1)
    if x0 > x1 or y0 > y1:
        return False
    half = max(x1 - x0, y1 - y0) / 2.0 + 1e-12
    centers = np.array([[(x0 + x1) / 2.0, (y0 + y1) / 2.0]])
    while True:
        r = half * math.sqrt(2.0)
        da, oa = _box_depth(centers, *a)
        db, ob = _box_depth(centers, *b)
        if np.any((da >= r) & (db >= r)):
            return True
        keep = (oa <= r) & (ob <= r)
        centers = centers[keep]
        if len(centers) == 0:
            return False
        if r < floor or 4 * len(centers) > max_cells:
            return None
        half /= 2.0
        offs = np.array([[-1, -1], [-1, 1], [1, -1], [1, 1]]) * half
        centers = (centers[:, None, :] + offs[None]).reshape(-1, 2)


def winding_number(points, ring):
    """Winding number by summing signed vertex angles seen from each point."""
    pts = np.asarray(points, float)
    ring = np.asarray(ring, float)
    total = np.zeros(len(pts))
    for i in range(len(ring)):
        a = ring[i] - pts
        b = ring[(i + 1) % len(ring)] - pts
        cross = a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]
        dot = a[:, 0] * b[:, 0] + a[:, 1] * b[:, 1]
        total += np.arctan2(cross, dot)
    return np.rint(total / (2 * math.pi)).astype(int)


def star_polygon(rng, n, r_min, r_max, center=(0.0, 0.0)):
    """Random simple star-shaped polygon around ``center``.

    One vertex per angular sector keeps every gap below pi, so the centre
    stays in the kernel and the ring cannot cross itself.
    """
    n = max(int(n), 4)
    ang = (np.arange(n) + rng.uniform(0.05, 0.95, n)) * (2 * math.pi / n)
    rad = rng.uniform(r_min, r_max, n)
    return np.stack([center[0] + rad * np.cos(ang), center[1] + rad * np.sin(ang)], -1)


# ------------------------------------------------------------------ metrics


def hbr_oracle(positions, yaws, valid, dt, projection="magnitude", ego_only=False):
    """Per-step loop over agents and acceleration steps."""
    events = total = 0
    rows = [0] if ego_only else range(len(positions))
    for i in rows:
        p = positions[i]
        for t in range(len(p) - 2):
            if not (valid[i][t] and valid[i][t + 1] and valid[i][t + 2]):
                continue
            v0 = ((p[t + 1][0] - p[t][0]) / dt, (p[t + 1][1] - p[t][1]) / dt)
            v1 = ((p[t + 2][0] - p[t + 1][0]) / dt, (p[t + 2][1] - p[t + 1][1]) / dt)
            ax, ay = (v1[0] - v0[0]) / dt, (v1[1] - v0[1]) / dt
            if projection == "magnitude":
                a_lon = math.hypot(ax, ay) * math.cos(yaws[i][t])
            else:
                a_lon = ax * math.cos(yaws[i][t]) + ay * math.sin(yaws[i][t])
            total += 1
            events += a_lon < -3.0
    return None if total == 0 else events / total


# ----------------------------------------------------------------- gradients


def fd_gradient(f, ego, adv, h=1e-4):
    """Central differences of a batched scalar loss ``f(ego, adv) -> (B,)`` over every coordinate."""
    n = ego.size + adv.size
    base = np.concatenate([ego.ravel(), adv.ravel()])
    plus = np.repeat(base[None], n, 0) + h * np.eye(n)
    minus = np.repeat(base[None], n, 0) - h * np.eye(n)
    both = np.concatenate([plus, minus])
    e = both[:, : ego.size].reshape((-1,) + ego.shape)
    a = both[:, ego.size :].reshape((-1,) + adv.shape)
    vals = np.asarray(f(e, a), float)
    g = (vals[:n] - vals[n:]) / (2 * h)
    return g[: ego.size].reshape(ego.shape), g[ego.size :].reshape(adv.shape)


def max_rel_error(analytic, numeric):
    """Normwise relative error ``max|a - n| / max(max|a|, max|n|)`` over all arrays."""
    a = np.concatenate([np.ravel(x) for x in analytic])
    n = np.concatenate([np.ravel(x) for x in numeric])
    scale = max(np.abs(a).max(), np.abs(n).max())
    return 0.0 if scale == 0 else float(np.abs(a - n).max() / scale)


ROAD_HALF = 15.0


def random_guidance_case(rng, singular=None):
    """Random trajectories, target, context options and flags for gradient checks.

    ``singular`` forces the ego arrival point onto the conflict point
    (``"exact"``) or 0.05 m from it (``"near"``).  Waypoints are kept at
    least 1 cm from the road edge so central differences never straddle
    the on/off-road switch.
    """
    T = int(rng.integers(6, 21))
    while True:
        ego = rng.uniform(-12, 12, 2) + np.cumsum(rng.normal(0, 1.0, (T, 2)), 0)
        adv = rng.uniform(-12, 12, 2) + np.cumsum(rng.normal(0, 1.0, (T, 2)), 0)
        pts = np.concatenate([ego, adv])
        if np.min(np.abs(np.abs(pts) - ROAD_HALF)) > 1e-2:
            break
    opts = dict(
        tau_e=int(rng.integers(0, T)),
        tau_a=int(rng.integers(0, T)),
        progress=float(rng.uniform(0, 1)),
        kind=str(rng.choice(["intersection", "rear_approach", "lead_braking"])),
        score=float(rng.uniform(0, 2)),
        road=bool(rng.random() < 0.7),
        prefix=bool(rng.random() < 0.5),
        flags=tuple(bool(f) for f in rng.random(4) < 0.8),
        use_target_weight=bool(rng.random() < 0.3),
    )
    c = rng.uniform(-10, 10, 2)
    if singular is not None:
        # arrival indices are uncompressed when ATC is off or p < 0.5
        opts["progress"] = float(rng.uniform(0, 0.49))
        u = rng.normal(size=2)
        off = 0.0 if singular == "exact" else 0.05
        ego[opts["tau_e"]] = c + off * u / np.linalg.norm(u)
        adv[opts["tau_a"]] = c if singular == "exact" else c - off * u / np.linalg.norm(u)
    opts["c"] = c
    opts["prefix_e"] = ego[0] - np.cumsum(rng.normal(0, 1.0, (3, 2)), 0)[::-1] if opts["prefix"] else None
    opts["prefix_a"] = adv[0] - np.cumsum(rng.normal(0, 1.0, (3, 2)), 0)[::-1] if opts["prefix"] else None
    return ego, adv, opts
