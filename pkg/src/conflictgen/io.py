"""JSON file formats, schema checks and the run configuration.

Everything is written through :func:`dumps_canonical`: sorted keys, floats
rounded to 9 significant digits, non-finite floats as ``null``.  Two runs
that compute the same numbers therefore write the same bytes.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np

from . import __version__
from .core import AgentTrack, DrivableArea, InvalidInput, Scene
from .guidance import GuidanceConfig
from .metrics import TrajectorySet
from .mining import ConflictTarget, MiningRules
from .sampler import RolloutResult, SamplerConfig

SCHEMA_VERSION = 1


class SchemaError(InvalidInput):
    """A document does not match its schema; ``violations`` lists every problem found."""

    def __init__(self, source: str, violations: list[str]):
        self.source = source
        self.violations = violations
        super().__init__(f"{source}: " + "; ".join(violations))


# ------------------------------------------------------------ canonical JSON


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not math.isfinite(x):
            return None
        x = float(f"{x:.9g}")
        return 0.0 if x == 0 else x  # no negative zero
    return obj


def dumps_canonical(obj) -> str:
    return json.dumps(_plain(obj), sort_keys=True, indent=1, allow_nan=False) + "\n"


def write_json(path, obj) -> None:
    Path(path).write_text(dumps_canonical(obj), encoding="utf-8")


def read_json(path) -> Any:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise InvalidInput(f"{path}: cannot read ({exc.strerror})") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(str(path), [f"malformed JSON at line {exc.lineno} column {exc.colno}: {exc.msg}"]) from exc


# ------------------------------------------------------------------- scenes


def _num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


def _check_points(value, where, errors):
    if not isinstance(value, list) or not all(
        isinstance(p, list) and len(p) == 2 and all(_num(c) for c in p) for p in value
    ):
        errors.append(f"{where}: expected a list of [x, y] pairs")
        return False
    return True


def validate_scene_doc(doc) -> list[str]:
    """Every schema violation in a scene document (empty when valid)."""
    errors = []
    if not isinstance(doc, dict):
        return ["document: expected an object"]
    for key, kind in (("scene_id", str), ("dt", float), ("history_len", int), ("future_len", int), ("agents", list)):
        if key not in doc:
            errors.append(f"{key}: missing")
        elif kind is float and not _num(doc[key]):
            errors.append(f"{key}: expected a number")
        elif kind is int and (not isinstance(doc[key], int) or isinstance(doc[key], bool) or doc[key] < 0):
            errors.append(f"{key}: expected a non-negative integer")
        elif kind in (str, list) and not isinstance(doc[key], kind):
            errors.append(f"{key}: expected {kind.__name__}")
    if errors:
        return errors
    ids = []
    for i, agent in enumerate(doc["agents"]):
        where = f"agents[{i}]"
        if not isinstance(agent, dict):
            errors.append(f"{where}: expected an object")
            continue
        aid = agent.get("id")
        if not isinstance(aid, int) or isinstance(aid, bool):
            errors.append(f"{where}.id: expected an integer")
        else:
            ids.append(aid)
        ext = agent.get("extent")
        if not (isinstance(ext, list) and len(ext) == 2 and all(_num(e) and e > 0 for e in ext)):
            errors.append(f"{where}.extent: expected [length, width] > 0")
        track = agent.get("track")
        if not isinstance(track, list):
            errors.append(f"{where}.track: expected a list")
            continue
        for j, step in enumerate(track):
            sw = f"{where}.track[{j}]"
            if not isinstance(step, dict):
                errors.append(f"{sw}: expected an object")
                continue
            if step.get("t") != j:
                errors.append(f"{sw}.t: expected {j} (steps must be contiguous from 0)")
            for key in ("x", "y", "yaw"):
                if not _num(step.get(key)):
                    errors.append(f"{sw}.{key}: expected a finite number")
            if not isinstance(step.get("valid"), bool):
                errors.append(f"{sw}.valid: expected true/false")
    if len(set(ids)) != len(ids):
        errors.append("agents: ids are not unique")
    if ids and 0 not in ids:
        errors.append("ego (id 0) absent")
    drivable = doc.get("drivable", {"polygons": [], "holes": []})
    if not isinstance(drivable, dict):
        errors.append("drivable: expected an object")
    else:
        for key in ("polygons", "holes"):
            rings = drivable.get(key, [])
            if not isinstance(rings, list):
                errors.append(f"drivable.{key}: expected a list")
                continue
            for k, ring in enumerate(rings):
                _check_points(ring, f"drivable.{key}[{k}]", errors)
    return errors


def scene_from_doc(doc, source: str = "scene") -> Scene:
    errors = validate_scene_doc(doc)
    if errors:
        raise SchemaError(source, errors)
    agents = []
    for agent in sorted(doc["agents"], key=lambda a: a["id"] != 0):
        track = agent["track"]
        agents.append(
            AgentTrack(
                agent["id"],
                tuple(agent["extent"]),
                np.array([[s["x"], s["y"]] for s in track], float).reshape(-1, 2),
                np.array([s["yaw"] for s in track], float),
                np.array([s["valid"] for s in track], bool),
            )
        )
    drivable = doc.get("drivable", {})
    try:
        area = DrivableArea(
            tuple(np.array(r, float) for r in drivable.get("polygons", [])),
            tuple(np.array(r, float) for r in drivable.get("holes", [])),
        )
        return Scene(doc["scene_id"], agents, float(doc["dt"]), area, doc["history_len"], doc["future_len"])
    except InvalidInput as exc:
        raise SchemaError(source, [str(exc)]) from exc


def _tracks_doc(agent_ids, extents, positions, yaws, valid):
    out = []
    for i, aid in enumerate(agent_ids):
        out.append(
            {
                "id": int(aid),
                "extent": [float(extents[i][0]), float(extents[i][1])],
                "track": [
                    {"t": t, "x": positions[i, t, 0], "y": positions[i, t, 1], "yaw": yaws[i, t], "valid": bool(valid[i, t])}
                    for t in range(positions.shape[1])
                ],
            }
        )
    return out


def _drivable_doc(area: DrivableArea) -> dict:
    return {"polygons": [r.tolist() for r in area.polygons], "holes": [r.tolist() for r in area.holes]}


def scene_to_doc(scene: Scene) -> dict:
    return {
        "scene_id": scene.scene_id,
        "dt": scene.dt,
        "history_len": scene.history_len,
        "future_len": scene.future_len,
        "agents": _tracks_doc(
            [a.agent_id for a in scene.agents],
            [a.extent for a in scene.agents],
            np.stack([a.positions for a in scene.agents]),
            np.stack([a.yaws for a in scene.agents]),
            np.stack([a.valid for a in scene.agents]),
        ),
        "drivable": _drivable_doc(scene.drivable),
    }


def load_scene(path) -> Scene:
    return scene_from_doc(read_json(path), str(path))


def save_scene(scene: Scene, path) -> None:
    write_json(path, scene_to_doc(scene))


def scene_files(directory) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise InvalidInput(f"{directory}: not a directory")
    return sorted(directory.glob("*.json"))


# ------------------------------------------------------------ conflict file


def conflicts_doc(records: list[dict], invalid: list[dict], errors: list[dict], rules: MiningRules) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "tool_version": __version__,
        "rules": asdict(rules),
        "records": sorted(records, key=lambda r: r["scene_id"]),
        "invalid_scenes": sorted(invalid, key=lambda r: r["scene_id"]),
        "errors": sorted(errors, key=lambda r: r["source"]),
    }


def load_conflicts(path) -> dict[str, ConflictTarget]:
    doc = read_json(path)
    if not isinstance(doc, dict) or not isinstance(doc.get("records"), list):
        raise SchemaError(str(path), ["records: expected a list"])
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise SchemaError(str(path), [f"schema_version: expected {SCHEMA_VERSION}"])
    out = {}
    for i, rec in enumerate(doc["records"]):
        try:
            out[rec["scene_id"]] = ConflictTarget.from_json(rec)
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(str(path), [f"records[{i}]: {exc!r}"]) from exc
    return out


# ----------------------------------------------------------- rollout files


def rollout_to_doc(result: RolloutResult, config: Optional[dict] = None) -> dict:
    return {
        "kind": "rollout",
        "schema_version": SCHEMA_VERSION,
        "scene_id": result.scene_id,
        "dt": result.dt,
        "history_len": 0,
        "future_len": result.horizon,
        "agents": _tracks_doc(result.agent_ids, result.extents, result.positions, result.yaws, result.valid),
        "seed": result.seed,
        "guided": result.guided,
        "adversary_id": result.adversary_id,
        "selected_candidate": result.selected,
        "candidates": result.candidates,
        "min_distance": result.min_distance,
        "collided": result.collided,
        "flags": list(result.flags),
        "diagnostics": result.diagnostics,
        "config": config or {},
    }


def trajectories_from_doc(doc, source: str = "rollout") -> TrajectorySet:
    scene = scene_from_doc({k: doc[k] for k in ("scene_id", "dt", "history_len", "future_len", "agents") if k in doc}, source)
    return TrajectorySet(
        np.stack([a.positions for a in scene.agents]),
        np.stack([a.yaws for a in scene.agents]),
        np.stack([a.valid for a in scene.agents]),
        np.array([a.extent for a in scene.agents]),
        scene.dt,
    )


# ------------------------------------------------------------- run config


@dataclass(frozen=True)
class MetricsOptions:
    horizons: tuple = ()
    hbr_projection: str = "magnitude"  # or "heading"
    ego_only: bool = False

    def __post_init__(self):
        if self.hbr_projection not in ("magnitude", "heading"):
            raise InvalidInput(f"unknown hbr_projection {self.hbr_projection!r}")
        object.__setattr__(self, "horizons", tuple(float(h) for h in self.horizons))
        if any(h <= 0 for h in self.horizons):
            raise InvalidInput("horizons must be positive")


@dataclass(frozen=True)
class RunConfig:
    mining_rules: MiningRules = field(default_factory=MiningRules)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    metrics: MetricsOptions = field(default_factory=MetricsOptions)
    seed: int = 0

    def to_json(self) -> dict:
        return {
            "mining_rules": asdict(self.mining_rules),
            "guidance": self.guidance.to_json(),
            "sampler": self.sampler.to_json(),
            "metrics": {**asdict(self.metrics), "horizons": list(self.metrics.horizons)},
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise InvalidInput("run config must be a JSON object")
        unknown = set(data) - {"mining_rules", "guidance", "sampler", "metrics", "seed"}
        if unknown:
            raise InvalidInput(f"unknown run config sections {sorted(unknown)}")

        def block(name):
            value = data.get(name, {})
            if not isinstance(value, dict):
                raise InvalidInput(f"{name}: expected an object")
            return value

        def section(name, klass):
            block_ = block(name)
            bad = set(block_) - set(klass.__dataclass_fields__)
            if bad:
                raise InvalidInput(f"{name}: unknown options {sorted(bad)}")
            return klass(**block_)

        try:
            return cls(
                mining_rules=section("mining_rules", MiningRules),
                guidance=GuidanceConfig.from_json(block("guidance")),
                sampler=SamplerConfig.from_json(block("sampler")),
                metrics=section("metrics", MetricsOptions),
                seed=int(data.get("seed", 0)),
            )
        except TypeError as exc:
            raise InvalidInput(str(exc)) from exc


def load_run_config(path) -> RunConfig:
    return RunConfig.from_json(read_json(path))
