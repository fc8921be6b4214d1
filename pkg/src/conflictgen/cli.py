"""Command line driver: gen-suite, mine, rollout, eval, report.

Exit codes: 0 success, 1 partial failure (some scenes failed), 2 invalid
configuration or arguments.  All randomness derives from ``--seed``.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
import zlib
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .core import InvalidInput
from .io import (
    SCHEMA_VERSION,
    RunConfig,
    conflicts_doc,
    load_conflicts,
    load_run_config,
    load_scene,
    read_json,
    rollout_to_doc,
    save_scene,
    scene_files,
    trajectories_from_doc,
    write_json,
)
from .metrics import CSV_COLUMNS, EvalCase, evaluate, trajectories_from_scene
from .mining import mine_scene
from .sampler import SceneFailure, best_of_candidates
from .suite import generate_suite

log = logging.getLogger("conflictgen")

EXIT_OK, EXIT_PARTIAL, EXIT_CONFIG = 0, 1, 2
REPORT_COLUMNS = ("run", "horizon", "ade", "fde", "orr", "cr", "hbr")


def scene_seed(seed: int, scene_id: str) -> int:
    """Per-scene base seed, independent of scene order and of --jobs."""
    return int(np.random.SeedSequence([seed, zlib.crc32(scene_id.encode())]).generate_state(1)[0])


def _run_config(args) -> RunConfig:
    cfg = load_run_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    off = {
        "enable_progressive": args.no_pg,
        "enable_conflict_aware": args.no_cw,
        "enable_adaptive_timing": args.no_atc,
        "enable_jerk": args.no_jr,
    }
    changes = {k: False for k, v in off.items() if v}
    if changes:
        cfg = dataclasses.replace(cfg, guidance=dataclasses.replace(cfg.guidance, **changes))
    return cfg


def _map(fn, items, jobs: int):
    if jobs <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, bool):
        return str(int(x))
    if isinstance(x, float):
        return f"{x:.9g}"
    return str(x)


# ------------------------------------------------------------------ verbs


def cmd_gen_suite(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for scene in generate_suite(args.scenes, cfg.seed, history_len=args.history_len, future_len=args.future_len):
        save_scene(scene, out / f"{scene.scene_id}.json")
    log.info("wrote %d scenes to %s", args.scenes, out)
    return EXIT_OK


def _mine_one(job):
    path, rules = job
    try:
        scene = load_scene(path)
    except InvalidInput as exc:
        return "error", {"source": Path(path).name, "error": str(exc)}
    target = mine_scene(scene, rules)
    if target is None:
        return "invalid", {"scene_id": scene.scene_id, "reason": "no qualifying candidate"}
    return "record", target.to_json(scene.scene_id)


def cmd_mine(args, cfg: RunConfig) -> int:
    files = scene_files(args.scenes)
    if not files:
        raise InvalidInput(f"{args.scenes}: no scene files")
    buckets = {"record": [], "invalid": [], "error": []}
    for kind, item in _map(_mine_one, [(str(f), cfg.mining_rules) for f in files], args.jobs):
        buckets[kind].append(item)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_json(args.out, conflicts_doc(buckets["record"], buckets["invalid"], buckets["error"], cfg.mining_rules))
    for err in buckets["error"]:
        log.error("%s: %s", err["source"], err["error"])
    return EXIT_PARTIAL if buckets["error"] else EXIT_OK


def _rollout_one(job):
    path, target, cfg, guided, out_dir = job
    try:
        scene = load_scene(path)
        seed = scene_seed(cfg.seed, scene.scene_id)
        result = best_of_candidates(scene, target, seed, cfg.guidance if guided else None, cfg.sampler)
    except (InvalidInput, SceneFailure) as exc:
        sid = Path(path).stem
        write_json(Path(out_dir) / f"{sid}.json", {"kind": "failure", "schema_version": SCHEMA_VERSION, "scene_id": sid, "error": str(exc)})
        return sid, str(exc)
    write_json(Path(out_dir) / f"{scene.scene_id}.json", rollout_to_doc(result, cfg.to_json()))
    return scene.scene_id, None


def cmd_rollout(args, cfg: RunConfig) -> int:
    if args.candidates is not None:
        cfg = dataclasses.replace(cfg, sampler=dataclasses.replace(cfg.sampler, candidates_per_scene=args.candidates))
    targets = load_conflicts(args.conflicts)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = []
    for f in scene_files(args.scenes):
        # scene files are named by scene id; fall back to reading the id
        sid = f.stem if f.stem in targets else _scene_id(f)
        if sid not in targets:
            log.warning("%s: no mined conflict, skipped", f.name)
            continue
        jobs.append((str(f), targets[sid], cfg, not args.unguided, str(out)))
    failures = [(sid, err) for sid, err in _map(_rollout_one, jobs, args.jobs) if err]
    for sid, err in failures:
        log.error("%s: %s", sid, err)
    return EXIT_PARTIAL if failures else EXIT_OK


def _scene_id(path) -> str:
    try:
        doc = read_json(path)
        return doc.get("scene_id", path.stem) if isinstance(doc, dict) else path.stem
    except InvalidInput:
        return path.stem


def cmd_eval(args, cfg: RunConfig) -> int:
    scenes, errors = {}, 0
    for f in scene_files(args.scenes):
        try:
            scene = load_scene(f)
        except InvalidInput as exc:
            log.error("%s", exc)
            errors += 1
            continue
        scenes[scene.scene_id] = scene
    cases, flags = [], []
    for f in scene_files(args.results):
        try:
            doc = read_json(f)
        except InvalidInput as exc:
            log.error("%s", exc)
            errors += 1
            continue
        if not isinstance(doc, dict) or doc.get("kind") != "rollout":
            flags.append(f"{f.name}: not a rollout result, skipped")
            continue
        scene = scenes.get(doc.get("scene_id"))
        if scene is None:
            log.warning("%s: orphan result (scene %r unknown), excluded", f.name, doc.get("scene_id"))
            flags.append(f"{doc.get('scene_id')}: orphan result, excluded")
            continue
        try:
            pred = trajectories_from_doc(doc, str(f))
        except (InvalidInput, KeyError) as exc:
            log.error("%s: %s", f.name, exc)
            errors += 1
            continue
        ref = trajectories_from_scene(scene)
        if ref.positions.shape[0] != pred.positions.shape[0]:
            flags.append(f"{scene.scene_id}: agent count differs from scene, excluded")
            continue
        steps = min(pred.num_steps, ref.num_steps)
        cases.append(EvalCase(scene.scene_id, pred.truncate(steps), ref.truncate(steps), scene.drivable))
    opts = cfg.metrics
    horizons = args.horizons if args.horizons else opts.horizons
    report = evaluate(cases, horizons, opts.hbr_projection, opts.ego_only)
    report.flags = flags + report.flags
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    doc = {"schema_version": SCHEMA_VERSION, "tool_version": __version__, "options": cfg.to_json()["metrics"], **report.to_json()}
    write_json(out.with_suffix(".json"), doc)
    with open(out.with_suffix(".csv"), "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for row in report.rows():
            writer.writerow([_fmt(row[c]) for c in CSV_COLUMNS])
    return EXIT_PARTIAL if errors else EXIT_OK


def report_rows(docs: dict) -> list[dict]:
    """One row per run per horizon; horizons missing from a run are gaps (``None``)."""
    horizons = []
    for doc in docs.values():
        for h in doc.get("horizons", {}):
            if h not in horizons:
                horizons.append(h)
    horizons.sort(key=float)
    rows = []
    for run, doc in docs.items():
        for h in ["full"] + horizons:
            agg = doc.get("aggregate", {}) if h == "full" else doc.get("horizons", {}).get(h, {}).get("aggregate")
            row = {"run": run, "horizon": h}
            for c in REPORT_COLUMNS[2:]:
                row[c] = None if agg is None else agg.get(c)
            rows.append(row)
    return rows


def render_table(rows: list[dict]) -> str:
    cells = [list(REPORT_COLUMNS)]
    for r in rows:
        cells.append([r["run"], r["horizon"]] + [("-" if r[c] is None else f"{r[c]:.4f}") for c in REPORT_COLUMNS[2:]])
    widths = [max(len(row[i]) for row in cells) for i in range(len(REPORT_COLUMNS))]
    lines = ["  ".join(v.ljust(w) if i < 2 else v.rjust(w) for i, (v, w) in enumerate(zip(row, widths))) for row in cells]
    return "\n".join(lines) + "\n"


def cmd_report(args, cfg: RunConfig) -> int:
    docs = {}
    for path in args.metrics:
        doc = read_json(path)
        if not isinstance(doc, dict) or "aggregate" not in doc:
            raise InvalidInput(f"{path}: not a metrics report")
        name = Path(path).stem
        while name in docs:
            name += "'"
        docs[name] = doc
    rows = report_rows(docs)
    sys.stdout.write(render_table(rows))
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(REPORT_COLUMNS)
            for r in rows:
                writer.writerow([_fmt(r[c]) for c in REPORT_COLUMNS])
    return EXIT_OK


# ----------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration JSON")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--jobs", type=int, default=1, help="scenes processed in parallel")
    common.add_argument("--no-pg", action="store_true", help="disable progressive stage scaling")
    common.add_argument("--no-cw", action="store_true", help="disable conflict-aware weights")
    common.add_argument("--no-atc", action="store_true", help="disable arrival-time compression")
    common.add_argument("--no-jr", action="store_true", help="disable jerk regularization")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="conflictgen", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-suite", parents=[common], help="write the synthetic scene suite")
    p.add_argument("out", help="output directory")
    p.add_argument("--scenes", type=int, default=30)
    p.add_argument("--history-len", type=int, default=31)
    p.add_argument("--future-len", type=int, default=80)
    p.set_defaults(func=cmd_gen_suite)

    p = sub.add_parser("mine", parents=[common], help="mine one conflict target per scene")
    p.add_argument("scenes", help="directory of scene files")
    p.add_argument("-o", "--out", required=True, help="conflict file to write")
    p.set_defaults(func=cmd_mine)

    p = sub.add_parser("rollout", parents=[common], help="closed-loop rollouts, one result file per scene")
    p.add_argument("scenes", help="directory of scene files")
    p.add_argument("--conflicts", required=True, help="conflict file from 'mine'")
    p.add_argument("-o", "--out", required=True, help="output directory")
    p.add_argument("--unguided", action="store_true", help="baseline without guidance")
    p.add_argument("--candidates", type=int, help="overrides candidates_per_scene")
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("eval", parents=[common], help="metrics over rollout results")
    p.add_argument("results", help="directory of rollout results")
    p.add_argument("--scenes", required=True, help="directory of reference scene files")
    p.add_argument("-o", "--out", required=True, help="output prefix; writes PREFIX.json and PREFIX.csv")
    p.add_argument("--horizons", type=float, nargs="+", help="horizons in seconds")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", parents=[common], help="compare metrics files")
    p.add_argument("metrics", nargs="+", help="metrics JSON files from 'eval'")
    p.add_argument("--csv", help="also write the table as CSV")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.jobs < 1:
            raise InvalidInput("--jobs must be at least 1")
        cfg = _run_config(args)
        return args.func(args, cfg)
    except InvalidInput as exc:
        log.error("%s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
