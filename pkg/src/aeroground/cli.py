"""Operator command line.

Exit codes: 0 success, 1 data errors, 2 connectivity failures, 64 usage
errors. Machine-readable output goes to stdout, diagnostics to stderr.
"""

from __future__ import annotations

import argparse
import glob
import json
import logging
import os
import sys
import tempfile
import time
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .backends import client as backend_client
from .backends.client import TransportError
from .backends.mock import MockConfig, spawn_mock_backend
from .backends.protocol import ALL_ROLES
from .cues import RedCueParams, extract_cues, red_pixel_mask
from .evaluation import (
    MetricsReport,
    compute_metrics,
    error_line,
    load_canonical,
    load_results,
    render_report,
    result_line,
)
from .figures import draw_overlay, render_metrics_figure
from .geometry import BBox, iou
from .imaging import EnhanceParams, preprocess, read_image, write_png
from .pipeline import (
    GroundingResult,
    GroundingTask,
    PipelineConfig,
    TaskFailure,
    config_from_dict,
    config_to_dict,
    ground_batch,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_DATA = 1
EXIT_CONNECTIVITY = 2
EXIT_USAGE = 64


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _atomic_write_text(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=str(path.parent), prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _grid(value: str) -> tuple[int, int]:
    try:
        cols, rows = value.lower().split("x")
        return (int(cols), int(rows))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected COLSxROWS, got {value!r}")


# ---------------------------------------------------------------------------
# preprocess
# ---------------------------------------------------------------------------

def cmd_preprocess(args) -> int:
    params = EnhanceParams(
        clahe_clip_limit=args.clahe_clip,
        clahe_tile_grid=args.tile,
        unsharp_sigma=args.unsharp_sigma,
        unsharp_amount=args.unsharp_amount,
    )
    paths = sorted(glob.glob(args.input)) or [args.input]
    out_dir = Path(args.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    status = EXIT_OK
    for p in paths:
        t0 = time.perf_counter()
        try:
            img = read_image(p)
        except OSError as exc:
            print(f"error: cannot read {p}: {exc}", file=sys.stderr)
            status = EXIT_DATA
            continue
        enhanced = preprocess(img, params)
        out_path = out_dir / (Path(p).stem + ".png")
        write_png(enhanced, out_path)
        print(f"{p} -> {out_path} ({(time.perf_counter() - t0) * 1000.0:.1f} ms)")
    return status


# ---------------------------------------------------------------------------
# ground
# ---------------------------------------------------------------------------

def _load_config(path: str | None, args) -> PipelineConfig:
    data = {}
    if path:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    cfg = config_from_dict(data)
    # flags override file values
    if getattr(args, "p_threshold", None) is not None:
        cfg = PipelineConfig(**{**_cfg_kwargs(cfg), "p_threshold": args.p_threshold})
    if getattr(args, "endpoint", None):
        endpoints = dict(cfg.endpoints)
        from .backends.protocol import BackendEndpoint
        for spec in args.endpoint:
            role, _, url = spec.partition("=")
            if not url:
                raise ValueError(f"--endpoint expects ROLE=URL, got {spec!r}")
            endpoints[role] = BackendEndpoint(role=role, base_url=url)
        cfg = PipelineConfig(**{**_cfg_kwargs(cfg), "endpoints": endpoints})
    return cfg


def _cfg_kwargs(cfg: PipelineConfig) -> dict:
    return {
        "p_threshold": cfg.p_threshold,
        "directional_keywords": cfg.directional_keywords,
        "enhance": cfg.enhance,
        "cue": cfg.cue,
        "min_mask_pixels": cfg.min_mask_pixels,
        "min_mask_score": cfg.min_mask_score,
        "crop_margin": cfg.crop_margin,
        "endpoints": cfg.endpoints,
        "edit_instruction_template": cfg.edit_instruction_template,
        "initial_segment_on_edited": cfg.initial_segment_on_edited,
    }


def cmd_ground(args) -> int:
    try:
        cfg = _load_config(args.config, args)
        records = load_canonical(args.tasks)
    except (OSError, ValueError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA

    # up-front health check of every configured endpoint
    health_snapshot: dict[str, dict] = {}
    for role in ALL_ROLES:
        ep = cfg.endpoints.get(role)
        if ep is None:
            print(f"error: no endpoint configured for role {role!r}", file=sys.stderr)
            return EXIT_CONNECTIVITY
        try:
            payload = backend_client.health(ep.base_url)
        except TransportError as exc:
            print(f"error: endpoint for {role} is unhealthy: {exc}", file=sys.stderr)
            return EXIT_CONNECTIVITY
        if role not in payload.get("roles", []):
            print(f"error: {ep.base_url} does not serve role {role}", file=sys.stderr)
            return EXIT_CONNECTIVITY
        health_snapshot[role] = payload

    base_dir = Path(args.tasks).parent
    tasks = []
    truth: dict[str, BBox] = {}
    for r in records:
        image_path = Path(r.image_path)
        if not image_path.is_absolute():
            image_path = base_dir / image_path
        tasks.append(GroundingTask(task_id=r.task_id, image=image_path, query=r.query))
        truth[r.task_id] = r.truth_box

    started = datetime.now(timezone.utc)
    outcomes = ground_batch(tasks, cfg, parallelism=args.parallelism)
    finished = datetime.now(timezone.utc)

    overlay_dir = Path(args.overlay) if args.overlay else None
    if overlay_dir:
        overlay_dir.mkdir(parents=True, exist_ok=True)

    counts: dict[str, int] = {}
    lines = []
    n_errors = 0
    for outcome in outcomes:
        if isinstance(outcome, TaskFailure):
            n_errors += 1
            counts["error"] = counts.get("error", 0) + 1
            lines.append(error_line(outcome.task_id, outcome.stage, outcome.message))
            continue
        assert isinstance(outcome, GroundingResult)
        counts[outcome.provenance] = counts.get(outcome.provenance, 0) + 1
        iou_value = None
        t = truth.get(outcome.task_id)
        if t is not None and outcome.final_box is not None:
            iou_value = iou(outcome.final_box, t)
        elif t is not None:
            iou_value = 0.0
        lines.append(result_line(outcome.task_id, outcome.final_box,
                                 outcome.provenance, outcome.trace.digest(), iou_value))
        if overlay_dir:
            _write_overlay(outcome, tasks, truth, overlay_dir, cfg)

    out_path = Path(args.output)
    _atomic_write_text(out_path, "\n".join(lines) + ("\n" if lines else ""))

    manifest = {
        "tool_version": __version__,
        "started_at": started.isoformat(),
        "finished_at": finished.isoformat(),
        "config": config_to_dict(cfg),
        "parallelism": args.parallelism,
        "task_counts": {**counts, "total": len(outcomes)},
        "endpoint_health": health_snapshot,
    }
    _atomic_write_text(out_path.with_suffix(out_path.suffix + ".manifest.json"),
                       json.dumps(manifest, indent=2) + "\n")

    print(f"{len(outcomes)} tasks -> {out_path} ({n_errors} errors)")
    return EXIT_DATA if n_errors else EXIT_OK


def _write_overlay(result: GroundingResult, tasks, truth, overlay_dir: Path,
                   cfg: PipelineConfig) -> None:
    task = next((t for t in tasks if t.task_id == result.task_id), None)
    if task is None:
        return
    try:
        img = read_image(task.image) if not hasattr(task.image, "pixels") else task.image
    except OSError:
        return
    cue_boxes = []
    for stage in result.trace.stages:
        if stage.stage == "cues":
            cue_boxes = [BBox.from_tuple(c["bbox"]) for c in stage.candidates]
    draw_overlay(img, cue_boxes=cue_boxes, final_box=result.final_box,
                 truth_box=truth.get(result.task_id),
                 path=overlay_dir / f"{result.task_id}.png")


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def cmd_eval(args) -> int:
    try:
        records = load_canonical(args.tasks)
        results = load_results(args.results)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA

    by_id = {r.task_id: r for r in records}
    thresholds = tuple(float(t) for t in args.thresholds.split(","))

    grouped: dict[str, list] = {}
    for res in results:
        tid = res.get("task_id")
        if tid not in by_id:
            print(f"error: results reference unknown task_id {tid!r}", file=sys.stderr)
            return EXIT_DATA
        record = by_id[tid]
        if "error" in res:
            pred, prov = None, "error"
        else:
            raw = res.get("bbox")
            pred = BBox.from_tuple(raw) if raw else None
            prov = res.get("provenance", "unknown")
        grouped.setdefault(record.dataset_tag, []).append(
            (tid, pred, record.truth_box, prov))

    if not grouped:
        print("error: no results to score", file=sys.stderr)
        return EXIT_DATA

    per_dataset: dict[str, MetricsReport] = {}
    for ds, rows in grouped.items():
        per_dataset[ds] = compute_metrics(
            [(pred, truth) for _, pred, truth, _ in rows],
            thresholds=thresholds,
            task_ids=[tid for tid, *_ in rows],
            provenances=[prov for *_, prov in rows],
        )

    for ds, rep in per_dataset.items():
        prefix = f"{ds} " if len(per_dataset) > 1 else ""
        acc = " ".join(f"acc{int(t * 100)} {rep.acc_at[t]:.4f}" for t in thresholds)
        print(f"{prefix}miou {rep.miou:.4f} {acc}")

    reports = {args.model_name: per_dataset}
    if args.format:
        document = render_report(reports, args.format)
        if args.output:
            _atomic_write_text(Path(args.output), document)
        else:
            print(document, end="")
    if args.figure:
        render_metrics_figure(reports, args.figure)
        print(f"figure -> {args.figure}", file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------------------
# mock-serve
# ---------------------------------------------------------------------------

def cmd_mock_serve(args) -> int:
    truth_table: dict[str, BBox] = {}
    if args.truth:
        try:
            for record in load_canonical(args.truth):
                truth_table[record.task_id] = record.truth_box
        except (OSError, ValueError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_DATA
    cfg = MockConfig(behavior=args.behavior, seed=args.seed, shrink=args.shrink,
                     jitter_px=args.jitter_px, fail_rate=args.fail_rate,
                     truth_table=truth_table)
    try:
        backend = spawn_mock_backend(cfg, port=args.port, host=args.host)
    except OSError as exc:
        print(f"error: cannot bind port {args.port}: {exc}", file=sys.stderr)
        return EXIT_DATA
    print(f"mock backend serving {sorted(backend.roles)} at {backend.base_url}",
          file=sys.stderr)
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        backend.shutdown()
    return EXIT_OK


# ---------------------------------------------------------------------------
# cues
# ---------------------------------------------------------------------------

def cmd_cues(args) -> int:
    params = RedCueParams(r_min=args.r_min, g_max=args.g_max, b_max=args.b_max,
                          min_component_area=args.min_area)
    try:
        base = read_image(args.image)
        edited = read_image(args.edited) if args.edited else base
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    cue_set = extract_cues(edited, params)
    print(json.dumps([list(b.as_tuple()) for b in cue_set.boxes]))
    if args.overlay:
        mask = red_pixel_mask(edited, params)
        draw_overlay(base, cue_boxes=cue_set.boxes, red_mask=mask, path=args.overlay)
        print(f"overlay -> {args.overlay}", file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="aeroground",
                     description="Text-guided object grounding for overhead imagery")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("preprocess", help="enhance images (CLAHE + unsharp)")
    p.add_argument("input", help="input image path or glob")
    p.add_argument("output_dir", help="directory for enhanced PNGs")
    p.add_argument("--clahe-clip", type=float, default=2.0)
    p.add_argument("--tile", type=_grid, default=(8, 8), metavar="COLSxROWS")
    p.add_argument("--unsharp-sigma", type=float, default=1.5)
    p.add_argument("--unsharp-amount", type=float, default=0.5)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("ground", help="run the grounding pipeline over a task file")
    p.add_argument("tasks", help="canonical JSONL task file")
    p.add_argument("--config", help="pipeline config JSON")
    p.add_argument("--output", required=True, help="result JSONL path")
    p.add_argument("--parallelism", type=int, default=1)
    p.add_argument("--overlay", help="directory for per-task overlay PNGs")
    p.add_argument("--p-threshold", type=float, default=None)
    p.add_argument("--endpoint", action="append", metavar="ROLE=URL",
                   help="override an endpoint (repeatable)")
    p.set_defaults(func=cmd_ground)

    p = sub.add_parser("eval", help="score results against ground truth")
    p.add_argument("results", help="result JSONL from `ground`")
    p.add_argument("tasks", help="canonical JSONL task file")
    p.add_argument("--thresholds", default="0.5,0.7")
    p.add_argument("--format", choices=("table_text", "csv", "json"), default=None)
    p.add_argument("--output", help="write the formatted report here")
    p.add_argument("--figure", help="write a metrics figure PNG here")
    p.add_argument("--model-name", default="pipeline")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("mock-serve", help="serve deterministic mock backends")
    p.add_argument("--port", type=int, default=8571)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--behavior", choices=("oracle", "jitter", "hallucinate", "fail"),
                   default="oracle")
    p.add_argument("--truth", help="canonical JSONL with truth boxes")
    p.add_argument("--shrink", type=float, default=1.0)
    p.add_argument("--jitter-px", type=int, default=4)
    p.add_argument("--fail-rate", type=float, default=0.0)
    p.set_defaults(func=cmd_mock_serve)

    p = sub.add_parser("cues", help="debug red-box cue extraction")
    p.add_argument("image", help="base image (overlay background)")
    p.add_argument("--edited", help="edited image with red boxes (defaults to IMAGE)")
    p.add_argument("--overlay", help="write an overlay PNG here")
    p.add_argument("--r-min", type=int, default=200)
    p.add_argument("--g-max", type=int, default=80)
    p.add_argument("--b-max", type=int, default=80)
    p.add_argument("--min-area", type=int, default=25)
    p.set_defaults(func=cmd_cues)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
