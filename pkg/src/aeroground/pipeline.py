"""End-to-end grounding orchestrator.

One task flows through a fixed stage order: preprocess, rewrite, edit,
cues, initial_segment, refine (one record per cue), select, finalize.
Later stages degrade along a fallback cascade instead of erroring: chosen
segmenter -> alternate segmenter -> the raw diffusion cue box. Every stage
appends to an audit trace whose digest is stable across reruns and worker
counts (latency is excluded).
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .backends import client
from .backends.client import ProtocolError, TransportError
from .backends.protocol import (
    BackendEndpoint,
    ROLE_EDITOR,
    ROLE_REWRITER,
    ROLE_SEGMENTER_LARGE,
    ROLE_SEGMENTER_SMALL,
    SegmentRequest,
    SegmentResponse,
)
from .cues import CueSet, RedCueParams, extract_cues
from .geometry import (
    BBox,
    BinaryMask,
    Dims,
    area_ratio_percent,
    clamp_bbox,
    expand_bbox,
    mask_to_bbox,
    remap_to_original,
)
from .imaging import EnhanceParams, ImageBuffer, preprocess, read_image

logger = logging.getLogger(__name__)

ROUTE_LARGE = "large"
ROUTE_SMALL = "small"

PROVENANCE_REFINED_LARGE = "refined_large"
PROVENANCE_REFINED_SMALL = "refined_small"
PROVENANCE_REFINED_ALTERNATE = "refined_fallback_alternate"
PROVENANCE_DIFFUSION_FALLBACK = "diffusion_fallback"
PROVENANCE_NONE = "none"
PROVENANCES = (
    PROVENANCE_REFINED_LARGE,
    PROVENANCE_REFINED_SMALL,
    PROVENANCE_REFINED_ALTERNATE,
    PROVENANCE_DIFFUSION_FALLBACK,
    PROVENANCE_NONE,
)

DEFAULT_DIRECTIONAL_KEYWORDS = (
    "left", "right", "top", "bottom", "upper", "lower", "leftmost", "rightmost",
)

DEFAULT_EDIT_INSTRUCTION = (
    "Draw a red bounding box around: {query}. Do not modify anything else."
)


@dataclass(frozen=True)
class GroundingTask:
    """One unit of work: an image, a referring query, optional ground truth."""

    task_id: str
    image: ImageBuffer | str | Path
    query: str
    ground_truth: BBox | None = None

    def __post_init__(self) -> None:
        if not self.query:
            raise ValueError("query must be non-empty")
        if not self.task_id:
            raise ValueError("task_id must be non-empty")


@dataclass(frozen=True)
class PipelineConfig:
    p_threshold: float = 10.0
    directional_keywords: tuple[str, ...] = DEFAULT_DIRECTIONAL_KEYWORDS
    enhance: EnhanceParams = field(default_factory=EnhanceParams)
    cue: RedCueParams = field(default_factory=RedCueParams)
    min_mask_pixels: int = 10
    min_mask_score: float = 0.0
    crop_margin: float = 0.0
    endpoints: dict[str, BackendEndpoint] = field(default_factory=dict)
    edit_instruction_template: str = DEFAULT_EDIT_INSTRUCTION
    # ablation switch: run the initial box-prompted segmentation on the edited
    # image (with the synthetic strokes) instead of the enhanced original
    initial_segment_on_edited: bool = False

    def __post_init__(self) -> None:
        if not 0.0 < self.p_threshold < 100.0:
            raise ValueError("p_threshold must be in (0, 100)")
        if self.min_mask_pixels < 0:
            raise ValueError("min_mask_pixels must be >= 0")
        if not 0.0 <= self.min_mask_score <= 1.0:
            raise ValueError("min_mask_score must be in [0, 1]")
        if self.crop_margin < 0.0:
            raise ValueError("crop_margin must be >= 0")


def config_to_dict(cfg: PipelineConfig) -> dict:
    """Serialize a PipelineConfig to a plain JSON-ready dict."""
    return {
        "p_threshold": cfg.p_threshold,
        "directional_keywords": list(cfg.directional_keywords),
        "enhance": {
            "clahe_clip_limit": cfg.enhance.clahe_clip_limit,
            "clahe_tile_grid": list(cfg.enhance.clahe_tile_grid),
            "unsharp_sigma": cfg.enhance.unsharp_sigma,
            "unsharp_amount": cfg.enhance.unsharp_amount,
        },
        "cue": {
            "r_min": cfg.cue.r_min,
            "g_max": cfg.cue.g_max,
            "b_max": cfg.cue.b_max,
            "min_component_area": cfg.cue.min_component_area,
            "nesting_containment": cfg.cue.nesting_containment,
        },
        "min_mask_pixels": cfg.min_mask_pixels,
        "min_mask_score": cfg.min_mask_score,
        "crop_margin": cfg.crop_margin,
        "edit_instruction_template": cfg.edit_instruction_template,
        "initial_segment_on_edited": cfg.initial_segment_on_edited,
        "endpoints": {
            role: {"base_url": ep.base_url, "timeout": ep.timeout, "retries": ep.retries}
            for role, ep in sorted(cfg.endpoints.items())
        },
    }


def config_from_dict(data: dict) -> PipelineConfig:
    """Build a PipelineConfig from a declarative dict (the config file)."""
    enhance_d = data.get("enhance", {})
    cue_d = data.get("cue", {})
    defaults = PipelineConfig()
    enhance = EnhanceParams(
        clahe_clip_limit=enhance_d.get("clahe_clip_limit", defaults.enhance.clahe_clip_limit),
        clahe_tile_grid=tuple(enhance_d.get("clahe_tile_grid", defaults.enhance.clahe_tile_grid)),
        unsharp_sigma=enhance_d.get("unsharp_sigma", defaults.enhance.unsharp_sigma),
        unsharp_amount=enhance_d.get("unsharp_amount", defaults.enhance.unsharp_amount),
    )
    cue = RedCueParams(
        r_min=cue_d.get("r_min", defaults.cue.r_min),
        g_max=cue_d.get("g_max", defaults.cue.g_max),
        b_max=cue_d.get("b_max", defaults.cue.b_max),
        min_component_area=cue_d.get("min_component_area", defaults.cue.min_component_area),
        nesting_containment=cue_d.get("nesting_containment", defaults.cue.nesting_containment),
    )
    endpoints = {
        role: BackendEndpoint(
            role=role,
            base_url=spec["base_url"],
            timeout=spec.get("timeout", 30.0),
            retries=spec.get("retries", 1),
        )
        for role, spec in data.get("endpoints", {}).items()
    }
    return PipelineConfig(
        p_threshold=data.get("p_threshold", defaults.p_threshold),
        directional_keywords=tuple(data.get("directional_keywords",
                                            defaults.directional_keywords)),
        enhance=enhance,
        cue=cue,
        min_mask_pixels=data.get("min_mask_pixels", defaults.min_mask_pixels),
        min_mask_score=data.get("min_mask_score", defaults.min_mask_score),
        crop_margin=data.get("crop_margin", defaults.crop_margin),
        endpoints=endpoints,
        edit_instruction_template=data.get("edit_instruction_template",
                                           defaults.edit_instruction_template),
        initial_segment_on_edited=data.get("initial_segment_on_edited", False),
    )


@dataclass
class BackendCall:
    role: str
    request_id: str
    latency_ms: float  # informational only; excluded from trace digests


@dataclass
class StageRecord:
    stage: str
    inputs_digest: str
    calls: list[BackendCall] = field(default_factory=list)
    routing: dict | None = None
    fallbacks: list[str] = field(default_factory=list)
    candidates: list[dict] = field(default_factory=list)

    def to_dict(self, include_latency: bool = True) -> dict:
        calls = [
            {"role": c.role, "request_id": c.request_id,
             **({"latency_ms": c.latency_ms} if include_latency else {})}
            for c in self.calls
        ]
        return {
            "stage": self.stage,
            "inputs_digest": self.inputs_digest,
            "calls": calls,
            "routing": self.routing,
            "fallbacks": list(self.fallbacks),
            "candidates": list(self.candidates),
        }


@dataclass
class PipelineTrace:
    task_id: str
    stages: list[StageRecord] = field(default_factory=list)

    def add(self, record: StageRecord) -> StageRecord:
        self.stages.append(record)
        return record

    def to_dict(self, include_latency: bool = True) -> dict:
        return {
            "task_id": self.task_id,
            "stages": [s.to_dict(include_latency) for s in self.stages],
        }

    def digest(self) -> str:
        canonical = json.dumps(self.to_dict(include_latency=False),
                               sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@dataclass
class GroundingResult:
    task_id: str
    final_box: BBox | None
    provenance: str
    trace: PipelineTrace


@dataclass
class TaskFailure:
    """A task-level error; other tasks in the batch are unaffected."""

    task_id: str
    stage: str
    message: str


class TaskError(Exception):
    def __init__(self, task_id: str, stage: str, message: str):
        super().__init__(f"task {task_id} failed at {stage}: {message}")
        self.task_id = task_id
        self.stage = stage
        self.message = message


# ---------------------------------------------------------------------------
# Stage primitives
# ---------------------------------------------------------------------------

def strip_directional_keywords(query: str, keywords=DEFAULT_DIRECTIONAL_KEYWORDS) -> str:
    """Remove directional words (whole-word, case-insensitive) and collapse
    the whitespace left behind."""
    out = query
    if keywords:
        pattern = r"\b(?:" + "|".join(
            re.escape(k) for k in sorted(keywords, key=len, reverse=True)) + r")\b"
        out = re.sub(pattern, "", out, flags=re.IGNORECASE)
    return re.sub(r"\s+", " ", out).strip()


def select_refiner(crop_box: BBox, dims: Dims, p_threshold: float) -> str:
    """Route to the large-region segmenter only when the crop covers strictly
    more than p_threshold percent of the image."""
    ratio = area_ratio_percent(crop_box, dims)
    return ROUTE_LARGE if ratio > p_threshold else ROUTE_SMALL


def is_valid_mask(resp: SegmentResponse, cfg: PipelineConfig) -> BinaryMask | None:
    """Best qualifying mask (score, then foreground count, then order), or
    None when the response has nothing usable."""
    best: BinaryMask | None = None
    best_key: tuple[float, int] | None = None
    for m in resp.masks:
        count = m.foreground_count()
        if count < cfg.min_mask_pixels or m.score < cfg.min_mask_score:
            continue
        key = (m.score, count)
        if best_key is None or key > best_key:
            best, best_key = m, key
    return best


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------

def _sha(*parts: bytes | str) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(p.encode("utf-8") if isinstance(p, str) else p)
        h.update(b"\x1f")
    return h.hexdigest()


def _crop(img: ImageBuffer, box: BBox) -> ImageBuffer:
    return ImageBuffer(img.pixels[box.y_min:box.y_max, box.x_min:box.x_max].copy())


class _CallCounter:
    """Deterministic per-task request ids: <task>/<stage>/<n>."""

    def __init__(self, task_id: str):
        self.task_id = task_id
        self.n = 0

    def next_id(self, stage: str) -> str:
        self.n += 1
        return f"{self.task_id}/{stage}/{self.n}"


def _timed_call(record: StageRecord, role: str, request_id: str, fn):
    t0 = time.perf_counter()
    try:
        return fn()
    finally:
        record.calls.append(BackendCall(
            role=role, request_id=request_id,
            latency_ms=(time.perf_counter() - t0) * 1000.0))


def _endpoint(cfg: PipelineConfig, role: str) -> BackendEndpoint:
    try:
        return cfg.endpoints[role]
    except KeyError:
        raise TaskError("", "config", f"no endpoint configured for role {role!r}")


def _resolve_image(task: GroundingTask) -> ImageBuffer:
    if isinstance(task.image, ImageBuffer):
        return task.image
    try:
        return read_image(task.image)
    except OSError as exc:
        raise TaskError(task.task_id, "load", str(exc)) from exc


def _box_dict(box: BBox | None) -> list[int] | None:
    return list(box.as_tuple()) if box is not None else None


def _refine_candidate(idx: int, cue_box: BBox, candidate: BBox, enhanced: ImageBuffer,
                      stripped_query: str, cfg: PipelineConfig, task_id: str,
                      counter: _CallCounter, trace: PipelineTrace) -> dict:
    """Refine one candidate box; returns the candidate record for selection."""
    dims = Dims(enhanced.width, enhanced.height)
    crop_box = expand_bbox(candidate, cfg.crop_margin, dims)
    crop = _crop(enhanced, crop_box)
    origin = (crop_box.x_min, crop_box.y_min)
    ratio = area_ratio_percent(crop_box, dims)
    route = select_refiner(crop_box, dims, cfg.p_threshold)
    primary_role = ROLE_SEGMENTER_LARGE if route == ROUTE_LARGE else ROLE_SEGMENTER_SMALL
    alternate_role = ROLE_SEGMENTER_SMALL if route == ROUTE_LARGE else ROLE_SEGMENTER_LARGE

    record = trace.add(StageRecord(
        stage="refine",
        inputs_digest=_sha(f"cue={idx}", str(crop_box.as_tuple()), stripped_query),
        routing={"segmenter": primary_role, "route": route,
                 "area_ratio_percent": ratio, "crop_box": _box_dict(crop_box)},
    ))

    req = SegmentRequest(image=crop, prompt_mode="text", text=stripped_query)

    def run(role: str) -> BinaryMask | None:
        rid = counter.next_id("refine")
        try:
            resp = _timed_call(record, role, rid, lambda: client.segment(
                _endpoint(cfg, role), req, task_id=task_id, request_id=rid))
        except (TransportError, ProtocolError) as exc:
            record.fallbacks.append(f"transport_error:{role}")
            logger.warning("refine call to %s failed for %s: %s", role, task_id, exc)
            return None
        return is_valid_mask(resp, cfg)

    chosen_mask = run(primary_role)
    provenance = (PROVENANCE_REFINED_LARGE if route == ROUTE_LARGE
                  else PROVENANCE_REFINED_SMALL)
    if chosen_mask is None or mask_to_bbox(chosen_mask) is None:
        record.fallbacks.append(f"primary_invalid:{primary_role}")
        chosen_mask = run(alternate_role)
        provenance = PROVENANCE_REFINED_ALTERNATE
    if chosen_mask is None or mask_to_bbox(chosen_mask) is None:
        record.fallbacks.append(f"alternate_invalid:{alternate_role}")
        entry = {"cue": _box_dict(cue_box), "final": _box_dict(cue_box),
                 "provenance": PROVENANCE_DIFFUSION_FALLBACK, "score": 0.0}
        record.candidates.append(entry)
        return entry

    local_box = mask_to_bbox(chosen_mask)
    final = clamp_bbox(remap_to_original(local_box, origin), dims)
    if final is None:
        # crop lies inside the image, so the remapped box cannot fall outside
        raise TaskError(task_id, "refine", "remapped box left the image")
    entry = {"cue": _box_dict(cue_box), "final": _box_dict(final),
             "provenance": provenance, "score": chosen_mask.score}
    record.candidates.append(entry)
    return entry


def ground(task: GroundingTask, cfg: PipelineConfig) -> GroundingResult:
    """Run the full grounding pipeline for one task."""
    for role in (ROLE_EDITOR, ROLE_REWRITER, ROLE_SEGMENTER_SMALL, ROLE_SEGMENTER_LARGE):
        if role not in cfg.endpoints:
            raise TaskError(task.task_id, "config", f"missing endpoint for {role!r}")

    image = _resolve_image(task)
    trace = PipelineTrace(task_id=task.task_id)
    counter = _CallCounter(task.task_id)

    # (1) enhancement
    enhanced = preprocess(image, cfg.enhance)
    trace.add(StageRecord(stage="preprocess",
                          inputs_digest=_sha(image.pixels.tobytes(), repr(cfg.enhance))))
    dims = Dims(enhanced.width, enhanced.height)

    # (2) query rewriting, best-effort
    rewrite_record = trace.add(StageRecord(stage="rewrite", inputs_digest=_sha(task.query)))
    rid = counter.next_id("rewrite")
    rewritten, rewrite_failure = _timed_call(
        rewrite_record, ROLE_REWRITER, rid,
        lambda: client.try_rewrite(_endpoint(cfg, ROLE_REWRITER), task.query,
                                   task_id=task.task_id, request_id=rid))
    if rewrite_failure is not None:
        rewrite_record.fallbacks.append(f"rewrite_failed_using_original:{rewrite_failure}")

    # (3) diffusion edit; a transport failure here aborts the task
    edit_record = trace.add(StageRecord(
        stage="edit", inputs_digest=_sha(enhanced.pixels.tobytes(), rewritten)))
    instruction = cfg.edit_instruction_template.format(query=rewritten)
    rid = counter.next_id("edit")
    try:
        edited = _timed_call(edit_record, ROLE_EDITOR, rid, lambda: client.edit_image(
            _endpoint(cfg, ROLE_EDITOR), enhanced, instruction,
            task_id=task.task_id, request_id=rid))
    except (TransportError, ProtocolError) as exc:
        raise TaskError(task.task_id, "edit", str(exc)) from exc

    # (4) cue extraction
    cue_set = extract_cues(edited, cfg.cue)
    cue_record = trace.add(StageRecord(
        stage="cues", inputs_digest=_sha(edited.pixels.tobytes())))
    cue_record.candidates = [{"bbox": _box_dict(b)} for b in cue_set.boxes]
    if not cue_set.boxes:
        return GroundingResult(task.task_id, None, PROVENANCE_NONE, trace)

    # (5) initial box-prompted segmentation
    source = edited if cfg.initial_segment_on_edited else enhanced
    init_record = trace.add(StageRecord(
        stage="initial_segment",
        inputs_digest=_sha(source.pixels.tobytes(),
                           *(str(b.as_tuple()) for b in cue_set.boxes))))
    req = SegmentRequest(image=source, prompt_mode="boxes", boxes=cue_set.boxes)
    rid = counter.next_id("initial_segment")
    candidates: list[BBox] = list(cue_set.boxes)
    try:
        resp = _timed_call(init_record, ROLE_SEGMENTER_SMALL, rid, lambda: client.segment(
            _endpoint(cfg, ROLE_SEGMENTER_SMALL), req,
            task_id=task.task_id, request_id=rid))
    except (TransportError, ProtocolError) as exc:
        init_record.fallbacks.append("initial_segment_error_kept_cue_boxes")
        logger.warning("initial segmentation failed for %s: %s", task.task_id, exc)
    else:
        if len(resp.masks) == len(cue_set.boxes):
            for i, mask in enumerate(resp.masks):
                single = SegmentResponse((mask,))
                best = is_valid_mask(single, cfg)
                box = mask_to_bbox(best) if best is not None else None
                if box is None:
                    init_record.fallbacks.append(f"cue_{i}_invalid_kept_cue_box")
                else:
                    candidates[i] = box
        else:
            init_record.fallbacks.append("mask_count_mismatch_kept_cue_boxes")
    init_record.candidates = [{"bbox": _box_dict(b)} for b in candidates]

    # (6) per-candidate refinement with the fallback cascade
    stripped = strip_directional_keywords(rewritten, cfg.directional_keywords)
    if not stripped:
        stripped = rewritten  # query was nothing but directional words
    entries = [
        _refine_candidate(i, cue_set.boxes[i], candidates[i], enhanced, stripped,
                          cfg, task.task_id, counter, trace)
        for i in range(len(candidates))
    ]

    # (7) single-box selection
    def rank(pair):
        i, e = pair
        refined = e["provenance"] != PROVENANCE_DIFFUSION_FALLBACK
        box = BBox.from_tuple(e["final"])
        return (-e["score"], 0 if refined else 1, -box.area(), i)

    best_i, best_entry = min(enumerate(entries), key=rank)
    select_record = trace.add(StageRecord(
        stage="select", inputs_digest=_sha(*(json.dumps(e, sort_keys=True) for e in entries))))
    select_record.candidates = list(entries)
    select_record.routing = {"selected_index": best_i}

    # (8) finalize
    final_box = BBox.from_tuple(best_entry["final"])
    trace.add(StageRecord(stage="finalize", inputs_digest=_sha(str(final_box.as_tuple()))))
    return GroundingResult(task.task_id, final_box, best_entry["provenance"], trace)


def ground_batch(tasks, cfg: PipelineConfig, parallelism: int = 1):
    """Ground many tasks on a bounded worker pool.

    Results come back in input order; a failing task yields a TaskFailure in
    its slot and never disturbs its neighbors.
    """
    if parallelism < 1:
        raise ValueError("parallelism must be >= 1")
    tasks = list(tasks)
    if not tasks:
        return []

    def one(task: GroundingTask):
        try:
            return ground(task, cfg)
        except TaskError as exc:
            return TaskFailure(exc.task_id or task.task_id, exc.stage, exc.message)
        except Exception as exc:  # isolate unexpected bugs to the task
            logger.exception("unexpected failure for task %s", task.task_id)
            return TaskFailure(task.task_id, "internal", str(exc))

    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        return list(pool.map(one, tasks))
