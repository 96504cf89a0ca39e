"""Acceptance criteria, one test per criterion, each printing a PASS line.

Run with `pytest tests/test_acceptance.py -v -s` to see one line per
criterion. Tolerances are pinned here and nowhere else.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass

import numpy as np
import pytest

from aeroground.backends.mock import MockConfig, shrink_box, spawn_mock_backend
from aeroground.backends.protocol import (
    ROLE_EDITOR,
    ROLE_REWRITER,
    ROLE_SEGMENTER_LARGE,
    ROLE_SEGMENTER_SMALL,
)
from aeroground.cli import main as cli_main
from aeroground.conformance import run_conformance
from aeroground.evaluation import TaskRecord, compute_metrics, dump_canonical
from aeroground.geometry import (
    BBox,
    Dims,
    area_ratio_percent,
    iou,
    iou_matrix,
    pairwise_intersection,
)
from aeroground.imaging import (
    ImageBuffer,
    LabImage,
    clahe_luminance,
    lab_to_srgb,
    srgb_to_lab,
    write_png,
)
from aeroground.pipeline import (
    GroundingResult,
    GroundingTask,
    PipelineConfig,
    ground_batch,
    select_refiner,
)
from conftest import gray_noise_image, random_truth_box
from oracles import clahe_reference

N_TASKS = 100
RASTER = 256


def _pass(name: str) -> None:
    print(f"\nACCEPTANCE PASS: {name}")


# ---------------------------------------------------------------------------
# 1. IoU oracle equivalence (exhaustive, coords in [0,16))
# ---------------------------------------------------------------------------

def test_iou_closed_form_equals_pixel_counting_exhaustive():
    # warm up BLAS / ufunc machinery so the timing below measures the check,
    # not one-time library initialization
    warm = np.ones((64, 64), dtype=np.float32)
    (warm @ warm).sum()
    pairwise_intersection(np.array([[0, 0, 2, 2]]), np.array([[1, 1, 3, 3]]))

    t0 = time.time()
    coords = range(16)
    intervals = [(a, b) for a in coords for b in coords if a < b]  # 120
    boxes = np.array([(x1, y1, x2, y2)
                      for (x1, x2) in intervals for (y1, y2) in intervals],
                     dtype=np.int64)
    n = len(boxes)
    assert n == 14400

    # brute-force pixel counting: one 16x16 bitmap per box; intersection
    # pixel counts are dot products of {0,1} membership vectors
    masks = np.zeros((n, 16, 16), dtype=np.float32)
    for i, (x1, y1, x2, y2) in enumerate(boxes):
        masks[i, y1:y2, x1:x2] = 1.0
    masks = masks.reshape(n, 256)
    areas_pixels = masks.sum(axis=1).astype(np.int64)

    areas_closed = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    assert np.array_equal(areas_closed, areas_pixels)

    # all ordered pairs, upper-triangle blocks (both sides are symmetric);
    # equal integer intersections + equal areas make the IoU ratios equal
    masks_t = np.ascontiguousarray(masks.T)
    chunk = 1024
    for s in range(0, n, chunk):
        e = min(s + chunk, n)
        prod = masks[s:e] @ masks_t[:, s:]
        np.rint(prod, out=prod)
        inter_pixels = prod.astype(np.int32)
        inter_closed = pairwise_intersection(boxes[s:e], boxes[s:])
        assert np.array_equal(inter_closed, inter_pixels)
        if s == 0:  # spot-check the division path end to end
            union = areas_pixels[s:e, None] + areas_pixels[None, s:] - inter_pixels
            assert np.array_equal(iou_matrix(boxes[s:e], boxes[s:]),
                                  inter_pixels / union)

    # scalar iou vs bitmap counting, exhaustive on a dense small grid
    small = [(x1, y1, x2, y2)
             for x1 in range(6) for x2 in range(x1 + 1, 6)
             for y1 in range(6) for y2 in range(y1 + 1, 6)]
    m = len(small)
    small_masks = np.zeros((m, 36), dtype=np.float32)
    for i, (x1, y1, x2, y2) in enumerate(small):
        g = np.zeros((6, 6), dtype=np.float32)
        g[y1:y2, x1:x2] = 1.0
        small_masks[i] = g.ravel()
    inter_small = np.rint(small_masks @ small_masks.T).astype(np.int64)
    area_small = inter_small.diagonal()
    oracle_small = inter_small / (area_small[:, None] + area_small[None, :] - inter_small)
    small_boxes = [BBox.from_tuple(b) for b in small]
    for i, a in enumerate(small_boxes):
        for j, b in enumerate(small_boxes):
            assert iou(a, b) == oracle_small[i, j]

    elapsed = time.time() - t0
    assert elapsed < 10.0, f"exhaustive IoU check took {elapsed:.1f}s"
    _pass(f"IoU oracle equivalence, exhaustive [0,16)^2 in {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 2. Color round-trip
# ---------------------------------------------------------------------------

def test_color_round_trip_and_anchors():
    rng = np.random.default_rng(2024)
    worst = 0
    for _ in range(1000):
        px = rng.integers(0, 256, size=(32, 32, 3), dtype=np.uint8)
        img = ImageBuffer(px)
        back = lab_to_srgb(srgb_to_lab(img))
        worst = max(worst, int(np.abs(back.pixels.astype(int) - px.astype(int)).max()))
    assert worst <= 2

    white = srgb_to_lab(ImageBuffer(np.full((1, 1, 3), 255, dtype=np.uint8)))
    assert float(white.L[0, 0]) == pytest.approx(100.0, abs=1e-3)
    assert abs(float(white.a[0, 0])) < 0.5 and abs(float(white.b[0, 0])) < 0.5
    black = srgb_to_lab(ImageBuffer(np.zeros((1, 1, 3), dtype=np.uint8)))
    assert (float(black.L[0, 0]), float(black.a[0, 0]), float(black.b[0, 0])) == (0, 0, 0)
    gray = srgb_to_lab(ImageBuffer(np.full((1, 1, 3), 119, dtype=np.uint8)))
    assert float(gray.L[0, 0]) == pytest.approx(50.0, abs=1.0)
    _pass(f"color round-trip <= 2 per channel over 1000 images (worst {worst})")


# ---------------------------------------------------------------------------
# 3. CLAHE oracle
# ---------------------------------------------------------------------------

def test_clahe_matches_independent_scalar_reference():
    rng = np.random.default_rng(64)
    yy, xx = np.mgrid[0:64, 0:64]
    L = 20.0 + 40.0 * xx / 63.0 + rng.random((64, 64)) * 25.0
    a = rng.normal(0.0, 12.0, L.shape)
    b = rng.normal(0.0, 12.0, L.shape)
    lab = LabImage(np.stack([L, a, b], axis=-1))
    out = clahe_luminance(lab, 2.0, (8, 8))
    want = clahe_reference(L, (8, 8), 2.0)
    max_delta = float(np.abs(out.L - want).max())
    assert max_delta <= 0.5
    assert np.array_equal(out.a, lab.a)
    assert np.array_equal(out.b, lab.b)
    _pass(f"CLAHE matches scalar reference (max |dL| = {max_delta:.2e}), chroma bit-identical")


# ---------------------------------------------------------------------------
# 4. Metric fixture with strict-inequality accuracy
# ---------------------------------------------------------------------------

def test_metric_fixture_strict_inequality():
    pairs = [
        (BBox(0, 0, 151, 1), BBox(49, 0, 200, 1)),  # IoU 0.51
        (BBox(0, 0, 3, 1), BBox(1, 0, 4, 1)),       # IoU 0.50 exactly
        (BBox(0, 0, 171, 1), BBox(29, 0, 200, 1)),  # IoU 0.71
        (BBox(0, 0, 3, 1), BBox(2, 0, 5, 1)),       # IoU 0.20
    ]
    assert [iou(p, t) for p, t in pairs] == [0.51, 0.5, 0.71, 0.2]
    rep = compute_metrics(pairs, thresholds=(0.5, 0.7))
    assert rep.miou == pytest.approx(0.4800, abs=1e-12)
    assert rep.acc_at[0.5] == pytest.approx(0.5000, abs=1e-12)
    assert rep.acc_at[0.7] == pytest.approx(0.2500, abs=1e-12)

    exact_half = compute_metrics([(BBox(0, 0, 3, 1), BBox(1, 0, 4, 1))],
                                 thresholds=(0.5,))
    assert exact_half.acc_at[0.5] == 0.0
    _pass("metric fixture mIoU 0.4800 / Acc@0.5 0.5000 (0.50 excluded) / Acc@0.7 0.2500")


# ---------------------------------------------------------------------------
# 5. Routing boundary (exhaustive 64x64 grid)
# ---------------------------------------------------------------------------

def test_routing_boundary_exhaustive():
    t0 = time.time()
    d = Dims(64, 64)
    for w in range(1, 65):
        for h in range(1, 65):
            box = BBox(0, 0, w, h)
            ratio = area_ratio_percent(box, d)
            want = "large" if ratio > 10.0 else "small"
            assert select_refiner(box, d, 10.0) == want
    elapsed = time.time() - t0
    assert elapsed < 1.0, f"routing sweep took {elapsed:.2f}s"
    _pass(f"routing strictly-greater boundary, exhaustive 64x64 grid in {elapsed:.2f}s")


# ---------------------------------------------------------------------------
# End-to-end criteria share one synthetic task set
# ---------------------------------------------------------------------------

@dataclass
class TaskSet:
    tasks: list[GroundingTask]
    truth: dict[str, BBox]


@pytest.fixture(scope="module")
def task_set() -> TaskSet:
    rng = np.random.default_rng(777)
    tasks, truth = [], {}
    for i in range(N_TASKS):
        tid = f"synthetic-{i:03d}"
        box = random_truth_box(rng, RASTER, RASTER, min_size=10, max_size=64,
                               margin=24)
        truth[tid] = box
        tasks.append(GroundingTask(
            task_id=tid, image=gray_noise_image(RASTER, RASTER, seed=9000 + i),
            query=f"the building at site {i} on the left"))
    return TaskSet(tasks=tasks, truth=truth)


def _results_of(outcomes) -> list[GroundingResult]:
    for o in outcomes:
        assert isinstance(o, GroundingResult), o
    return outcomes


def test_end_to_end_oracle_run(task_set):
    with spawn_mock_backend(MockConfig(behavior="oracle", seed=42, shrink=1.0,
                                       truth_table=task_set.truth)) as backend:
        cfg = PipelineConfig(endpoints=backend.endpoints())
        t0 = time.time()
        outcomes = _results_of(ground_batch(task_set.tasks, cfg, parallelism=4))
        elapsed = time.time() - t0
    pairs = [(r.final_box, task_set.truth[r.task_id]) for r in outcomes]
    rep = compute_metrics(pairs, thresholds=(0.5, 0.7))
    assert rep.miou == 1.0
    assert rep.acc_at[0.5] == 1.0
    assert elapsed < 60.0, f"100-task oracle run took {elapsed:.1f}s"

    with spawn_mock_backend(MockConfig(behavior="oracle", seed=42, shrink=0.8,
                                       truth_table=task_set.truth)) as backend:
        cfg = PipelineConfig(endpoints=backend.endpoints())
        outcomes = _results_of(ground_batch(task_set.tasks, cfg, parallelism=4))
    ious = []
    for r in outcomes:
        t = task_set.truth[r.task_id]
        got = iou(r.final_box, t)
        # 0.8^2 by construction, up to the integer floor of each dimension
        expected = (shrink_box(t, 0.8).area()) / t.area()
        assert got == pytest.approx(expected, abs=1e-12)
        assert 0.5 < got <= 0.64 + 1e-12
        ious.append(got)
    rep = compute_metrics([(r.final_box, task_set.truth[r.task_id]) for r in outcomes],
                          thresholds=(0.5, 0.7))
    assert rep.acc_at[0.5] == 1.0
    assert rep.acc_at[0.7] == 0.0
    _pass(f"end-to-end oracle: shrink 1.0 -> mIoU 1.0 in {elapsed:.1f}s; "
          f"shrink 0.8 -> IoU 0.64 +/- rounding (mean {np.mean(ious):.4f})")


def test_fallback_cascade_forced_fail(task_set):
    subset = task_set.tasks[:40]
    edit_cfg = MockConfig(behavior="oracle", seed=42, truth_table=task_set.truth)
    seg_cfg = MockConfig(behavior="fail")
    with spawn_mock_backend(edit_cfg, roles=(ROLE_EDITOR, ROLE_REWRITER)) as good, \
            spawn_mock_backend(seg_cfg, roles=(ROLE_SEGMENTER_SMALL,
                                               ROLE_SEGMENTER_LARGE)) as bad:
        cfg = PipelineConfig(endpoints={**good.endpoints(), **bad.endpoints()})
        outcomes = _results_of(ground_batch(subset, cfg, parallelism=4))
    for r in outcomes:
        assert r.provenance == "diffusion_fallback"
        cues_stage = next(s for s in r.trace.stages if s.stage == "cues")
        cue_box = BBox.from_tuple(cues_stage.candidates[0]["bbox"])
        assert r.final_box == cue_box  # bit-equal to the extracted cue
        refine = next(s for s in r.trace.stages if s.stage == "refine")
        chosen = refine.routing["segmenter"]
        alternate = (ROLE_SEGMENTER_SMALL if chosen == ROLE_SEGMENTER_LARGE
                     else ROLE_SEGMENTER_LARGE)
        assert [c.role for c in refine.calls] == [chosen, alternate]
        assert refine.fallbacks == [f"primary_invalid:{chosen}",
                                    f"alternate_invalid:{alternate}"]
    _pass("fallback cascade: 100% diffusion_fallback, chosen-then-alternate order")


def test_hallucination_behavior_measurable(task_set):
    with spawn_mock_backend(MockConfig(behavior="hallucinate", seed=42,
                                       truth_table=task_set.truth)) as backend:
        cfg = PipelineConfig(endpoints=backend.endpoints())
        outcomes = _results_of(ground_batch(task_set.tasks, cfg, parallelism=4))
    pairs = [(r.final_box, task_set.truth[r.task_id]) for r in outcomes]
    rep = compute_metrics(pairs, thresholds=(0.5, 0.7))
    assert rep.miou == pytest.approx(0.0, abs=1e-9)
    assert rep.acc_at[0.5] == 0.0
    _pass(f"hallucination run over {N_TASKS} tasks -> mIoU {rep.miou:.4f}")


# ---------------------------------------------------------------------------
# 9. cmd_ground determinism across parallelism
# ---------------------------------------------------------------------------

def test_cmd_ground_determinism(tmp_path):
    from aeroground.pipeline import config_to_dict

    rng = np.random.default_rng(31)
    img_dir = tmp_path / "imgs"
    img_dir.mkdir()
    records = []
    for i in range(12):
        tid = f"det-{i:02d}"
        write_png(gray_noise_image(128, 128, seed=500 + i), img_dir / f"{tid}.png")
        records.append(TaskRecord(tid, f"imgs/{tid}.png", f"the dock {i}",
                                  random_truth_box(rng, 128, 128, 10, 40, 16), "demo"))
    tasks_path = tmp_path / "tasks.jsonl"
    dump_canonical(records, tasks_path)
    truth = {r.task_id: r.truth_box for r in records}

    with spawn_mock_backend(MockConfig(behavior="oracle", seed=9,
                                       truth_table=truth)) as backend:
        cfg_path = tmp_path / "config.json"
        cfg_path.write_text(json.dumps(config_to_dict(
            PipelineConfig(endpoints=backend.endpoints()))))
        out1, out8 = tmp_path / "p1.jsonl", tmp_path / "p8.jsonl"
        assert cli_main(["ground", str(tasks_path), "--config", str(cfg_path),
                         "--output", str(out1), "--parallelism", "1"]) == 0
        assert cli_main(["ground", str(tasks_path), "--config", str(cfg_path),
                         "--output", str(out8), "--parallelism", "8"]) == 0

    sorted_bytes = lambda p: b"\n".join(sorted(p.read_bytes().splitlines()))
    assert sorted_bytes(out1) == sorted_bytes(out8)
    _pass("cmd_ground parallelism 1 vs 8: byte-identical sorted result files")


# ---------------------------------------------------------------------------
# 10. Protocol conformance against the mock
# ---------------------------------------------------------------------------

def test_protocol_conformance_against_mock():
    cfg = MockConfig(behavior="oracle", seed=0,
                     truth_table={"conformance": BBox(4, 4, 20, 16)})
    with spawn_mock_backend(cfg) as backend:
        failures = run_conformance(backend.base_url)
    assert failures == [], "\n".join(failures)
    _pass("protocol conformance suite: all endpoints, idempotency, error bodies")
