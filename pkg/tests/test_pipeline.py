from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aeroground.backends.mock import MockConfig, spawn_mock_backend
from aeroground.backends.protocol import (
    ROLE_EDITOR,
    ROLE_REWRITER,
    ROLE_SEGMENTER_LARGE,
    ROLE_SEGMENTER_SMALL,
    SegmentResponse,
)
from aeroground.geometry import BBox, BinaryMask, Dims, iou
from aeroground.pipeline import (
    DEFAULT_DIRECTIONAL_KEYWORDS,
    GroundingResult,
    GroundingTask,
    PipelineConfig,
    TaskError,
    TaskFailure,
    config_from_dict,
    config_to_dict,
    ground,
    ground_batch,
    is_valid_mask,
    select_refiner,
    strip_directional_keywords,
)
from conftest import gray_noise_image


def make_mask(w, h, box: BBox | None, score: float) -> BinaryMask:
    bits = np.zeros((h, w), dtype=bool)
    if box is not None:
        bits[box.y_min:box.y_max, box.x_min:box.x_max] = True
    return BinaryMask(bits, score=score)


class TestStripKeywords:
    def test_directional_words_removed(self):
        q = ("The tennis court located on the right side of the image "
             "with a blue playing surface.")
        want = ("The tennis court located on the side of the image "
                "with a blue playing surface.")
        assert strip_directional_keywords(q, DEFAULT_DIRECTIONAL_KEYWORDS) == want

    def test_whole_word_only(self):
        assert strip_directional_keywords(
            "brighten the image", ("left", "right")) == "brighten the image"

    def test_all_keywords_gives_empty(self):
        assert strip_directional_keywords("left left right", ("left", "right")) == ""

    def test_case_insensitive(self):
        assert strip_directional_keywords(
            "the Upper tank", DEFAULT_DIRECTIONAL_KEYWORDS) == "the tank"

    def test_punctuation_preserved(self):
        assert strip_directional_keywords(
            "the tank, on the left, near the dock",
            DEFAULT_DIRECTIONAL_KEYWORDS) == "the tank, on the , near the dock"

    @given(st.text(alphabet="abcdefgh left right top JK,. ", max_size=60))
    @settings(max_examples=150, deadline=None)
    def test_idempotent(self, q):
        once = strip_directional_keywords(q, DEFAULT_DIRECTIONAL_KEYWORDS)
        assert strip_directional_keywords(once, DEFAULT_DIRECTIONAL_KEYWORDS) == once


class TestSelectRefiner:
    def test_large_region_routes_large(self):
        assert select_refiner(BBox(0, 0, 200, 200), Dims(512, 512), 10.0) == "large"

    def test_small_region_routes_small(self):
        assert select_refiner(BBox(0, 0, 100, 100), Dims(512, 512), 10.0) == "small"

    def test_exact_threshold_routes_small(self):
        # 100x100 in 1000x100 is exactly 10.0%; "more than" is strict
        assert select_refiner(BBox(0, 0, 100, 100), Dims(1000, 100), 10.0) == "small"

    def test_exhaustive_grid(self):
        d = Dims(64, 64)
        for w in range(1, 65):
            for h in range(1, 65):
                box = BBox(0, 0, w, h)
                want = "large" if 100.0 * w * h / 4096 > 10.0 else "small"
                assert select_refiner(box, d, 10.0) == want


class TestIsValidMask:
    CFG = PipelineConfig(min_mask_pixels=10)

    def test_empty_response_invalid(self):
        assert is_valid_mask(SegmentResponse(()), self.CFG) is None

    def test_too_few_pixels_invalid(self):
        m = make_mask(16, 16, BBox(0, 0, 5, 1), 0.9)  # 5 px < 10
        assert is_valid_mask(SegmentResponse((m,)), self.CFG) is None

    def test_highest_score_wins(self):
        big_low = make_mask(64, 64, BBox(0, 0, 25, 20), 0.7)   # 500 px
        small_high = make_mask(64, 64, BBox(0, 0, 5, 4), 0.9)  # 20 px
        got = is_valid_mask(SegmentResponse((big_low, small_high)), self.CFG)
        assert got is small_high

    def test_tie_broken_by_pixel_count_then_order(self):
        a = make_mask(32, 32, BBox(0, 0, 10, 2), 0.8)  # 20 px
        b = make_mask(32, 32, BBox(0, 0, 10, 5), 0.8)  # 50 px
        assert is_valid_mask(SegmentResponse((a, b)), self.CFG) is b
        c = make_mask(32, 32, BBox(5, 5, 15, 10), 0.8)  # 50 px, same key as b
        assert is_valid_mask(SegmentResponse((b, c)), self.CFG) is b

    def test_score_floor(self):
        cfg = PipelineConfig(min_mask_score=0.5)
        low = make_mask(32, 32, BBox(0, 0, 10, 10), 0.4)
        assert is_valid_mask(SegmentResponse((low,)), cfg) is None


SMALL_TRUTH = BBox(40, 50, 70, 80)    # 30x30 of 256x256 -> 1.37%, routes small
LARGE_TRUTH = BBox(30, 30, 160, 150)  # 130x120 -> 23.8%, routes large


@pytest.fixture(scope="module")
def oracle_stack():
    cfg = MockConfig(behavior="oracle", seed=11, shrink=1.0,
                     truth_table={"small": SMALL_TRUTH, "large": LARGE_TRUTH})
    with spawn_mock_backend(cfg) as backend:
        yield PipelineConfig(endpoints=backend.endpoints())


class TestGroundOracle:
    def test_small_truth_exact(self, oracle_stack):
        task = GroundingTask(task_id="small", image=gray_noise_image(256, 256, seed=1),
                             query="the small tank on the left")
        result = ground(task, oracle_stack)
        assert result.final_box == SMALL_TRUTH
        assert result.provenance == "refined_small"
        assert iou(result.final_box, SMALL_TRUTH) == 1.0

    def test_large_truth_exact(self, oracle_stack):
        task = GroundingTask(task_id="large", image=gray_noise_image(256, 256, seed=2),
                             query="the stadium")
        result = ground(task, oracle_stack)
        assert result.final_box == LARGE_TRUTH
        assert result.provenance == "refined_large"

    def test_stage_order_fixed(self, oracle_stack):
        task = GroundingTask(task_id="small", image=gray_noise_image(256, 256, seed=3),
                             query="the tank")
        result = ground(task, oracle_stack)
        assert [s.stage for s in result.trace.stages] == [
            "preprocess", "rewrite", "edit", "cues", "initial_segment",
            "refine", "select", "finalize"]
        refine = result.trace.stages[5]
        assert refine.routing["segmenter"] == ROLE_SEGMENTER_SMALL
        assert refine.routing["area_ratio_percent"] == pytest.approx(
            100 * 30 * 30 / 65536)

    def test_trace_digest_stable_across_runs(self, oracle_stack):
        img = gray_noise_image(256, 256, seed=4)
        task = GroundingTask(task_id="small", image=img, query="the tank")
        a = ground(task, oracle_stack)
        b = ground(task, oracle_stack)
        assert a.trace.digest() == b.trace.digest()
        assert a.final_box == b.final_box

    def test_no_red_gives_none(self, oracle_stack):
        task = GroundingTask(task_id="not-in-truth-table",
                             image=gray_noise_image(128, 128, seed=5),
                             query="the ghost")
        result = ground(task, oracle_stack)
        assert result.final_box is None
        assert result.provenance == "none"
        assert [s.stage for s in result.trace.stages] == [
            "preprocess", "rewrite", "edit", "cues"]


class TestFallbackCascade:
    def test_both_segmenters_fail_uses_cue_box(self):
        edit_cfg = MockConfig(behavior="oracle", seed=3,
                              truth_table={"t": SMALL_TRUTH})
        seg_cfg = MockConfig(behavior="fail")
        with spawn_mock_backend(edit_cfg, roles=(ROLE_EDITOR, ROLE_REWRITER)) as good, \
                spawn_mock_backend(seg_cfg, roles=(ROLE_SEGMENTER_SMALL,
                                                   ROLE_SEGMENTER_LARGE)) as bad:
            cfg = PipelineConfig(endpoints={**good.endpoints(), **bad.endpoints()})
            task = GroundingTask(task_id="t", image=gray_noise_image(256, 256, seed=7),
                                 query="the tank")
            result = ground(task, cfg)
            assert result.provenance == "diffusion_fallback"
            # final box bit-equal to the extracted cue box
            cues_stage = result.trace.stages[3]
            assert cues_stage.stage == "cues"
            cue_box = BBox.from_tuple(cues_stage.candidates[0]["bbox"])
            assert result.final_box == cue_box
            refine = result.trace.stages[5]
            assert refine.fallbacks == [
                f"primary_invalid:{ROLE_SEGMENTER_SMALL}",
                f"alternate_invalid:{ROLE_SEGMENTER_LARGE}"]
            assert [c.role for c in refine.calls] == [
                ROLE_SEGMENTER_SMALL, ROLE_SEGMENTER_LARGE]

    def test_alternate_rescues_when_primary_fails(self):
        edit_cfg = MockConfig(behavior="oracle", seed=3,
                              truth_table={"t": SMALL_TRUTH})
        seg_ok = MockConfig(behavior="oracle", shrink=1.0)
        seg_bad = MockConfig(behavior="fail")
        with spawn_mock_backend(edit_cfg, roles=(ROLE_EDITOR, ROLE_REWRITER)) as editor, \
                spawn_mock_backend(seg_bad, roles=(ROLE_SEGMENTER_SMALL,)) as small, \
                spawn_mock_backend(seg_ok, roles=(ROLE_SEGMENTER_LARGE,)) as large:
            cfg = PipelineConfig(endpoints={**editor.endpoints(), **small.endpoints(),
                                            **large.endpoints()})
            task = GroundingTask(task_id="t", image=gray_noise_image(256, 256, seed=8),
                                 query="the tank")
            result = ground(task, cfg)
            assert result.provenance == "refined_fallback_alternate"
            assert result.final_box == SMALL_TRUTH
            refine = result.trace.stages[5]
            assert refine.fallbacks == [f"primary_invalid:{ROLE_SEGMENTER_SMALL}"]

    def test_initial_segment_failure_keeps_cue_boxes(self):
        # segmenter_small fails -> initial candidates stay the raw cues, and
        # refinement falls back to segmenter_large via the cascade
        edit_cfg = MockConfig(behavior="oracle", seed=3,
                              truth_table={"t": SMALL_TRUTH})
        seg_ok = MockConfig(behavior="oracle", shrink=1.0)
        seg_bad = MockConfig(behavior="fail")
        with spawn_mock_backend(edit_cfg, roles=(ROLE_EDITOR, ROLE_REWRITER)) as editor, \
                spawn_mock_backend(seg_bad, roles=(ROLE_SEGMENTER_SMALL,)) as small, \
                spawn_mock_backend(seg_ok, roles=(ROLE_SEGMENTER_LARGE,)) as large:
            cfg = PipelineConfig(endpoints={**editor.endpoints(), **small.endpoints(),
                                            **large.endpoints()})
            task = GroundingTask(task_id="t", image=gray_noise_image(256, 256, seed=9),
                                 query="the tank")
            result = ground(task, cfg)
            init = result.trace.stages[4]
            assert init.stage == "initial_segment"
            assert any("kept_cue_box" in f for f in init.fallbacks)
            assert result.final_box == SMALL_TRUTH


class TestGroundErrors:
    def test_editor_transport_error_aborts_task(self):
        edit_bad = MockConfig(behavior="fail")
        seg_ok = MockConfig(behavior="oracle")
        with spawn_mock_backend(edit_bad, roles=(ROLE_EDITOR,)) as editor, \
                spawn_mock_backend(seg_ok, roles=(ROLE_REWRITER, ROLE_SEGMENTER_SMALL,
                                                  ROLE_SEGMENTER_LARGE)) as rest:
            cfg = PipelineConfig(endpoints={**editor.endpoints(timeout=3.0, retries=0),
                                            **rest.endpoints()})
            task = GroundingTask(task_id="t", image=gray_noise_image(64, 64),
                                 query="the tank")
            with pytest.raises(TaskError) as err:
                ground(task, cfg)
            assert err.value.stage == "edit"

    def test_rewriter_failure_degrades(self):
        edit_cfg = MockConfig(behavior="oracle", seed=3, truth_table={"t": SMALL_TRUTH})
        rew_bad = MockConfig(behavior="fail")
        with spawn_mock_backend(edit_cfg, roles=(ROLE_EDITOR, ROLE_SEGMENTER_SMALL,
                                                 ROLE_SEGMENTER_LARGE)) as main, \
                spawn_mock_backend(rew_bad, roles=(ROLE_REWRITER,)) as rew:
            cfg = PipelineConfig(endpoints={**main.endpoints(),
                                            **rew.endpoints(timeout=3.0, retries=0)})
            task = GroundingTask(task_id="t", image=gray_noise_image(256, 256, seed=2),
                                 query="the tank")
            result = ground(task, cfg)
            assert result.final_box == SMALL_TRUTH
            rewrite = result.trace.stages[1]
            assert any("rewrite_failed" in f for f in rewrite.fallbacks)

    def test_missing_endpoint_config(self):
        cfg = PipelineConfig(endpoints={})
        task = GroundingTask(task_id="t", image=gray_noise_image(16, 16), query="q")
        with pytest.raises(TaskError) as err:
            ground(task, cfg)
        assert err.value.stage == "config"


class TestGroundBatch:
    def test_empty_list(self, oracle_stack):
        assert ground_batch([], oracle_stack, parallelism=4) == []

    def test_parallelism_does_not_change_results(self, oracle_stack):
        tasks = [
            GroundingTask(task_id="small", image=gray_noise_image(256, 256, seed=s),
                          query="the tank")
            for s in range(6)
        ]
        seq = ground_batch(tasks, oracle_stack, parallelism=1)
        par = ground_batch(tasks, oracle_stack, parallelism=8)
        assert [r.final_box for r in seq] == [r.final_box for r in par]
        assert [r.trace.digest() for r in seq] == [r.trace.digest() for r in par]

    def test_error_isolation_preserves_order(self, oracle_stack, tmp_path):
        ok = GroundingTask(task_id="small", image=gray_noise_image(256, 256, seed=1),
                           query="the tank")
        bad = GroundingTask(task_id="broken", image=tmp_path / "missing.png",
                            query="the tank")
        out = ground_batch([ok, bad, ok], oracle_stack, parallelism=3)
        assert isinstance(out[0], GroundingResult)
        assert isinstance(out[1], TaskFailure)
        assert out[1].stage == "load"
        assert isinstance(out[2], GroundingResult)

    def test_invalid_parallelism(self, oracle_stack):
        with pytest.raises(ValueError):
            ground_batch([], oracle_stack, parallelism=0)


class TestConfigRoundTrip:
    def test_dict_round_trip(self, oracle_stack):
        data = config_to_dict(oracle_stack)
        back = config_from_dict(data)
        assert back == oracle_stack

    def test_validation(self):
        with pytest.raises(ValueError):
            PipelineConfig(p_threshold=0.0)
        with pytest.raises(ValueError):
            PipelineConfig(p_threshold=100.0)
        with pytest.raises(ValueError):
            PipelineConfig(min_mask_score=1.5)
