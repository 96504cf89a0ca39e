"""Model adapters: one loaded object per served role.

Two families live here. The CPU family (saliency-window editor,
GrabCut/Otsu segmenter, instruction-stripping rewriter) is self-contained,
deterministic, and always loadable, so a sidecar can come up and pass
protocol conformance on any machine. The transformers family wraps the
large hosted models and loads only when the weights are present locally;
a failed load simply leaves the role out of /v1/health.
"""

from __future__ import annotations

import logging
import os
import re

import cv2
import numpy as np

logger = logging.getLogger(__name__)

STROKE = 3
RED = np.array([255, 0, 0], dtype=np.uint8)


class AdapterLoadError(Exception):
    """The adapter's model cannot be loaded on this machine."""


# ---------------------------------------------------------------------------
# CPU family
# ---------------------------------------------------------------------------

class SaliencyWindowEditor:
    """Draws a red box around the most textured region of the image.

    Saliency is Sobel gradient magnitude; the box is the fixed-fraction
    window with the largest saliency sum, found with an integral image.
    The instruction text is accepted but not parsed (no language model).
    """

    identifier = "saliency-window-v1"

    def __init__(self, device: str = "cpu"):
        self.device = device

    def load(self) -> "SaliencyWindowEditor":
        return self

    def edit(self, image: np.ndarray, instruction: str) -> np.ndarray:
        h, w = image.shape[:2]
        gray = cv2.cvtColor(image, cv2.COLOR_RGB2GRAY).astype(np.float64)
        gx = cv2.Sobel(gray, cv2.CV_64F, 1, 0, ksize=3)
        gy = cv2.Sobel(gray, cv2.CV_64F, 0, 1, ksize=3)
        saliency = np.abs(gx) + np.abs(gy)

        bw = max(8, min(w, w // 3))
        bh = max(8, min(h, h // 3))
        integral = cv2.integral(saliency)  # (h+1, w+1)
        sums = (integral[bh:, bw:] - integral[:-bh, bw:]
                - integral[bh:, :-bw] + integral[:-bh, :-bw])
        y0, x0 = np.unravel_index(int(np.argmax(sums)), sums.shape)
        x1, y1 = x0 + bw, y0 + bh

        out = image.copy()
        s = min(STROKE, bw, bh)
        out[y0:y0 + s, x0:x1] = RED
        out[y1 - s:y1, x0:x1] = RED
        out[y0:y1, x0:x0 + s] = RED
        out[y0:y1, x1 - s:x1] = RED
        return out


class GrabCutOtsuSegmenter:
    """Box prompts run GrabCut seeded with the box; text prompts run Otsu
    thresholding and keep the largest connected component.

    When GrabCut marks almost nothing (common on texture-free crops) the
    prompted box itself becomes the mask, at a floor score. Scores are the
    foreground's share of the prompted region, clamped into (0, 1).
    """

    identifier = "grabcut-otsu-v1"
    _MIN_FRACTION = 0.01

    def __init__(self, device: str = "cpu", grabcut_iterations: int = 3):
        self.device = device
        self.grabcut_iterations = grabcut_iterations

    def load(self) -> "GrabCutOtsuSegmenter":
        return self

    @staticmethod
    def _score(fraction: float) -> float:
        return float(min(0.99, max(0.01, round(fraction, 4))))

    def _segment_box(self, image: np.ndarray, box) -> tuple[np.ndarray, float]:
        h, w = image.shape[:2]
        x0, y0, x1, y1 = (int(v) for v in box)
        x0, y0 = max(x0, 0), max(y0, 0)
        x1, y1 = min(x1, w), min(y1, h)
        bits = np.zeros((h, w), dtype=bool)
        if x1 <= x0 or y1 <= y0:
            return bits, 0.01
        area = (x1 - x0) * (y1 - y0)
        if area >= 4 and (x1 - x0) < w and (y1 - y0) < h:
            gc_mask = np.zeros((h, w), dtype=np.uint8)
            bgd = np.zeros((1, 65), dtype=np.float64)
            fgd = np.zeros((1, 65), dtype=np.float64)
            try:
                cv2.grabCut(image, gc_mask, (x0, y0, x1 - x0, y1 - y0), bgd, fgd,
                            self.grabcut_iterations, cv2.GC_INIT_WITH_RECT)
                fg = (gc_mask == cv2.GC_FGD) | (gc_mask == cv2.GC_PR_FGD)
            except cv2.error as exc:
                logger.debug("grabCut failed (%s); using box fill", exc)
                fg = np.zeros((h, w), dtype=bool)
            if fg.sum() >= self._MIN_FRACTION * area:
                return fg, self._score(fg[y0:y1, x0:x1].sum() / area)
        # recall floor: the prompt region itself
        bits[y0:y1, x0:x1] = True
        return bits, 0.25

    def _segment_text(self, image: np.ndarray) -> tuple[np.ndarray, float]:
        h, w = image.shape[:2]
        gray = cv2.cvtColor(image, cv2.COLOR_RGB2GRAY)
        _, th = cv2.threshold(gray, 0, 255, cv2.THRESH_BINARY + cv2.THRESH_OTSU)
        fg = th > 0
        # the object is taken as the minority side of the threshold
        if fg.sum() > fg.size / 2:
            fg = ~fg
        if not fg.any():
            fg = np.ones((h, w), dtype=bool)
        n, labels, stats, _ = cv2.connectedComponentsWithStats(
            fg.astype(np.uint8), connectivity=8)
        if n > 1:
            biggest = 1 + int(np.argmax(stats[1:, cv2.CC_STAT_AREA]))
            fg = labels == biggest
        return fg, self._score(fg.sum() / fg.size)

    def segment(self, image: np.ndarray, prompt_mode: str,
                text: str | None = None, boxes=None) -> list[tuple[np.ndarray, float]]:
        if prompt_mode == "boxes":
            return [self._segment_box(image, box) for box in boxes]
        return [self._segment_text(image)]


class InstructionStripRewriter:
    """Removes answer-format instructions from a query.

    Sentences that are pure response-formatting directives ("Answer in one
    word.", "Respond with JSON only.") are dropped; the object description
    itself always survives, so the result is non-empty for non-empty input.
    """

    identifier = "instruction-strip-v1"

    _DIRECTIVE = re.compile(
        r"^\s*(answer|respond|reply|output|return|give|format|explain|describe"
        r"|use|keep|limit|say)\b[^.!?]*[.!?]?\s*$",
        re.IGNORECASE,
    )
    _SENTENCES = re.compile(r"[^.!?]*[.!?]|[^.!?]+$")

    def __init__(self, device: str = "cpu"):
        self.device = device

    def load(self) -> "InstructionStripRewriter":
        return self

    def rewrite(self, query: str) -> str:
        parts = [m.group(0) for m in self._SENTENCES.finditer(query) if m.group(0).strip()]
        kept = [p for p in parts if not self._DIRECTIVE.match(p)]
        out = " ".join(p.strip() for p in kept).strip()
        return out if out else query


# ---------------------------------------------------------------------------
# Transformers family (loads only when weights are available locally)
# ---------------------------------------------------------------------------

def _local_only() -> bool:
    return os.environ.get("AEROGROUND_SIDECAR_ALLOW_DOWNLOAD", "") != "1"


class TransformersEditor:
    """Text-guided image-editing model behind the edit endpoint."""

    def __init__(self, model_id: str, device: str = "cpu"):
        self.identifier = model_id
        self.device = device
        self._pipe = None

    def load(self) -> "TransformersEditor":
        try:
            import torch  # noqa: F401
            from diffusers import AutoPipelineForImage2Image
        except ImportError as exc:
            raise AdapterLoadError(f"{self.identifier}: {exc}") from exc
        try:
            self._pipe = AutoPipelineForImage2Image.from_pretrained(
                self.identifier, local_files_only=_local_only())
            self._pipe.to(self.device)
        except Exception as exc:
            raise AdapterLoadError(f"{self.identifier}: {exc}") from exc
        return self

    def edit(self, image: np.ndarray, instruction: str) -> np.ndarray:
        from PIL import Image as PilImage

        h, w = image.shape[:2]
        result = self._pipe(prompt=instruction, image=PilImage.fromarray(image),
                            guidance_scale=4.0, num_inference_steps=20).images[0]
        return np.asarray(result.resize((w, h)).convert("RGB"))


class TransformersSegmenter:
    """Promptable segmentation model (box prompts via the processor)."""

    def __init__(self, model_id: str, device: str = "cpu"):
        self.identifier = model_id
        self.device = device
        self._model = None
        self._processor = None

    def load(self) -> "TransformersSegmenter":
        try:
            import torch  # noqa: F401
            from transformers import AutoModelForMaskGeneration, AutoProcessor
        except ImportError as exc:
            raise AdapterLoadError(f"{self.identifier}: {exc}") from exc
        try:
            self._processor = AutoProcessor.from_pretrained(
                self.identifier, local_files_only=_local_only())
            self._model = AutoModelForMaskGeneration.from_pretrained(
                self.identifier, local_files_only=_local_only()).to(self.device)
        except Exception as exc:
            raise AdapterLoadError(f"{self.identifier}: {exc}") from exc
        return self

    def segment(self, image: np.ndarray, prompt_mode: str,
                text: str | None = None, boxes=None) -> list[tuple[np.ndarray, float]]:
        import torch
        from PIL import Image as PilImage

        pil = PilImage.fromarray(image)
        h, w = image.shape[:2]
        input_boxes = [[list(b) for b in boxes]] if prompt_mode == "boxes" else None
        inputs = self._processor(pil, input_boxes=input_boxes,
                                 return_tensors="pt").to(self.device)
        with torch.no_grad():
            outputs = self._model(**inputs)
        masks = self._processor.image_processor.post_process_masks(
            outputs.pred_masks.cpu(), inputs["original_sizes"].cpu(),
            inputs["reshaped_input_sizes"].cpu())
        scores = outputs.iou_scores.cpu().reshape(-1)
        out = []
        for i, m in enumerate(masks[0]):
            bits = np.asarray(m[0], dtype=bool)
            if bits.shape != (h, w):
                bits = np.asarray(PilImage.fromarray(
                    bits.astype(np.uint8) * 255).resize((w, h))) > 127
            score = float(min(1.0, max(0.0, scores[i].item() if i < len(scores) else 0.5)))
            out.append((bits, score))
        return out


class TransformersRewriter:
    """Small causal LM prompted to strip instruction noise from a query."""

    _PROMPT = ("Rewrite the following request so only the object description "
               "remains. Drop answer-format instructions. Request: {query}\n"
               "Rewritten:")

    def __init__(self, model_id: str, device: str = "cpu"):
        self.identifier = model_id
        self.device = device
        self._model = None
        self._tokenizer = None

    def load(self) -> "TransformersRewriter":
        try:
            import torch  # noqa: F401
            from transformers import AutoModelForCausalLM, AutoTokenizer
        except ImportError as exc:
            raise AdapterLoadError(f"{self.identifier}: {exc}") from exc
        try:
            self._tokenizer = AutoTokenizer.from_pretrained(
                self.identifier, local_files_only=_local_only())
            self._model = AutoModelForCausalLM.from_pretrained(
                self.identifier, local_files_only=_local_only()).to(self.device)
        except Exception as exc:
            raise AdapterLoadError(f"{self.identifier}: {exc}") from exc
        return self

    def rewrite(self, query: str) -> str:
        import torch

        inputs = self._tokenizer(self._PROMPT.format(query=query),
                                 return_tensors="pt").to(self.device)
        with torch.no_grad():
            ids = self._model.generate(**inputs, max_new_tokens=64, do_sample=False)
        text = self._tokenizer.decode(ids[0][inputs["input_ids"].shape[1]:],
                                      skip_special_tokens=True).strip()
        return text.splitlines()[0].strip() if text.strip() else query


# ---------------------------------------------------------------------------
# Registry
# ---------------------------------------------------------------------------

_CPU_FACTORIES = {
    "saliency-window-v1": SaliencyWindowEditor,
    "grabcut-otsu-v1": GrabCutOtsuSegmenter,
    "instruction-strip-v1": InstructionStripRewriter,
}

_ROLE_KIND = {
    "editor": "edit",
    "segmenter_small": "segment",
    "segmenter_large": "segment",
    "rewriter": "rewrite",
}

_HF_FACTORY_BY_KIND = {
    "edit": TransformersEditor,
    "segment": TransformersSegmenter,
    "rewrite": TransformersRewriter,
}

EXTRA_FACTORIES: dict[str, type] = {}  # test/extension hook


def build_adapter(role: str, model_id: str, device: str):
    """Instantiate and load the adapter for one role assignment.

    Unknown identifiers are treated as hosted-model ids for the role's
    kind. Raises AdapterLoadError when the model cannot be loaded here.
    """
    kind = _ROLE_KIND[role]
    if model_id in EXTRA_FACTORIES:
        adapter = EXTRA_FACTORIES[model_id](device=device)
    elif model_id in _CPU_FACTORIES:
        adapter = _CPU_FACTORIES[model_id](device=device)
    else:
        adapter = _HF_FACTORY_BY_KIND[kind](model_id, device=device)
    if not hasattr(adapter, kind):
        raise AdapterLoadError(
            f"{model_id} does not implement {kind!r} needed by role {role}")
    return adapter.load()
