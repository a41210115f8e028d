"""Text-prompted segmentation: class name in, boolean object mask out.

Backends:

* ``oracle``: reads the planted-region metadata that synthetic generators
  attach to their images. Exact, used by the tests and the toy audits.
* ``remote``: POSTs the image to an HTTP service; wire format in
  ``docs/segmentation-api.md``.
* ``grounded-sam``: text-to-box detector followed by a box-prompted mask
  model, via ``transformers`` (optional extra).
"""
from __future__ import annotations

import base64
import io
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field

import numpy as np
import torch

from .pipeline import BackendUnavailable, ImageBatch

log = logging.getLogger(__name__)

WIRE_VERSION = 1


class SegmentationError(RuntimeError):
    pass


@dataclass
class SegmentationMask:
    mask: torch.Tensor                  # H x W bool
    prompt: str
    confidences: list[float] = field(default_factory=list)
    boxes: list[tuple[float, float, float, float]] = field(default_factory=list)  # x0, y0, x1, y1

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.mask.shape)


@dataclass
class SegmentationConfig:
    backend: str = "oracle"
    box_threshold: float = 0.35
    endpoint: str | None = None        # remote backend URL
    timeout: float = 30.0
    aliases: dict[str, list[str]] = field(default_factory=dict)  # oracle: prompt -> region names
    detector: str = "IDEA-Research/grounding-dino-tiny"
    mask_model: str = "facebook/sam-vit-base"

    def __post_init__(self):
        if not 0.0 <= self.box_threshold <= 1.0:
            raise ValueError("box_threshold must be in [0, 1]")


class Segmenter(ABC):
    backend_id = ""

    def __init__(self, cfg: SegmentationConfig):
        self.cfg = cfg

    @abstractmethod
    def _segment(self, image: ImageBatch, prompt: str) -> SegmentationMask:
        ...

    def __call__(self, image: ImageBatch, prompt: str) -> SegmentationMask:
        return segment(image, prompt, self)


def _check_image(image: ImageBatch) -> tuple[int, int]:
    if not isinstance(image, ImageBatch):
        raise TypeError("expected an ImageBatch")
    px = image.pixels
    if px.dim() != 4 or px.shape[0] != 1 or px.shape[1] != 3:
        raise ValueError(f"expected a single 1 x 3 x H x W image, got shape {tuple(px.shape)}")
    if not torch.isfinite(px).all():
        raise ValueError("image contains non-finite pixels")
    return int(px.shape[2]), int(px.shape[3])


def segment(image: ImageBatch, prompt: str, segmenter: Segmenter) -> SegmentationMask:
    """Union of the masks of every detection above the box threshold."""
    if not isinstance(prompt, str) or not prompt.strip():
        raise ValueError("segmentation prompt must be non-empty")
    hw = _check_image(image)
    out = segmenter._segment(image, prompt)
    if tuple(out.mask.shape) != hw:
        raise SegmentationError(f"backend returned mask {tuple(out.mask.shape)} for image {hw}")
    return out


def union_above(masks: list[torch.Tensor], confidences: list[float], boxes: list, threshold: float,
                hw: tuple[int, int], prompt: str) -> SegmentationMask:
    keep = [i for i, c in enumerate(confidences) if c >= threshold]
    mask = torch.zeros(hw, dtype=torch.bool)
    for i in keep:
        mask |= masks[i].bool()
    return SegmentationMask(mask, prompt, [confidences[i] for i in keep], [boxes[i] for i in keep])


def _bbox(m: torch.Tensor) -> tuple[float, float, float, float]:
    ys, xs = torch.nonzero(m, as_tuple=True)
    return float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1)


# ---------------------------------------------------------------------------
# oracle
# ---------------------------------------------------------------------------

class OracleSegmenter(Segmenter):
    """Mask = planted region(s) named by the prompt; one box per non-empty
    region, confidence 1.0."""

    backend_id = "oracle"

    def names(self, prompt: str) -> list[str]:
        key = " ".join(prompt.lower().split())
        return list(self.cfg.aliases.get(key, [key]))

    def _segment(self, image: ImageBatch, prompt: str) -> SegmentationMask:
        if image.regions is None:
            raise SegmentationError("oracle segmenter needs images carrying region metadata")
        hw = tuple(image.pixels.shape[-2:])
        masks, confs, boxes = [], [], []
        for name in self.names(prompt):
            if name not in image.regions:
                continue
            m = image.regions[name][0].bool()
            if m.any():
                masks.append(m)
                confs.append(1.0)
                boxes.append(_bbox(m))
        return union_above(masks, confs, boxes, self.cfg.box_threshold, hw, prompt)


# ---------------------------------------------------------------------------
# remote service
# ---------------------------------------------------------------------------

def rle_encode(mask: np.ndarray | torch.Tensor) -> list[int]:
    """Row-major run lengths, alternating false/true, starting with a
    (possibly zero) false run."""
    flat = np.asarray(mask, dtype=bool).reshape(-1)
    if flat.size == 0:
        return [0]
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs = [0] + runs
    return [int(r) for r in runs]


def rle_decode(counts: list[int], height: int, width: int) -> np.ndarray:
    counts = [int(c) for c in counts]
    if any(c < 0 for c in counts):
        raise SegmentationError("negative run length")
    if sum(counts) != height * width:
        raise SegmentationError(f"run lengths sum to {sum(counts)}, expected {height * width}")
    values = np.arange(len(counts)) % 2 == 1
    return np.repeat(values, counts).reshape(height, width)


def encode_png(image: ImageBatch) -> bytes:
    from PIL import Image

    from .sampler import to_uint8

    buf = io.BytesIO()
    Image.fromarray(to_uint8(image)[0]).save(buf, format="PNG")
    return buf.getvalue()


def build_request(image: ImageBatch, prompt: str, box_threshold: float) -> dict:
    return {
        "version": WIRE_VERSION,
        "prompt": prompt,
        "image_png": base64.b64encode(encode_png(image)).decode("ascii"),
        "box_threshold": box_threshold,
    }


def parse_response(payload: dict, hw: tuple[int, int], prompt: str, threshold: float) -> SegmentationMask:
    try:
        if payload["version"] != WIRE_VERSION:
            raise SegmentationError(f"unsupported wire version {payload['version']!r}")
        h, w = int(payload["height"]), int(payload["width"])
        mask = rle_decode(payload["counts"], h, w)
        dets = payload.get("boxes", [])
        confs = [float(d["confidence"]) for d in dets]
        boxes = [tuple(float(v) for v in d["xyxy"]) for d in dets]
    except (KeyError, TypeError, ValueError) as exc:
        raise SegmentationError(f"malformed segmentation response: {exc}") from exc
    if (h, w) != tuple(hw):
        raise SegmentationError(f"service returned a {h}x{w} mask for a {hw[0]}x{hw[1]} image")
    keep = [i for i, c in enumerate(confs) if c >= threshold]
    # the service has already unioned its detections; drop the mask if none pass
    if dets and not keep:
        mask = np.zeros_like(mask)
    return SegmentationMask(torch.from_numpy(mask.copy()), prompt,
                            [confs[i] for i in keep], [boxes[i] for i in keep])


class RemoteSegmenter(Segmenter):
    backend_id = "remote"

    def __init__(self, cfg: SegmentationConfig, transport=None):
        super().__init__(cfg)
        if not cfg.endpoint:
            raise BackendUnavailable("remote segmenter needs an endpoint URL")
        import httpx

        self._client = httpx.Client(timeout=cfg.timeout, transport=transport)

    def _segment(self, image: ImageBatch, prompt: str) -> SegmentationMask:
        import httpx

        body = build_request(image, prompt, self.cfg.box_threshold)
        try:
            resp = self._client.post(self.cfg.endpoint, json=body)
        except httpx.HTTPError as exc:
            raise BackendUnavailable(f"segmentation service unreachable: {exc}") from exc
        if resp.status_code != 200:
            raise SegmentationError(f"segmentation service returned HTTP {resp.status_code}: {resp.text[:200]}")
        return parse_response(resp.json(), tuple(image.pixels.shape[-2:]), prompt, self.cfg.box_threshold)


# ---------------------------------------------------------------------------
# grounded detector + box-prompted mask model (optional)
# ---------------------------------------------------------------------------

class GroundedSamSegmenter(Segmenter):
    backend_id = "grounded-sam"

    def __init__(self, cfg: SegmentationConfig):
        super().__init__(cfg)
        try:
            from transformers import (AutoModelForZeroShotObjectDetection, AutoProcessor, SamModel,
                                      SamProcessor)
            self._det_proc = AutoProcessor.from_pretrained(cfg.detector)
            self._det = AutoModelForZeroShotObjectDetection.from_pretrained(cfg.detector).eval()
            self._sam_proc = SamProcessor.from_pretrained(cfg.mask_model)
            self._sam = SamModel.from_pretrained(cfg.mask_model).eval()
        except Exception as exc:  # missing package, weights or network
            raise BackendUnavailable(f"grounded-sam backend unavailable: {exc}") from exc

    @torch.no_grad()
    def _segment(self, image: ImageBatch, prompt: str) -> SegmentationMask:
        from PIL import Image

        from .sampler import to_uint8

        hw = tuple(image.pixels.shape[-2:])
        pil = Image.fromarray(to_uint8(image)[0])
        text = prompt.lower().strip()
        if not text.endswith("."):
            text += "."
        inputs = self._det_proc(images=pil, text=text, return_tensors="pt")
        out = self._det(**inputs)
        res = self._det_proc.post_process_grounded_object_detection(
            out, inputs.input_ids, threshold=self.cfg.box_threshold, text_threshold=self.cfg.box_threshold,
            target_sizes=[hw])[0]
        boxes = [tuple(float(v) for v in b) for b in res["boxes"]]
        confs = [float(s) for s in res["scores"]]
        if not boxes:
            return SegmentationMask(torch.zeros(hw, dtype=torch.bool), prompt)
        sam_in = self._sam_proc(pil, input_boxes=[[list(b) for b in boxes]], return_tensors="pt")
        sam_out = self._sam(**sam_in, multimask_output=False)
        masks = self._sam_proc.image_processor.post_process_masks(
            sam_out.pred_masks, sam_in["original_sizes"], sam_in["reshaped_input_sizes"])[0]
        masks = [m[0].bool() for m in masks]
        return union_above(masks, confs, boxes, self.cfg.box_threshold, hw, prompt)


_BACKENDS = {"oracle": OracleSegmenter, "remote": RemoteSegmenter, "grounded-sam": GroundedSamSegmenter}


def load_segmenter(cfg: SegmentationConfig | dict | None = None) -> Segmenter:
    if cfg is None:
        cfg = SegmentationConfig()
    elif isinstance(cfg, dict):
        cfg = SegmentationConfig(**cfg)
    if cfg.backend not in _BACKENDS:
        raise BackendUnavailable(f"unknown segmentation backend {cfg.backend!r}; known: {sorted(_BACKENDS)}")
    return _BACKENDS[cfg.backend](cfg)
