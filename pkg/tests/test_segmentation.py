import base64
import io
import json

import httpx
import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from prompt_explainer.pipeline import BackendUnavailable, ImageBatch
from prompt_explainer.segmentation import (OracleSegmenter, RemoteSegmenter, SegmentationConfig,
                                           SegmentationError, build_request, load_segmenter,
                                           parse_response, rle_decode, rle_encode, segment)


def img(h=4, w=6, regions=None):
    return ImageBatch(torch.full((1, 3, h, w), 0.5), (0.0, 1.0), regions)


# --- run-length encoding ----------------------------------------------------

@given(arrays(np.bool_, st.tuples(st.integers(1, 12), st.integers(1, 12))))
def test_rle_roundtrip(mask):
    counts = rle_encode(mask)
    assert sum(counts) == mask.size
    assert all(c > 0 for c in counts[1:])
    assert np.array_equal(rle_decode(counts, *mask.shape), mask)


def test_rle_fixed_examples():
    m = np.array([[0, 0, 1], [1, 1, 0]], dtype=bool)
    assert rle_encode(m) == [2, 3, 1]
    assert rle_encode(np.array([[1, 1], [0, 1]], dtype=bool)) == [0, 2, 1, 1]
    assert rle_encode(np.zeros((2, 2), bool)) == [4]
    assert rle_encode(np.ones((1, 3), bool)) == [0, 3]


def test_rle_decode_rejects_bad_counts():
    with pytest.raises(SegmentationError):
        rle_decode([2, 2], 2, 3)
    with pytest.raises(SegmentationError):
        rle_decode([7, -1], 2, 3)


# --- entry point validation -------------------------------------------------

def test_segment_validates_inputs():
    seg = OracleSegmenter(SegmentationConfig())
    with pytest.raises(ValueError):
        segment(img(), "  ", seg)
    with pytest.raises(ValueError):
        segment(ImageBatch(torch.zeros(2, 3, 4, 4)), "x", seg)
    with pytest.raises(ValueError):
        segment(ImageBatch(torch.full((1, 3, 4, 4), float("nan"))), "x", seg)
    with pytest.raises(SegmentationError):
        segment(img(), "x", seg)  # no region metadata


# --- oracle -----------------------------------------------------------------

def test_oracle_idempotent_and_shape_invariant():
    r = torch.zeros(1, 4, 6, dtype=torch.bool)
    r[0, 1:3, 2:5] = True
    seg = OracleSegmenter(SegmentationConfig())
    a = seg(img(regions={"plum": r}), "Plum")
    b = seg(img(regions={"plum": r}), "plum")
    assert torch.equal(a.mask, b.mask) and a.shape == (4, 6)
    assert a.boxes == [(2.0, 1.0, 5.0, 3.0)] and a.confidences == [1.0]
    empty = seg(img(regions={"plum": r}), "lime")
    assert empty.shape == (4, 6) and not empty.mask.any()


def test_oracle_aliases_union():
    a = torch.zeros(1, 2, 2, dtype=torch.bool)
    b = torch.zeros(1, 2, 2, dtype=torch.bool)
    a[0, 0, 0] = True
    b[0, 1, 1] = True
    seg = OracleSegmenter(SegmentationConfig(aliases={"fruit": ["x", "y"]}))
    m = seg(img(2, 2, {"x": a, "y": b}), "fruit")
    assert m.mask.sum() == 2 and len(m.boxes) == 2


# --- wire format ------------------------------------------------------------

def test_request_layout():
    body = build_request(img(2, 3), "a lemon", 0.35)
    assert set(body) == {"version", "prompt", "image_png", "box_threshold"}
    assert body["version"] == 1
    png = Image.open(io.BytesIO(base64.b64decode(body["image_png"])))
    assert png.size == (3, 2) and png.mode == "RGB"
    assert np.asarray(png)[0, 0].tolist() == [128, 128, 128]


def test_response_fixture_bit_exact():
    payload = json.loads('{"version": 1, "height": 2, "width": 3, "counts": [1, 2, 3],'
                         ' "boxes": [{"xyxy": [1, 0, 3, 1], "confidence": 0.9}]}')
    m = parse_response(payload, (2, 3), "p", 0.35)
    assert m.mask.tolist() == [[False, True, True], [False, False, False]]
    assert m.boxes == [(1.0, 0.0, 3.0, 1.0)] and m.confidences == [0.9]
    low = parse_response(payload, (2, 3), "p", 0.95)
    assert not low.mask.any() and low.boxes == []


@pytest.mark.parametrize("payload", [
    {"version": 2, "height": 1, "width": 1, "counts": [1]},
    {"version": 1, "height": 1, "width": 1},
    {"version": 1, "height": 1, "width": 1, "counts": [2]},
    {"version": 1, "height": 2, "width": 2, "counts": [4]},
])
def test_bad_responses_rejected(payload):
    with pytest.raises(SegmentationError):
        parse_response(payload, (1, 1), "p", 0.3)


def mock_service(handler):
    return RemoteSegmenter(SegmentationConfig(backend="remote", endpoint="http://seg.test/v1/segment"),
                           transport=httpx.MockTransport(handler))


def test_remote_roundtrip():
    seen = {}

    def handler(request):
        body = json.loads(request.content)
        seen.update(body)
        mask = np.zeros((4, 6), bool)
        mask[1, 2:4] = True
        return httpx.Response(200, json={"version": 1, "height": 4, "width": 6, "counts": rle_encode(mask),
                                         "boxes": [{"xyxy": [2, 1, 4, 2], "confidence": 0.8}]})

    m = mock_service(handler)(img(), "lemon")
    assert seen["prompt"] == "lemon" and seen["box_threshold"] == 0.35
    assert m.mask.sum() == 2 and m.mask[1, 2] and m.confidences == [0.8]


def test_remote_errors():
    with pytest.raises(SegmentationError):
        mock_service(lambda r: httpx.Response(500, text="boom"))(img(), "x")

    def down(request):
        raise httpx.ConnectError("refused", request=request)

    with pytest.raises(BackendUnavailable):
        mock_service(down)(img(), "x")
    with pytest.raises(BackendUnavailable):
        RemoteSegmenter(SegmentationConfig(backend="remote"))


def test_load_segmenter():
    assert isinstance(load_segmenter(), OracleSegmenter)
    assert isinstance(load_segmenter({"backend": "oracle"}), OracleSegmenter)
    with pytest.raises(BackendUnavailable):
        load_segmenter({"backend": "nope"})
    with pytest.raises(ValueError):
        SegmentationConfig(box_threshold=1.5)
