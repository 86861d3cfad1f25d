"""Camera-side preprocessing: 176x144 frames are box-downsampled to 44x36,
centered, pushed through the trained first conv layer in integer arithmetic,
thresholded to spikes, and flattened to XYF events.

All arithmetic is integer so the client side of the pipeline is bit-exact
reproducible across machines and languages.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .protocol import SpikeEvent
from .trinary_net import (
    KIND_HOST_CONV,
    InputShapeError,
    LayerSpec,
    TrinaryNetworkSpec,
    conv2d_int,
)

FRAME_W = 176
FRAME_H = 144
DOWN_W = 44
DOWN_H = 36
PIXEL_CENTER = 128  # pixels are centered to [-128, 127] before the host conv

RAW_HEADER = struct.Struct("<HHI")  # width u16, height u16, reserved u32


@dataclass
class Frame:
    """One captured RGB frame (h, w, 3) uint8 plus its capture time."""

    pixels: np.ndarray
    timestamp_ms: int = 0

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.uint8)
        if self.pixels.shape != (FRAME_H, FRAME_W, 3):
            raise InputShapeError(
                f"frame must be {FRAME_H}x{FRAME_W}x3, got {self.pixels.shape}"
            )


def downsample(frame: Frame | np.ndarray) -> np.ndarray:
    """Exact 4x4 box average per channel with round-half-up.

    176x144 -> (36, 44, 3) uint8. Deterministic integer arithmetic."""
    pixels = frame.pixels if isinstance(frame, Frame) else np.asarray(frame)
    if pixels.shape != (FRAME_H, FRAME_W, 3):
        raise InputShapeError(f"expected {FRAME_H}x{FRAME_W}x3 frame, got {pixels.shape}")
    blocks = pixels.astype(np.uint32).reshape(DOWN_H, 4, DOWN_W, 4, 3)
    sums = blocks.sum(axis=(1, 3))
    return ((sums + 8) // 16).astype(np.uint8)


def host_conv_threshold(rgb: np.ndarray, layer0: LayerSpec) -> np.ndarray:
    """Apply the host-side conv layer and threshold to a binary spike plane.

    rgb: (36, 44, 3) uint8. Pixels are centered by subtracting 128; the conv
    runs in int32 with the layer's zero padding; a position spikes iff its
    response strictly exceeds the feature threshold. Returns bool (f, h, w).
    """
    if layer0.kind != KIND_HOST_CONV:
        raise InputShapeError(f"layer kind {layer0.kind} is not host-side")
    rgb = np.asarray(rgb)
    if rgb.shape != (DOWN_H, DOWN_W, 3):
        raise InputShapeError(f"expected {DOWN_H}x{DOWN_W}x3 image, got {rgb.shape}")
    centered = rgb.astype(np.int32) - PIXEL_CENTER  # (h, w, c)
    x = centered.transpose(2, 0, 1)  # (c, h, w)
    sums = conv2d_int(x, layer0.weights, layer0.stride, layer0.padding,
                      layer0.feature_groups)
    return sums > layer0.thresholds[:, None, None]


def frame_to_spikes(frame: Frame | np.ndarray, spec: TrinaryNetworkSpec) -> np.ndarray:
    """Full client-side path: downsample then host conv threshold."""
    (layer0,) = spec.host_layers
    return host_conv_threshold(downsample(frame), layer0)


def to_xyf(plane: np.ndarray) -> list[SpikeEvent]:
    """One event per set bit, sorted by (f, y, x). plane: bool (f, h, w)."""
    f, y, x = np.nonzero(np.asarray(plane, dtype=bool))
    return list(map(SpikeEvent._make, zip(x.tolist(), y.tolist(), f.tolist())))


def to_xyf_array(plane: np.ndarray) -> np.ndarray:
    """(n, 3) array of (x, y, f) rows in (f, y, x) order; same events as
    to_xyf without the per-event objects (the real-time path)."""
    f, y, x = np.nonzero(np.asarray(plane, dtype=bool))
    return np.column_stack([x, y, f]).astype(np.int64)


def from_xyf(events, shape: tuple[int, int, int]) -> np.ndarray:
    """Rebuild the (f, h, w) bool plane from events; inverse of to_xyf.

    shape is (w, h, f) as negotiated on the wire."""
    w, h, nf = shape
    plane = np.zeros((nf, h, w), dtype=bool)
    for e in events:
        if not (0 <= e.x < w and 0 <= e.y < h and 0 <= e.f < nf):
            raise ValueError(f"event {tuple(e)} outside {w}x{h}x{nf}")
        plane[e.f, e.y, e.x] = True
    return plane


# ---------------------------------------------------------------------------
# Frame files: raw container or PNG (lossless only; JPEG would break
# bit-exact reproducibility).


def write_raw_frame(path, frame: Frame) -> None:
    with open(path, "wb") as fh:
        fh.write(RAW_HEADER.pack(FRAME_W, FRAME_H, 0))
        fh.write(frame.pixels.tobytes())


def read_raw_frame(path) -> Frame:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < RAW_HEADER.size:
        raise InputShapeError("raw frame file truncated")
    w, h, _ = RAW_HEADER.unpack_from(data)
    body = data[RAW_HEADER.size :]
    if len(body) != w * h * 3:
        raise InputShapeError(f"raw frame body {len(body)} bytes, want {w * h * 3}")
    pixels = np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)
    return Frame(pixels)


def encode_raw_frame(frame: Frame, seq: int = 0) -> bytes:
    """Raw-frame bytes with the reserved header word carrying a sequence
    number (readers of stored files ignore it)."""
    return RAW_HEADER.pack(FRAME_W, FRAME_H, seq & 0xFFFFFFFF) + frame.pixels.tobytes()


def decode_raw_frame(data: bytes) -> tuple[Frame, int]:
    if len(data) < RAW_HEADER.size:
        raise InputShapeError("raw frame message truncated")
    w, h, seq = RAW_HEADER.unpack_from(data)
    body = data[RAW_HEADER.size :]
    if len(body) != w * h * 3:
        raise InputShapeError(f"raw frame body {len(body)} bytes, want {w * h * 3}")
    return Frame(np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).copy()), seq


def write_png(path, pixels: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(np.asarray(pixels, dtype=np.uint8), "RGB").save(path, "PNG")


def read_png(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8)
