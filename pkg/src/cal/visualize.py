"""Attention heatmaps as binary PPM (P6) images.

Attention values are upsampled nearest-neighbour to image resolution and
mapped linearly onto a fixed colour ramp. Heatmaps are scaled by the
sample's own maximum over all heads, so heads stay comparable within one
sample; an all-zero stack maps entirely to the ramp's zero colour.
"""

from __future__ import annotations

from collections.abc import Sequence
from pathlib import Path

import numpy as np

from .metrics import attention_box, upsample_nearest

# black -> blue -> red -> yellow -> white, evenly spaced stops
RAMP = np.array(
    [
        [0, 0, 0],
        [0, 0, 255],
        [255, 0, 0],
        [255, 255, 0],
        [255, 255, 255],
    ],
    dtype=np.float64,
)
GT_COLOR = (0, 255, 0)
ATTENTION_BOX_COLOR = (255, 0, 255)


def write_ppm(path, rgb: np.ndarray) -> None:
    """Write an (H, W, 3) uint8 array as P6."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ValueError(f"expected (H, W, 3) uint8 pixels, got {rgb.shape} {rgb.dtype}")
    h, w = rgb.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a P6 file with maxval 255 (comments allowed in the header)."""
    data = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PPM header")
        fields.append(data[start:pos])
    if fields[0] != b"P6":
        raise ValueError(f"not a P6 file (magic {fields[0]!r})")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise ValueError(f"only maxval 255 is supported, got {maxval}")
    pos += 1  # single whitespace byte before the raster
    raster = data[pos : pos + w * h * 3]
    if len(raster) != w * h * 3:
        raise ValueError(f"PPM raster has {len(raster)} bytes, expected {w * h * 3}")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w, 3).copy()


def apply_ramp(values: np.ndarray) -> np.ndarray:
    """Map values in [0, 1] to uint8 RGB by piecewise-linear interpolation over RAMP."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    pos = v * (len(RAMP) - 1)
    lo = np.minimum(np.floor(pos).astype(int), len(RAMP) - 2)
    frac = (pos - lo)[..., None]
    rgb = RAMP[lo] * (1.0 - frac) + RAMP[lo + 1] * frac
    return np.rint(rgb).astype(np.uint8)


def image_to_rgb(image: np.ndarray) -> np.ndarray:
    """(3, H, W) float image in [0, 1] to (H, W, 3) uint8."""
    return np.rint(np.clip(np.asarray(image), 0.0, 1.0).transpose(1, 2, 0) * 255.0).astype(np.uint8)


def heatmaps(attention: np.ndarray, image_size: int) -> np.ndarray:
    """(M, h, w) attention to (M, S, S, 3) heatmaps sharing one per-sample scale."""
    att = np.asarray(attention, dtype=np.float64)
    if att.ndim != 3:
        raise ValueError(f"attention must be (M, h, w) for one sample, got {att.shape}")
    peak = att.max()
    scaled = att / peak if peak > 0 else np.zeros_like(att)
    return apply_ramp(upsample_nearest(scaled, image_size))


def draw_box(rgb: np.ndarray, box: Sequence[int], color) -> np.ndarray:
    """One-pixel outline of a half-open (x0, y0, x1, y1) box, in place."""
    x0, y0, x1, y1 = (int(v) for v in box)
    h, w = rgb.shape[:2]
    x0, y0 = max(x0, 0), max(y0, 0)
    x1, y1 = min(x1, w), min(y1, h)
    if x1 <= x0 or y1 <= y0:
        return rgb
    rgb[y0, x0:x1] = color
    rgb[y1 - 1, x0:x1] = color
    rgb[y0:y1, x0] = color
    rgb[y0:y1, x1 - 1] = color
    return rgb


def overlay(image: np.ndarray, attention: np.ndarray, gt_box, threshold_fraction: float = 0.5) -> np.ndarray:
    """Image blended 50/50 with the max-over-heads heatmap, GT box and attention box drawn on top."""
    size = image.shape[-1]
    merged = np.asarray(attention).max(axis=0, keepdims=True)
    heat = heatmaps(merged, size)[0].astype(np.float64)
    base = image_to_rgb(image).astype(np.float64)
    out = np.rint(0.5 * base + 0.5 * heat).astype(np.uint8)
    draw_box(out, gt_box, GT_COLOR)
    box = attention_box(np.asarray(attention), size, threshold_fraction)
    if box is not None:
        draw_box(out, box, ATTENTION_BOX_COLOR)
    return out


def export_sample(
    out_dir,
    index: int,
    image: np.ndarray,
    attention: np.ndarray,
    gt_box,
    threshold_fraction: float = 0.5,
    heads: Sequence[int] | None = None,
) -> list[Path]:
    """Write original, per-head heatmaps and the overlay for one sample; returns the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    size = image.shape[-1]
    written = []
    p = out_dir / f"sample{index:04d}_image.ppm"
    write_ppm(p, image_to_rgb(image))
    written.append(p)
    maps = heatmaps(attention, size)
    for m in range(len(maps)) if heads is None else heads:
        p = out_dir / f"sample{index:04d}_head{m:02d}.ppm"
        write_ppm(p, maps[m])
        written.append(p)
    p = out_dir / f"sample{index:04d}_overlay.ppm"
    write_ppm(p, overlay(image, attention, gt_box, threshold_fraction))
    written.append(p)
    return written
