"""Deterministic mark rendering: box outlines plus centered numeric badges.

Rendering is a pure function of (pixels, detections, style). Glyphs come from
an embedded 5x7 bitmap font and all geometry is integer arithmetic, so the
pixel buffer (and therefore the content hash) is identical across runs and
platforms — no system font or anti-aliasing is involved.
"""

from __future__ import annotations

import hashlib
import io
import math
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .dataset import Box
from .errors import DegenerateBoxError

# 5x7 digit bitmaps; '#' = glyph pixel.
_DIGITS = {
    "0": (".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."),
    "1": ("..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."),
    "2": (".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"),
    "3": (".###.", "#...#", "....#", "..##.", "....#", "#...#", ".###."),
    "4": ("...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."),
    "5": ("#####", "#....", "####.", "....#", "....#", "#...#", ".###."),
    "6": ("..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###."),
    "7": ("#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."),
    "8": (".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."),
    "9": (".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##.."),
}
_GLYPH_W, _GLYPH_H = 5, 7

DEFAULT_PALETTE = (
    (230, 57, 70),
    (58, 134, 255),
    (42, 157, 143),
    (244, 162, 97),
    (131, 56, 236),
    (255, 0, 110),
    (96, 108, 56),
    (0, 119, 182),
)


@dataclass(frozen=True)
class MarkStyle:
    """Rendering knobs; defaults keep badges legible down to small images."""

    palette: tuple[tuple[int, int, int], ...] = DEFAULT_PALETTE
    outline_width: int = 3
    badge_divisor: int = 24
    badge_min_px: int = 12
    badge_fill: tuple[int, int, int] = (20, 20, 20)
    glyph_color: tuple[int, int, int] = (255, 255, 255)


@dataclass(frozen=True)
class MarkGeometry:
    mark: int
    center: tuple[int, int]
    box: Box


@dataclass(frozen=True)
class MarkedImage:
    """Rendered marks over an image; hash is over the raw pixel buffer."""

    image_png: bytes
    width: int
    height: int
    mark_geometry: tuple[MarkGeometry, ...]
    content_hash: str


def _round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


def clip_box(box: Box, width: float, height: float) -> Box:
    """Clamp a box to [0, width] x [0, height].

    Raises DegenerateBoxError when clamping destroys the positive area;
    callers drop such candidates (with a trace note) before rendering.
    """
    if width <= 0 or height <= 0:
        raise ValueError(f"image frame must be positive, got {width}x{height}")
    x_min = min(max(box.x_min, 0.0), float(width))
    y_min = min(max(box.y_min, 0.0), float(height))
    x_max = min(max(box.x_max, 0.0), float(width))
    y_max = min(max(box.y_max, 0.0), float(height))
    if x_max <= x_min or y_max <= y_min:
        raise DegenerateBoxError(
            f"box {box.as_list()} has no area inside a {width}x{height} frame"
        )
    return Box(x_min, y_min, x_max, y_max)


def _draw_outline(arr: np.ndarray, box: Box, color, width_px: int) -> None:
    h, w = arr.shape[:2]
    x0 = max(0, int(math.floor(box.x_min)))
    y0 = max(0, int(math.floor(box.y_min)))
    x1 = min(w, int(math.ceil(box.x_max)))
    y1 = min(h, int(math.ceil(box.y_max)))
    t = width_px
    arr[y0 : min(y1, y0 + t), x0:x1] = color
    arr[max(y0, y1 - t) : y1, x0:x1] = color
    arr[y0:y1, x0 : min(x1, x0 + t)] = color
    arr[y0:y1, max(x0, x1 - t) : x1] = color


def _badge_center(box: Box) -> tuple[int, int]:
    cx, cy = box.center
    ix, iy = _round_half_up(cx), _round_half_up(cy)
    # Sub-pixel boxes can round outside; pull back in when an integer pixel exists.
    lo_x, hi_x = int(math.ceil(box.x_min)), int(math.floor(box.x_max))
    lo_y, hi_y = int(math.ceil(box.y_min)), int(math.floor(box.y_max))
    if lo_x <= hi_x:
        ix = min(max(ix, lo_x), hi_x)
    if lo_y <= hi_y:
        iy = min(max(iy, lo_y), hi_y)
    return ix, iy


def _draw_badge(arr: np.ndarray, mark: int, cx: int, cy: int, style: MarkStyle) -> None:
    h, w = arr.shape[:2]
    base = max(style.badge_min_px, min(w, h) // style.badge_divisor)
    scale = max(1, (base * 3) // 35)  # glyph height 7*scale stays under ~0.6*base
    digits = str(mark)
    glyph_w = len(digits) * _GLYPH_W * scale + (len(digits) - 1) * scale
    glyph_h = _GLYPH_H * scale
    radius = max(base // 2, math.isqrt(glyph_w * glyph_w + glyph_h * glyph_h) // 2 + 2)

    y0, y1 = max(0, cy - radius), min(h, cy + radius + 1)
    x0, x1 = max(0, cx - radius), min(w, cx + radius + 1)
    if y0 >= y1 or x0 >= x1:
        return
    yy, xx = np.ogrid[y0:y1, x0:x1]
    disc = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius * radius
    region = arr[y0:y1, x0:x1]
    region[disc] = style.badge_fill

    gx0 = cx - glyph_w // 2
    gy0 = cy - glyph_h // 2
    for d_idx, digit in enumerate(digits):
        bitmap = _DIGITS[digit]
        dx0 = gx0 + d_idx * (_GLYPH_W + 1) * scale
        for row in range(_GLYPH_H):
            for col in range(_GLYPH_W):
                if bitmap[row][col] != "#":
                    continue
                py0, px0 = gy0 + row * scale, dx0 + col * scale
                py1, px1 = py0 + scale, px0 + scale
                arr[max(0, py0) : min(h, py1), max(0, px0) : min(w, px1)] = style.glyph_color


def overlay_boxes(
    image: Image.Image,
    items: list[tuple[Box, tuple[int, int, int]]],
    outline_width: int = 3,
) -> bytes:
    """Draw plain colored outlines (no marks) and return PNG bytes."""
    arr = np.array(image.convert("RGB"), dtype=np.uint8)
    for box, color in items:
        _draw_outline(arr, box, color, outline_width)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


def render(image: Image.Image, detections, style: MarkStyle = MarkStyle()) -> MarkedImage:
    """Draw every candidate's outline and its numeric mark badge at the box center.

    Expects detections whose boxes are already clipped to the image frame.
    Badge center is the box center rounded half-up to an integer pixel.
    """
    if not detections.candidates:
        raise ValueError("cannot render an empty detection set")
    arr = np.array(image.convert("RGB"), dtype=np.uint8)
    h, w = arr.shape[:2]

    geometry = []
    for idx, candidate in enumerate(detections.candidates):
        color = style.palette[idx % len(style.palette)]
        _draw_outline(arr, candidate.box, color, style.outline_width)
    # Badges drawn after all outlines so no outline covers a mark.
    for idx, candidate in enumerate(detections.candidates):
        mark = idx + 1
        cx, cy = _badge_center(candidate.box)
        _draw_badge(arr, mark, cx, cy, style)
        geometry.append(MarkGeometry(mark=mark, center=(cx, cy), box=candidate.box))

    digest = hashlib.sha256()
    digest.update(f"{w}x{h}:".encode("ascii"))
    digest.update(arr.tobytes())

    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return MarkedImage(
        image_png=buf.getvalue(),
        width=w,
        height=h,
        mark_geometry=tuple(geometry),
        content_hash=digest.hexdigest(),
    )
