"""Binary target images: loading, metrics, and overlay output.

Masks are numpy bool arrays of shape (height, width) indexed mask[py, px],
True where the pixel belongs to the shadow (black in the source image).
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

SHADOW_THRESHOLD = 0.5
MIN_SIDE = 8

# Overlay palette (RGB): agreement gray, rendered-only blue, target-only orange.
OVERLAY_BOTH = (128, 128, 128)
OVERLAY_RENDER_ONLY = (65, 105, 225)
OVERLAY_TARGET_ONLY = (255, 140, 0)


class ImageFormatError(ValueError):
    """Raised for undecodable files or images that violate target invariants."""


@dataclass(frozen=True)
class PixelRect:
    """Axis-aligned pixel rectangle, inclusive-exclusive on both axes."""

    x0: int
    y0: int
    x1: int
    y1: int

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    @property
    def area(self) -> int:
        return self.width * self.height


@dataclass
class TargetImage:
    mask: np.ndarray
    index: int = 0

    def __post_init__(self) -> None:
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.ndim != 2:
            raise ImageFormatError("target mask must be 2-dimensional")
        h, w = self.mask.shape
        if w < MIN_SIDE or h < MIN_SIDE:
            raise ImageFormatError(f"target must be at least {MIN_SIDE}x{MIN_SIDE}, got {w}x{h}")
        if not self.mask.any():
            raise ImageFormatError("target contains no shadow pixels")

    @property
    def width(self) -> int:
        return self.mask.shape[1]

    @property
    def height(self) -> int:
        return self.mask.shape[0]


def _read_pgm(path: Path) -> np.ndarray:
    """Decode a P2 or P5 PGM (maxval <= 255) to luminance in [0, 1]."""
    data = path.read_bytes()
    if data[:2] not in (b"P2", b"P5"):
        raise ImageFormatError(f"{path}: not a P2/P5 PGM")
    binary = data[:2] == b"P5"

    # Header: magic, width, height, maxval; '#' comments run to end of line.
    tokens: list[bytes] = []
    pos = 2
    while len(tokens) < 3:
        m = re.compile(rb"\s*(#[^\n]*\n|\S+)").match(data, pos)
        if m is None:
            raise ImageFormatError(f"{path}: truncated PGM header")
        pos = m.end()
        tok = m.group(1)
        if not tok.startswith(b"#"):
            tokens.append(tok)
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise ImageFormatError(f"{path}: malformed PGM header") from exc
    if not (0 < maxval <= 255):
        raise ImageFormatError(f"{path}: unsupported maxval {maxval}")

    if binary:
        raster = data[pos + 1 : pos + 1 + width * height]
        if len(raster) < width * height:
            raise ImageFormatError(f"{path}: truncated PGM raster")
        values = np.frombuffer(raster, dtype=np.uint8).astype(np.float64)
    else:
        try:
            values = np.array(data[pos:].split(), dtype=np.float64)
        except ValueError as exc:
            raise ImageFormatError(f"{path}: malformed P2 raster") from exc
        if values.size < width * height:
            raise ImageFormatError(f"{path}: truncated P2 raster")
        values = values[: width * height]
    return (values / maxval).reshape(height, width)


def load_binary_image(
    path, threshold: float = SHADOW_THRESHOLD, index: int = 0, pad: int = 0
) -> TargetImage:
    """Load a grayscale PGM/PNG as a binary target.

    A pixel is shadow iff its luminance (normalized to [0, 1]) falls below
    threshold. pad adds that many white pixels on every side.
    """
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".pgm":
        lum = _read_pgm(path)
    elif suffix == ".png":
        try:
            with Image.open(path) as im:
                lum = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
        except ImageFormatError:
            raise
        except Exception as exc:
            raise ImageFormatError(f"{path}: cannot decode PNG ({exc})") from exc
    else:
        raise ImageFormatError(f"{path}: unsupported image format {suffix!r}")
    mask = lum < threshold
    if pad > 0:
        mask = np.pad(mask, pad, mode="constant", constant_values=False)
    return TargetImage(mask=mask, index=index)


def mask_to_gray(mask: np.ndarray) -> np.ndarray:
    """Shadow pixels black (0), background white (255)."""
    return np.where(np.asarray(mask, dtype=bool), 0, 255).astype(np.uint8)


def write_pgm(path, mask: np.ndarray) -> None:
    gray = mask_to_gray(mask)
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(gray.tobytes())


def write_png(path, mask: np.ndarray) -> None:
    Image.fromarray(mask_to_gray(mask), mode="L").save(path, format="PNG")


def shadow_bbox(image: TargetImage) -> PixelRect:
    ys, xs = np.nonzero(image.mask)
    return PixelRect(int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)


def alpha_factors(images: Sequence[TargetImage]) -> list[float]:
    """Per-image ratio of canvas area to shadow bounding-box area (>= 1)."""
    out = []
    for img in images:
        bbox = shadow_bbox(img)
        out.append(img.width * img.height / bbox.area)
    return out


def alpha_factor(images: Sequence[TargetImage]) -> float:
    """Rendering-loss weight: the maximum per-image area ratio."""
    return max(alpha_factors(images))


def boundary_points(mask: np.ndarray) -> np.ndarray:
    """Centers (px, py) of shadow pixels with a non-shadow 4-neighbor.

    The image border counts as non-shadow, so shapes touching the frame edge
    still contribute boundary points there. Returned in scan order.
    """
    m = np.asarray(mask, dtype=bool)
    padded = np.pad(m, 1, mode="constant", constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    ys, xs = np.nonzero(m & ~interior)
    return np.stack([xs + 0.5, ys + 0.5], axis=1).astype(np.float64)


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def iou(a: np.ndarray, b: np.ndarray) -> float:
    a, b = _check_same_shape(a, b)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def dice(a: np.ndarray, b: np.ndarray) -> float:
    a, b = _check_same_shape(a, b)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return float(2.0 * np.logical_and(a, b).sum() / total)


def overlay_composite(target_mask: np.ndarray, render_mask: np.ndarray) -> np.ndarray:
    """RGB comparison image: agreement gray, render-only blue, target-only orange."""
    t, r = _check_same_shape(target_mask, render_mask)
    out = np.full(t.shape + (3,), 255, dtype=np.uint8)
    out[t & r] = OVERLAY_BOTH
    out[r & ~t] = OVERLAY_RENDER_ONLY
    out[t & ~r] = OVERLAY_TARGET_ONLY
    return out


def write_overlay_png(path, target_mask: np.ndarray, render_mask: np.ndarray) -> None:
    Image.fromarray(overlay_composite(target_mask, render_mask), mode="RGB").save(
        path, format="PNG"
    )
