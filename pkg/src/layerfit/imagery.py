"""Raster conventions and file I/O for images, masks, and flow fields.

Array conventions used across the package:

- image: float64 array of shape (H, W, 3), intensities in [0, 1]
- mask:  uint8 array of shape (H, W), values in {0, 1}
- flow:  float64 array of shape (H, W, 2), (u, v) displacements in pixels,
         u along x (columns), v along y (rows)
- alpha: float64 array of shape (H, W)

Pixel (x, y) refers to the pixel center; the top-left pixel is (0, 0).
Arrays are treated as immutable once constructed; operations return new
arrays instead of mutating inputs.

On disk: images are 8-bit RGB PNG (binary PPM accepted on load), masks are
8-bit grayscale PNG with 0/255 coding, and flow fields use the Middlebury
float container (magic float32 202021.25, then int32 width, int32 height,
then row-major interleaved u,v float32, all little-endian).
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from PIL import UnidentifiedImageError

FLOW_MAGIC = 202021.25


class FileFormatError(ValueError):
    """Raised for unreadable, truncated, or unsupported raster files."""


def validate_image(img: np.ndarray) -> np.ndarray:
    """Check image conventions and return the array as float64."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"image must have shape (H, W, 3), got {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"image has zero dimension: {img.shape}")
    if not np.isfinite(img).all():
        raise ValueError("image contains non-finite values")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValueError("image intensities must lie in [0, 1]")
    return img


def validate_mask(mask: np.ndarray) -> np.ndarray:
    """Check mask conventions and return the array as uint8 {0, 1}."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"mask must have shape (H, W), got {mask.shape}")
    vals = np.unique(mask)
    if not np.isin(vals, (0, 1)).all():
        raise ValueError("mask values must be 0 or 1")
    return mask.astype(np.uint8)


def validate_flow(flow: np.ndarray) -> np.ndarray:
    """Check flow conventions and return the array as float64."""
    flow = np.asarray(flow, dtype=np.float64)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValueError(f"flow must have shape (H, W, 2), got {flow.shape}")
    if not np.isfinite(flow).all():
        raise ValueError("flow contains non-finite values")
    return flow


def load_image(path) -> np.ndarray:
    """Load an 8-bit RGB PNG or binary PPM as a float64 image in [0, 1]."""
    path = Path(path)
    try:
        with PILImage.open(path) as im:
            im.load()
            if im.mode != "RGB":
                raise FileFormatError(
                    f"{path}: unsupported mode {im.mode!r}, expected 8-bit RGB"
                )
            arr = np.asarray(im, dtype=np.uint8)
    except FileNotFoundError:
        raise
    except FileFormatError:
        raise
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        raise FileFormatError(f"{path}: cannot decode image ({exc})") from exc
    if arr.ndim != 3 or arr.shape[0] == 0 or arr.shape[1] == 0:
        raise FileFormatError(f"{path}: zero-sized or malformed image")
    return arr.astype(np.float64) / 255.0


def save_image(img: np.ndarray, path) -> None:
    """Write an image as 8-bit RGB PNG, quantizing by round(v * 255)."""
    img = validate_image(img)
    data = np.rint(img * 255.0).astype(np.uint8)
    PILImage.fromarray(data, mode="RGB").save(Path(path), format="PNG")


def load_mask(path) -> np.ndarray:
    """Load an 8-bit grayscale PNG as a {0, 1} mask (v > 127 maps to 1)."""
    path = Path(path)
    try:
        with PILImage.open(path) as im:
            im.load()
            if im.mode != "L":
                raise FileFormatError(
                    f"{path}: mask must be 8-bit grayscale, got mode {im.mode!r}"
                )
            arr = np.asarray(im, dtype=np.uint8)
    except FileNotFoundError:
        raise
    except FileFormatError:
        raise
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        raise FileFormatError(f"{path}: cannot decode mask ({exc})") from exc
    if arr.ndim != 2 or arr.size == 0:
        raise FileFormatError(f"{path}: zero-sized or malformed mask")
    return (arr > 127).astype(np.uint8)


def save_mask(mask: np.ndarray, path) -> None:
    """Write a {0, 1} mask as an 8-bit grayscale PNG with 0/255 coding."""
    mask = validate_mask(mask)
    PILImage.fromarray(mask * np.uint8(255), mode="L").save(Path(path), format="PNG")


def load_flow(path) -> np.ndarray:
    """Read a Middlebury-format flow file as a float64 (H, W, 2) array."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 12:
        raise FileFormatError(f"{path}: truncated flow header")
    magic = struct.unpack("<f", raw[0:4])[0]
    if magic != FLOW_MAGIC:
        raise FileFormatError(f"{path}: bad magic {magic!r}")
    width, height = struct.unpack("<ii", raw[4:12])
    if width <= 0 or height <= 0:
        raise FileFormatError(f"{path}: invalid dimensions {width}x{height}")
    expected = 12 + 8 * width * height
    if len(raw) < expected:
        raise FileFormatError(
            f"{path}: truncated payload ({len(raw)} bytes, expected {expected})"
        )
    data = np.frombuffer(raw, dtype="<f4", count=2 * width * height, offset=12)
    flow = data.reshape(height, width, 2).astype(np.float64)
    return validate_flow(flow)


def save_flow(flow: np.ndarray, path) -> None:
    """Write a flow field in the Middlebury float container (little-endian)."""
    flow = validate_flow(flow)
    height, width = flow.shape[:2]
    with open(Path(path), "wb") as fh:
        fh.write(struct.pack("<f", FLOW_MAGIC))
        fh.write(struct.pack("<ii", width, height))
        fh.write(flow.astype("<f4").tobytes())


def bilinear_resize(src: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize a (H, W) or (H, W, C) array with align-corners bilinear sampling.

    Output values never overshoot the input range, which makes this safe for
    building bounded noise fields.
    """
    src = np.asarray(src, dtype=np.float64)
    squeeze = src.ndim == 2
    if squeeze:
        src = src[:, :, None]
    h, w = src.shape[:2]
    ys = np.linspace(0.0, h - 1.0, out_h) if h > 1 else np.zeros(out_h)
    xs = np.linspace(0.0, w - 1.0, out_w) if w > 1 else np.zeros(out_w)
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    top = src[y0[:, None], x0[None, :]] * (1 - fx) + src[y0[:, None], x1[None, :]] * fx
    bot = src[y1[:, None], x0[None, :]] * (1 - fx) + src[y1[:, None], x1[None, :]] * fx
    out = top * (1 - fy) + bot * fy
    return out[:, :, 0] if squeeze else out
