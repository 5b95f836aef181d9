"""Image representation, colour conversion, resampling and Otsu thresholding.

Images are plain numpy arrays:

* raster images: ``uint8`` of shape ``(H, W, 3)`` (sRGB)
* masks: ``uint8`` of shape ``(H, W)`` holding 0/1
* saliency maps: ``float64`` of shape ``(H, W)`` with values in [0, 1]
"""
from __future__ import annotations

import os
import zlib
from fractions import Fraction

import numpy as np
from PIL import Image, UnidentifiedImageError

__all__ = [
    "ImageError",
    "MissingImageError",
    "UnsupportedFormatError",
    "CorruptImageError",
    "DegenerateMapError",
    "load_image",
    "load_mask",
    "save_png",
    "save_label_png",
    "quantize",
    "rgb_to_lab",
    "resize_bilinear",
    "otsu_threshold",
]

LOSSLESS_FORMATS = {"PNG", "BMP", "TIFF"}
_GRAY_MODES = {"L", "LA", "1"}
_COLOUR_MODES = {"RGB", "RGBA", "P", "PA"}

# sRGB primaries, D65
_RGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
_WHITE = _RGB_TO_XYZ.sum(axis=1)


class ImageError(Exception):
    """Base class for image ingestion failures."""


class MissingImageError(ImageError, FileNotFoundError):
    pass


class UnsupportedFormatError(ImageError):
    pass


class CorruptImageError(ImageError):
    pass


class DegenerateMapError(ValueError):
    """Raised when a map has a single grey level and cannot be split."""


def _open(path):
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise MissingImageError(f"no such image: {path}")
    try:
        img = Image.open(path)
    except UnidentifiedImageError as exc:
        raise UnsupportedFormatError(f"unrecognised image format: {path}") from exc
    if img.format not in LOSSLESS_FORMATS:
        raise UnsupportedFormatError(f"{path}: {img.format} is not a supported lossless format")
    if img.mode not in _GRAY_MODES | _COLOUR_MODES:
        raise UnsupportedFormatError(f"{path}: pixel mode {img.mode} not supported")
    try:
        img.load()
    except (OSError, SyntaxError, zlib.error) as exc:
        raise CorruptImageError(f"{path}: {exc}") from exc
    return img


def load_image(path) -> np.ndarray:
    """Decode a lossless raster into an ``(H, W, 3)`` uint8 array.

    Grayscale files are promoted to RGB; alpha channels are dropped.
    """
    img = _open(path)
    if img.mode in _GRAY_MODES:
        gray = np.asarray(img.convert("L"), dtype=np.uint8)
        return np.repeat(gray[:, :, None], 3, axis=2)
    return np.array(img.convert("RGB"), dtype=np.uint8)


def load_mask(path, threshold: int = 128) -> np.ndarray:
    """Binarize a ground-truth raster: 1 where luminance >= threshold."""
    img = _open(path)
    lum = np.asarray(img.convert("L"), dtype=np.uint8)
    return (lum >= threshold).astype(np.uint8)


def save_png(path, array: np.ndarray) -> None:
    """Write an 8-bit grayscale ``(H, W)`` or RGB ``(H, W, 3)`` array as PNG."""
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise TypeError(f"expected uint8 pixels, got {array.dtype}")
    mode = "L" if array.ndim == 2 else "RGB"
    Image.fromarray(array, mode=mode).save(os.fspath(path), format="PNG")


def save_label_png(path, labels: np.ndarray) -> None:
    """Write integer labels (< 65536) as a 16-bit grayscale PNG."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() > 0xFFFF):
        raise ValueError("labels must fit in 16 bits")
    Image.fromarray(labels.astype(np.uint16)).save(os.fspath(path), format="PNG")


def quantize(smap: np.ndarray) -> np.ndarray:
    """Map scores in [0, 1] to integer levels ``round(255 * s)`` (half up)."""
    return np.floor(np.asarray(smap, dtype=np.float64) * 255.0 + 0.5).astype(np.int64)


def rgb_to_lab(img: np.ndarray) -> np.ndarray:
    """Convert sRGB (uint8, D65) to CIE L*a*b*; returns float64 ``(H, W, 3)``."""
    c = np.asarray(img, dtype=np.float64) / 255.0
    lin = np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)
    xyz = lin @ _RGB_TO_XYZ.T / _WHITE
    eps = (6.0 / 29.0) ** 3
    f = np.where(xyz > eps, np.cbrt(xyz), xyz / (3 * (6.0 / 29.0) ** 2) + 4.0 / 29.0)
    lab = np.empty_like(f)
    lab[..., 0] = 116.0 * f[..., 1] - 16.0
    lab[..., 1] = 500.0 * (f[..., 0] - f[..., 1])
    lab[..., 2] = 200.0 * (f[..., 1] - f[..., 2])
    # black maps to L = -0 + rounding noise otherwise
    np.clip(lab[..., 0], 0.0, 100.0, out=lab[..., 0])
    return lab


def _sample_axis(n_in: int, n_out: int):
    # pixel-centre alignment, clamped at the edges
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, pos - lo


def resize_bilinear(img: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Bilinear resampling of a ``(H, W)`` or ``(H, W, C)`` array to float64."""
    if out_w < 1 or out_h < 1:
        raise ValueError(f"target size must be positive, got {out_w}x{out_h}")
    src = np.asarray(img, dtype=np.float64)
    h, w = src.shape[:2]
    if (h, w) == (out_h, out_w):
        return src.copy()
    y0, y1, fy = _sample_axis(h, out_h)
    x0, x1, fx = _sample_axis(w, out_w)
    if src.ndim == 3:
        fy = fy[:, None, None]
        fx = fx[None, :, None]
    else:
        fy = fy[:, None]
        fx = fx[None, :]
    top = src[y0][:, x0] * (1 - fx) + src[y0][:, x1] * fx
    bottom = src[y1][:, x0] * (1 - fx) + src[y1][:, x1] * fx
    return top * (1 - fy) + bottom * fy


def otsu_threshold(smap: np.ndarray) -> int:
    """Otsu threshold on the 256-level histogram of ``round(255 * s)``.

    Pixels with level ``>= tau`` form the upper class. The returned ``tau`` lies
    in 1..255 and maximizes between-class variance; ties go to the smallest.
    Comparisons are done in exact rational arithmetic.
    """
    q = quantize(smap).ravel()
    hist = np.bincount(q, minlength=256).astype(np.int64)
    if np.count_nonzero(hist) < 2:
        raise DegenerateMapError("saliency map has a single grey level")
    levels = np.arange(256, dtype=np.int64)
    n_total = int(hist.sum())
    s_total = int((hist * levels).sum())
    # lower class = levels < tau
    n_low = np.concatenate([[0], np.cumsum(hist)[:-1]])
    s_low = np.concatenate([[0], np.cumsum(hist * levels)[:-1]])

    best_tau, best = 1, Fraction(-1)
    for tau in range(1, 256):
        n0 = int(n_low[tau])
        n1 = n_total - n0
        if n0 == 0 or n1 == 0:
            score = Fraction(0)
        else:
            s0 = int(s_low[tau])
            s1 = s_total - s0
            # n0*n1*(mu0-mu1)^2, up to the constant 1/N^2
            score = Fraction((n1 * s0 - n0 * s1) ** 2, n0 * n1)
        if score > best:
            best_tau, best = tau, score
    return best_tau
