"""Synthetic images with known salient objects, for smoke runs and tests."""
from __future__ import annotations

import numpy as np


def quadrant_image(h=64, w=64, colors=None) -> np.ndarray:
    if colors is None:
        colors = [(220, 40, 40), (40, 200, 60), (30, 40, 210), (240, 230, 50)]
    img = np.zeros((h, w, 3), dtype=np.uint8)
    img[: h // 2, : w // 2] = colors[0]
    img[: h // 2, w // 2 :] = colors[1]
    img[h // 2 :, : w // 2] = colors[2]
    img[h // 2 :, w // 2 :] = colors[3]
    return img


def quadrant_masks(h=64, w=64):
    masks = []
    for rows in (slice(0, h // 2), slice(h // 2, h)):
        for cols in (slice(0, w // 2), slice(w // 2, w)):
            m = np.zeros((h, w), dtype=bool)
            m[rows, cols] = True
            masks.append(m)
    return masks


def toy_sample(rng, size=64, noise=8.0):
    """One image with an ellipse or box object on a two-tone noisy background.

    Returns ``(image uint8 (H, W, 3), mask uint8 (H, W))``.
    """
    h = w = size
    yy, xx = np.mgrid[:h, :w]
    bg = rng.uniform(40, 200, size=(2, 3))
    split = rng.uniform(0.3, 0.7) * w
    img = np.where((xx < split)[..., None], bg[0], bg[1]).astype(np.float64)

    cy, cx = rng.uniform(0.3, 0.7, size=2) * (h, w)
    ry, rx = rng.uniform(0.15, 0.3, size=2) * (h, w)
    if rng.random() < 0.5:
        mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    else:
        mask = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
    fg = rng.uniform(0, 255, size=3)
    # keep the object distinguishable from both background tones
    while min(np.abs(fg - bg[0]).sum(), np.abs(fg - bg[1]).sum()) < 150:
        fg = rng.uniform(0, 255, size=3)
    img[mask] = fg
    img += rng.normal(0.0, noise, size=img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8), mask.astype(np.uint8)


def toy_dataset(count=5, size=64, seed=0, noise=8.0):
    rng = np.random.default_rng(seed)
    return [toy_sample(rng, size, noise) for _ in range(count)]
