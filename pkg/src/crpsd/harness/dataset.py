"""Pairing images with ground truths (and optional fixation lists) by stem."""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".bmp", ".tif", ".tiff")
FIXATION_SUFFIXES = (".txt", ".csv")


class ManifestError(ValueError):
    pass


@dataclass
class Entry:
    stem: str
    image: str
    mask: str | None = None
    fixations: str | None = None


@dataclass
class DatasetManifest:
    name: str
    entries: list
    warnings: list = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


def _by_stem(directory, suffixes):
    if not os.path.isdir(directory):
        raise ManifestError(f"not a directory: {directory}")
    out = {}
    for fname in sorted(os.listdir(directory)):
        stem, ext = os.path.splitext(fname)
        if ext.lower() not in suffixes:
            continue
        if stem in out:
            raise ManifestError(f"duplicate stem {stem!r} in {directory}")
        out[stem] = os.path.join(directory, fname)
    return out


def list_images(image_dir, name="dataset") -> DatasetManifest:
    """Images only; prediction never looks at ground truth."""
    images = _by_stem(image_dir, IMAGE_SUFFIXES)
    if not images:
        raise ManifestError(f"no images in {image_dir}")
    return DatasetManifest(name, [Entry(s, images[s]) for s in sorted(images)])


def ingest(image_dir, mask_dir, fixation_dir=None, name="dataset") -> DatasetManifest:
    """Match images and masks by (case-sensitive) file stem, in lexicographic order."""
    images = _by_stem(image_dir, IMAGE_SUFFIXES)
    masks = _by_stem(mask_dir, IMAGE_SUFFIXES)
    fixes = _by_stem(fixation_dir, FIXATION_SUFFIXES) if fixation_dir else {}
    common = sorted(images.keys() & masks.keys())
    if not common:
        raise ManifestError("no image has a matching ground truth")
    warnings = []
    for stem in sorted(images.keys() - masks.keys()):
        warnings.append(f"image {stem} has no ground truth")
    for stem in sorted(masks.keys() - images.keys()):
        warnings.append(f"ground truth {stem} has no image")
    for w in warnings:
        log.warning(w)
    entries = [Entry(s, images[s], masks[s], fixes.get(s)) for s in common]
    return DatasetManifest(name, entries, warnings)


def load_fixations(path) -> np.ndarray:
    """Read ``x y`` (or ``x,y``) integer pairs, one per line; ``#`` starts a comment."""
    pts = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            x, y = line.replace(",", " ").split()[:2]
            pts.append((int(round(float(x))), int(round(float(y)))))
    return np.array(pts, dtype=np.int64).reshape(-1, 2)
