"""Toy datasets: rendered Gaussian blobs and a directory-of-images loader."""
from __future__ import annotations

from pathlib import Path
from typing import List, Tuple

import numpy as np
from PIL import Image

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".ppm", ".pgm", ".tif", ".tiff"}


class DatasetError(ValueError):
    pass


def synthetic_blobs(n_per_class: int, classes: int = 10, size: int = 32, seed: int = 0,
                    jitter: float = 0.06, noise: float = 0.05) -> Tuple[np.ndarray, np.ndarray]:
    """Each class is a colored Gaussian blob at a class-specific position and width.

    Samples jitter the position and add pixel noise. Returns images (N, 3, size, size)
    in float32 and integer labels, in class-interleaved order.
    """
    if n_per_class < 1 or classes < 1:
        raise DatasetError("dataset would be empty")
    proto = np.random.default_rng(12345 + classes)
    centers = proto.uniform(0.25, 0.75, (classes, 2))
    colors = proto.uniform(0.2, 1.0, (classes, 3))
    widths = proto.uniform(0.08, 0.2, classes)
    rng = np.random.default_rng(seed)
    grid = (np.arange(size) + 0.5) / size
    yy, xx = np.meshgrid(grid, grid, indexing="ij")
    n = n_per_class * classes
    labels = np.tile(np.arange(classes), n_per_class)
    c = centers[labels] + rng.normal(0, jitter, (n, 2))
    d2 = (yy[None] - c[:, 0, None, None]) ** 2 + (xx[None] - c[:, 1, None, None]) ** 2
    blob = np.exp(-d2 / (2 * widths[labels, None, None] ** 2))
    images = blob[:, None] * colors[labels][:, :, None, None]
    images += rng.normal(0, noise, images.shape)
    return images.astype(np.float32), labels.astype(np.int64)


def load_image(path, size: Tuple[int, int]) -> Tuple[np.ndarray, bool]:
    """Decode one image as (3, H, W) in [0, 1]; nearest-neighbour resize when needed.

    The flag reports whether a resize happened.
    """
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            resized = im.size != (size[1], size[0])
            if resized:
                im = im.resize((size[1], size[0]), Image.NEAREST)
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise DatasetError(f"cannot decode image {path}: {exc}") from None
    return arr.transpose(2, 0, 1).copy(), resized


def load_image_dir(root, size: Tuple[int, int]) -> Tuple[np.ndarray, np.ndarray, List[str]]:
    """Read ``root/<class>/<image>``; classes are the sorted subdirectory names."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"{root} is not a directory")
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    xs, ys = [], []
    for label, name in enumerate(classes):
        for f in sorted((root / name).iterdir()):
            if f.suffix.lower() in IMAGE_SUFFIXES:
                xs.append(load_image(f, size)[0])
                ys.append(label)
    if not xs:
        raise DatasetError(f"no images found under {root}")
    return np.stack(xs), np.asarray(ys, dtype=np.int64), classes


def blob_heatmaps(n: int, keypoints: int, hw: Tuple[int, int], seed: int = 0) -> np.ndarray:
    """Random single-peak Gaussian target maps for keypoint smoke training."""
    rng = np.random.default_rng(seed)
    h, w = hw
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    cy = rng.uniform(0, h, (n, keypoints, 1, 1))
    cx = rng.uniform(0, w, (n, keypoints, 1, 1))
    return np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / 2.0).astype(np.float32)
