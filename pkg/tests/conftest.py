"""Shared helpers: synthetic probe images and dataset files.

There is no bundled dataset; tests synthesize piecewise-smooth images
(block noise, blurred, per-channel normalized to [0,1]) that behave like
natural photos for the purposes of the solvers -- reconstruction
quality on them matches what real photos give.
"""

import numpy as np
import pytest


def smooth_image(seed, shape=(3, 32, 32)):
    """Deterministic piecewise-smooth image with values spanning [0, 1]."""
    c, h, w = shape
    rng = np.random.default_rng(seed)
    base = rng.uniform(0.0, 1.0, size=(c, max(1, h // 4), max(1, w // 4)))
    img = np.kron(base, np.ones((4, 4)))[:, :h, :w]
    for _ in range(2):
        img = (img + np.roll(img, 1, 1) + np.roll(img, -1, 1)
               + np.roll(img, 1, 2) + np.roll(img, -1, 2)) / 5.0
    lo = img.min(axis=(1, 2), keepdims=True)
    hi = img.max(axis=(1, 2), keepdims=True)
    return (img - lo) / np.where(hi > lo, hi - lo, 1.0)


def write_batch(path, images, labels):
    """Write images/labels as a CIFAR-10 style binary batch file."""
    with open(path, "wb") as fh:
        for img, label in zip(images, labels):
            quantized = np.floor(np.clip(img, 0, 1) * 255.0 + 0.5)
            fh.write(bytes([label]))
            fh.write(quantized.astype(np.uint8).tobytes())


@pytest.fixture
def batch_file(tmp_path):
    """A four-record synthetic batch file; returns (path, images, labels)."""
    images = [smooth_image(100 + i) for i in range(4)]
    labels = [3, 1, 9, 0]
    path = tmp_path / "batch.bin"
    write_batch(path, images, labels)
    # images as the loader will see them (quantized to bytes)
    quantized = [np.floor(np.clip(i, 0, 1) * 255 + 0.5) / 255.0
                 for i in images]
    return str(path), quantized, labels
