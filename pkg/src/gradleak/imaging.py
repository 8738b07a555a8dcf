"""Image ingestion, post-processing, and reconstruction quality scores.

Images are plain (channels, height, width) float64 arrays with values
in [0, 1], flattened in the same channel-major order the linear
operators use.  No wrapper class; every function below takes and
returns bare arrays.

Reporting convention (deliberate, nonstandard): MSE is computed on the
[0, 1] value scale while PSNR uses peak 255, i.e.

    psnr_db = 10 * log10(255^2 / mse)

A reconstruction with per-pixel error around one gray level (1/255)
therefore scores mse ~ 1.5e-5 and psnr ~ 96 dB.  Both numbers are
reported together so the convention is always recoverable.
"""

import math
from dataclasses import dataclass

import numpy as np

from gradleak import _kernels

_RECORD_BYTES = 1 + 3 * 32 * 32  # CIFAR-10 binary batch record


@dataclass(frozen=True)
class QualityScore:
    mse: float
    psnr_db: float

    def as_dict(self):
        # infinities (mse == 0) are not valid strict JSON; use null
        psnr = self.psnr_db if math.isfinite(self.psnr_db) else None
        return {"mse": self.mse, "psnr_db": psnr}


def load_cifar10(path, index):
    """Read record `index` of a CIFAR-10 binary batch file.

    Records are 3073 bytes: one label byte, then 3072 pixel bytes in
    channel-planar R,G,B order, each plane row-major 32x32.  Returns
    (image scaled to [0,1], label).
    """
    with open(path, "rb") as fh:
        fh.seek(index * _RECORD_BYTES)
        record = fh.read(_RECORD_BYTES)
    if len(record) != _RECORD_BYTES:
        raise ValueError(f"record {index} of {path} is truncated "
                         f"({len(record)} of {_RECORD_BYTES} bytes)")
    label = record[0]
    if label > 9:
        raise ValueError(f"record {index} has label byte {label}, "
                         "expected 0..9")
    pixels = np.frombuffer(record, dtype=np.uint8, offset=1)
    return pixels.reshape(3, 32, 32).astype(np.float64) / 255.0, int(label)


def save_image(path, image):
    """Write a [0,1] image as binary PPM (P6, maxval 255).

    Quantization is round-half-up, so 0.5 becomes byte 128; values
    outside [0,1] are clipped first.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"PPM wants a (3, h, w) image, got {image.shape}")
    bytes_ = np.floor(np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    _, h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        # PPM interleaves channels per pixel; our layout is planar
        fh.write(bytes_.transpose(1, 2, 0).tobytes())


def load_image(path):
    """Read a binary PPM back into a [0,1] (3, h, w) array."""
    with open(path, "rb") as fh:
        data = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":  # comment runs to end of line
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PPM header")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace byte after maxval
    if tokens[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM (magic {tokens[0]!r})")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    raw = data[pos:pos + 3 * w * h]
    if len(raw) != 3 * w * h:
        raise ValueError(f"{path}: pixel data truncated")
    pixels = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3)
    return pixels.transpose(2, 0, 1).astype(np.float64) / 255.0


def tv_denoise(image, weight=0.15, max_iters=200, eps=2e-4):
    """Total-variation denoising, channel by channel.

    Solves the ROF model (data fidelity + weight * TV) with Chambolle's
    dual projection iteration, step 0.25; stops early once the energy
    change per sweep drops below eps relative to the start.  weight 0
    returns the input unchanged.
    """
    image = np.asarray(image, dtype=np.float64)
    if not np.all(np.isfinite(image)):
        raise ValueError("cannot denoise non-finite values")
    if weight < 0:
        raise ValueError("weight must be >= 0")
    if weight == 0:
        return image.copy()
    flat_in = image.ndim == 2
    channels = image[None] if flat_in else image
    out = np.stack([
        _kernels.tv_chambolle(np.ascontiguousarray(c), weight, eps, max_iters)
        for c in channels
    ])
    return out[0] if flat_in else out


def total_variation(image):
    """Isotropic TV with one-sided differences (the denoiser's own notion)."""
    image = np.asarray(image, dtype=np.float64)
    channels = image[None] if image.ndim == 2 else image
    tv = 0.0
    for c in channels:
        gx = np.zeros_like(c)
        gy = np.zeros_like(c)
        gx[:-1, :] = np.diff(c, axis=0)
        gy[:, :-1] = np.diff(c, axis=1)
        tv += float(np.sqrt(gx * gx + gy * gy).sum())
    return tv


def quality(reference, candidate):
    """MSE / PSNR pair under the package reporting convention."""
    reference = np.asarray(reference, dtype=np.float64)
    candidate = np.asarray(candidate, dtype=np.float64)
    if reference.shape != candidate.shape:
        raise ValueError(f"shape mismatch: {reference.shape} vs "
                         f"{candidate.shape}")
    mse = float(np.mean((reference - candidate) ** 2))
    psnr = math.inf if mse == 0 else 10.0 * math.log10(255.0 ** 2 / mse)
    return QualityScore(mse=mse, psnr_db=psnr)
