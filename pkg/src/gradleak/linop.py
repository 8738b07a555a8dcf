"""Matricized convolution operators and the dense linear-algebra kernel.

A stride-s, zero-padding convolution is a linear map, so it has a dense
matrix form: a row-subsampled block-Toeplitz operator (loosely, the
"circulant form" of the kernel).  The weight gradient of the same layer
is linear in the layer input too, with the transpose sparsity pattern,
which gives a second operator built from the output gradient.  Both are
materialized as dense float64 matrices.

Memory note: dense on purpose.  The largest operator the stock models
produce is about 7500x5400 (~325 MB as float64), which one machine
handles comfortably, and dense storage keeps rank, SVD and least-squares
on a single LAPACK code path.  Inputs much larger than CIFAR-scale would
need a sparse rewrite.

Vectorization order is channel-major, then row-major spatial:
vec index = c*(h*w) + y*w + x.  Every module in this package assumes it.
"""

from dataclasses import dataclass

import numpy as np

from gradleak import _kernels

#: Relative tolerance used for numerical rank decisions: singular values
#: sigma > rel_tol * max(rows, cols) * sigma_max count toward the rank.
RANK_REL_TOL = float(np.finfo(np.float64).eps)


@dataclass(frozen=True)
class ConvGeometry:
    """Shape bookkeeping for one conv layer (square kernel, no padding)."""

    in_height: int
    in_width: int
    in_channels: int
    kernel_size: int
    out_channels: int
    stride: int = 1

    def __post_init__(self):
        for name in ("in_height", "in_width", "in_channels", "kernel_size",
                     "out_channels", "stride"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        if self.out_height < 1 or self.out_width < 1:
            raise ValueError(
                f"kernel {self.kernel_size} does not fit input "
                f"{self.in_height}x{self.in_width}")

    @property
    def out_height(self):
        return (self.in_height - self.kernel_size) // self.stride + 1

    @property
    def out_width(self):
        return (self.in_width - self.kernel_size) // self.stride + 1

    @property
    def input_dim(self):
        """n: length of the flattened layer input."""
        return self.in_channels * self.in_height * self.in_width

    @property
    def output_dim(self):
        """m: length of the flattened layer output."""
        return self.out_channels * self.out_height * self.out_width

    @property
    def weight_count(self):
        """Number of kernel entries, i.e. rows of the gradient operator."""
        return self.out_channels * self.in_channels * self.kernel_size ** 2


@dataclass(frozen=True)
class SvdFactors:
    """Factors of m = left @ [diag(vals); 0] @ right.T.

    ``left`` is (m, m) and ``right`` (n, n) orthonormal for a full
    decomposition; a thin one truncates ``left`` to (m, min(m, n)).
    """

    left_basis: np.ndarray
    singular_values: np.ndarray
    right_basis: np.ndarray


def weight_circulant(kernel, geom):
    """Dense matrix M with M @ vec(X) = vec(conv(X, kernel)).

    kernel has shape (out_channels, in_channels, k, k).  Rows follow the
    output vectorization order, columns the input order; each row has
    in_channels*k^2 structural nonzeros.
    """
    kernel = np.ascontiguousarray(kernel, dtype=np.float64)
    expect = (geom.out_channels, geom.in_channels, geom.kernel_size,
              geom.kernel_size)
    if kernel.shape != expect:
        raise ValueError(f"kernel shape {kernel.shape} does not match "
                         f"geometry (expected {expect})")
    out = np.zeros((geom.output_dim, geom.input_dim))
    _kernels.weight_circulant_fill(kernel, geom.stride, geom.in_height,
                                   geom.in_width, out)
    return out


def gradient_circulant(grad_z, geom):
    """Dense matrix G with G @ vec(X) = vec(dJ/dW) for the layer's true
    input X, given the output gradient dJ/dZ of the same layer.

    grad_z may be flat (length m) or shaped (out_channels, oh, ow).  G has
    one row per kernel entry and the transpose sparsity pattern of
    weight_circulant.
    """
    grad_z = np.ascontiguousarray(grad_z, dtype=np.float64)
    if grad_z.size != geom.output_dim:
        raise ValueError(f"grad_z has {grad_z.size} entries, geometry "
                         f"expects {geom.output_dim}")
    grad_z = grad_z.reshape(geom.out_channels, geom.out_height, geom.out_width)
    out = np.zeros((geom.weight_count, geom.input_dim))
    _kernels.gradient_circulant_fill(grad_z, geom.kernel_size, geom.stride,
                                     geom.in_channels, geom.in_height,
                                     geom.in_width, out)
    return out


def numerical_rank(m, rel_tolerance=RANK_REL_TOL):
    """Number of singular values above rel_tolerance * max(shape) * sigma_max."""
    m = np.asarray(m, dtype=np.float64)
    if m.size == 0:
        raise ValueError("rank of an empty matrix is undefined here")
    if not 0.0 < rel_tolerance < 1.0:
        raise ValueError(f"rel_tolerance must lie in (0, 1), got {rel_tolerance}")
    s = np.linalg.svd(m, compute_uv=False)
    if s[0] == 0.0:
        return 0
    return int(np.count_nonzero(s > rel_tolerance * max(m.shape) * s[0]))


def lstsq_min_norm(a, b, rel_tolerance=RANK_REL_TOL):
    """Minimum-Euclidean-norm x minimizing ||a @ x - b||_2.

    SVD-based, with singular values below rel_tolerance * max(shape) *
    sigma_max treated as zero (same convention as numerical_rank).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if b.shape[0] != a.shape[0]:
        raise ValueError(f"b has length {b.shape[0]}, a has {a.shape[0]} rows")
    x, _, _, _ = np.linalg.lstsq(a, b, rcond=rel_tolerance * max(a.shape))
    return x


def svd(m, thin=False):
    """SVD of m as SvdFactors; full bases by default, thin left basis on
    request (all it costs is the extra columns)."""
    m = np.asarray(m, dtype=np.float64)
    if m.size == 0:
        raise ValueError("cannot decompose an empty matrix")
    u, s, vt = np.linalg.svd(m, full_matrices=not thin)
    return SvdFactors(left_basis=u, singular_values=s, right_basis=vt.T)
