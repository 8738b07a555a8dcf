"""Compare the compiled kernels against the pure-python fallback.

Run:  python3 benchmarks/bench_kernels.py
"""

import time

import numpy as np

from gradleak import _core, _pure
from gradleak.linop import ConvGeometry


def timed(fn, *args, repeat=5):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def bench_weight_circulant(geom, kernel):
    rows = []
    for name, mod in (("compiled", _core), ("pure", _pure)):
        out = np.zeros((geom.output_dim, geom.input_dim))
        rows.append((name, timed(mod.weight_circulant_fill, kernel,
                                 geom.stride, geom.in_height, geom.in_width,
                                 out)))
    return rows


def bench_gradient_circulant(geom, grad_z):
    rows = []
    for name, mod in (("compiled", _core), ("pure", _pure)):
        out = np.zeros((geom.weight_count, geom.input_dim))
        rows.append((name, timed(mod.gradient_circulant_fill, grad_z,
                                 geom.kernel_size, geom.stride,
                                 geom.in_channels, geom.in_height,
                                 geom.in_width, out)))
    return rows


def bench_tv(image):
    return [(name, timed(mod.tv_chambolle, image, 0.15, 2e-4, 200, repeat=3))
            for name, mod in (("compiled", _core), ("pure", _pure))]


def report(title, rows):
    (_, fast), (_, slow) = rows
    speedup = slow / fast if fast > 0 else float("inf")
    print(f"{title:<42} compiled {fast * 1e3:9.2f} ms   "
          f"pure {slow * 1e3:9.2f} ms   x{speedup:.1f}")


def main():
    rng = np.random.default_rng(0)

    # stock first-layer geometry: 3x32x32 input, 6 channels of 3x3
    g1 = ConvGeometry(32, 32, 3, 3, 6)
    kernel = rng.normal(size=(6, 3, 3, 3))
    report("weight_circulant 3x32x32 k3 ch6",
           bench_weight_circulant(g1, kernel))
    grad_z = rng.normal(size=(6, g1.out_height, g1.out_width))
    report("gradient_circulant 3x32x32 k3 ch6",
           bench_gradient_circulant(g1, grad_z))

    # widest stock interior layer: 6x30x30 input, 9 channels of 3x3
    g2 = ConvGeometry(30, 30, 6, 3, 9)
    kernel2 = rng.normal(size=(9, 6, 3, 3))
    report("weight_circulant 6x30x30 k3 ch9",
           bench_weight_circulant(g2, kernel2))
    grad_z2 = rng.normal(size=(9, g2.out_height, g2.out_width))
    report("gradient_circulant 6x30x30 k3 ch9",
           bench_gradient_circulant(g2, grad_z2))

    report("tv_chambolle 32x32 (200 iters)",
           bench_tv(rng.uniform(size=(32, 32))))
    report("tv_chambolle 256x256 (200 iters)",
           bench_tv(rng.uniform(size=(256, 256))))


if __name__ == "__main__":
    main()
