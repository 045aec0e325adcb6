"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]

Both backends are imported directly, so the comparison does not depend on
``VOXELSEG_KERNELS``.  Shapes follow the desk preset (patch 32x32x16,
batch 2) at the first and the bottleneck level of the encoder.
"""
import argparse
import timeit

import numpy as np

from voxelseg.nn import _pykernels

try:
    from voxelseg.nn import _ckernels
except ImportError:
    _ckernels = None

CASES = [
    # (name, input shape b,x,y,z,c, kernel, stride)
    ("level0 4ch", (2, 32, 32, 16, 4), 3, 1),
    ("level2 16ch", (2, 8, 8, 4, 16), 3, 1),
    ("strided", (2, 32, 32, 16, 4), 3, 2),
    ("full level0", (1, 64, 64, 32, 32), 3, 1),
]


def conv_step(mod, x, w, k, stride):
    """im2col forward GEMM plus the input-gradient col2im, as in a training step."""
    cols = mod.im2col3d(x, k, stride)
    out = cols @ w
    return mod.col2im3d(out @ w.T, k, stride, x.shape)


def bench(fn, repeat):
    fn()  # warm up
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if _ckernels is None:
        print("compiled kernels not built; run `pip install -e . --no-build-isolation` first")
        return
    rng = np.random.default_rng(0)
    print(f"{'case':<14} {'op':<9} {'python ms':>10} {'cython ms':>10} {'speedup':>8}")
    for name, shape, k, stride in CASES:
        x = rng.normal(size=shape).astype(np.float32)
        cols = _ckernels.im2col3d(x, k, stride)
        assert np.array_equal(cols, _pykernels.im2col3d(x, k, stride))
        w = rng.normal(size=(cols.shape[1], shape[-1])).astype(np.float32)
        ops = {
            "im2col": lambda m: m.im2col3d(x, k, stride),
            "col2im": lambda m: m.col2im3d(cols, k, stride, x.shape),
            "step": lambda m: conv_step(m, x, w, k, stride),
        }
        for op, call in ops.items():
            t_py = bench(lambda: call(_pykernels), args.repeat)
            t_c = bench(lambda: call(_ckernels), args.repeat)
            print(f"{name:<14} {op:<9} {t_py * 1e3:10.2f} {t_c * 1e3:10.2f} {t_py / t_c:7.1f}x")


if __name__ == "__main__":
    main()
