"""Time the compiled kernels against the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--repeat N]

Shapes follow the default desk geometry: 16 x 13 x 13 feature maps cut into
length-8 chunks, a 64-block codebook, batches of 16 56px images.
"""
import argparse
import timeit

import numpy as np

from crumb import kernels


def cases(rng):
    chunks = rng.standard_normal((16 * 2 * 13 * 13, 8)).astype(np.float32)
    blocks = rng.standard_normal((64, 8)).astype(np.float32)
    grad_rows = rng.standard_normal((len(chunks), 8)).astype(np.float32)
    idx = rng.integers(0, 64, len(chunks))
    x = rng.standard_normal((16, 3, 56, 56)).astype(np.float32)
    cols = None

    def col_args(impl):
        nonlocal cols
        if cols is None:
            cols = impl.im2col(x, 3, 3, 1, 1)
        return cols

    return {
        "nearest_blocks": lambda impl: impl.nearest_blocks(chunks, blocks),
        "scatter_add_rows": lambda impl: impl.scatter_add_rows(np.zeros((64, 8), np.float32), idx, grad_rows),
        "im2col": lambda impl: impl.im2col(x, 3, 3, 1, 1),
        "col2im": lambda impl: impl.col2im(col_args(impl), x.shape, 3, 3, 1, 1),
    }


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)
    impls = kernels.backends()
    print(f"backends: {', '.join(sorted(impls))} (selected: {kernels.BACKEND})")
    print(f"{'kernel':<18}" + "".join(f"{name + ' ms':>14}" for name in sorted(impls)) + f"{'speedup':>10}")
    for name, fn in cases(np.random.default_rng(0)).items():
        times = {}
        for bname, impl in sorted(impls.items()):
            fn(impl)  # warm up
            times[bname] = min(timeit.repeat(lambda: fn(impl), number=3, repeat=args.repeat)) / 3 * 1e3
        speed = f"{times['python'] / times['cython']:.2f}x" if "cython" in times else "-"
        print(f"{name:<18}" + "".join(f"{times[b]:>14.3f}" for b in sorted(times)) + f"{speed:>10}")


if __name__ == "__main__":
    main()
