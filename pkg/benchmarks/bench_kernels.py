"""Compare the compiled and pure-numpy kernel backends.

    python benchmarks/bench_kernels.py [--repeat N]

Times each hot kernel on zoo-sized inputs, then one end-to-end source-model
gradient pass with each backend swapped in, and checks both give identical
results.
"""
import argparse
import timeit

import numpy as np

from gnplab import _kernels_py, kernels, zoo

try:
    from gnplab import _kernels as _compiled
except ImportError:
    _compiled = None


def _cases(rng):
    x = rng.random((100, 8, 28, 28))
    cols = _kernels_py.im2col(x, 3, 1)
    pooled = rng.standard_normal((100, 8, 14, 14))
    g = rng.standard_normal((100, 1, 28, 28))
    x0 = rng.random((100, 1, 28, 28))
    return {
        "im2col 100x8x28x28 k3": lambda k: k.im2col(x, 3, 1),
        "col2im 100x8x28x28 k3": lambda k: k.col2im(cols, 100, 8, 28, 28, 3, 1),
        "avgpool2 forward": lambda k: k.avgpool2_forward(x),
        "avgpool2 backward": lambda k: k.avgpool2_backward(pooled),
        "sign_step_project": lambda k: k.sign_step_project(x0, g, x0, 0.01, 0.03),
    }


def _with_backend(impl, fn):
    saved = {n: getattr(kernels, n) for n in kernels.__all__ if n != "BACKEND"}
    try:
        for n in saved:
            setattr(kernels, n, getattr(impl, n))
        return fn()
    finally:
        for n, f in saved.items():
            setattr(kernels, n, f)


def _best(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if _compiled is None:
        print("compiled extension not built; only the Python backend is available")
        return
    rng = np.random.default_rng(0)
    print(f"{'kernel':<28}{'python ms':>12}{'cython ms':>12}{'speedup':>10}  identical")
    for name, fn in _cases(rng).items():
        tp = _best(lambda: fn(_kernels_py), args.repeat)
        tc = _best(lambda: fn(_compiled), args.repeat)
        same = np.array_equal(fn(_kernels_py), fn(_compiled))
        print(f"{name:<28}{tp * 1e3:>12.2f}{tc * 1e3:>12.2f}{tp / tc:>9.1f}x  {same}")

    model = zoo.build(zoo.default_zoo_specs()[0], 0)
    x, y = rng.random((100, 1, 28, 28)), rng.integers(0, 4, 100)

    def step():
        return model.loss_and_input_gradient(x, y, reduction="sum").input_grad

    tp = _with_backend(_kernels_py, lambda: _best(step, args.repeat))
    tc = _with_backend(_compiled, lambda: _best(step, args.repeat))
    same = np.array_equal(_with_backend(_kernels_py, step), _with_backend(_compiled, step))
    print(f"{'cnn-a input gradient x100':<28}{tp * 1e3:>12.2f}{tc * 1e3:>12.2f}{tp / tc:>9.1f}x  {same}")


if __name__ == "__main__":
    main()
