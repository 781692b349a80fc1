"""Compare the compiled kernels against the NumPy fallback.

Two measurements:

* each kernel on a few representative shapes, both backends in-process;
* one epoch of conv-net training end to end, once per backend, in a
  subprocess so that ``SERVERLESS_KD_KERNELS`` picks the implementation.

Usage: ``python3 benchmarks/bench_kernels.py [--repeat N] [--json out.json]``
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from serverless_kd.nn import kernels

# (batch, height, width, channels, kernel or pool size, stride)
SHAPES = [(32, 8, 8, 1, 3, 1), (32, 8, 8, 8, 2, 2), (64, 16, 16, 8, 3, 1), (16, 28, 28, 4, 3, 2)]

EPOCH_SNIPPET = """
import time, numpy as np
from serverless_kd.model_dsl import parse_model_spec
from serverless_kd.nn import BACKEND, Batch, build_network, train_step
from serverless_kd.nn.losses import LossKind
spec = '''
layers:
  - {name: x, type: input, params: {shape: [16, 16, 1]}}
  - {name: c1, type: conv2d, params: {filters: 8, kernel_size: 3}, inputs: auto}
  - {name: r1, type: relu, inputs: auto}
  - {name: p1, type: maxpool2d, params: {pool_size: 2}, inputs: auto}
  - {name: c2, type: conv2d, params: {filters: 16, kernel_size: 3}, inputs: auto}
  - {name: r2, type: relu, inputs: auto}
  - {name: p2, type: maxpool2d, params: {pool_size: 2}, inputs: auto}
  - {name: f, type: flatten, inputs: auto}
  - {name: out, type: dense, params: {units: 10}, inputs: auto}
'''
net = build_network(parse_model_spec(spec), 0, "adam")
rng = np.random.default_rng(0)
x, y = rng.normal(size=(1024, 16, 16, 1)), rng.integers(0, 10, size=1024)
t0 = time.perf_counter()
for i in range(0, 1024, 32):
    train_step(net, Batch(x[i:i + 32], y[i:i + 32]), LossKind("cross_entropy"), 0.001)
print(BACKEND, time.perf_counter() - t0)
"""


def kernel_cases(shape):
    n, h, w, c, k, s = shape
    ho, wo = (h - k) // s + 1, (w - k) // s + 1
    rng = np.random.default_rng(0)
    x = rng.normal(size=(n, h, w, c))
    cols = np.ascontiguousarray(kernels.python_kernels.im2col(x, k, s, ho, wo))
    dout = rng.normal(size=(n, ho, wo, c))

    def cases(mod):
        _, arg = mod.maxpool_forward(x, k, s, ho, wo)
        return {
            "im2col": lambda: mod.im2col(x, k, s, ho, wo),
            "col2im": lambda: mod.col2im(cols, n, h, w, c, k, s, ho, wo),
            "maxpool_forward": lambda: mod.maxpool_forward(x, k, s, ho, wo),
            "maxpool_backward": lambda: mod.maxpool_backward(dout, arg, h, w),
        }

    return cases


def best_of(fn, repeat):
    number = 5
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def epoch_seconds(backend):
    env = dict(os.environ, SERVERLESS_KD_KERNELS=backend)
    out = subprocess.run([sys.executable, "-c", EPOCH_SNIPPET], env=env, capture_output=True, text=True, check=True)
    name, seconds = out.stdout.split()
    return name, float(seconds)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--json", help="also write the results here")
    args = parser.parse_args(argv)

    if kernels.compiled_kernels is None:
        print("compiled kernels are not built; run `pip install -e . --no-build-isolation` first")
        return 1

    rows = []
    print(f"{'kernel':<18}{'shape (n,h,w,c,k,s)':<24}{'python ms':>11}{'cython ms':>11}{'speedup':>9}")
    for shape in SHAPES:
        cases = kernel_cases(shape)
        py_cases, cy_cases = cases(kernels.python_kernels), cases(kernels.compiled_kernels)
        for name in py_cases:
            t_py = best_of(py_cases[name], args.repeat) * 1e3
            t_cy = best_of(cy_cases[name], args.repeat) * 1e3
            rows.append({"kernel": name, "shape": shape, "python_ms": t_py, "cython_ms": t_cy})
            print(f"{name:<18}{str(shape):<24}{t_py:>11.3f}{t_cy:>11.3f}{t_py / t_cy:>8.1f}x")

    epochs = {}
    for backend in ("python", "cython"):
        name, seconds = epoch_seconds(backend)
        epochs[name] = seconds
    print(f"\ntraining epoch (1024 samples, 16x16 two-conv net): python {epochs['python']:.2f}s, "
          f"cython {epochs['cython']:.2f}s, speedup {epochs['python'] / epochs['cython']:.2f}x")

    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"kernels": rows, "epoch_seconds": epochs}, fh, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
