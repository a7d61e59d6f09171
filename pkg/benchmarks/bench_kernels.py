"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--rows 10000] [--repeat 5]

The end-to-end rows run a full loss/gradient evaluation in a subprocess per
backend, since the backend is fixed at import time.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from kanepoc._backend import get_kernels
from kanepoc.splines import SplineSpec

END_TO_END = """
import timeit, numpy as np
from kanepoc.network import KaneNetwork, loss_and_gradient
rng = np.random.default_rng(0)
net = KaneNetwork.initialize((2, 5, 1), seed=0)
X = rng.random(({rows}, 2))
T = rng.integers(0, 2, {rows})
best = min(timeit.repeat(lambda: loss_and_gradient(net, X, T), number=1, repeat={repeat}))
print(best)
"""


def kernel_timings(name, rows, repeat):
    k = get_kernels(name)
    spec = SplineSpec(3, 2)
    rng = np.random.default_rng(0)
    n_in, n_out = 5, 5
    z = rng.random(rows * n_in)
    span, vals, ders = k.basis_local(z, spec.knots, 3, spec.n_basis)
    span = np.asarray(span).reshape(rows, n_in)
    vals = np.asarray(vals).reshape(rows, n_in, 4)
    ders = np.asarray(ders).reshape(rows, n_in, 4)
    beta = rng.normal(size=(n_out, n_in, spec.n_basis))
    ds = rng.normal(size=(rows, n_out))
    cases = {
        "basis_local": lambda: k.basis_local(z, spec.knots, 3, spec.n_basis),
        "layer_forward": lambda: k.layer_forward(span, vals, beta),
        "layer_backward": lambda: k.layer_backward(span, vals, ders, beta, ds),
    }
    return {label: min(timeit.repeat(fn, number=1, repeat=repeat)) for label, fn in cases.items()}


def end_to_end(backend, rows, repeat):
    env = dict(os.environ)
    env.pop("KANEPOC_BACKEND", None)
    if backend == "python":
        env["KANEPOC_BACKEND"] = "python"
    code = END_TO_END.format(rows=rows, repeat=repeat)
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    return float(out.stdout)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rows", type=int, default=10000)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    try:
        get_kernels("cython")
    except ImportError:
        sys.exit("compiled extension not built; reinstall without KANEPOC_NO_EXT")
    py = kernel_timings("python", args.rows, args.repeat)
    cy = kernel_timings("cython", args.rows, args.repeat)
    py["loss_and_gradient (2,5,1)"] = end_to_end("python", args.rows, args.repeat)
    cy["loss_and_gradient (2,5,1)"] = end_to_end("cython", args.rows, args.repeat)
    print(f"rows = {args.rows}, best of {args.repeat}")
    print(f"{'kernel':<28}{'python ms':>12}{'cython ms':>12}{'speed-up':>10}")
    for label in py:
        print(f"{label:<28}{1e3 * py[label]:>12.3f}{1e3 * cy[label]:>12.3f}{py[label] / cy[label]:>9.1f}x")


if __name__ == "__main__":
    main()
