"""Compiled vs numpy kernel timings, per kernel and for a full training step.

    python benchmarks/bench_kernels.py [--batch 16] [--repeat 50]
"""
from __future__ import annotations

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from splitfed_sim.nn import kernels

STEP_SNIPPET = """
import sys, timeit, numpy as np
from splitfed_sim.nn import table_ii, init_model, forward, backward, loss_ce, kernels
batch, repeat = int(sys.argv[1]), int(sys.argv[2])
spec = table_ii(1, 14, 14)
w = init_model(spec.full, 0)
rng = np.random.default_rng(0)
x = rng.random((batch, 1, 14, 14), dtype=np.float32)
y = rng.integers(0, 10, batch)
def step():
    out, cache = forward(spec.full, w, x)
    _, g = loss_ce(out, y)
    backward(spec.full, w, cache, g.astype(np.float32), need_input_grad=False)
step()
print(kernels.BACKEND, min(timeit.repeat(step, number=1, repeat=repeat)))
"""


def kernel_cases(batch: int, rng) -> dict:
    x1 = rng.random((batch, 1, 14, 14), dtype=np.float32)
    x2 = rng.random((batch, 32, 7, 7), dtype=np.float32)
    p1 = rng.random((batch, 32, 14, 14), dtype=np.float32)
    p2 = rng.random((batch, 64, 7, 7), dtype=np.float32)
    cols2 = rng.random((32 * 9, batch * 49), dtype=np.float32)
    cases = {}
    for name, be in (("python", kernels.get_backend("python")),) + tuple(
        (n, kernels.get_backend(n)) for n in kernels.available_backends() if n != "python"
    ):
        y1, a1 = be.maxpool2x2(p1)
        y2, a2 = be.maxpool2x2(p2)
        cases[name] = {
            "im2col conv1": lambda be=be: be.im2col3x3(x1),
            "im2col conv2": lambda be=be: be.im2col3x3(x2),
            "col2im conv2": lambda be=be: be.col2im3x3(cols2, x2.shape),
            "maxpool 32x14x14": lambda be=be: be.maxpool2x2(p1),
            "maxpool 64x7x7": lambda be=be: be.maxpool2x2(p2),
            "maxpool bwd 32x14x14": lambda be=be, y=y1, a=a1: be.maxpool2x2_backward(y, a, p1.shape),
            "maxpool bwd 64x7x7": lambda be=be, y=y2, a=a2: be.maxpool2x2_backward(y, a, p2.shape),
        }
    return cases


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--batch", type=int, default=16)
    ap.add_argument("--repeat", type=int, default=50)
    args = ap.parse_args(argv)

    cases = kernel_cases(args.batch, np.random.default_rng(0))
    backends = list(cases)
    if "compiled" not in backends:
        print("compiled kernels not built; timing the numpy fallback only")
    print(f"{'kernel':<22}" + "".join(f"{b + ' (us)':>16}" for b in backends) + ("   speedup" if len(backends) > 1 else ""))
    for kernel in cases["python"]:
        times = [min(timeit.repeat(cases[b][kernel], number=10, repeat=args.repeat)) / 10 * 1e6 for b in backends]
        line = f"{kernel:<22}" + "".join(f"{t:>16.1f}" for t in times)
        if len(times) > 1:
            line += f"{times[0] / times[1]:>10.2f}x"
        print(line)

    print(f"\nfull forward+backward step, batch {args.batch}:")
    step_times = {}
    for b in backends:
        env = {**os.environ, "SPLITFED_BACKEND": b}
        out = subprocess.run([sys.executable, "-c", STEP_SNIPPET, str(args.batch), str(args.repeat)],
                             env=env, capture_output=True, text=True, check=True).stdout.split()
        step_times[b] = float(out[1])
        print(f"  {out[0]:<10}{step_times[b] * 1e3:>10.3f} ms")
    if len(step_times) > 1:
        print(f"  speedup {step_times['python'] / step_times['compiled']:.2f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
