"""Compiled vs numpy kernels, plus one full training step on each backend.

    python3 benchmarks/bench_kernels.py [--repeat N] [--json out.json]

The training-step comparison runs each backend in a fresh interpreter
(the backend is chosen at import via ``L2D_PURE_PYTHON``).
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from l2d._kernels import _numpy

try:
    from l2d._kernels import _ckernels
except ImportError:
    _ckernels = None

STEP_SCRIPT = """
import timeit, numpy as np
from l2d import KERNEL_BACKEND
from l2d.model import ModelConfig, MultiLabelNet
from l2d import losses as L
from l2d.tensor import no_grad
rng = np.random.default_rng(0)
x = rng.random((32, 32, 32, 3)).astype(np.float32)
y = (rng.random((32, 8)) < 0.3).astype(np.uint8); y[:, 0] = 1
s = MultiLabelNet(ModelConfig.student())
t = MultiLabelNet(ModelConfig.teacher())
with no_grad():
    to = t(x)
def step():
    s.zero_grad()
    out = s(x)
    total, _ = L.l2d_loss(out.predictions.probs, y, to.predictions.probs.data, to.embeddings.data,
                          out.embeddings, L.DistillConfig())
    total.backward()
step()
n = {repeat}
print(KERNEL_BACKEND, min(timeit.repeat(step, number=1, repeat=n)))
"""


def bench(fn, repeat: int) -> float:
    fn()
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def kernel_cases(rng):
    x = rng.random((32, 32, 32, 8)).astype(np.float32)
    cols = rng.random((32, 32, 32, 72)).astype(np.float32)
    t = rng.normal(size=(8, 32, 32)).astype(np.float32)
    s = rng.normal(size=(8, 32, 32)).astype(np.float32)
    m = (rng.random((8, 32)) < 0.3).astype(np.uint8)
    return {
        "im2col3x3 [32,32,32,8]": lambda k: k.im2col3x3(x),
        "col2im3x3 [32,32,32,72]": lambda k: k.col2im3x3(cols, 8),
        "relation_huber [8,32,32]": lambda k: k.relation_huber(t, s, m),
    }


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--json", help="write results here")
    args = ap.parse_args(argv)

    rng = np.random.default_rng(0)
    results = {"kernels": {}, "train_step": {}}
    print(f"{'kernel':<28}{'numpy ms':>12}{'compiled ms':>14}{'speed-up':>10}")
    for name, call in kernel_cases(rng).items():
        a = bench(lambda: call(_numpy), args.repeat) * 1e3
        b = bench(lambda: call(_ckernels), args.repeat) * 1e3 if _ckernels else float("nan")
        results["kernels"][name] = {"numpy_ms": a, "compiled_ms": b}
        print(f"{name:<28}{a:>12.3f}{b:>14.3f}{a / b:>10.1f}")

    print("\nstudent L2D training step, batch 32:")
    for flag in ("1", "0"):
        env = dict(os.environ, L2D_PURE_PYTHON=flag)
        out = subprocess.run([sys.executable, "-c", STEP_SCRIPT.format(repeat=max(3, args.repeat // 4))],
                             capture_output=True, text=True, env=env, check=True).stdout.split()
        backend, sec = out[0], float(out[1])
        results["train_step"][backend] = sec * 1e3
        print(f"  {backend:<10}{sec * 1e3:8.1f} ms")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(results, fh, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
