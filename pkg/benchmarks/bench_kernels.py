"""Time each hot kernel under every available backend, plus a short training run per mode.

    python benchmarks/bench_kernels.py [--repeat N] [--train-steps N] [--json]
"""
import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from maskcluster._kernels import available_backends


def cases(rng):
    K = np.exp(rng.uniform(-1, 1, (64, 256)))
    r, c = np.full(64, 1 / 64), np.full(256, 1 / 256)
    cost = rng.random((64, 64))
    mask = rng.random((64, 64)) < 0.55
    x = rng.standard_normal((16, 16, 16))
    k = rng.standard_normal((3, 3, 16, 16))
    b = np.zeros(16)
    g = rng.standard_normal((16, 16, 16))
    return {
        "sinkhorn_scale 64x256": lambda m: m.sinkhorn_scale(K, r, c, 1e-9, 1000),
        "hungarian_min 64x64": lambda m: m.hungarian_min(cost),
        "label_components 64x64": lambda m: m.label_components(mask),
        "conv3x3_same 16x16x16": lambda m: m.conv3x3_same(x, k, b),
        "conv3x3_same_backward 16x16x16": lambda m: m.conv3x3_same_backward(x, k, g),
    }


TRAIN_SNIPPET = """
import time
from maskcluster.config import GeneratorSpec, TrainConfig
from maskcluster.dataio import generate_dataset
from maskcluster.training import fit, init_state
data = generate_dataset(GeneratorSpec(num_samples=16, seed=7))
state = init_state(TrainConfig(k=16, steps={steps}, log_every=0))
t0 = time.perf_counter()
fit(state, data)
print(time.perf_counter() - t0)
"""


def time_training(mode, steps):
    env = dict(os.environ, MASKCLUSTER_KERNELS=mode)
    out = subprocess.run([sys.executable, "-c", TRAIN_SNIPPET.format(steps=steps)], env=env,
                         capture_output=True, text=True, check=True)
    return float(out.stdout.strip())


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--train-steps", type=int, default=20, help="training steps per mode (0 skips)")
    ap.add_argument("--json", action="store_true", help="print results as JSON")
    args = ap.parse_args()
    backends = available_backends()
    results = {}
    for name, fn in cases(np.random.default_rng(0)).items():
        row = {}
        for bname, mod in sorted(backends.items()):
            timer = timeit.Timer(lambda: fn(mod))
            number, _ = timer.autorange()
            row[bname] = min(timer.repeat(args.repeat, number)) / number
        results[name] = row
    training = {}
    if args.train_steps > 0:
        modes = ["python"] + (["cython", "auto"] if "cython" in backends else [])
        training = {mode: time_training(mode, args.train_steps) for mode in modes}
    if args.json:
        print(json.dumps({"kernels": results, "training_seconds": training}, indent=2))
        return
    names = sorted(backends)
    print(f"{'kernel':34s}" + "".join(f"{n:>14s}" for n in names) + ("       speedup" if len(names) > 1 else ""))
    for name, row in results.items():
        line = f"{name:34s}" + "".join(f"{row[n] * 1e3:12.3f}ms" for n in names)
        if "cython" in row:
            line += f"{row['python'] / row['cython']:13.1f}x"
        print(line)
    if training:
        print(f"\n{args.train_steps} training steps (k=16, batch 8, 64x64):")
        for mode, seconds in training.items():
            print(f"  MASKCLUSTER_KERNELS={mode:7s} {seconds:7.2f} s")


if __name__ == "__main__":
    main()
