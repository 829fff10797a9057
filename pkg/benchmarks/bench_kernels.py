"""Compare the numba and numpy kernel backends.

    python3 benchmarks/bench_kernels.py [--repeat N]

Each backend runs in its own interpreter (the backend is fixed at import
time by DEYNET_DISABLE_NUMBA).  The numba timing excludes compilation.
"""

import argparse
import json
import os
import subprocess
import sys

WORKER = r"""
import json, time
import numpy as np
from deynet import kernels
from deynet.masking import plan_mask
from deynet.data import PhantomSpec, generate_phantom

rep = int(__import__("sys").argv[1])
img = np.random.default_rng(0).random((64, 64))
plan_mask(img, 0.1, 2, seed=0)
generate_phantom(PhantomSpec(shape=(16, 32, 32)))

def best(fn):
    ts = []
    for _ in range(rep):
        t = time.perf_counter(); fn(); ts.append(time.perf_counter() - t)
    return min(ts)

g = np.random.default_rng(1)
coords = np.stack([g.integers(0, 512, 200_000), g.integers(0, 512, 200_000)], 1)
u = g.random(200_000)
print(json.dumps({
    "backend": kernels.backend(),
    "neighbor_sources_200k": best(lambda: kernels.neighbor_sources(coords, u, 512, 512, 2)),
    "plan_mask_64x64_x100": best(lambda: [plan_mask(img, 0.1, 2, seed=s) for s in range(100)]),
}))
"""


def run(disable, repeat):
    env = dict(os.environ, DEYNET_DISABLE_NUMBA="1" if disable else "0")
    out = subprocess.run([sys.executable, "-c", WORKER, str(repeat)], env=env, capture_output=True, text=True, check=True)
    return json.loads(out.stdout)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    nb, npy = run(False, args.repeat), run(True, args.repeat)
    print(f"{'kernel':<26}{nb['backend']:>10}{npy['backend']:>10}{'speedup':>10}")
    for key in nb:
        if key == "backend":
            continue
        print(f"{key:<26}{nb[key] * 1e3:>9.2f}m{npy[key] * 1e3:>9.2f}m{npy[key] / nb[key]:>9.1f}x")


if __name__ == "__main__":
    main()
