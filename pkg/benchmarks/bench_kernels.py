"""Compare the numba and numpy kernel backends on training-sized inputs.

    python benchmarks/bench_kernels.py [--repeat 20]

Also times one full training iteration with each backend (a subprocess
per backend, since the choice is made at import time via IADN_NUMBA).
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from iadn import _kernels

ITER_SNIPPET = """
import time
import numpy as np
from iadn import _kernels
from iadn.dataio import generate_synthetic_dataset
from iadn.netgraph import NetworkConfig, build_network
from iadn.training import TrainConfig, train
data = generate_synthetic_dataset(n_frames=8, seed=0)
net = build_network(NetworkConfig(), seed=0)
train(data, net, TrainConfig(iterations=3))  # warm-up / jit compile
t = time.perf_counter()
train(data, net, TrainConfig(iterations={n}))
print(_kernels.BACKEND, (time.perf_counter() - t) / {n})
"""


def cases(rng):
    x = rng.normal(size=(130, 162, 16)).astype(np.float32)
    cols = _kernels.im2col_numpy(x, 3, 3, 1, 128, 160)
    pool_in = rng.normal(size=(128, 160, 16)).astype(np.float32)
    _, arg = _kernels.maxpool_forward_numpy(pool_in, 2, 2, 64, 80)
    g = rng.normal(size=(64, 80, 16)).astype(np.float32)
    boxes = np.column_stack([rng.uniform(0, 150, (1280, 2)), rng.uniform(8, 60, (1280, 2))])
    p = rng.normal(size=3136 * 512).astype(np.float32)
    grad = rng.normal(size=p.shape).astype(np.float32)
    f = np.float32
    return {
        "im2col 130x162x16 k3": lambda k: k["im2col"](x, 3, 3, 1, 128, 160),
        "col2im 130x162x16 k3": lambda k: k["col2im"](cols, 130, 162, 16, 3, 3, 1, 128, 160),
        "maxpool fwd 128x160x16": lambda k: k["maxpool_forward"](pool_in, 2, 2, 64, 80),
        "maxpool bwd 128x160x16": lambda k: k["maxpool_backward"](g, arg, 128, 160, 2, 2),
        "iou 1280x20": lambda k: k["iou_matrix"](boxes, boxes[:20]),
        "nms 1280": lambda k: k["nms_keep"](boxes, 0.3),
        "sgd 1.6M": lambda k: k["sgd_update"](p, grad, np.zeros_like(p), f(0.9), f(1e-3), f(5e-7)),
    }


def per_iteration(backend, n):
    env = dict(os.environ, IADN_NUMBA="1" if backend == "numba" else "0")
    out = subprocess.run(
        [sys.executable, "-c", ITER_SNIPPET.format(n=n)], env=env, capture_output=True, text=True, check=True
    )
    return float(out.stdout.split()[-1])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--iterations", type=int, default=20, help="training iterations per backend")
    args = ap.parse_args()
    if not _kernels.HAS_NUMBA:
        sys.exit("numba is not installed; nothing to compare")

    rng = np.random.default_rng(0)
    print(f"{'kernel':<26}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for name, fn in cases(rng).items():
        fn(_kernels.NUMBA_KERNELS)  # compile outside the timed region
        t_np = min(timeit.repeat(lambda: fn(_kernels.NUMPY_KERNELS), number=1, repeat=args.repeat))
        t_nb = min(timeit.repeat(lambda: fn(_kernels.NUMBA_KERNELS), number=1, repeat=args.repeat))
        print(f"{name:<26}{1e3 * t_np:>10.3f}{1e3 * t_nb:>10.3f}{t_np / t_nb:>8.1f}x")

    it_np = per_iteration("numpy", args.iterations)
    it_nb = per_iteration("numba", args.iterations)
    print(f"{'train iteration':<26}{1e3 * it_np:>10.1f}{1e3 * it_nb:>10.1f}{it_np / it_nb:>8.1f}x")


if __name__ == "__main__":
    main()
