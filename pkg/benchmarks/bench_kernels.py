"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat 20] [--train-steps 20]

Kernel timings call both implementations directly in one process (numba
compile time is excluded by a warm-up call). The training-step timing runs
two subprocesses, one with SUBSETLIFT_DISABLE_NUMBA=1, since the backend is
fixed at import.
"""
import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np

from subsetlift import _accel, kernels

TRAIN_SNIPPET = """
import json, sys, time
from subsetlift import _accel, data, models, training
from subsetlift.subset_loss import SubsetLossConfig
steps = int(sys.argv[1])
ds = data.synth_hinge_chain(512, 60, seed=0)
model = models.build_model(models.ModelConfig("mixer", 8, 8, 60, 0))
cfg = training.TrainConfig(steps=1, checkpoint_every=10**9)
training.train(model, ds, SubsetLossConfig(), cfg)
t0 = time.perf_counter()
training.train(model, ds, SubsetLossConfig(), training.TrainConfig(steps=steps, checkpoint_every=10**9))
print(json.dumps({"backend": _accel.backend_name(), "per_step": (time.perf_counter() - t0) / steps}))
"""


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def kernel_cases(rng):
    a = rng.standard_normal((128, 96))
    tol = kernels.jacobi_tolerance(128)
    p = rng.standard_normal((128, 32, 3))
    q = rng.standard_normal((128, 32, 3))
    x = rng.standard_normal((128, 480))
    gamma, beta = rng.standard_normal(480), rng.standard_normal(480)
    g = rng.standard_normal((128, 480))
    _, xhat, _, _, inv_std = kernels.batchnorm_forward_numpy(x, gamma, beta, 1e-5)
    return {
        "svd 128x96": (
            lambda: kernels.svd_tall_numba(a, tol, kernels.MAX_SWEEPS),
            lambda: kernels.svd_tall_numpy(a, tol, kernels.MAX_SWEEPS),
        ),
        "kabsch 128x(32,3)": (
            lambda: kernels.kabsch_batch_numba(p, q, 1e-12),
            lambda: kernels.kabsch_batch_numpy(p, q, 1e-12),
        ),
        "batchnorm fwd 128x480": (
            lambda: kernels.batchnorm_forward_numba(x, gamma, beta, 1e-5),
            lambda: kernels.batchnorm_forward_numpy(x, gamma, beta, 1e-5),
        ),
        "batchnorm bwd 128x480": (
            lambda: kernels.batchnorm_backward_numba(g, xhat, gamma, inv_std),
            lambda: kernels.batchnorm_backward_numpy(g, xhat, gamma, inv_std),
        ),
    }


def train_step_time(steps, disable_numba):
    env = dict(os.environ)
    env.pop("SUBSETLIFT_DISABLE_NUMBA", None)
    if disable_numba:
        env["SUBSETLIFT_DISABLE_NUMBA"] = "1"
    out = subprocess.run(
        [sys.executable, "-c", TRAIN_SNIPPET, str(steps)], env=env, capture_output=True, text=True, check=True
    )
    return json.loads(out.stdout.strip().splitlines()[-1])


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    parser.add_argument("--repeat", type=int, default=20)
    parser.add_argument("--train-steps", type=int, default=20, help="0 skips the training-step timing")
    args = parser.parse_args(argv)
    if not _accel.HAVE_NUMBA:
        sys.exit("numba is not importable; nothing to compare")

    rng = np.random.default_rng(0)
    print(f"{'kernel':<24}{'numba ms':>12}{'numpy ms':>12}{'speedup':>10}")
    for name, (fast, slow) in kernel_cases(rng).items():
        tf, ts = best_of(fast, args.repeat), best_of(slow, args.repeat)
        print(f"{name:<24}{tf * 1e3:>12.3f}{ts * 1e3:>12.3f}{ts / tf:>10.1f}")

    if args.train_steps > 0:
        fast = train_step_time(args.train_steps, disable_numba=False)
        slow = train_step_time(args.train_steps, disable_numba=True)
        ratio = slow["per_step"] / fast["per_step"]
        print(
            f"{'train step mixer(8,8)':<24}{fast['per_step'] * 1e3:>12.1f}{slow['per_step'] * 1e3:>12.1f}{ratio:>10.1f}"
        )


if __name__ == "__main__":
    main()
