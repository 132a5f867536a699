"""Compare the numba kernels against the numpy fallback.

Kernel timings call both implementations in-process. The end-to-end part
trains a few mini_conv_bn epochs in subprocesses, once per backend, with
``SAMLAB_DISABLE_NUMBA`` selecting the fallback.

    python benchmarks/bench_kernels.py [--repeat 20] [--epochs 3]
"""

import argparse
import csv
import json
import os
import statistics
import subprocess
import sys
import tempfile
import timeit

import numpy as np

from samlab import _accel

SHAPES = [  # (batch, in_ch, out_ch, H, W)
    (64, 1, 8, 8, 8),
    (64, 8, 16, 8, 8),
    (32, 16, 32, 16, 16),
]

RUN_CONFIG = {
    "model": {"architecture": "mini_conv_bn", "channels": [8, 16], "input_shape": [1, 8, 8],
              "num_classes": 4},
    "optim": {"base": {"kind": "sgd", "lr": 0.05, "momentum": 0.9},
              "perturb": {"variant": "sam", "rho": 0.1, "scope": "all"}},
    "data": {"kind": "blobs", "classes": 4, "dim": 64, "n": 1280, "noise": 3.0, "seed": 0},
    "batch_size": 64, "seed": 0,
}


def _time(fn, repeat):
    fn()  # warm-up (and JIT compilation)
    return min(timeit.repeat(fn, number=1, repeat=repeat)) * 1e3


def kernel_table(repeat):
    rng = np.random.default_rng(0)
    rows = []
    for n, c, o, h, w in SHAPES:
        x, k = rng.normal(size=(n, c, h, w)), rng.normal(size=(o, c, 3, 3))
        dy = rng.normal(size=(n, o, h, w))
        px = rng.normal(size=(n, o, h, w))
        _, idx = _accel.maxpool2x2_forward_np(px)
        dp = rng.normal(size=(n, o, h // 2, w // 2))
        cases = {
            "conv_fwd": (lambda: _accel.conv3x3_forward_np(x, k),
                         lambda: _accel._conv3x3_forward_nb(x, k)),
            "conv_bwd_input": (lambda: _accel.conv3x3_backward_input_np(dy, k),
                               lambda: _accel._conv3x3_backward_input_nb(dy, k)),
            "conv_bwd_weight": (lambda: _accel.conv3x3_backward_weight_np(dy, x),
                                lambda: _accel._conv3x3_backward_weight_nb(dy, x)),
            "pool_fwd": (lambda: _accel.maxpool2x2_forward_np(px),
                         lambda: _accel._maxpool2x2_forward_nb(px)),
            "pool_bwd": (lambda: _accel.maxpool2x2_backward_np(dp, idx, px.shape),
                         lambda: _accel._maxpool2x2_backward_nb(dp, idx, np.zeros(px.shape))),
        }
        for name, (f_np, f_nb) in cases.items():
            t_np = _time(f_np, repeat)
            t_nb = _time(f_nb, repeat) if _accel.HAS_NUMBA else float("nan")
            rows.append((name, f"{n}x{c}->{o}@{h}x{w}", t_np, t_nb))
    return rows


def epoch_ms(disable_numba, epochs):
    env = dict(os.environ, SAMLAB_DISABLE_NUMBA="1" if disable_numba else "0")
    cfg = dict(RUN_CONFIG, epochs=epochs)
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "config.json")
        with open(path, "w") as fh:
            json.dump(cfg, fh)
        subprocess.run([sys.executable, "-m", "samlab", "train", "--config", path,
                        "--out", os.path.join(d, "run")], env=env, check=True,
                       stdout=subprocess.DEVNULL)
        with open(os.path.join(d, "run", "timing.csv"), newline="") as fh:
            walls = [float(r["wall_ms"]) for r in csv.DictReader(fh)]
    return statistics.median(walls[1:] or walls)  # the first epoch pays for JIT loading


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--epochs", type=int, default=3)
    args = ap.parse_args(argv)

    print(f"numba available: {_accel.HAS_NUMBA}")
    print(f"{'kernel':<16} {'shape':<18} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for name, shape, t_np, t_nb in kernel_table(args.repeat):
        print(f"{name:<16} {shape:<18} {t_np:>10.3f} {t_nb:>10.3f} {t_np / t_nb:>7.2f}x")
    if args.epochs > 0:
        a, b = epoch_ms(True, args.epochs), epoch_ms(False, args.epochs)
        print(f"\nSAM-all mini_conv_bn epoch (median): numpy {a:.1f} ms, numba {b:.1f} ms, "
              f"speedup {a / b:.2f}x")


if __name__ == "__main__":
    main()
