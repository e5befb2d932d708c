"""Compare the jit and pure-numpy kernel backends on shared workloads.

Times the batched Q forward and the batched parameter gradient across
representative (batch, set size) shapes, checks the two backends agree,
and prints the speedup. Run as:

    python3 benchmarks/bench_kernels.py [--reps N]
"""

import argparse
import importlib
import statistics
import time

import numpy as np

from swarmtrack.core import SeededStream
from swarmtrack.valuenet import NetConfig, init_params

SHAPES = ((256, 1), (256, 4), (100, 20), (100, 100))


def _load_backends():
    backends = {"numpy": importlib.import_module(
        "swarmtrack.kernels.numpy_backend")}
    try:
        backends["numba"] = importlib.import_module(
            "swarmtrack.kernels.numba_backend")
    except ImportError as e:
        print(f"numba backend unavailable ({e}); timing numpy only")
    return backends


def _time(fn, reps):
    best = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        best.append(time.perf_counter() - t0)
    return statistics.median(best)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--reps", type=int, default=7)
    args = ap.parse_args()

    cfg = NetConfig()
    params = init_params(cfg, SeededStream(0))
    rng = np.random.default_rng(1)
    backends = _load_backends()
    call = (params.theta, params._offs, cfg.embed_dim, cfg.n_heads,
            cfg.n_attention_blocks, cfg.decoder_hidden)

    header = f"{'shape':>12} {'op':>8}"
    for name in backends:
        header += f" {name + ' ms':>12}"
    if len(backends) == 2:
        header += f" {'speedup':>8}"
    print(header)

    for B, M in SHAPES:
        F = rng.standard_normal((B, M, 6))
        dQ = rng.standard_normal((B, 12))
        for op, make in (
            ("forward", lambda be: lambda: be.qvalues_batch(F, *call)),
            ("grad", lambda be: lambda: be.grad_batch(F, dQ, *call)),
        ):
            times = {}
            outs = {}
            for name, be in backends.items():
                fn = make(be)
                outs[name] = fn()  # also warms the jit cache
                times[name] = _time(fn, args.reps)
            if len(outs) == 2:
                err = float(np.max(np.abs(outs["numpy"] - outs["numba"])))
                assert err < 1e-9, f"backends disagree by {err}"
            line = f"{f'({B},{M})':>12} {op:>8}"
            for name in backends:
                line += f" {times[name] * 1e3:>12.2f}"
            if len(backends) == 2:
                line += f" {times['numpy'] / times['numba']:>7.1f}x"
            print(line)


if __name__ == "__main__":
    main()
