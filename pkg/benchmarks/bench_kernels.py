"""Compare the compiled kernels with the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Times each kernel on fixed shapes and one full training step of a small
adapted model under each backend. Prints a table of best-of-N timings.
"""
import argparse
import json
import timeit

import numpy as np

from uora import kernels
from uora.models import ModelSpec, build_model
from uora.tasks import make_task
from uora.train import TrainConfig, train


def kernel_cases(rng):
    n, d, r = 32, 256, 16
    x = rng.normal(size=(n, d))
    w0, bias = rng.normal(size=(d, d)), rng.normal(size=d)
    a, bm = rng.normal(size=(r, d)), rng.normal(size=(d, r))
    dv, bv = rng.normal(size=r), rng.normal(size=d)
    g = rng.normal(size=(n, d))
    counters = np.zeros(1024, dtype=np.int64)
    dvec = rng.normal(scale=1e-3, size=1024)
    p, grad = rng.normal(size=65536), rng.normal(size=65536)
    m, v = np.zeros_like(p), np.zeros_like(p)
    u1, u2 = rng.normal(size=4096), rng.normal(size=4096)
    sq = rng.normal(size=(64, 64))
    return {
        "matmul 64x64": lambda k: k.matmul(sq, sq),
        "uora_forward": lambda k: k.uora_forward(x, w0, bias, a, bm, dv, bv),
        "uora_backward": lambda k: k.uora_backward(x, w0, a, bm, dv, bv, g),
        "lora_forward": lambda k: k.lora_forward(x, w0, bias, a, bm),
        "lora_backward": lambda k: k.lora_backward(x, w0, a, bm, g),
        "observe_step r=1024": lambda k: k.observe_step(counters, dvec, 1e-3, 3),
        "adam_step 64k": lambda k: k.adam_step(p, grad, m, v, 1e-3, 0.9, 0.999, 1e-8, 0.0, 1),
        "lerp 4096": lambda k: k.lerp(u1, u2, 0.7),
    }


def train_case():
    task = make_task("low_rank_recovery", 0, d_out=32, d_in=32, true_rank=8, n_train=512, n_eval=64)

    def run(_):
        model = build_model(ModelSpec(widths=[32, 32], rank=4), 0, task)
        train(model, task, TrainConfig(steps=200, batch_size=16, log_interval=50))
    return run


def best_of(fn, backend, repeat, number):
    return min(timeit.repeat(lambda: fn(backend), repeat=repeat, number=number)) / number


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--number", type=int, default=50)
    ap.add_argument("--json", help="also write results here")
    args = ap.parse_args(argv)

    names = kernels.available_backends()
    mods = {n: kernels.load_backend(n) for n in names}
    cases = kernel_cases(np.random.default_rng(0))
    results = {}
    for case, fn in cases.items():
        results[case] = {n: best_of(fn, mods[n], args.repeat, args.number) for n in names}

    run = train_case()
    results["train 200 steps"] = {}
    for n in names:
        previous = kernels.set_backend(n)
        results["train 200 steps"][n] = best_of(run, None, max(1, args.repeat // 2), 1)
        kernels.set_backend(previous)

    header = f"{'case':<22}" + "".join(f"{n:>14}" for n in names)
    if "cython" in names:
        header += f"{'speedup':>10}"
    print(header)
    for case, row in results.items():
        line = f"{case:<22}" + "".join(f"{row[n] * 1e6:>12.1f}us" for n in names)
        if "cython" in names:
            line += f"{row['python'] / row['cython']:>9.2f}x"
        print(line)
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(results, fh, indent=2)


if __name__ == "__main__":
    main()
