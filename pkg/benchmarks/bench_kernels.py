"""Benchmark the compiled sweep kernel against the pure-Python twin.

Runs the same chain on the same data with both backends, reports iterations
per second and the speedup, and verifies the two backends produce
bit-identical draws.

Usage: python benchmarks/bench_kernels.py [--metas 40] [--iters 400]
"""

import argparse
import time

import numpy as np

from hetbias.mcmc import McmcConfig, run_chain
from hetbias.mcmc.backends import HAVE_COMPILED
from hetbias.model import Characteristic, ModelSpec
from hetbias.simulate import SimShape, SimTruth, generate_dataset

DRAW_ATTRS = ("d", "tau2", "b", "lam", "b0", "phi2", "mu_tau", "sigma_tau", "deviance")


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--metas", type=int, default=40)
    parser.add_argument("--trials", default="8,12,16")
    parser.add_argument("--iters", type=int, default=400)
    parser.add_argument("--preset", choices=["A1", "B4"], default="A1")
    parser.add_argument("--seed", type=int, default=7)
    args = parser.parse_args()

    chars = {
        "A1": (Characteristic.SG,),
        "B4": (Characteristic.SG, Characteristic.AC, Characteristic.BL),
    }[args.preset]
    spec = ModelSpec(characteristics=chars)
    truth = SimTruth.constant(spec, lam=1.5, b0=-0.15, phi=0.1)
    lo, med, hi = (int(v) for v in args.trials.split(","))
    shape = SimShape(
        n_metas=args.metas,
        trials_per_meta=(lo, med, hi),
        n_per_arm=(100, 250, 600),
        prob_high_or_unclear={c: 0.5 for c in Characteristic},
    )
    ds, _ = generate_dataset(truth, shape, spec, seed=args.seed)
    cfg = McmcConfig(n_iter=args.iters, n_burnin=args.iters // 4, n_chains=1, seed=1)
    total_iters = cfg.n_iter + cfg.n_burnin
    print(
        f"model {args.preset}: {len(ds.metas)} metas, {ds.n_trials} trials, "
        f"{total_iters} iterations"
    )

    results = {}
    timings = {}
    backends = ("cython", "python") if HAVE_COMPILED else ("python",)
    for backend in backends:
        start = time.perf_counter()
        chain = run_chain(spec, ds, cfg, 0, backend=backend)
        elapsed = time.perf_counter() - start
        timings[backend] = elapsed
        results[backend] = chain
        print(
            f"  {backend:>7}: {elapsed:8.3f}s  "
            f"({total_iters / elapsed:9.1f} iterations/s)"
        )

    if HAVE_COMPILED:
        same = all(
            np.array_equal(getattr(results["cython"], a), getattr(results["python"], a))
            for a in DRAW_ATTRS
        )
        print(f"  bit-identical draws: {same}")
        print(f"  speedup: {timings['python'] / timings['cython']:.1f}x")
        if not same:
            return 1
    else:
        print("  compiled kernel not built; benchmarked pure Python only")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
