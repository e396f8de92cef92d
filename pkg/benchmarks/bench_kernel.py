"""Time the compiled kernel against the Python interpreter.

    python3 benchmarks/bench_kernel.py [--steps N] [--repeat R]

Each corpus model is integrated for N steps with every available
backend; the best of R runs is reported together with the speedup.
"""

import argparse
import time

import numpy as np

from bondsim import SimConfig, _backend, compile_graph, simulate
from bondsim.models import CORPUS, build


def best_time(system, config, repeat):
    best, traj = float("inf"), None
    for _ in range(repeat):
        t0 = time.perf_counter()
        traj = simulate(system, config)
        best = min(best, time.perf_counter() - t0)
    return best, traj


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=20_000)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)

    backends = sorted(_backend.available())
    previous = _backend.kernel
    dt = 1e-5
    config = SimConfig(args.steps * dt, dt, record_every=100)
    print(f"{'model':<16}" + "".join(f"{b + ' [s]':>12}" for b in backends) + f"{'speedup':>10}")
    try:
        for name in CORPUS:
            system = compile_graph(build(name))
            times, trajs = {}, {}
            for b in backends:
                _backend.use(b)
                times[b], trajs[b] = best_time(system, config, args.repeat)
            same = all(np.array_equal(trajs[b].x, trajs["python"].x) for b in backends)
            speed = times["python"] / times["c"] if "c" in times else float("nan")
            row = f"{name:<16}" + "".join(f"{times[b]:>12.4f}" for b in backends) + f"{speed:>9.1f}x"
            print(row + ("" if same else "  (trajectories differ)"))
    finally:
        _backend.kernel = previous


if __name__ == "__main__":
    main()
