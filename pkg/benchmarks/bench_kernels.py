"""Time the lane-advance kernel with numba and as plain Python.

Each path runs in its own interpreter because ADLIGHT_NUMBA is read at import.

    python benchmarks/bench_kernels.py --scenario INT1-3 --duration 1800
"""
import argparse
import json
import os
import subprocess
import sys
import time

CHILD = """
import json, time
from dataclasses import replace
from adlight._accel import NUMBA_ENABLED
from adlight.baselines import FixedTimeController
from adlight.microsim import SimWorld
from adlight.topology import catalog_by_id

sc = replace(catalog_by_id()[{scenario!r}], duration_s={duration})
SimWorld(replace(sc, duration_s=10), seed=0, action_set=None).advance(10)  # compile / warm caches
times = []
for rep in range({repeats}):
    w = SimWorld(sc, seed=rep, action_set=None)
    t = time.perf_counter()
    FixedTimeController(30).run(w)
    times.append(time.perf_counter() - t)
print(json.dumps({{"numba": NUMBA_ENABLED, "best_s": min(times),
                  "sim_s_per_wall_s": {duration} / min(times), "avg_waiting_s": w.metrics().avg_waiting_s}}))
"""


def run_path(flag, args):
    env = dict(os.environ, ADLIGHT_NUMBA=flag)
    code = CHILD.format(scenario=args.scenario, duration=args.duration, repeats=args.repeats)
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    return json.loads(out.stdout.strip().splitlines()[-1])


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--scenario", default="INT1-3")
    p.add_argument("--duration", type=int, default=1800)
    p.add_argument("--repeats", type=int, default=3)
    args = p.parse_args()
    fast = run_path("1", args)
    slow = run_path("0", args)
    if fast["avg_waiting_s"] != slow["avg_waiting_s"]:
        sys.exit(f"paths disagree: {fast['avg_waiting_s']} vs {slow['avg_waiting_s']}")
    print(f"{'path':<8}{'best (s)':>10}{'sim s / wall s':>16}")
    for name, r in (("numba", fast), ("python", slow)):
        print(f"{name:<8}{r['best_s']:>10.3f}{r['sim_s_per_wall_s']:>16.0f}")
    print(f"speedup {slow['best_s'] / fast['best_s']:.1f}x, avg_waiting_s {fast['avg_waiting_s']:.3f} on both paths")


if __name__ == "__main__":
    main()
