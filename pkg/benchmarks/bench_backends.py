"""Compare the numba kernels with the pure-numpy fallback.

Each backend runs in its own interpreter with ``ISING_ANALYTIC_PURE_NUMPY``
set or unset, on the same seeded workloads.  Outputs are hashed so the two
backends can be checked for identical results; numba timings exclude the
first (compiling) call.

    python benchmarks/bench_backends.py [--repeat 3]
"""
import argparse
import json
import os
import subprocess
import sys
import time

WORKER = r"""
import hashlib, json, sys, time
import numpy as np
from ising_analytic import BACKEND
from ising_analytic.glauber import ModelParams, evolve_batch
from ising_analytic.infoperc import cftp_batch
from ising_analytic.lattice import TorusGeom, BoxGeom
from ising_analytic.oracle import enumerate_ising

repeat = int(sys.argv[1])
p = ModelParams(0.3, 0.1)
g = TorusGeom(2, 3)
jobs = {
    "evolve_batch": lambda: evolve_batch(g, p, np.ones(g.n_sites, np.int8), 4.0, 11, 40),
    "cftp_batch": lambda: cftp_batch(g, p, [0], 0.0, 200.0, 5, 40).samples,
    "enumerate_3x3": lambda: enumerate_ising(BoxGeom(2, 1, "plus"), p).magnetization,
}
out = {"backend": BACKEND}
for name, job in jobs.items():
    res = job()  # warm-up, includes compilation under numba
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        res = job()
        times.append(time.perf_counter() - t)
    digest = hashlib.sha256(np.ascontiguousarray(np.asarray(res, dtype=np.float64)).tobytes())
    out[name] = {"seconds": min(times), "digest": digest.hexdigest()[:16]}
print(json.dumps(out))
"""


def run_backend(pure, repeat):
    env = dict(os.environ)
    if pure:
        env["ISING_ANALYTIC_PURE_NUMPY"] = "1"
    else:
        env.pop("ISING_ANALYTIC_PURE_NUMPY", None)
    r = subprocess.run([sys.executable, "-c", WORKER, str(repeat)], env=env, check=True,
                       capture_output=True, text=True)
    return json.loads(r.stdout.strip().splitlines()[-1])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    fast = run_backend(False, args.repeat)
    slow = run_backend(True, args.repeat)
    print(f"{'workload':<16}{fast['backend']:>12}{slow['backend']:>14}{'speedup':>10}  same")
    same_all = True
    for name in fast:
        if name == "backend":
            continue
        a, b = fast[name], slow[name]
        same = a["digest"] == b["digest"]
        same_all &= same
        print(f"{name:<16}{a['seconds']:>11.4f}s{b['seconds']:>13.4f}s"
              f"{b['seconds'] / max(a['seconds'], 1e-12):>9.1f}x  {same}")
    return 0 if same_all else 1


if __name__ == "__main__":
    sys.exit(main())
