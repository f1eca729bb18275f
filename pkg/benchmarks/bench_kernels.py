"""Numba vs numpy timings for the hot kernels.

Both implementations of each kernel are importable side by side, so the
per-kernel table runs in one process. ``--pipeline`` additionally times one
quick-preset imputation + training run under each backend in a subprocess
(the backend is fixed at import time by ``MSFUSION_DISABLE_NUMBA``).

    python benchmarks/bench_kernels.py [--repeat 5] [--pipeline] [--json out.json]
"""

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from msfusion import _nn_kernels as nk
from msfusion._accel import numba
from msfusion.features import _window_stats_nb, _window_stats_np
from msfusion.gp import _kernels as gk
from msfusion.gp.model import heuristic_init


def _gp_case(n, seed=0):
    rng = np.random.default_rng(seed)
    t = np.sort(rng.choice(85, size=n, replace=False)).astype(float)
    y = np.sin(t / 6.0) + 0.3 * rng.normal(size=n)
    b = heuristic_init(t, y)
    return t, y, b.initial.as_log(), b.lower.as_log(), b.upper.as_log()


def cases():
    rng = np.random.default_rng(0)
    t, y, x0, lo, hi = _gp_case(42)
    traj = rng.normal(size=(415, 85))
    scores = rng.normal(size=(32, 2, 86, 86))
    probs = nk._softmax_np(scores)
    dprobs = rng.normal(size=probs.shape)
    return {
        "gp gram (n=42)": (lambda: gk._gram_nb(t, 1.0, 5.0, 0.1), lambda: gk._gram_np(t, 1.0, 5.0, 0.1)),
        "gp lml+grad+fisher (n=42)": (lambda: gk._lml_terms_nb(t, y, x0), lambda: gk._lml_terms_np(t, y, x0)),
        "gp ascent (n=42)": (lambda: gk.ascent(t, y, x0, lo, hi, use_numba=True),
                             lambda: gk.ascent(t, y, x0, lo, hi, use_numba=False)),
        "window stats (415x85, w=28)": (lambda: _window_stats_nb(traj, 28, 28), lambda: _window_stats_np(traj, 28, 28)),
        "softmax (32x2x86x86)": (lambda: nk._softmax_nb(scores), lambda: nk._softmax_np(scores)),
        "softmax backward": (lambda: nk._softmax_backward_nb(probs, dprobs, 0.25),
                             lambda: nk._softmax_backward_np(probs, dprobs, 0.25)),
    }


def best_of(fn, repeat):
    fn()  # warm-up (compilation or cache load)
    timer = timeit.Timer(fn)
    n, _ = timer.autorange()
    return min(timer.repeat(repeat, n)) / n


PIPELINE = """
import time
from msfusion.experiment import quick_config, prepare, impute_splits, build_inputs, fit_model
from msfusion.synth import SimConfig, generate
cfg = quick_config(seed=0)
cohort = generate(SimConfig(seed=0))
t = time.perf_counter(); prep = prepare(cohort, cfg); imp = impute_splits(prep, cfg)
t_imp = time.perf_counter() - t
t = time.perf_counter(); fit_model(build_inputs(prep, imp, cfg), cfg)
print(t_imp, time.perf_counter() - t)
"""


def pipeline(disable):
    env = dict(os.environ, MSFUSION_DISABLE_NUMBA="1" if disable else "0")
    out = subprocess.run([sys.executable, "-c", PIPELINE], env=env, capture_output=True, text=True, check=True)
    return tuple(float(v) for v in out.stdout.split())


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--pipeline", action="store_true", help="also time a full quick run per backend")
    ap.add_argument("--json", help="write results here")
    args = ap.parse_args(argv)
    if numba is None:
        sys.exit("numba is not installed; nothing to compare")

    rows = []
    print(f"{'kernel':32s} {'numba':>12s} {'numpy':>12s} {'speedup':>8s}")
    for name, (fast, slow) in cases().items():
        a, b = best_of(fast, args.repeat), best_of(slow, args.repeat)
        rows.append({"kernel": name, "numba_s": a, "numpy_s": b, "speedup": b / a})
        print(f"{name:32s} {a * 1e6:10.1f}us {b * 1e6:10.1f}us {b / a:7.2f}x")
    if args.pipeline:
        for disable in (False, True):
            imp, fit = pipeline(disable)
            label = "numpy" if disable else "numba"
            rows.append({"kernel": f"pipeline ({label})", "impute_s": imp, "train_s": fit})
            print(f"pipeline n=415 [{label}]: impute {imp:.2f}s, train {fit:.2f}s")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=1)


if __name__ == "__main__":
    main()
