"""Numba vs pure-numpy timings for every kernel in melodysim.kernels.

    python bench/benchmark.py                 # kernel table
    python bench/benchmark.py --end-to-end    # also time feature extraction
                                              # with MELODYSIM_NO_NUMBA on/off

Each kernel runs on inputs shaped like the ones the pipeline feeds it (one
10 s segment at 22.05 kHz, one 3000-frame DTW, ...).  The numba flavour is
called once before timing so compilation is excluded.  Outputs of the two
flavours are compared and a mismatch is reported in the last column.
"""
from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np

from melodysim import kernels
from melodysim.features import cqt_kernels

SR = 22050


def _inputs(rng):
    x = rng.standard_normal(10 * SR)
    kre, kim, offsets, lengths, _ = cqt_kernels(SR)
    frames = rng.standard_normal((431, 2048))
    a = rng.standard_normal((600, 12))
    b = rng.standard_normal((700, 12))
    cost = np.abs(rng.standard_normal((1500, 1500)))
    binned = rng.integers(0, 32, size=(20000, 16)).astype(np.int64)
    grad = rng.standard_normal(20000)
    hess = rng.random(20000)
    rows = np.arange(0, 20000, 2, dtype=np.int64)
    target = x[5000:6024].copy()
    return {
        "dtw_accumulate": lambda f: f(cost),
        "pairwise_euclidean": lambda f: f(a, b),
        "cqt_frames": lambda f: f(x, kre, kim, offsets, lengths, 512, 1 + len(x) // 512),
        "yin_difference": lambda f: f(frames, 1024),
        "build_histograms": lambda f: f(binned, grad, hess, rows, 32),
        "render_partials": lambda f: _render(f),
        "best_offset": lambda f: f(x, target, 5000, 256),
    }


def _render(f):
    out = np.zeros(4 * SR)
    freqs = 220.0 * np.arange(1, 5, dtype=np.float64)
    amps = np.array([0.5, 0.25, 0.12, 0.06])
    for start in range(0, 3 * SR, SR // 4):
        f(out, start, SR // 2, 1102, freqs, amps, float(SR), 220)
    return out


def _time(call, repeat):
    best = np.inf
    result = None
    for _ in range(repeat):
        t = time.perf_counter()
        result = call()
        best = min(best, time.perf_counter() - t)
    return best, result


def run_kernels(repeat: int, seed: int = 0) -> list[dict]:
    rng = np.random.default_rng(seed)
    rows = []
    for name, call in _inputs(rng).items():
        fast, slow = kernels.KERNELS[name]
        t0 = time.perf_counter()
        call(fast)  # compile (or load from the on-disk cache)
        compile_s = time.perf_counter() - t0
        t_fast, r_fast = _time(lambda: call(fast), repeat)
        t_slow, r_slow = _time(lambda: call(slow), repeat)
        same = bool(np.allclose(np.asarray(r_fast, dtype=float), np.asarray(r_slow, dtype=float), rtol=1e-7, atol=1e-9))
        rows.append({"kernel": name, "numba_s": t_fast, "numpy_s": t_slow, "speedup": t_slow / t_fast,
                     "first_call_s": compile_s, "outputs_match": same})
    return rows


_E2E = """
import time, numpy as np
from melodysim.render import AudioBuffer
from melodysim.pipeline import segment_features
x = np.random.default_rng(0).standard_normal(10 * 22050) * 0.1
buf = AudioBuffer(x, 22050)
segment_features(buf)
t = time.perf_counter()
for _ in range(3):
    segment_features(buf)
print((time.perf_counter() - t) / 3)
"""


def run_end_to_end() -> dict:
    out = {}
    for label, flag in (("numba", "0"), ("numpy", "1")):
        env = dict(os.environ, MELODYSIM_NO_NUMBA=flag)
        res = subprocess.run([sys.executable, "-c", _E2E], env=env, capture_output=True, text=True, check=True)
        out[label] = float(res.stdout.strip().splitlines()[-1])
    return out


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--end-to-end", action="store_true")
    p.add_argument("--json", help="also write results to this file")
    args = p.parse_args(argv)

    rows = run_kernels(args.repeat)
    print(f"{'kernel':<20}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}{'1st call s':>12}  match")
    for r in rows:
        print(f"{r['kernel']:<20}{r['numba_s'] * 1e3:>10.2f}{r['numpy_s'] * 1e3:>10.2f}{r['speedup']:>9.1f}"
              f"{r['first_call_s']:>12.2f}  {'yes' if r['outputs_match'] else 'NO'}")
    result = {"kernels": rows}
    if args.end_to_end:
        e2e = run_end_to_end()
        result["segment_features_s"] = e2e
        print(f"\nfeatures for one 10 s segment: numba {e2e['numba']:.3f} s, numpy {e2e['numpy']:.3f} s")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(result, fh, indent=1)
    return 0 if all(r["outputs_match"] for r in rows) else 1


if __name__ == "__main__":
    sys.exit(main())
