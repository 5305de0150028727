import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from melodysim import kernels
from melodysim.features import cqt_kernels

SR = 8000


def _both(name, *args):
    fast, slow = kernels.KERNELS[name]
    return fast(*args), slow(*args)


@given(st.integers(1, 12), st.integers(1, 12), st.integers(1, 5), st.integers(0, 10_000))
@settings(max_examples=40)
def test_dtw_and_distance_parity(n, m, d, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((n, d)), rng.standard_normal((m, d))
    ca, cb = _both("pairwise_euclidean", a, b)
    assert np.allclose(ca, cb, rtol=1e-12, atol=1e-12)
    ref = np.sqrt(((a[:, None] - b[None]) ** 2).sum(-1))
    assert np.allclose(ca, ref, rtol=1e-12, atol=1e-12)
    da, db = _both("dtw_accumulate", np.ascontiguousarray(ca))
    assert np.array_equal(da, db)


def test_cqt_parity(rng):
    x = rng.standard_normal(2 * SR)
    kre, kim, offsets, lengths, _ = cqt_kernels(SR, n_bins=60)
    a, b = _both("cqt_frames", x, kre, kim, offsets, lengths, 256, 1 + len(x) // 256)
    assert np.allclose(a, b, rtol=1e-10, atol=1e-12)


def test_yin_parity(rng):
    frames = rng.standard_normal((20, 512))
    a, b = _both("yin_difference", frames, 200)
    assert np.allclose(a, b, rtol=1e-10, atol=1e-10)
    # d(tau) = sum_j (x_j - x_{j+tau})^2 over a window of frame - max_lag samples
    f = frames[3]
    ref = [np.sum((f[:312] - f[tau : tau + 312]) ** 2) for tau in (0, 1, 57, 200)]
    assert np.allclose(a[3, [0, 1, 57, 200]], ref)


def test_histogram_parity(rng):
    binned = rng.integers(0, 8, size=(300, 4)).astype(np.int64)
    grad, hess = rng.standard_normal(300), rng.random(300)
    rows = np.arange(0, 300, 3, dtype=np.int64)
    a, b = _both("build_histograms", binned, grad, hess, rows, 8)
    for x, y in zip(a, b):
        assert np.allclose(x, y, rtol=1e-12, atol=1e-12)


def test_render_parity():
    outs = []
    for fn in kernels.KERNELS["render_partials"]:
        out = np.zeros(SR)
        fn(out, 100, 2000, 400, np.array([220.0, 440.0, 660.0, 880.0]), np.array([0.5, 0.2, 0.1, 0.05]),
           float(SR), 80)
        outs.append(out)
    assert np.allclose(*outs, rtol=1e-12, atol=1e-12)
    assert np.all(outs[0][:100] == 0) and np.any(outs[0][100:2500] != 0)


def test_best_offset_parity(rng):
    x = rng.standard_normal(5000)
    target = x[2100:2356].copy()
    a, b = _both("best_offset", x, target, 2000, 256)
    assert a == b == 100


def test_numpy_fallback_selected_by_env():
    code = ("from melodysim import kernels, _accel; "
            "print(_accel.USE_NUMBA, kernels.dtw_accumulate is kernels._dtw_accumulate_numpy)")
    for flag, expect in (("1", "False True"), ("0", "True False")):
        env = dict(os.environ, MELODYSIM_NO_NUMBA=flag)
        out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
        assert out.stdout.strip() == expect
