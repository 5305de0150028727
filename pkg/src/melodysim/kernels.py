"""Inner loops, each in a numba flavour and a pure-numpy flavour.

The public names at the bottom of the module (``dtw_accumulate``,
``cqt_frames`` ...) point at the numba versions unless
``MELODYSIM_NO_NUMBA`` is set.  Both flavours are importable directly so
tests and ``bench/`` can compare them.
"""
from __future__ import annotations

import numpy as np

from ._accel import USE_NUMBA, njit

# ---------------------------------------------------------------------------
# DTW


@njit
def _dtw_accumulate_numba(cost):
    n, m = cost.shape
    acc = np.empty((n, m))
    acc[0, 0] = cost[0, 0]
    for j in range(1, m):
        acc[0, j] = cost[0, j] + acc[0, j - 1]
    for i in range(1, n):
        acc[i, 0] = cost[i, 0] + acc[i - 1, 0]
        for j in range(1, m):
            best = acc[i - 1, j - 1]
            if acc[i - 1, j] < best:
                best = acc[i - 1, j]
            if acc[i, j - 1] < best:
                best = acc[i, j - 1]
            acc[i, j] = cost[i, j] + best
    return acc


def _dtw_accumulate_numpy(cost):
    # anti-diagonal sweep: every cell on diagonal k depends only on k-1, k-2
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for k in range(2, n + m + 1):
        i = np.arange(max(1, k - m), min(n, k - 1) + 1)
        j = k - i
        best = np.minimum(np.minimum(acc[i - 1, j - 1], acc[i - 1, j]), acc[i, j - 1])
        acc[i, j] = cost[i - 1, j - 1] + best
    return acc[1:, 1:]


@njit
def _pairwise_euclidean_numba(a, b):
    n, d = a.shape
    m = b.shape[0]
    out = np.empty((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for k in range(d):
                diff = a[i, k] - b[j, k]
                s += diff * diff
            out[i, j] = np.sqrt(s)
    return out


def _pairwise_euclidean_numpy(a, b):
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


# ---------------------------------------------------------------------------
# constant-Q kernel bank applied frame by frame
#
# Kernels are packed back to back in ``kre``/``kim``; bin ``b`` occupies
# ``offsets[b]:offsets[b] + lengths[b]`` and is centred on the frame time.


@njit(fastmath=True)
def _cqt_frames_numba(x, kre, kim, offsets, lengths, hop, n_frames):
    n_bins = offsets.shape[0]
    n = x.shape[0]
    out = np.zeros((n_frames, n_bins))
    for f in range(n_frames):
        centre = f * hop
        for b in range(n_bins):
            length = lengths[b]
            off = offsets[b]
            start = centre - length // 2
            lo = 0
            if start < 0:
                lo = -start
            hi = length
            if start + hi > n:
                hi = n - start
            re = 0.0
            im = 0.0
            for k in range(lo, hi):
                v = x[start + k]
                re += v * kre[off + k]
                im += v * kim[off + k]
            out[f, b] = np.sqrt(re * re + im * im)
    return out


def _cqt_frames_numpy(x, kre, kim, offsets, lengths, hop, n_frames):
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros((n_frames, len(offsets)))
    pad = int(lengths.max())
    xp = np.concatenate([np.zeros(pad), x, np.zeros(pad)])
    centres = np.arange(n_frames) * hop + pad
    for b, (off, length) in enumerate(zip(offsets, lengths)):
        kernel = kre[off : off + length] + 1j * kim[off : off + length]
        windows = np.lib.stride_tricks.sliding_window_view(xp, length)
        idx = centres - length // 2
        out[:, b] = np.abs(windows[idx] @ kernel)
    return out


# ---------------------------------------------------------------------------
# YIN difference function, d(tau) = sum_j (x_j - x_{j+tau})^2 over a fixed
# integration window of ``frame_len - max_lag`` samples.


@njit(fastmath=True)
def _yin_difference_numba(frames, max_lag):
    n_frames, frame_len = frames.shape
    w = frame_len - max_lag
    out = np.zeros((n_frames, max_lag + 1))
    for f in range(n_frames):
        for tau in range(1, max_lag + 1):
            s = 0.0
            for j in range(w):
                diff = frames[f, j] - frames[f, j + tau]
                s += diff * diff
            out[f, tau] = s
    return out


def _yin_difference_numpy(frames, max_lag):
    frames = np.asarray(frames, dtype=np.float64)
    n_frames, frame_len = frames.shape
    w = frame_len - max_lag
    head = frames[:, :w]
    energy0 = np.sum(head * head, axis=1)
    sq = np.concatenate([np.zeros((n_frames, 1)), np.cumsum(frames * frames, axis=1)], axis=1)
    taus = np.arange(max_lag + 1)
    energy_tau = sq[:, taus + w] - sq[:, taus]
    nfft = 1 << int(np.ceil(np.log2(frame_len + w)))
    spec_full = np.fft.rfft(frames, nfft, axis=1)
    spec_head = np.fft.rfft(head, nfft, axis=1)
    corr = np.fft.irfft(spec_full * np.conj(spec_head), nfft, axis=1)[:, : max_lag + 1]
    d = energy0[:, None] + energy_tau - 2.0 * corr
    d[:, 0] = 0.0
    return np.maximum(d, 0.0)


# ---------------------------------------------------------------------------
# gradient/hessian histograms for the boosted trees


@njit
def _build_histograms_numba(binned, grad, hess, rows, n_bins):
    n_features = binned.shape[1]
    hist = np.zeros((n_features, n_bins, 2))
    for r in range(rows.shape[0]):
        i = rows[r]
        g = grad[i]
        h = hess[i]
        for f in range(n_features):
            b = binned[i, f]
            hist[f, b, 0] += g
            hist[f, b, 1] += h
    return hist


def _build_histograms_numpy(binned, grad, hess, rows, n_bins):
    sub = binned[rows]
    g = grad[rows]
    h = hess[rows]
    n_features = binned.shape[1]
    hist = np.zeros((n_features, n_bins, 2))
    for f in range(n_features):
        hist[f, :, 0] = np.bincount(sub[:, f], weights=g, minlength=n_bins)
        hist[f, :, 1] = np.bincount(sub[:, f], weights=h, minlength=n_bins)
    return hist


# ---------------------------------------------------------------------------
# additive oscillator bank: one note, several partials, linear attack/release


@njit(fastmath=True)
def _render_partials_numba(out, start, n_sustain, n_release, freqs, amps, sr, n_attack):
    total = n_sustain + n_release
    n_out = out.shape[0]
    two_pi = 2.0 * np.pi
    for k in range(total):
        idx = start + k
        if idx >= n_out:
            break
        if k < n_attack:
            env = k / n_attack
        else:
            env = 1.0
        if k >= n_sustain:
            env = env * (1.0 - (k - n_sustain) / n_release)
        t = k / sr
        s = 0.0
        for p in range(freqs.shape[0]):
            s += amps[p] * np.sin(two_pi * freqs[p] * t)
        out[idx] += env * s


def _render_partials_numpy(out, start, n_sustain, n_release, freqs, amps, sr, n_attack):
    total = min(n_sustain + n_release, out.shape[0] - start)
    if total <= 0:
        return
    k = np.arange(total)
    env = np.where(k < n_attack, k / max(n_attack, 1), 1.0)
    env = np.where(k >= n_sustain, env * (1.0 - (k - n_sustain) / n_release), env)
    t = k / sr
    s = (amps[:, None] * np.sin(2.0 * np.pi * freqs[:, None] * t[None, :])).sum(axis=0)
    out[start : start + total] += env * s


# ---------------------------------------------------------------------------
# WSOLA: best analysis offset maximising correlation with a target frame


@njit(fastmath=True)
def _best_offset_numba(x, target, centre, tol):
    n = x.shape[0]
    win = target.shape[0]
    best = 0
    best_val = -np.inf
    for delta in range(-tol, tol + 1):
        s0 = centre + delta
        if s0 < 0 or s0 + win > n:
            continue
        acc = 0.0
        for k in range(win):
            acc += x[s0 + k] * target[k]
        if acc > best_val:
            best_val = acc
            best = delta
    return best


def _best_offset_numpy(x, target, centre, tol):
    n = x.shape[0]
    win = target.shape[0]
    lo = max(-tol, -centre)
    hi = min(tol, n - win - centre)
    if hi < lo:
        return 0
    seg = x[centre + lo : centre + hi + win]
    corr = np.correlate(seg, target, mode="valid")
    return int(lo + np.argmax(corr))


if USE_NUMBA:
    dtw_accumulate = _dtw_accumulate_numba
    pairwise_euclidean = _pairwise_euclidean_numba
    cqt_frames = _cqt_frames_numba
    yin_difference = _yin_difference_numba
    build_histograms = _build_histograms_numba
    render_partials = _render_partials_numba
    best_offset = _best_offset_numba
else:
    dtw_accumulate = _dtw_accumulate_numpy
    pairwise_euclidean = _pairwise_euclidean_numpy
    cqt_frames = _cqt_frames_numpy
    yin_difference = _yin_difference_numpy
    build_histograms = _build_histograms_numpy
    render_partials = _render_partials_numpy
    best_offset = _best_offset_numpy

KERNELS = {
    "dtw_accumulate": (_dtw_accumulate_numba, _dtw_accumulate_numpy),
    "pairwise_euclidean": (_pairwise_euclidean_numba, _pairwise_euclidean_numpy),
    "cqt_frames": (_cqt_frames_numba, _cqt_frames_numpy),
    "yin_difference": (_yin_difference_numba, _yin_difference_numpy),
    "build_histograms": (_build_histograms_numba, _build_histograms_numpy),
    "render_partials": (_render_partials_numba, _render_partials_numpy),
    "best_offset": (_best_offset_numba, _best_offset_numpy),
}
