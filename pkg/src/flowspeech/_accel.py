"""Hot inner loops, compiled with numba when available.

Each kernel has a pure-numpy twin.  Set ``FLOWSPEECH_DISABLE_NUMBA=1`` to
force the numpy path (also used automatically when numba is missing).
Both paths must agree; ``tests/test_accel.py`` checks that.
"""
import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

_DISABLED = os.environ.get("FLOWSPEECH_DISABLE_NUMBA", "").lower() in ("1", "true", "yes")
HAS_NUMBA = numba is not None and not _DISABLED


def _njit(fn):
    if numba is None:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


# -- normalized autocorrelation peak per frame ------------------------------
def _nacf_peaks_py(frames, lag_min, lag_max):
    """For each frame, the NCCF value and sub-sample lag of the chosen peak.

    NCCF(tau) = sum x[n] x[n+tau] / sqrt(sum x[n]^2 * sum x[n+tau]^2) over the
    overlap.  The chosen peak is the first local maximum reaching 0.9 of the
    global maximum, which avoids picking period multiples.
    """
    n_frames, W = frames.shape
    lags = np.arange(lag_min, lag_max + 1)
    best = np.zeros(n_frames)
    where = np.zeros(n_frames)
    sq = frames.astype(np.float64) ** 2
    csum = np.concatenate([np.zeros((n_frames, 1)), np.cumsum(sq, axis=1)], axis=1)
    x = frames.astype(np.float64)
    spec = np.fft.rfft(x, n=2 * W, axis=1)
    ac = np.fft.irfft(spec * np.conj(spec), axis=1)[:, :W]
    e_head = csum[:, W - lags]                   # sum x[0:W-tau]^2
    e_tail = csum[:, W:W + 1] - csum[:, lags]    # sum x[tau:W]^2
    denom = np.sqrt(e_head * e_tail)
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.where(denom > 1e-12, ac[:, lags] / np.where(denom > 1e-12, denom, 1.0), 0.0)
    for i in range(n_frames):
        ri = r[i]
        gmax = ri.max()
        if gmax <= 0:
            continue
        k = _first_peak_py(ri, 0.9 * gmax)
        best[i] = ri[k]
        where[i] = lags[k] + _parabolic(ri, k)
    return best, where


def _first_peak_py(r, thresh):
    n = r.shape[0]
    for k in range(n):
        left = r[k - 1] if k > 0 else -np.inf
        right = r[k + 1] if k + 1 < n else -np.inf
        if r[k] >= thresh and r[k] >= left and r[k] >= right:
            return k
    return int(np.argmax(r))


def _parabolic(r, k):
    if k <= 0 or k >= r.shape[0] - 1:
        return 0.0
    a, b, c = r[k - 1], r[k], r[k + 1]
    den = a - 2.0 * b + c
    if den == 0.0:
        return 0.0
    off = 0.5 * (a - c) / den
    return min(max(off, -0.5), 0.5)


@_njit
def _nacf_peaks_nb(frames, lag_min, lag_max):
    n_frames, W = frames.shape
    n_lags = lag_max - lag_min + 1
    best = np.zeros(n_frames)
    where = np.zeros(n_frames)
    r = np.zeros(n_lags)
    csum = np.zeros(W + 1)
    for i in range(n_frames):
        x = frames[i]
        for n in range(W):
            csum[n + 1] = csum[n] + float(x[n]) * float(x[n])
        gmax = -1.0
        for j in range(n_lags):
            tau = lag_min + j
            acc = 0.0
            for n in range(W - tau):
                acc += float(x[n]) * float(x[n + tau])
            den = np.sqrt(csum[W - tau] * (csum[W] - csum[tau]))
            r[j] = acc / den if den > 1e-12 else 0.0
            if r[j] > gmax:
                gmax = r[j]
        if gmax <= 0.0:
            continue
        thresh = 0.9 * gmax
        k = -1
        for j in range(n_lags):
            left = r[j - 1] if j > 0 else -np.inf
            right = r[j + 1] if j + 1 < n_lags else -np.inf
            if r[j] >= thresh and r[j] >= left and r[j] >= right:
                k = j
                break
        if k < 0:
            k = np.argmax(r)
        off = 0.0
        if 0 < k < n_lags - 1:
            a, b, c = r[k - 1], r[k], r[k + 1]
            den2 = a - 2.0 * b + c
            if den2 != 0.0:
                off = 0.5 * (a - c) / den2
                off = min(max(off, -0.5), 0.5)
        best[i] = r[k]
        where[i] = lag_min + k + off
    return best, where


# -- nearest centroid --------------------------------------------------------
def _nearest_py(x, centers, chunk=4096):
    """Index of the nearest row of ``centers`` for each row of ``x``.

    Exact squared differences (no expansion trick) so ties stay ties and the
    lowest index wins, as ``argmin`` guarantees.
    """
    out = np.empty(x.shape[0], dtype=np.int64)
    dist = np.empty(x.shape[0])
    for s in range(0, x.shape[0], chunk):
        d = ((x[s:s + chunk, None, :] - centers[None, :, :]) ** 2).sum(axis=-1)
        out[s:s + chunk] = np.argmin(d, axis=1)
        dist[s:s + chunk] = d[np.arange(d.shape[0]), out[s:s + chunk]]
    return out, dist


@_njit
def _nearest_nb(x, centers):
    n, d = x.shape
    k = centers.shape[0]
    out = np.empty(n, dtype=np.int64)
    dist = np.empty(n)
    for i in range(n):
        best = np.inf
        arg = 0
        for j in range(k):
            acc = 0.0
            for c in range(d):
                diff = x[i, c] - centers[j, c]
                acc += diff * diff
            if acc < best:
                best = acc
                arg = j
        out[i] = arg
        dist[i] = best
    return out, dist


# -- windowed overlap-add ----------------------------------------------------
def _overlap_add_py(frames, window, hop):
    n_frames, W = frames.shape
    length = (n_frames - 1) * hop + W
    out = np.zeros(length)
    norm = np.zeros(length)
    w2 = window * window
    for i in range(n_frames):
        out[i * hop:i * hop + W] += frames[i] * window
        norm[i * hop:i * hop + W] += w2
    return out, norm


@_njit
def _overlap_add_nb(frames, window, hop):
    n_frames, W = frames.shape
    length = (n_frames - 1) * hop + W
    out = np.zeros(length)
    norm = np.zeros(length)
    for i in range(n_frames):
        base = i * hop
        for n in range(W):
            out[base + n] += frames[i, n] * window[n]
            norm[base + n] += window[n] * window[n]
    return out, norm


def nacf_peaks(frames, lag_min, lag_max, use_numba=None):
    frames = np.ascontiguousarray(frames, dtype=np.float64)
    if _pick(use_numba):
        return _nacf_peaks_nb(frames, int(lag_min), int(lag_max))
    return _nacf_peaks_py(frames, int(lag_min), int(lag_max))


def nearest_centroid(x, centers, use_numba=None):
    x = np.ascontiguousarray(x, dtype=np.float64)
    centers = np.ascontiguousarray(centers, dtype=np.float64)
    if _pick(use_numba):
        return _nearest_nb(x, centers)
    return _nearest_py(x, centers)


def overlap_add(frames, window, hop, use_numba=None):
    frames = np.ascontiguousarray(frames, dtype=np.float64)
    window = np.ascontiguousarray(window, dtype=np.float64)
    if _pick(use_numba):
        return _overlap_add_nb(frames, window, int(hop))
    return _overlap_add_py(frames, window, int(hop))


def _pick(use_numba):
    if use_numba is None:
        return HAS_NUMBA
    return bool(use_numba) and numba is not None
