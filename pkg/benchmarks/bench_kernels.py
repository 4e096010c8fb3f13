#!/usr/bin/env python
"""Time each accelerated kernel on its numba and pure-numpy paths.

Usage: python benchmarks/bench_kernels.py [--repeat N]
The first numba call (compilation) is excluded by a warm-up run.
"""
import argparse
import time

import numpy as np

from flowspeech import _accel, dsp


def _time(fn, repeat):
    fn()  # warm-up / JIT
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def cases():
    rng = np.random.default_rng(0)
    t = np.arange(5 * dsp.SAMPLE_RATE) / dsp.SAMPLE_RATE
    frames = dsp.frame_signal(np.sin(2 * np.pi * 180 * t) + 0.1 * rng.normal(size=t.size))
    feats = rng.normal(size=(20000, 26))
    centers = rng.normal(size=(100, 26))
    spec_frames = rng.normal(size=(500, dsp.WINDOW))
    win = dsp.hann()
    return {
        "nacf_peaks (5 s audio)": lambda nb: _accel.nacf_peaks(frames, 32, 320, use_numba=nb),
        "nearest_centroid (20k x 100)": lambda nb: _accel.nearest_centroid(feats, centers, use_numba=nb),
        "overlap_add (500 frames)": lambda nb: _accel.overlap_add(spec_frames, win, dsp.HOP, use_numba=nb),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if _accel.numba is None:
        print("numba is not installed; only the numpy path can run")
    print(f"{'kernel':32s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, fn in cases().items():
        t_np = _time(lambda: fn(False), args.repeat)
        if _accel.numba is None:
            print(f"{name:32s} {t_np * 1e3:10.2f} {'-':>10s} {'-':>8s}")
            continue
        t_nb = _time(lambda: fn(True), args.repeat)
        print(f"{name:32s} {t_np * 1e3:10.2f} {t_nb * 1e3:10.2f} {t_np / t_nb:7.1f}x")


if __name__ == "__main__":
    main()
