"""Audio front-end: log-mel features, frame stacking, F0, Griffin-Lim.

Fixed analysis setup: 16 kHz audio, 640-sample Hann window, hop 160
(100 frames/s), 1024-point FFT, no centre padding, 80 mel bands over
0-8 kHz, natural log with a 1e-5 floor.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import _accel
from .errors import ContractError, LengthError

SAMPLE_RATE = 16000
HOP = 160
WINDOW = 640
N_FFT = 1024
N_MELS = 80
F_MIN = 0.0
F_MAX = 8000.0
LOG_FLOOR = 1e-5
F0_MIN = 50.0
F0_MAX = 500.0
VOICING_THRESHOLD = 0.3


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)

    @property
    def duration(self):
        return self.samples.size / self.sample_rate


@dataclass
class MelSpectrogram:
    frames: np.ndarray
    hop: int = HOP
    window: int = WINDOW
    normalized: bool = False

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 2 or self.frames.shape[1] != N_MELS:
            raise ContractError(f"mel frames must be T x {N_MELS}, got {self.frames.shape}")

    def __len__(self):
        return self.frames.shape[0]


@dataclass(frozen=True)
class MelStats:
    global_min: float
    global_max: float

    def __post_init__(self):
        if not self.global_min < self.global_max:
            raise ContractError(f"degenerate mel stats: min={self.global_min} max={self.global_max}")


@dataclass
class PitchTrack:
    f0: np.ndarray
    frame_rate: float = SAMPLE_RATE / HOP
    normalized: np.ndarray | None = None
    voiced: np.ndarray = field(default=None)

    def __post_init__(self):
        self.f0 = np.asarray(self.f0, dtype=np.float64).reshape(-1)
        if self.voiced is None:
            self.voiced = self.f0 > 0
        if np.any(self.f0 < 0):
            raise ContractError("f0 must be non-negative")

    def __len__(self):
        return self.f0.size


def _check_rate(w):
    if w.sample_rate != SAMPLE_RATE:
        raise ContractError(f"expected {SAMPLE_RATE} Hz audio, got {w.sample_rate}")


def num_frames(n_samples):
    """Frame count for an un-padded signal of ``n_samples``."""
    if n_samples < WINDOW:
        return 0
    return (n_samples - WINDOW) // HOP + 1


def hann(n=WINDOW):
    # periodic Hann
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels=N_MELS, n_fft=N_FFT, sr=SAMPLE_RATE, fmin=F_MIN, fmax=F_MAX):
    """Triangular, area-normalized filters on the HTK mel scale, (n_mels, n_fft//2+1).

    Band edges are ``n_mels + 2`` points evenly spaced in mel.  Below the first
    centre the lowest filter holds its peak value so the DC bin is covered.
    """
    freqs = np.arange(n_fft // 2 + 1) * sr / n_fft
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None, :] - lo) / (mid - lo)
    down = (hi - freqs[None, :]) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(up, down))
    fb[0, freqs <= edges[1]] = 1.0
    fb *= (2.0 / (hi - lo))
    return fb


_FB = None


def _filterbank():
    global _FB
    if _FB is None:
        _FB = mel_filterbank()
    return _FB


def frame_signal(x, window=WINDOW, hop=HOP):
    n = num_frames(x.size) if window == WINDOW and hop == HOP else (x.size - window) // hop + 1
    if n <= 0:
        raise LengthError(f"signal of {x.size} samples is shorter than the {window}-sample window")
    return np.lib.stride_tricks.as_strided(
        x, shape=(n, window), strides=(x.strides[0] * hop, x.strides[0]), writeable=False)


def stft(x):
    """Complex STFT, (T, n_fft//2 + 1)."""
    frames = frame_signal(np.ascontiguousarray(x, dtype=np.float64))
    return np.fft.rfft(frames * hann(), n=N_FFT, axis=1)


def istft(spec, length=None):
    """Least-squares inverse of :func:`stft` via windowed overlap-add."""
    frames = np.fft.irfft(spec, n=N_FFT, axis=1)[:, :WINDOW]
    out, norm = _accel.overlap_add(frames, hann(), HOP)
    out = np.where(norm > 1e-8, out / np.maximum(norm, 1e-8), 0.0)
    if length is not None:
        out = out[:length]
    return out


def mel_from_magnitude(mag):
    return np.log(np.maximum(mag @ _filterbank().T, LOG_FLOOR))


def compute_mel(w):
    """Log-mel spectrogram, T = floor((len - 640) / 160) + 1 frames."""
    _check_rate(w)
    if w.samples.size < WINDOW:
        raise LengthError(f"need at least {WINDOW} samples, got {w.samples.size}")
    return MelSpectrogram(mel_from_magnitude(np.abs(stft(w.samples))))


def compute_mel_stats(corpus):
    """Global min/max over every frame of every mel in ``corpus``."""
    lo, hi = np.inf, -np.inf
    for m in corpus:
        frames = m.frames if isinstance(m, MelSpectrogram) else np.asarray(m)
        if frames.size:
            lo = min(lo, float(frames.min()))
            hi = max(hi, float(frames.max()))
    if not np.isfinite(lo):
        raise ContractError("cannot compute mel stats of an empty corpus")
    return MelStats(lo, hi)


def normalize_mel(m, s):
    if m.normalized:
        raise ContractError("mel is already normalized")
    v = (m.frames.astype(np.float64) - s.global_min) / (s.global_max - s.global_min)
    return replace(m, frames=np.clip(v, 0.0, 1.0), normalized=True)


def denormalize_mel(m, s):
    if not m.normalized:
        raise ContractError("mel is not normalized")
    v = m.frames.astype(np.float64) * (s.global_max - s.global_min) + s.global_min
    return replace(m, frames=v, normalized=False)


def stack_frames(m):
    """Concatenate non-overlapping pairs of 100 Hz frames -> (T // 2, 160) at 50 Hz."""
    frames = m.frames if isinstance(m, MelSpectrogram) else np.asarray(m)
    if frames.shape[0] < 2:
        raise LengthError(f"stacking needs at least 2 frames, got {frames.shape[0]}")
    n = frames.shape[0] // 2
    return frames[:2 * n].reshape(n, 2 * frames.shape[1])


def estimate_f0(w, threshold=VOICING_THRESHOLD, fmin=F0_MIN, fmax=F0_MAX):
    """Autocorrelation pitch track at 100 Hz, aligned with the mel frames.

    A frame is voiced when its normalized-autocorrelation peak within the
    lag range for [fmin, fmax] reaches ``threshold``; unvoiced frames get 0.
    """
    _check_rate(w)
    if w.samples.size < WINDOW:
        return PitchTrack(np.zeros(0))
    frames = frame_signal(np.ascontiguousarray(w.samples, dtype=np.float64))
    lag_min = int(np.floor(SAMPLE_RATE / fmax))
    lag_max = int(np.ceil(SAMPLE_RATE / fmin))
    peak, lag = _accel.nacf_peaks(frames, lag_min, lag_max)
    voiced = (peak >= threshold) & (lag > 0)
    f0 = np.zeros(frames.shape[0])
    f0[voiced] = np.clip(SAMPLE_RATE / lag[voiced], fmin, fmax)
    return PitchTrack(f0)


def normalize_f0(p, eps=1e-5):
    """Per-utterance z-score over voiced frames; unvoiced frames map to 0."""
    voiced = p.f0 > 0
    z = np.zeros_like(p.f0)
    if voiced.any():
        vals = p.f0[voiced]
        mu = vals.mean()
        sd = max(vals.std(), eps)
        z[voiced] = (vals - mu) / sd
    return PitchTrack(p.f0.copy(), p.frame_rate, normalized=z, voiced=voiced)


def mel_to_magnitude(mel_log, iters=200):
    """Non-negative least-squares inversion of the mel filterbank.

    Multiplicative updates for min ||fb @ s - mel||^2, s >= 0, started from
    the clipped pseudo-inverse.
    """
    fb = _filterbank()
    target = np.exp(np.asarray(mel_log, dtype=np.float64))       # (T, M)
    s = np.maximum(target @ np.linalg.pinv(fb).T, 1e-8)
    num = target @ fb                                            # (T, F)
    gram = fb.T @ fb
    for _ in range(iters):
        s *= num / np.maximum(s @ gram, 1e-12)
    return s


def griffin_lim(m, iters=32, seed=0, return_errors=False):
    """Reconstruct a waveform from a (denormalized) log-mel spectrogram."""
    if iters < 1:
        raise ContractError("griffin_lim needs iters >= 1")
    if m.normalized:
        raise ContractError("griffin_lim expects a denormalized log-mel spectrogram")
    mag = mel_to_magnitude(m.frames)
    length = (mag.shape[0] - 1) * HOP + WINDOW
    rng = np.random.default_rng(seed)
    phase = np.exp(2j * np.pi * rng.random(mag.shape))
    errors = []
    x = istft(mag * phase, length)
    for _ in range(iters):
        spec = stft(x)
        if return_errors:
            errors.append(float(np.linalg.norm(np.abs(spec) - mag) / max(np.linalg.norm(mag), 1e-12)))
        phase = np.exp(1j * np.angle(spec))
        x = istft(mag * phase, length)
    w = Waveform(np.clip(x, -1.0, 1.0))
    return (w, errors) if return_errors else w


def mel_spectral_error(w, target):
    """Relative L2 distance between the mel of ``w`` and ``target``, linear-magnitude domain."""
    rec = np.exp(compute_mel(w).frames.astype(np.float64))
    ref = np.exp(np.asarray(target.frames, dtype=np.float64))
    n = min(rec.shape[0], ref.shape[0])
    return float(np.linalg.norm(rec[:n] - ref[:n]) / max(np.linalg.norm(ref[:n]), 1e-12))
