"""Corpus management: feature files, manifests, batching, synthetic corpus.

``FSFT1`` feature file layout::

    b"FSFT1" | u32 header_len | JSON header | float32 little-endian payload

The header holds ``kind``, ``frame_rate``, ``shape`` and ``normalized`` plus
any extra metadata (e.g. ``config_hash``).  Token ids are stored as float32,
which is exact for any realistic vocabulary.

Manifest: one JSON object per line with ``id``, ``duration`` (s), ``speaker``
and paths (relative to the manifest's directory) under ``wav`` and
``features`` (a kind -> path map); optional ``transcript``, ``symbols`` and
``pitch_classes`` for synthetic clips.
"""
from __future__ import annotations

import json
import logging
import os
import struct
import wave
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import dsp
from .errors import (
    BadMagicError,
    ContractError,
    FlowSpeechError,
    HeaderMismatchError,
    TruncatedPayloadError,
)
from .numerics.rng import stream

log = logging.getLogger(__name__)

MAGIC = b"FSFT1"
VIDEO_RATE = 25.0


# -- feature files -----------------------------------------------------------
@dataclass
class Feature:
    kind: str
    data: np.ndarray
    frame_rate: float
    normalized: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)


def feature_bytes(feat):
    header = dict(feat.meta)
    header.update(kind=feat.kind, frame_rate=float(feat.frame_rate),
                  shape=list(feat.data.shape), normalized=bool(feat.normalized))
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = np.asarray(feat.data, dtype="<f4").tobytes()
    return MAGIC + struct.pack("<I", len(raw)) + raw + payload


def save_feature(path, feat):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(feature_bytes(feat))
        os.replace(tmp, path)
    except OSError as exc:
        raise FlowSpeechError(f"cannot write feature file {path}: {exc}") from exc
    return path


def parse_feature(blob, source="<bytes>"):
    if blob[:5] != MAGIC:
        raise BadMagicError(f"{source}: not an FSFT1 feature file")
    if len(blob) < 9:
        raise TruncatedPayloadError(f"{source}: header length missing")
    (hlen,) = struct.unpack("<I", blob[5:9])
    if len(blob) < 9 + hlen:
        raise TruncatedPayloadError(f"{source}: header truncated")
    header = json.loads(blob[9:9 + hlen].decode("utf-8"))
    shape = tuple(int(n) for n in header.pop("shape"))
    payload = blob[9 + hlen:]
    expected = int(np.prod(shape)) * 4
    if len(payload) < expected:
        raise TruncatedPayloadError(
            f"{source}: header shape {shape} needs {expected // 4} values, payload has {len(payload) // 4}")
    if len(payload) > expected:
        raise HeaderMismatchError(f"{source}: payload longer than header shape {shape}")
    data = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
    return Feature(kind=header.pop("kind"), data=data, frame_rate=header.pop("frame_rate"),
                   normalized=header.pop("normalized"), meta=header)


def load_feature(path, kind=None, frame_rate=None):
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise FlowSpeechError(f"cannot read feature file {path}: {exc}") from exc
    feat = parse_feature(blob, str(path))
    if kind is not None and feat.kind != kind:
        raise HeaderMismatchError(f"{path}: expected kind '{kind}', file holds '{feat.kind}'")
    if frame_rate is not None and not np.isclose(feat.frame_rate, frame_rate):
        raise HeaderMismatchError(f"{path}: expected {frame_rate} Hz, file declares {feat.frame_rate}")
    return feat


# -- WAV ---------------------------------------------------------------------
def write_wav(path, w):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pcm = np.round(np.clip(w.samples, -1.0, 1.0) * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(w.sample_rate)
        fh.writeframes(pcm.tobytes())
    return path


def read_wav(path):
    with wave.open(str(path), "rb") as fh:
        if fh.getsampwidth() != 2 or fh.getnchannels() != 1:
            raise ContractError(f"{path}: expected mono 16-bit PCM")
        rate = fh.getframerate()
        pcm = np.frombuffer(fh.readframes(fh.getnframes()), dtype="<i2")
    return dsp.Waveform(pcm.astype(np.float64) / 32767.0, rate)


# -- manifests ---------------------------------------------------------------
def write_manifest(path, records):
    path = Path(path)
    records = sorted(records, key=lambda r: r["id"])
    ids = [r["id"] for r in records]
    if len(set(ids)) != len(ids):
        raise ContractError("manifest clip ids must be unique")
    lines = [json.dumps(r, sort_keys=True) for r in records]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def load_manifest(path, check_files=True):
    path = Path(path)
    records = []
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        rec = json.loads(line)
        for key in ("id", "duration"):
            if key not in rec:
                raise ContractError(f"{path}:{n}: record lacks '{key}'")
        records.append(rec)
    ids = [r["id"] for r in records]
    if len(set(ids)) != len(ids):
        raise ContractError(f"{path}: duplicate clip ids")
    if check_files:
        missing = [str(path.parent / p) for r in records for p in _record_paths(r)
                   if not (path.parent / p).exists()]
        if missing:
            raise FlowSpeechError("manifest references missing files:\n  " + "\n  ".join(missing))
    return sorted(records, key=lambda r: r["id"])


def _record_paths(rec):
    if rec.get("wav"):
        yield rec["wav"]
    yield from (rec.get("features") or {}).values()


# -- batching ----------------------------------------------------------------
@dataclass
class Batch:
    ids: list
    arrays: dict
    masks: dict
    lengths: dict


def plan_batches(records, batch_seconds, seed=0):
    """Group clips into duration-bounded batches.

    Clips are sorted by duration (length buckets), packed greedily so every
    batch totals at most ``batch_seconds``, and the batch order is shuffled
    with ``seed``.  Returns (batches of ids, skipped ids).
    """
    if batch_seconds <= 0:
        raise ContractError("batch_seconds must be positive")
    skipped = [r["id"] for r in records if r["duration"] > batch_seconds]
    for cid in skipped:
        log.warning("clip %s is longer than the %.2fs batch budget; skipped", cid, batch_seconds)
    usable = sorted((r for r in records if r["duration"] <= batch_seconds),
                    key=lambda r: (r["duration"], r["id"]))
    batches, cur, total = [], [], 0.0
    for r in usable:
        if cur and total + r["duration"] > batch_seconds + 1e-9:
            batches.append(cur)
            cur, total = [], 0.0
        cur.append(r["id"])
        total += r["duration"]
    if cur:
        batches.append(cur)
    order = stream(seed, "batches").permutation(len(batches))
    return [batches[i] for i in order], skipped


def pad_sequences(seqs, pad_value=0.0):
    """Stack variable-length arrays along a new batch axis, padding time (axis 0)."""
    lengths = np.array([s.shape[0] for s in seqs])
    T = int(lengths.max())
    first = np.asarray(seqs[0])
    out = np.full((len(seqs), T) + first.shape[1:], pad_value, dtype=first.dtype)
    for i, s in enumerate(seqs):
        out[i, :s.shape[0]] = s
    mask = np.arange(T)[None, :] < lengths[:, None]
    return out, mask, lengths


def make_batches(records, batch_seconds, seed=0, features=None):
    """Yield padded :class:`Batch` objects.

    ``features`` maps clip id -> {name: array with time on axis 0}; every
    named stream is padded separately and gets its own validity mask.
    """
    plan, _ = plan_batches(records, batch_seconds, seed)
    for ids in plan:
        arrays, masks, lengths = {}, {}, {}
        if features is not None:
            for name in features[ids[0]]:
                arrays[name], masks[name], lengths[name] = pad_sequences(
                    [np.asarray(features[i][name]) for i in ids])
        yield Batch(ids, arrays, masks, lengths)


# -- synthetic corpus --------------------------------------------------------
@dataclass
class SyntheticSpec:
    n_speakers: int = 4
    n_content_symbols: int = 8
    n_clips: int = 20
    min_seconds: float = 1.0
    max_seconds: float = 2.0
    seed: int = 0
    visual_dim: int = 32
    n_pitch_classes: int = 3
    symbol_seconds: float = 0.2
    visual_noise: float = 0.05
    formant_bandwidth: float = 120.0     # Hz, first formant; higher formants are 1.5x and 2x wider

    def __post_init__(self):
        if self.n_speakers < 2:
            raise ContractError("need at least 2 speakers")
        if self.n_content_symbols < 2:
            raise ContractError("need at least 2 content symbols")
        if not 0 < self.min_seconds <= self.max_seconds:
            raise ContractError("invalid clip length range")
        frames = self.symbol_seconds * VIDEO_RATE
        if abs(frames - round(frames)) > 1e-9 or frames < 1:
            raise ContractError("symbol_seconds must be a whole number of 25 Hz video frames")


PITCH_SEMITONES = (-3.0, 0.0, 3.0, -6.0, 6.0)


class SyntheticWorld:
    """The fixed symbol/speaker inventory a synthetic corpus is drawn from."""

    def __init__(self, spec):
        self.spec = spec
        rng = stream(spec.seed, "world")
        n_sym, n_spk = spec.n_content_symbols, spec.n_speakers
        self.formants = np.stack([
            np.sort(np.stack([rng.uniform(300, 900, n_sym), rng.uniform(1000, 2400, n_sym),
                              rng.uniform(2500, 3600, n_sym)], axis=1), axis=1)])[0]
        self.formant_gains = rng.uniform(0.5, 1.0, size=(n_sym, 3))
        self.base_f0 = np.linspace(100.0, 240.0, n_spk)
        self.formant_scale = np.linspace(0.9, 1.12, n_spk)[rng.permutation(n_spk)]
        self.tilt = rng.uniform(0.3, 1.2, n_spk)
        seg = int(round(spec.symbol_seconds * VIDEO_RATE))
        d = spec.visual_dim
        self.visual_symbol = rng.normal(0.0, 1.0, size=(n_sym, seg, d))
        self.visual_pitch = rng.normal(0.0, 0.7, size=(spec.n_pitch_classes, d))
        self.visual_speaker = rng.normal(0.0, 0.5, size=(n_spk, d))
        self.pitch_semitones = np.array(PITCH_SEMITONES[:spec.n_pitch_classes]
                                        if spec.n_pitch_classes <= len(PITCH_SEMITONES)
                                        else np.linspace(-6, 6, spec.n_pitch_classes))

    @property
    def frames_per_symbol(self):
        return int(round(self.spec.symbol_seconds * VIDEO_RATE))

    def f0_contour(self, pitch_classes, speaker, n_samples):
        sr = dsp.SAMPLE_RATE
        seg = int(round(self.spec.symbol_seconds * sr))
        semis = np.repeat(self.pitch_semitones[np.asarray(pitch_classes)], seg)[:n_samples]
        kernel = np.hanning(int(0.06 * sr))
        kernel /= kernel.sum()
        padded = np.pad(semis, (kernel.size // 2, kernel.size - kernel.size // 2 - 1), mode="edge")
        smooth = np.convolve(padded, kernel, mode="valid")
        return self.base_f0[speaker] * 2.0 ** (smooth / 12.0)

    def render_audio(self, symbols, pitch_classes, speaker, noise_rng):
        sr = dsp.SAMPLE_RATE
        seg = int(round(self.spec.symbol_seconds * sr))
        n = seg * len(symbols)
        f0 = self.f0_contour(pitch_classes, speaker, n)
        phase = 2.0 * np.pi * np.cumsum(f0) / sr
        # per-sample formant targets, crossfaded over 10 ms at symbol boundaries
        sym = np.repeat(np.asarray(symbols), seg)
        fade = np.hanning(int(0.01 * sr))
        fade /= fade.sum()
        centers = self.formants[sym] * self.formant_scale[speaker]
        gains = self.formant_gains[sym]
        centers = np.stack([np.convolve(np.pad(centers[:, i], (fade.size // 2, fade.size - fade.size // 2 - 1),
                                               mode="edge"), fade, mode="valid") for i in range(3)], axis=1)
        gains = np.stack([np.convolve(np.pad(gains[:, i], (fade.size // 2, fade.size - fade.size // 2 - 1),
                                             mode="edge"), fade, mode="valid") for i in range(3)], axis=1)
        out = np.zeros(n)
        n_harm = int(7800 // f0.min())
        bw = self.spec.formant_bandwidth
        for h in range(1, n_harm + 1):
            fh = h * f0
            env = (gains[:, 0] * np.exp(-0.5 * ((fh - centers[:, 0]) / bw) ** 2)
                   + gains[:, 1] * np.exp(-0.5 * ((fh - centers[:, 1]) / (1.5 * bw)) ** 2)
                   + gains[:, 2] * np.exp(-0.5 * ((fh - centers[:, 2]) / (2.0 * bw)) ** 2)
                   + 0.02)
            env *= (fh / 1000.0 + 1.0) ** (-self.tilt[speaker])
            env[fh >= 7900] = 0.0
            out += env * np.sin(h * phase)
        out *= 0.5 / np.max(np.abs(out))
        out += noise_rng.normal(0.0, 1e-4, n)
        return dsp.Waveform(out)

    def render_visual(self, symbols, pitch_classes, speaker, noise_rng):
        seg = self.frames_per_symbol
        parts = [self.visual_symbol[s] + self.visual_pitch[p] + self.visual_speaker[speaker]
                 for s, p in zip(symbols, pitch_classes)]
        v = np.concatenate(parts, axis=0)
        return v + noise_rng.normal(0.0, self.spec.visual_noise, size=v.shape)

    def sample_clip(self, index):
        spec = self.spec
        rng = stream(spec.seed, "clip", index)
        lo = int(np.ceil(spec.min_seconds / spec.symbol_seconds - 1e-9))
        hi = int(np.floor(spec.max_seconds / spec.symbol_seconds + 1e-9))
        n_sym = int(rng.integers(lo, hi + 1))
        symbols = rng.integers(0, spec.n_content_symbols, n_sym)
        pitch = rng.integers(0, spec.n_pitch_classes, n_sym)
        speaker = index % spec.n_speakers
        return symbols, pitch, speaker, rng


def generate_synthetic_corpus(spec, out_dir):
    """Write WAVs, 25 Hz visual features and ``manifest.jsonl`` under ``out_dir``."""
    out_dir = Path(out_dir)
    world = SyntheticWorld(spec)
    records = []
    for i in range(spec.n_clips):
        symbols, pitch, speaker, rng = world.sample_clip(i)
        cid = f"clip{i:04d}"
        audio = world.render_audio(symbols, pitch, speaker, rng)
        visual = world.render_visual(symbols, pitch, speaker, rng)
        wav_rel = f"wav/{cid}.wav"
        vis_rel = f"visual/{cid}.fsft"
        write_wav(out_dir / wav_rel, audio)
        save_feature(out_dir / vis_rel, Feature("visual", visual, VIDEO_RATE))
        records.append({
            "id": cid, "duration": round(audio.duration, 6), "speaker": f"spk{speaker}",
            "wav": wav_rel, "features": {"visual": vis_rel},
            "symbols": [int(s) for s in symbols], "pitch_classes": [int(p) for p in pitch],
        })
    write_manifest(out_dir / "manifest.jsonl", records)
    (out_dir / "corpus.json").write_text(json.dumps({
        "spec": asdict(spec), "base_f0": world.base_f0.tolist()}, sort_keys=True, indent=1))
    return out_dir / "manifest.jsonl"
