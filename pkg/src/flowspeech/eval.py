"""Objective metrics: normalized-F0 MAE, speaker similarity, mel MSE, token accuracy."""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import dsp
from .encoders import SpeakerEmbedding
from .errors import ContractError
from .tokenize import TokenSequence

log = logging.getLogger(__name__)

METRICS = ("mae_f0", "secs", "mel_mse", "token_accuracy")


@dataclass
class F0Comparison:
    value: float
    covoiced: int
    warning: bool


def compare_f0(generated, reference):
    """Normalized-F0 MAE over frames voiced in both clips, after truncating to the shorter."""
    if generated.samples.size == 0 or reference.samples.size == 0:
        raise ContractError("mae_f0 needs two nonempty waveforms")
    a = dsp.normalize_f0(dsp.estimate_f0(generated))
    b = dsp.normalize_f0(dsp.estimate_f0(reference))
    n = min(len(a), len(b))
    both = a.voiced[:n] & b.voiced[:n]
    if not both.any():
        log.warning("mae_f0: no co-voiced frames, reporting 0")
        return F0Comparison(0.0, 0, True)
    diff = np.abs(a.normalized[:n][both] - b.normalized[:n][both])
    return F0Comparison(float(diff.mean()), int(both.sum()), False)


def mae_f0(generated, reference):
    return compare_f0(generated, reference).value


def _embedding(x, embedder, stats):
    if isinstance(x, SpeakerEmbedding):
        return x.vector
    if isinstance(x, dsp.Waveform):
        x = dsp.compute_mel(x)
    if isinstance(x, dsp.MelSpectrogram) and not x.normalized:
        if stats is None:
            raise ContractError("secs on an unnormalized mel needs mel stats")
        x = dsp.normalize_mel(x, stats)
    frames = x.frames if isinstance(x, dsp.MelSpectrogram) else np.asarray(x)
    if embedder is None:
        raise ContractError("secs needs a trained speaker embedder")
    return embedder.embed(frames).vector


def secs(generated, reference, embedder=None, stats=None):
    """Cosine similarity of the unit speaker embeddings of two clips.

    Accepts waveforms, mels (normalized with ``stats`` when needed) or
    ready-made SpeakerEmbedding objects.
    """
    a = _embedding(generated, embedder, stats)
    b = _embedding(reference, embedder, stats)
    return float(np.clip(np.dot(a, b), -1.0, 1.0))


def _frames(m):
    return m.frames if isinstance(m, dsp.MelSpectrogram) else np.asarray(m, dtype=np.float64)


def mel_mse(generated, reference, mask=None):
    """Mean squared error in normalized mel space over the common (optionally masked) frames."""
    for m in (generated, reference):
        if isinstance(m, dsp.MelSpectrogram) and not m.normalized:
            raise ContractError("mel_mse compares normalized mels")
    a, b = _frames(generated).astype(np.float64), _frames(reference).astype(np.float64)
    if a.shape[1:] != b.shape[1:]:
        raise ContractError(f"mel channel counts differ: {a.shape} vs {b.shape}")
    n = min(a.shape[0], b.shape[0])
    sq = (a[:n] - b[:n]) ** 2
    if mask is None:
        return float(sq.mean()) if n else 0.0
    m = np.asarray(mask, dtype=bool)[:n]
    return float(sq[m].mean()) if m.any() else 0.0


def token_accuracy(pred, target):
    """Exact-match fraction over the common prefix of two token streams of the same kind."""
    if isinstance(pred, TokenSequence) and isinstance(target, TokenSequence) and pred.kind != target.kind:
        raise ContractError(f"token kinds differ: {pred.kind} vs {target.kind}")
    a = np.asarray(getattr(pred, "ids", pred)).reshape(-1)
    b = np.asarray(getattr(target, "ids", target)).reshape(-1)
    n = min(a.size, b.size)
    if n == 0:
        raise ContractError("token_accuracy needs nonempty streams")
    return float(np.mean(a[:n] == b[:n]))


@dataclass
class EvalReport:
    per_clip: dict = field(default_factory=dict)     # id -> {metric: value}
    config_hash: str = ""
    warnings: list = field(default_factory=list)

    def add(self, clip_id, **values):
        self.per_clip.setdefault(clip_id, {}).update({k: float(v) for k, v in values.items()})

    @property
    def means(self):
        out = {}
        for name in METRICS:
            vals = [m[name] for m in self.per_clip.values() if name in m]
            if vals:
                out[name] = float(np.mean(vals))
        return out

    def to_dict(self):
        return {"config_hash": self.config_hash, "means": self.means,
                "per_clip": {k: self.per_clip[k] for k in sorted(self.per_clip)},
                "warnings": list(self.warnings)}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(per_clip=d["per_clip"], config_hash=d.get("config_hash", ""), warnings=d.get("warnings", []))

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("id",) + METRICS)
        for k in sorted(self.per_clip):
            w.writerow((k,) + tuple(self.per_clip[k].get(m, "") for m in METRICS))
        return buf.getvalue()
