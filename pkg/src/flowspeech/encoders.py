"""Attribute encoders: visual features -> content tokens, pitch tokens, speaker embedding.

All three share a Conformer stack.  Visual features arrive at 25 Hz and
are repeated 2x in time before the stack, so every encoder runs at 50 Hz.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from . import data as data_mod
from .errors import ContractError, ShapeError
from .numerics import F, Tensor
from .numerics.nn import Linear, Module, attention_mask, multi_head_attention, param, sinusoidal_embedding
from .numerics.optim import Adam
from .numerics.rng import stream
from .numerics.tensor import no_grad

log = logging.getLogger(__name__)

LABEL_SMOOTHING = 0.1
UPSAMPLE = 2


@dataclass
class EncoderConfig:
    input_dim: int = 32
    hidden: int = 256
    blocks: int = 4
    heads: int = 4
    kernel: int = 15
    ff_mult: int = 4
    output_dim: int = 100
    head: str = "classify"      # classify | embed
    steps: int = 2000
    batch_seconds: float = 12.0
    lr: float = 1e-3
    warmup_steps: int = 1000
    label_smoothing: float = LABEL_SMOOTHING
    seed: int = 0

    def __post_init__(self):
        if self.head not in ("classify", "embed"):
            raise ContractError(f"unknown encoder head '{self.head}'")
        if self.hidden % self.heads:
            raise ContractError("hidden size must divide evenly into heads")


@dataclass
class SpeakerEmbedding:
    vector: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64).reshape(-1)
        n = np.linalg.norm(v)
        if n == 0:
            raise ContractError("speaker embedding cannot be the zero vector")
        if abs(n - 1.0) > 1e-5:
            v = v / n
        self.vector = v


class ConformerBlock(Module):
    def __init__(self, cfg, rng):
        H, M = cfg.hidden, cfg.hidden * cfg.ff_mult
        self.heads = cfg.heads
        self.kernel = cfg.kernel
        self.ff1 = [Linear(H, M, rng), Linear(M, H, rng)]
        self.qkv = Linear(H, 3 * H, rng)
        self.att_out = Linear(H, H, rng)
        self.pw1 = Linear(H, 2 * H, rng)
        self.dw = param(rng.uniform(-1, 1, size=(cfg.kernel, H)) / np.sqrt(cfg.kernel))
        self.pw2 = Linear(H, H, rng)
        self.ff2 = [Linear(H, M, rng), Linear(M, H, rng)]

    def forward(self, x, mask=None):
        x = x + 0.5 * self.ff1[1](F.silu(self.ff1[0](F.layer_norm(x))))
        x = x + multi_head_attention(F.layer_norm(x), self.qkv, self.att_out, self.heads, mask)
        x = x + self._conv(F.layer_norm(x), mask)
        x = x + 0.5 * self.ff2[1](F.silu(self.ff2[0](F.layer_norm(x))))
        return F.layer_norm(x)

    def _conv(self, x, mask):
        H = x.shape[-1]
        h = self.pw1(x)
        h = h[..., :H] * F.sigmoid(h[..., H:])
        if mask is not None:
            # padded frames must look like the zero padding of an unpadded clip
            h = h * mask[..., None].astype(h.data.dtype)
        h = F.depthwise_conv1d(h, self.dw, padding=self.kernel // 2)
        return self.pw2(F.silu(F.layer_norm(h)))


class ConformerEncoder(Module):
    def __init__(self, cfg):
        rng = stream(cfg.seed, "encoder", cfg.head, "init")
        self.cfg = cfg
        self.in_proj = Linear(cfg.input_dim, cfg.hidden, rng)
        self.blocks = [ConformerBlock(cfg, rng) for _ in range(cfg.blocks)]
        self.head = Linear(cfg.hidden, cfg.output_dim, rng, zero=cfg.head == "classify")

    def hidden(self, visual, lengths=None):
        """(B, T_v, D_v) at 25 Hz -> ((B, 2 T_v, H) at 50 Hz, valid mask or None)."""
        x = visual if isinstance(visual, Tensor) else Tensor(visual)
        if x.ndim == 2:
            x = x.reshape(1, *x.shape)
        if x.shape[-1] != self.cfg.input_dim:
            raise ShapeError(f"visual dim {x.shape[-1]} != encoder input dim {self.cfg.input_dim}")
        if x.shape[1] < 1:
            raise ContractError("empty visual feature sequence")
        T = x.shape[1] * UPSAMPLE
        x = F.take(x, np.repeat(np.arange(x.shape[1]), UPSAMPLE), axis=1)
        mask = None if lengths is None else attention_mask(np.asarray(lengths) * UPSAMPLE, T)
        h = self.in_proj(x) + Tensor(sinusoidal_embedding(np.arange(T), self.cfg.hidden))
        for block in self.blocks:
            h = block(h, mask)
        return h, mask

    def logits(self, visual, lengths=None):
        h, _ = self.hidden(visual, lengths)
        return self.head(h)

    def embed(self, visual, lengths=None):
        """Mean over valid frames -> projection -> unit norm, (B, D_s)."""
        h, mask = self.hidden(visual, lengths)
        pooled = mean_pool(h, mask)
        return F.l2_normalize(self.head(pooled))

    def forward(self, visual, lengths=None):
        return self.logits(visual, lengths) if self.cfg.head == "classify" else self.embed(visual, lengths)


def mean_pool(h, mask=None):
    """Temporal mean of (B, T, H) over valid frames."""
    if mask is None:
        return F.mean(h, axis=1)
    m = mask[..., None].astype(h.data.dtype)
    return F.sum_(h * m, axis=1) / Tensor(np.maximum(m.sum(axis=1), 1.0))


def conformer_forward(x, e):
    """Hidden sequence (T, H) for one clip of visual features (T_v, D_v)."""
    frames = x.data if isinstance(x, data_mod.Feature) else x
    with no_grad():
        h, _ = e.hidden(np.asarray(frames))
    return h.data[0]


# -- losses -----------------------------------------------------------------------
def _smoothed_ce(target, logits, alpha, mask):
    ids = np.asarray(getattr(target, "ids", target))
    lg = logits if isinstance(logits, Tensor) else Tensor(logits)
    if lg.shape[:-1] != ids.shape:
        raise ContractError(f"target shape {ids.shape} does not match logits {lg.shape}")
    logp = F.log_softmax(lg, axis=-1)
    nll = -F.take_along(logp, ids[..., None], axis=-1)[..., 0]
    uniform = -F.mean(logp, axis=-1)
    frame = (1.0 - alpha) * nll + alpha * uniform
    if frame.ndim == 1:
        if mask is not None:
            m = np.asarray(mask, dtype=frame.data.dtype)
            return F.sum_(frame * m) / max(float(m.sum()), 1.0)
        return F.mean(frame)
    if mask is None:
        return F.mean(frame)
    m = np.asarray(mask, dtype=frame.data.dtype)
    per_clip = F.sum_(frame * m, axis=-1) / Tensor(np.maximum(m.sum(axis=-1), 1.0))
    return F.mean(per_clip)


def content_loss(target, logits, alpha=LABEL_SMOOTHING, mask=None):
    """Frame-averaged (1 - alpha) CE(target) + alpha CE(uniform).

    With a (B, T) mask the result is the mean over clips of each clip's
    frame average, so padding never changes the value.
    """
    return _smoothed_ce(target, logits, alpha, mask)


def pitch_loss(target, logits, alpha=LABEL_SMOOTHING, mask=None):
    return _smoothed_ce(target, logits, alpha, mask)


def speaker_loss(target, pred):
    """1 - cos(target, pred); works on Tensors (batched, averaged) or vectors."""
    if isinstance(target, SpeakerEmbedding):
        target = target.vector
    if isinstance(pred, SpeakerEmbedding):
        pred = pred.vector
    t = target if isinstance(target, Tensor) else Tensor(target)
    p = pred if isinstance(pred, Tensor) else Tensor(pred)
    if t.shape != p.shape:
        raise ContractError(f"embedding shapes differ: {t.shape} vs {p.shape}")
    tn = np.linalg.norm(t.data, axis=-1)
    pn = np.linalg.norm(p.data, axis=-1)
    if np.any(tn == 0) or np.any(pn == 0):
        raise ContractError("cosine loss is undefined for a zero vector")
    cos = F.sum_(F.l2_normalize(t) * F.l2_normalize(p), axis=-1)
    return F.mean(1.0 - cos)


def speaker_forward(x, e):
    frames = x.data if isinstance(x, data_mod.Feature) else np.asarray(x)
    if frames.shape[0] == 0:
        raise ContractError("empty visual feature sequence")
    with no_grad():
        v = e.embed(frames).data[0]
    return SpeakerEmbedding(v)


# -- training -----------------------------------------------------------------------
@dataclass
class EncoderExample:
    id: str
    visual: np.ndarray        # (T_v, D_v) at 25 Hz
    target: np.ndarray        # (T,) token ids at 50 Hz, or (D_s,) embedding
    duration: float


def _batch(examples, kind):
    vis, _, lengths = data_mod.pad_sequences([e.visual for e in examples])
    if kind == "speaker":
        return vis, lengths, np.stack([e.target for e in examples]), None
    T = vis.shape[1] * UPSAMPLE
    tgt = np.zeros((len(examples), T), dtype=np.int64)
    mask = np.zeros((len(examples), T), dtype=bool)
    for i, e in enumerate(examples):
        n = min(e.target.size, e.visual.shape[0] * UPSAMPLE)
        tgt[i, :n] = e.target[:n]
        mask[i, :n] = True
    return vis, lengths, tgt, mask


def encoder_loss(model, kind, examples, alpha=LABEL_SMOOTHING):
    vis, lengths, tgt, mask = _batch(examples, kind)
    if kind == "speaker":
        return speaker_loss(Tensor(tgt), model.embed(vis, lengths))
    logits = model.logits(vis, lengths)
    return _smoothed_ce(tgt, logits, alpha, mask)


def train_attribute_encoder(kind, dataset, cfg, log_fn=None):
    """Train one encoder ('content', 'pitch' or 'speaker') on its own parameters."""
    if kind not in ("content", "pitch", "speaker"):
        raise ContractError(f"unknown attribute kind '{kind}'")
    if not dataset:
        raise ContractError("cannot train an encoder on an empty dataset")
    if kind == "speaker" and cfg.head != "embed":
        cfg = replace(cfg, head="embed")
    model = ConformerEncoder(cfg)
    opt = Adam(model.parameters(), lr=cfg.lr, warmup_steps=cfg.warmup_steps, grad_clip=5.0)
    by_id = {e.id: e for e in dataset}
    records = [{"id": e.id, "duration": e.duration} for e in dataset]
    history = []
    epoch = 0
    plan = []
    for step in range(cfg.steps):
        if not plan:
            plan, _ = data_mod.plan_batches(records, max(cfg.batch_seconds, max(r["duration"] for r in records)),
                                            seed=cfg.seed * 1000 + epoch)
            epoch += 1
        ids = plan.pop()
        loss = encoder_loss(model, kind, [by_id[i] for i in ids], cfg.label_smoothing)
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(float(loss.item()))
        if log_fn is not None:
            log_fn({"step": step, "loss": history[-1]})
    return model, history


def predict_tokens(model, visual, length=None):
    """Argmax token ids at 50 Hz for one clip; optionally truncated to ``length``."""
    with no_grad():
        logits = model.logits(np.asarray(visual)).data[0]
    ids = logits.argmax(axis=-1)
    return ids[:length] if length is not None else ids


# -- audio-side speaker embedder ------------------------------------------------------
@dataclass
class EmbedderConfig:
    dim: int = 256
    hidden: int = 128
    steps: int = 600
    lr: float = 3e-3
    batch_size: int = 16
    seed: int = 0


def mel_statistics(mel_frames):
    """Gain-invariant utterance statistics of a (normalized) mel: (2 * n_mels,)."""
    m = np.asarray(mel_frames, dtype=np.float64)
    mu = m.mean(axis=0)
    return np.concatenate([mu - mu.mean(), m.std(axis=0)])


class AudioSpeakerEmbedder(Module):
    """Mel statistics -> MLP -> unit vector; the SECS embedder and speaker-target source."""

    def __init__(self, cfg, n_mels=80):
        rng = stream(cfg.seed, "audio_embedder", "init")
        self.cfg = cfg
        self.l1 = Linear(2 * n_mels, cfg.hidden, rng)
        self.l2 = Linear(cfg.hidden, cfg.hidden, rng)
        self.l3 = Linear(cfg.hidden, cfg.dim, rng)
        self.trained = False
        self.feature_mean = np.zeros(2 * n_mels)
        self.feature_std = np.ones(2 * n_mels)

    def forward(self, stats):
        x = Tensor((np.asarray(stats) - self.feature_mean) / self.feature_std)
        return F.l2_normalize(self.l3(F.silu(self.l2(F.silu(self.l1(x))))))

    def embed(self, mel_frames):
        if not self.trained:
            raise ContractError("speaker embedder has not been trained")
        with no_grad():
            v = self.forward(mel_statistics(mel_frames)[None]).data[0]
        return SpeakerEmbedding(v)

    def state_dict(self):
        sd = super().state_dict()
        sd["feature_mean"] = self.feature_mean.astype(np.float32)
        sd["feature_std"] = self.feature_std.astype(np.float32)
        return sd

    def load_state_dict(self, state, strict=True):
        state = dict(state)
        self.feature_mean = np.asarray(state.pop("feature_mean"), dtype=np.float64)
        self.feature_std = np.asarray(state.pop("feature_std"), dtype=np.float64)
        super().load_state_dict(state, strict)
        self.trained = True


def speaker_prototypes(n_speakers, dim, seed=0):
    """Fixed, mutually orthogonal unit targets, one per training speaker."""
    if n_speakers > dim:
        raise ContractError("embedding dim must be >= number of speakers")
    g = stream(seed, "speaker_prototypes").normal(size=(dim, n_speakers))
    q, _ = np.linalg.qr(g)
    return q.T


def train_audio_embedder(mels, speaker_ids, cfg=None, log_fn=None):
    """Fit the embedder so each speaker's clips align with that speaker's prototype."""
    cfg = cfg or EmbedderConfig()
    if not mels:
        raise ContractError("embedder training needs at least one clip")
    labels = sorted(set(speaker_ids))
    index = np.array([labels.index(s) for s in speaker_ids])
    protos = speaker_prototypes(len(labels), cfg.dim, cfg.seed)
    stats = np.stack([mel_statistics(m) for m in mels])
    model = AudioSpeakerEmbedder(cfg, n_mels=stats.shape[1] // 2)
    model.feature_mean = stats.mean(axis=0)
    model.feature_std = stats.std(axis=0) + 1e-3
    opt = Adam(model.parameters(), lr=cfg.lr)
    rng = stream(cfg.seed, "audio_embedder", "batches")
    history = []
    for step in range(cfg.steps):
        pick = rng.integers(0, len(mels), min(cfg.batch_size, len(mels)))
        loss = speaker_loss(Tensor(protos[index[pick]]), model(stats[pick]))
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(float(loss.item()))
        if log_fn is not None:
            log_fn({"step": step, "loss": history[-1]})
    model.trained = True
    return model, history
