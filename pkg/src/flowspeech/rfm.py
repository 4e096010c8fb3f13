"""Speech decoder: condition assembly, rectified flow matching, DiT with adaLN-Zero.

The decoder regresses the straight-path field ``x1 - x0`` at
``xt = (1 - t) x0 + t x1`` (x0 Gaussian noise, x1 a normalized mel), and
generates with a fixed-step Euler solver plus classifier-free guidance.

Also here: a DDIM noise-prediction baseline, a concat-conditioning
variant of the network, and the small analytic toy models the tests use.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import data as data_mod
from .errors import ContractError, ShapeError
from .numerics import F, Tensor
from .numerics.nn import Linear, Module, attention_mask, multi_head_attention, param, sinusoidal_embedding
from .numerics.optim import Adam
from .numerics.rng import stream
from .numerics.tensor import no_grad

log = logging.getLogger(__name__)

N_MELS = 80
STREAMS = ("content", "pitch", "speaker")


@dataclass
class DecoderConfig:
    layers: int = 8
    hidden: int = 512
    heads: int = 4
    ff_mult: int = 4
    n_mels: int = N_MELS
    content_vocab: int = 100
    pitch_vocab: int = 32
    content_dim: int = 192
    pitch_dim: int = 64
    speaker_dim: int = 256
    time_dim: int = 128
    conditioning: str = "adaln"          # adaln | concat
    parameterization: str = "velocity"   # velocity (flow) | epsilon (DDIM baseline)
    cond_dropout: float = 0.1
    logit_mean: float = 0.0
    logit_std: float = 1.0
    steps: int = 20000
    batch_seconds: float = 12.0
    lr: float = 1e-4
    warmup_steps: int = 1000
    grad_clip: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.conditioning not in ("adaln", "concat"):
            raise ContractError(f"unknown conditioning '{self.conditioning}'")
        if self.parameterization not in ("velocity", "epsilon"):
            raise ContractError(f"unknown parameterization '{self.parameterization}'")
        if self.hidden % self.heads:
            raise ContractError("hidden size must divide evenly into heads")
        if not 0.0 <= self.cond_dropout < 1.0:
            raise ContractError("cond_dropout must be in [0, 1)")

    @property
    def cond_dim(self):
        return self.content_dim + self.pitch_dim + self.speaker_dim


TINY_DECODER = dict(layers=2, hidden=128, heads=4, content_dim=32, pitch_dim=16, time_dim=32)


@dataclass
class SamplerConfig:
    steps: int = 30
    guidance_scale: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if int(self.steps) < 1:
            raise ContractError("sampler needs steps >= 1")
        if not self.guidance_scale > 0:
            raise ContractError("guidance scale must be > 0")
        self.steps = int(self.steps)


# -- conditions ------------------------------------------------------------------------
@dataclass
class ConditionBundle:
    """Per-clip condition, every stream already at the target length T."""
    content: Tensor
    pitch: Tensor
    speaker: Tensor
    assembled: Tensor
    null_flag: bool = False

    @property
    def length(self):
        return self.assembled.shape[0]


class ConditionEmbedder(Module):
    """Token tables for content and pitch plus the learned null condition."""

    def __init__(self, cfg, rng):
        self.cfg = cfg
        self.content = param(rng.normal(0.0, 1.0, size=(cfg.content_vocab, cfg.content_dim)))
        self.pitch = param(rng.normal(0.0, 1.0, size=(cfg.pitch_vocab, cfg.pitch_dim)))
        self.null = param(rng.normal(0.0, 0.02, size=(cfg.cond_dim,)))

    def channel_slices(self):
        c, p = self.cfg.content_dim, self.cfg.pitch_dim
        return {"content": slice(0, c), "pitch": slice(c, c + p), "speaker": slice(c + p, self.cfg.cond_dim)}

    def null_stream(self, T):
        return F.take(self.null.reshape(1, -1), np.zeros(T, dtype=np.int64), axis=0)

    def batch(self, content_ids, pitch_ids, speakers, lengths, drop=None, ablate=()):
        """Padded (B, T_max, C) condition for a training batch.

        ``drop`` (B,) swaps whole clips for the null condition; ``ablate``
        names streams whose channels are swapped for the null's channels.
        """
        lengths = np.asarray(lengths)
        B, T = len(lengths), int(lengths.max())
        streams = []
        for ids_list, table in ((content_ids, self.content), (pitch_ids, self.pitch)):
            ids, _, src = data_mod.pad_sequences([np.asarray(i, dtype=np.int64) for i in ids_list])
            W = np.zeros((B, T, ids.shape[1]))
            for b in range(B):
                W[b, :lengths[b], :src[b]] = F.interp_matrix(int(src[b]), int(lengths[b]), np.float64)
            streams.append(F.matmul(Tensor(W), F.embedding(table, ids.astype(np.int64))))
        valid = attention_mask(lengths, T)
        spk = np.asarray(speakers, dtype=np.float64)[:, None, :] * valid[..., None]
        cond = F.concat(streams + [Tensor(spk)], axis=-1)
        swap = self._swap_mask(B, drop, ablate)
        if swap is None:
            return cond
        return F.where(swap, self.null.reshape(1, 1, -1), cond)

    def _swap_mask(self, B, drop, ablate):
        if drop is None and not ablate:
            return None
        mask = np.zeros((B, 1, self.cfg.cond_dim), dtype=bool)
        if drop is not None:
            mask |= np.asarray(drop, dtype=bool)[:, None, None]
        for name in ablate:
            mask[..., self.channel_slices()[name]] = True
        return mask


def _ids_of(tokens, vocab, name):
    ids = np.asarray(getattr(tokens, "ids", tokens)).reshape(-1)
    if ids.size == 0:
        raise ContractError(f"empty {name} token stream")
    if ids.min() < 0 or ids.max() >= vocab:
        raise ContractError(f"{name} token id outside vocabulary of {vocab}")
    return ids.astype(np.int64)


def assemble_condition(content, pitch, speaker, T, embedder):
    """Embed token streams, interpolate them to T frames, tile the speaker, concatenate.

    Channel order is content, pitch, speaker.
    """
    if T < 1:
        raise ContractError("target length must be >= 1")
    cfg = embedder.cfg
    c_ids = _ids_of(content, cfg.content_vocab, "content")
    p_ids = _ids_of(pitch, cfg.pitch_vocab, "pitch")
    spk = np.asarray(getattr(speaker, "vector", speaker), dtype=np.float64).reshape(-1)
    if spk.size != cfg.speaker_dim:
        raise ShapeError(f"speaker embedding has {spk.size} dims, decoder expects {cfg.speaker_dim}")
    c = F.interpolate_time(F.embedding(embedder.content, c_ids), T, axis=0)
    p = F.interpolate_time(F.embedding(embedder.pitch, p_ids), T, axis=0)
    s = Tensor(np.broadcast_to(spk, (T, spk.size)))
    return ConditionBundle(c, p, s, F.concat([c, p, s], axis=-1))


def null_condition(T, embedder):
    n = embedder.null_stream(T)
    sl = embedder.channel_slices()
    return ConditionBundle(n[:, sl["content"]], n[:, sl["pitch"]], n[:, sl["speaker"]], n, null_flag=True)


def ablate_condition(bundle, streams, embedder):
    """Replace the named streams' channels with the matching null channels."""
    streams = [streams] if isinstance(streams, str) else list(streams)
    unknown = set(streams) - set(STREAMS)
    if unknown:
        raise ContractError(f"unknown condition stream(s): {sorted(unknown)}")
    if not streams:
        return bundle
    mask = embedder._swap_mask(1, None, streams)[0]
    assembled = F.where(mask, embedder.null.reshape(1, -1), bundle.assembled)
    sl = embedder.channel_slices()
    parts = {k: assembled[:, sl[k]] for k in STREAMS}
    return ConditionBundle(parts["content"], parts["pitch"], parts["speaker"], assembled, bundle.null_flag)


# -- timesteps and flow samples -----------------------------------------------------------
def sample_timestep(batch, seed=0, rng=None, m=0.0, s=1.0):
    """Logit-normal draws: t = sigmoid(z), z ~ N(m, s^2)."""
    rng = rng if rng is not None else stream(seed, "timestep")
    z = rng.normal(m, s, size=batch)
    return 1.0 / (1.0 + np.exp(-z))


@dataclass
class FlowSample:
    x0: np.ndarray
    x1: np.ndarray
    t: np.ndarray
    xt: np.ndarray = field(init=False)

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=np.float64)
        self.x1 = np.asarray(self.x1, dtype=np.float64)
        if self.x0.shape != self.x1.shape:
            raise ShapeError(f"x0 {self.x0.shape} and x1 {self.x1.shape} differ")
        self.t = np.asarray(self.t, dtype=np.float64)
        tb = self.t.reshape(self.t.shape + (1,) * (self.x1.ndim - self.t.ndim))
        self.xt = (1.0 - tb) * self.x0 + tb * self.x1


def flow_sample(x1, rng, t=None, m=0.0, s=1.0):
    """Draw x0 ~ N(0, I) and (unless given) a logit-normal t per leading row."""
    x1 = np.asarray(x1, dtype=np.float64)
    x0 = rng.standard_normal(x1.shape)
    if t is None:
        t = sample_timestep(x1.shape[0] if x1.ndim > 2 else (), rng=rng, m=m, s=s)
    return FlowSample(x0, x1, t)


def flow_matching_loss(v, x0, x1, mask=None):
    """Mean of (v - (x1 - x0))^2.

    With a (B, T) mask each clip is averaged over its valid frames first,
    then clips are averaged, so padding never changes the value.
    """
    target = np.asarray(x1, dtype=np.float64) - np.asarray(x0, dtype=np.float64)
    return _masked_mse(v, target, mask)


def _masked_mse(pred, target, mask):
    pred = pred if isinstance(pred, Tensor) else Tensor(pred)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ")
    err = (pred - Tensor(target)) ** 2
    if mask is None:
        return F.mean(err)
    m = np.asarray(mask, dtype=pred.data.dtype)[..., None]
    per_clip = F.sum_(err * m, axis=(1, 2)) / Tensor(np.maximum(m.sum(axis=(1, 2)) * pred.shape[-1], 1.0))
    return F.mean(per_clip)


# -- vector-field network -------------------------------------------------------------------
def timestep_features(t, dim):
    return sinusoidal_embedding(np.asarray(t, dtype=np.float64) * 1000.0, dim)


class DitBlock(Module):
    """Pre-norm Transformer block; with adaLN-Zero the timestep sets scale, shift and gate."""

    def __init__(self, cfg, rng):
        H = cfg.hidden
        self.heads = cfg.heads
        self.qkv = Linear(H, 3 * H, rng)
        self.att_out = Linear(H, H, rng)
        self.ff = [Linear(H, cfg.ff_mult * H, rng), Linear(cfg.ff_mult * H, H, rng)]
        # six values per channel: (shift, scale, gate) for attention, then feed-forward
        self.modulation = Linear(H, 6 * H, rng, zero=True) if cfg.conditioning == "adaln" else None

    def forward(self, x, temb=None, mask=None):
        if self.modulation is None:
            x = x + multi_head_attention(F.layer_norm(x), self.qkv, self.att_out, self.heads, mask)
            return x + self._ff(F.layer_norm(x))
        B, H = x.shape[0], x.shape[-1]
        mod = self.modulation(temb).reshape(B, 1, 6, H)
        beta1, alpha1, gamma1 = mod[:, :, 0], mod[:, :, 1], mod[:, :, 2]
        beta2, alpha2, gamma2 = mod[:, :, 3], mod[:, :, 4], mod[:, :, 5]
        h = F.layer_norm(x) * (alpha1 + 1.0) + beta1
        x = x + gamma1 * multi_head_attention(h, self.qkv, self.att_out, self.heads, mask)
        h = F.layer_norm(x) * (alpha2 + 1.0) + beta2
        return x + gamma2 * self._ff(h)

    def _ff(self, h):
        return self.ff[1](F.gelu(self.ff[0](h)))


class DiT(Module):
    def __init__(self, cfg, rng):
        H = cfg.hidden
        self.cfg = cfg
        self.time_mlp = [Linear(cfg.time_dim, H, rng), Linear(H, H, rng)]
        extra = H if cfg.conditioning == "concat" else 0
        self.in_proj = Linear(cfg.n_mels + cfg.cond_dim + extra, H, rng)
        self.blocks = [DitBlock(cfg, rng) for _ in range(cfg.layers)]
        adaln = cfg.conditioning == "adaln"
        self.final_mod = Linear(H, 2 * H, rng, zero=True) if adaln else None
        self.head = Linear(H, cfg.n_mels, rng, zero=adaln)

    def time_embedding(self, t):
        return self.time_mlp[1](F.silu(self.time_mlp[0](Tensor(timestep_features(t, self.cfg.time_dim)))))

    def forward(self, xt, t, cond, mask=None):
        xt = xt if isinstance(xt, Tensor) else Tensor(xt)
        cond = cond if isinstance(cond, Tensor) else Tensor(cond)
        if xt.ndim != 3 or xt.shape[-1] != self.cfg.n_mels:
            raise ShapeError(f"xt must be (B, T, {self.cfg.n_mels}), got {xt.shape}")
        if cond.shape != xt.shape[:2] + (self.cfg.cond_dim,):
            raise ShapeError(f"condition {cond.shape} does not match xt {xt.shape}")
        B, T, _ = xt.shape
        t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1), (B,))
        temb = self.time_embedding(t)
        parts = [xt, cond]
        if self.cfg.conditioning == "concat":
            parts.append(F.take(temb.reshape(B, 1, -1), np.zeros(T, dtype=np.int64), axis=1))
        h = self.in_proj(F.concat(parts, axis=-1)) + Tensor(sinusoidal_embedding(np.arange(T), self.cfg.hidden))
        c = F.silu(temb)
        for block in self.blocks:
            h = block(h, c, mask)
        h = F.layer_norm(h)
        if self.final_mod is not None:
            mod = self.final_mod(c).reshape(B, 1, 2, -1)
            h = h * (mod[:, :, 1] + 1.0) + mod[:, :, 0]
        return self.head(h)


class Decoder(Module):
    """Condition embedder plus vector-field network (or noise predictor for DDIM)."""

    def __init__(self, cfg):
        rng = stream(cfg.seed, "decoder", cfg.conditioning, cfg.parameterization, "init")
        self.cfg = cfg
        self.embedder = ConditionEmbedder(cfg, rng)
        self.net = DiT(cfg, rng)

    @property
    def parameterization(self):
        return self.cfg.parameterization

    @property
    def out_dim(self):
        return self.cfg.n_mels

    def forward(self, xt, t, cond, mask=None):
        return self.net(xt, t, cond, mask)

    def predict(self, x, t, condition, null=False):
        """Network output for one clip (T, n_mels) as float64."""
        T = x.shape[0]
        if not null and condition.length != T:
            raise ShapeError(f"condition length {condition.length} != {T} frames")
        with no_grad():
            c = self.embedder.null_stream(T) if null else condition.assembled
            out = self.net(x[None], np.array([t]), c.reshape(1, T, -1))
        return out.data[0].astype(np.float64)


def vector_field(xt, t, c, model):
    """v(xt, t | c) as a Tensor; ``c`` is a ConditionBundle or an assembled (.., T, C) condition."""
    cond = c.assembled if isinstance(c, ConditionBundle) else c
    cond = cond if isinstance(cond, Tensor) else Tensor(cond)
    xt = xt if isinstance(xt, Tensor) else Tensor(xt)
    if xt.ndim == 2:
        return model(xt.reshape(1, *xt.shape), t, cond.reshape(1, *cond.shape))[0]
    return model(xt, t, cond)


def concat_conditioning_forward(xt, t, c, model_variant):
    if model_variant.cfg.conditioning != "concat":
        raise ContractError("model is not the concat-conditioning variant")
    return vector_field(xt, t, c, model_variant)


def rfm_loss(samples, conditions, model, mask=None):
    """Flow-matching loss of ``model`` on a FlowSample batch (B, T, n_mels)."""
    v = model(samples.xt, samples.t, conditions, mask)
    return flow_matching_loss(v, samples.x0, samples.x1, mask)


# -- DDIM baseline schedule ------------------------------------------------------------------
ALPHA_FLOOR = 1e-4


def cosine_alpha_bar(s, offset=0.008):
    """Cosine cumulative signal level; s = 0 is clean data, s = 1 pure noise."""
    s = np.asarray(s, dtype=np.float64)
    f = np.cos((s + offset) / (1.0 + offset) * np.pi / 2) ** 2
    f0 = np.cos(offset / (1.0 + offset) * np.pi / 2) ** 2
    return np.clip(f / f0, ALPHA_FLOOR, 1.0)


def diffuse(x1, eps, s):
    a = cosine_alpha_bar(s)
    a = a.reshape(a.shape + (1,) * (np.ndim(x1) - a.ndim))
    return np.sqrt(a) * x1 + np.sqrt(1.0 - a) * eps


# -- training ------------------------------------------------------------------------------
@dataclass
class DecoderExample:
    id: str
    mel: np.ndarray             # (T, n_mels), normalized to [0, 1]
    content: np.ndarray         # token ids at 50 Hz
    pitch: np.ndarray           # token ids at 50 Hz
    speaker: np.ndarray         # (D_s,) unit vector
    duration: float


def draw_null_flags(rng, batch, p):
    """Bernoulli(p) condition-dropout flags for one batch."""
    if p <= 0:
        return np.zeros(batch, dtype=bool)
    return rng.random(batch) < p


def decoder_batch_loss(model, examples, rng, drop_p=0.0, ablate=()):
    cfg = model.cfg
    mels, _, lengths = data_mod.pad_sequences([e.mel for e in examples])
    mask = attention_mask(lengths, mels.shape[1])
    B = len(examples)
    drop = draw_null_flags(rng, B, drop_p)
    cond = model.embedder.batch([e.content for e in examples], [e.pitch for e in examples],
                                [e.speaker for e in examples], lengths, drop, ablate)
    noise = rng.standard_normal(mels.shape)
    if cfg.parameterization == "velocity":
        t = sample_timestep(B, rng=rng, m=cfg.logit_mean, s=cfg.logit_std)
        fs = FlowSample(noise, mels, t)
        loss = rfm_loss(fs, cond, model, mask)
    else:
        s = np.clip(rng.random(B), 1e-3, 1.0)
        out = model(diffuse(mels, noise, s), s, cond, mask)
        loss = _masked_mse(out, noise, mask)
    return loss, drop


def train_decoder(dataset, cfg, log_fn=None):
    """Fit the decoder; returns (model, loss history, observed null fraction)."""
    if not dataset:
        raise ContractError("cannot train the decoder on an empty dataset")
    model = Decoder(cfg)
    opt = Adam(model.parameters(), lr=cfg.lr, warmup_steps=cfg.warmup_steps, grad_clip=cfg.grad_clip)
    rng = stream(cfg.seed, "decoder", cfg.parameterization, "train")
    by_id = {e.id: e for e in dataset}
    records = [{"id": e.id, "duration": e.duration} for e in dataset]
    budget = max(cfg.batch_seconds, max(r["duration"] for r in records))
    history, n_null, n_seen, plan, epoch = [], 0, 0, [], 0
    for step in range(cfg.steps):
        if not plan:
            plan, _ = data_mod.plan_batches(records, budget, seed=cfg.seed * 1000 + epoch)
            epoch += 1
        loss, drop = decoder_batch_loss(model, [by_id[i] for i in plan.pop()], rng, cfg.cond_dropout)
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(float(loss.item()))
        n_null += int(drop.sum())
        n_seen += drop.size
        if log_fn is not None:
            log_fn({"step": step, "loss": history[-1], "null": int(drop.sum())})
    return model, history, n_null / max(n_seen, 1)


# -- samplers -------------------------------------------------------------------------------
def euler_grid(steps):
    """Uniform grid {0, e, ..., 1 - e} and the step size e = 1 / steps."""
    if steps < 1:
        raise ContractError("sampler needs steps >= 1")
    eps = 1.0 / steps
    return np.arange(steps) * eps, eps


def _start(shape, seed, x0):
    if x0 is not None:
        x0 = np.asarray(x0, dtype=np.float64)
        if x0.shape != shape:
            raise ShapeError(f"x0 {x0.shape} != {shape}")
        return x0.copy()
    return stream(seed, "sampler", "x0").standard_normal(shape)


def _shape(T, model):
    return (T, model.out_dim) if np.isscalar(T) else tuple(T)


def euler_sample_cfg(condition, T, cfg, model, x0=None, clamp=True, trace=None):
    """Integrate dx/dt = g v(x,t|c) + (1 - g) v(x,t|null) from t=0 with fixed Euler steps.

    Returns the x1 estimate, clamped to [0, 1] only here at the output.
    ``trace`` (a list) receives (t, v_cond, v_null) per step when given.
    """
    if not isinstance(cfg, SamplerConfig):
        cfg = SamplerConfig(**cfg)
    if model.parameterization != "velocity":
        raise ContractError("euler_sample_cfg needs a velocity-parameterized model")
    grid, eps = euler_grid(cfg.steps)
    g = float(cfg.guidance_scale)
    x = _start(_shape(T, model), cfg.seed, x0)
    for t in grid:
        v_c = model.predict(x, float(t), condition, null=False)
        v_u = model.predict(x, float(t), condition, null=True)
        if trace is not None:
            trace.append((float(t), v_c, v_u))
        x = x + eps * (g * v_c + (1.0 - g) * v_u)
    return np.clip(x, 0.0, 1.0) if clamp else x


def ddim_sample(condition, T, steps, model, seed=0, x0=None, clamp=True):
    """Deterministic (eta = 0) DDIM from s = 1 down to s = 0 with a noise-prediction model."""
    if model.parameterization != "epsilon":
        raise ContractError("ddim_sample needs an epsilon-parameterized model")
    if steps < 1:
        raise ContractError("sampler needs steps >= 1")
    grid = np.linspace(1.0, 0.0, steps + 1)
    x = _start(_shape(T, model), seed, x0)
    for s, s_prev in zip(grid[:-1], grid[1:]):
        a = float(cosine_alpha_bar(s))
        a_prev = 1.0 if s_prev <= 0 else float(cosine_alpha_bar(s_prev))
        eps = model.predict(x, float(s), condition, null=False)
        x_hat = (x - np.sqrt(1.0 - a) * eps) / np.sqrt(a)
        x = np.sqrt(a_prev) * x_hat + np.sqrt(1.0 - a_prev) * eps
    return np.clip(x, 0.0, 1.0) if clamp else x


# -- analytic toy models -------------------------------------------------------------------
class ConstantField:
    """Every evaluation returns ``k``; Euler over [0, 1) then moves x by exactly k."""

    parameterization = "velocity"

    def __init__(self, k):
        self.k = np.asarray(k, dtype=np.float64)
        self.out_dim = self.k.shape[-1] if self.k.ndim else 1

    def predict(self, x, t, condition=None, null=False):
        return np.broadcast_to(self.k, x.shape).copy()


class LinearPointField(Module):
    """v = (x W + b) / (1 - t); the point-target optimum W = -I, b = x1 is exact."""

    parameterization = "velocity"

    def __init__(self, dim, seed=0):
        rng = stream(seed, "toy", "linear_rfm")
        self.out_dim = dim
        self.W = param(rng.normal(0.0, 0.1, size=(dim, dim)))
        self.b = param(np.zeros(dim))

    def forward(self, x, t):
        scale = 1.0 / (1.0 - np.asarray(t, dtype=np.float64).reshape(-1, 1))
        return (F.matmul(Tensor(x), self.W) + self.b) * Tensor(scale)

    def predict(self, x, t, condition=None, null=False):
        with no_grad():
            return self.forward(x, np.full(x.shape[0], t)).data.astype(np.float64)


class LinearEpsField(Module):
    """eps = (x W - sqrt(a) b) / sqrt(1 - a); optimum W = I, b = x1 for a point target."""

    parameterization = "epsilon"

    def __init__(self, dim, seed=0):
        rng = stream(seed, "toy", "linear_ddim")
        self.out_dim = dim
        self.W = param(rng.normal(0.0, 0.1, size=(dim, dim)))
        self.b = param(np.zeros(dim))

    def forward(self, x, s):
        a = cosine_alpha_bar(np.asarray(s, dtype=np.float64).reshape(-1, 1))
        return (F.matmul(Tensor(x), self.W) - self.b * Tensor(np.sqrt(a))) * Tensor(1.0 / np.sqrt(1.0 - a))

    def predict(self, x, t, condition=None, null=False):
        with no_grad():
            return self.forward(x, np.full(x.shape[0], t)).data.astype(np.float64)


class ToyClassField(Module):
    """Small MLP field over (x, t, class) with a learned null class for CFG."""

    parameterization = "velocity"

    def __init__(self, dim, n_classes, hidden=64, seed=0, time_dim=16, class_dim=8):
        rng = stream(seed, "toy", "class_field")
        self.out_dim = dim
        self.n_classes = n_classes
        self.time_dim = time_dim
        self.classes = param(rng.normal(0.0, 1.0, size=(n_classes + 1, class_dim)))
        self.l1 = Linear(dim + time_dim + class_dim, hidden, rng)
        self.l2 = Linear(hidden, hidden, rng)
        self.l3 = Linear(hidden, dim, rng)

    def forward(self, x, t, labels):
        t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1), (x.shape[0],))
        feats = sinusoidal_embedding(t * 100.0, self.time_dim)
        h = F.concat([Tensor(x), Tensor(feats), F.embedding(self.classes, labels)], axis=-1)
        return self.l3(F.silu(self.l2(F.silu(self.l1(h)))))

    def predict(self, x, t, condition=None, null=False):
        label = self.n_classes if null else condition
        labels = np.broadcast_to(np.asarray(label, dtype=np.int64), (x.shape[0],))
        with no_grad():
            return self.forward(x, t, labels).data.astype(np.float64)


def train_point_toy(model, x1, steps=2000, batch=256, lr=0.05, seed=0):
    """Fit a LinearPointField (flow loss) or LinearEpsField (noise loss) to a point target."""
    x1 = np.asarray(x1, dtype=np.float64).reshape(-1)
    opt = Adam(model.parameters(), lr=lr, decay_steps=steps)
    rng = stream(seed, "toy", "train", model.parameterization)
    history = []
    for _ in range(steps):
        x0 = rng.standard_normal((batch, x1.size))
        target = np.broadcast_to(x1, x0.shape)
        if model.parameterization == "velocity":
            fs = FlowSample(x0, target, sample_timestep(batch, rng=rng)[:, None])
            loss = flow_matching_loss(model(fs.xt, fs.t), x0, target)
        else:
            s = np.clip(rng.random(batch), 1e-3, 1.0)
            loss = _masked_mse(model(diffuse(target, x0, s), s), x0, None)
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(float(loss.item()))
    return history


def point_toy_loss(model, x1, n=4096, seed=1):
    """Held-out flow-matching loss of a point-target model on fresh draws."""
    x1 = np.asarray(x1, dtype=np.float64).reshape(-1)
    rng = stream(seed, "toy", "eval")
    x0 = rng.standard_normal((n, x1.size))
    fs = FlowSample(x0, np.broadcast_to(x1, x0.shape), sample_timestep(n, rng=rng)[:, None])
    with no_grad():
        return float(flow_matching_loss(model(fs.xt, fs.t), fs.x0, fs.x1).item())


def two_class_data(rng, n, mu, sigma):
    """Label-conditioned Gaussians at +mu (class 0) and -mu (class 1)."""
    labels = rng.integers(0, 2, size=n)
    sign = np.where(labels == 0, 1.0, -1.0)[:, None]
    return sign * np.asarray(mu)[None, :] + sigma * rng.standard_normal((n, len(mu))), labels


def train_class_toy(model, mu, sigma, steps=1500, batch=256, lr=3e-3, drop_p=0.1, seed=0):
    """Conditional flow matching on the two-Gaussian toy, with condition dropout."""
    opt = Adam(model.parameters(), lr=lr, decay_steps=steps)
    rng = stream(seed, "toy", "class_train")
    history = []
    for _ in range(steps):
        x1, labels = two_class_data(rng, batch, mu, sigma)
        labels = np.where(draw_null_flags(rng, batch, drop_p), model.n_classes, labels)
        fs = FlowSample(rng.standard_normal(x1.shape), x1, sample_timestep(batch, rng=rng)[:, None])
        loss = flow_matching_loss(model(fs.xt, fs.t[:, 0], labels), fs.x0, fs.x1)
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(float(loss.item()))
    return history


def mode_fidelity(samples, mode, other, sigma, radius=2.0):
    """Fraction of samples that sit nearer ``mode`` than ``other`` and within radius*sigma of it.

    Leakage toward the other class and overshoot past the mode both lower it.
    """
    samples = np.asarray(samples, dtype=np.float64)
    d_mode = np.linalg.norm(samples - np.asarray(mode)[None, :], axis=1)
    d_other = np.linalg.norm(samples - np.asarray(other)[None, :], axis=1)
    return float(np.mean((d_mode < d_other) & (d_mode <= radius * sigma)))
