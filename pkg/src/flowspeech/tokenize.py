"""Discrete attribute streams: K-means content tokens and VQ-VAE pitch tokens."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.fft import dct

from . import _accel, dsp
from .errors import ContractError, ShapeError
from .numerics import F, Tensor
from .numerics.nn import Module, param
from .numerics.optim import Adam
from .numerics.rng import stream

log = logging.getLogger(__name__)

CONTENT_RATE = 50.0
N_CEPS = 13
PITCH_RATE = 50.0


@dataclass
class Codebook:
    vectors: np.ndarray

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] < 2:
            raise ContractError(f"codebook needs K >= 2 rows, got shape {self.vectors.shape}")

    @property
    def K(self):
        return self.vectors.shape[0]

    @property
    def D(self):
        return self.vectors.shape[1]

    def min_pairwise_distance(self):
        v = self.vectors
        d = np.sqrt(((v[:, None] - v[None]) ** 2).sum(-1))
        return float(d[~np.eye(self.K, dtype=bool)].min())


@dataclass
class TokenSequence:
    ids: np.ndarray
    frame_rate: float
    kind: str
    vocab_size: int | None = None

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)
        if self.kind not in ("content", "pitch"):
            raise ContractError(f"unknown token kind '{self.kind}'")
        if self.ids.size and self.ids.min() < 0:
            raise ContractError("token ids must be non-negative")
        if self.vocab_size is not None and self.ids.size and self.ids.max() >= self.vocab_size:
            raise ContractError(f"token id {self.ids.max()} outside vocabulary of {self.vocab_size}")

    def __len__(self):
        return self.ids.size


# -- K-means -------------------------------------------------------------------
@dataclass
class KMeansResult:
    codebook: Codebook
    inertia_history: list = field(default_factory=list)

    @property
    def inertia(self):
        return self.inertia_history[-1]


def _kmeans_pp(x, K, rng):
    n = x.shape[0]
    centers = [x[rng.integers(n)]]
    d2 = ((x - centers[0]) ** 2).sum(1)
    for _ in range(1, K):
        total = d2.sum()
        if total <= 0:
            # fewer distinct points than clusters; fall back to any unused point
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers.append(x[idx])
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(1))
    return np.array(centers)


def kmeans_fit(features, K, iters=50, seed=0, return_history=False):
    """Lloyd's algorithm from a k-means++ start.

    Empty clusters are re-seeded at the point farthest from its centroid.
    Inertia is asserted non-increasing at every iteration.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"features must be N x D, got {x.shape}")
    if x.shape[0] < K:
        raise ContractError(f"k-means needs N >= K, got N={x.shape[0]}, K={K}")
    if K < 2:
        raise ContractError("k-means needs K >= 2")
    if not np.all(np.isfinite(x)):
        raise ContractError("k-means features must be finite")
    rng = stream(seed, "kmeans++")
    centers = _kmeans_pp(x, K, rng)
    assign, dist = _accel.nearest_centroid(x, centers)
    history = [float(dist.sum())]
    for _ in range(iters):
        new = np.zeros_like(centers)
        counts = np.bincount(assign, minlength=K)
        np.add.at(new, assign, x)
        nonempty = counts > 0
        new[nonempty] /= counts[nonempty, None]
        if not nonempty.all():
            order = np.argsort(-dist, kind="stable")
            taken = set()
            for k in np.flatnonzero(~nonempty):
                for i in order:
                    if i not in taken:
                        taken.add(i)
                        new[k] = x[i]
                        break
        new_assign, new_dist = _accel.nearest_centroid(x, new)
        inertia = float(new_dist.sum())
        if inertia > history[-1] * (1 + 1e-12) + 1e-12:
            raise AssertionError(f"k-means inertia increased: {history[-1]} -> {inertia}")
        history.append(inertia)
        converged = np.array_equal(new_assign, assign)
        centers, assign, dist = new, new_assign, new_dist
        if converged:
            break
    result = KMeansResult(Codebook(centers), history)
    return result if return_history else result.codebook


def kmeans_assign(features, cb, kind="content", frame_rate=CONTENT_RATE):
    """Nearest centroid per row; ties go to the lowest index."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != cb.D:
        raise ShapeError(f"features of shape {x.shape} do not match codebook dim {cb.D}")
    ids, _ = _accel.nearest_centroid(x, cb.vectors)
    return TokenSequence(ids, frame_rate, kind, cb.K)


def content_features(mel, n_ceps=N_CEPS):
    """K-means input: stacked 50 Hz frames of liftered, mean-normalized mel.

    Coefficients 1..n_ceps of the per-frame DCT keep the spectral envelope
    and drop harmonic fine structure (pitch); subtracting the utterance mean
    removes static channel and speaker colouring.
    """
    frames = mel.frames if isinstance(mel, dsp.MelSpectrogram) else np.asarray(mel)
    ceps = dct(np.asarray(frames, dtype=np.float64), type=2, norm="ortho", axis=1)[:, 1:n_ceps + 1]
    return dsp.stack_frames(ceps - ceps.mean(axis=0))


# -- vector quantization ---------------------------------------------------------
@dataclass
class VQOutput:
    quantized: Tensor
    ids: np.ndarray
    commitment_loss: Tensor
    codebook_loss: float


def vq_quantize(latents, cb, mask=None):
    """Snap each frame to its nearest code with a straight-through gradient.

    ``latents`` is a Tensor (..., D).  The returned ``quantized`` equals the
    codes in value while d(quantized)/d(latents) is the identity.
    """
    lat = latents if isinstance(latents, Tensor) else Tensor(latents)
    if lat.shape[-1] != cb.D:
        raise ShapeError(f"latent dim {lat.shape[-1]} does not match codebook dim {cb.D}")
    flat = lat.data.reshape(-1, cb.D)
    ids, _ = _accel.nearest_centroid(flat, cb.vectors)
    q = cb.vectors[ids].reshape(lat.shape).astype(lat.data.dtype)
    quantized = lat + Tensor(q - lat.data)
    diff = lat - Tensor(q)
    sq = F.mean(diff * diff, axis=-1)
    if mask is not None:
        m = np.asarray(mask, dtype=lat.data.dtype)
        commit = F.sum_(sq * m) / max(float(m.sum()), 1.0)
        cb_loss = float((sq.data * m).sum() / max(m.sum(), 1.0))
    else:
        commit = F.mean(sq)
        cb_loss = float(sq.data.mean())
    return VQOutput(quantized, ids.reshape(lat.shape[:-1]), commit, cb_loss)


# -- pitch VQ-VAE ------------------------------------------------------------------
@dataclass
class VqVaeConfig:
    channels: int = 64
    latent_dim: int = 64
    codebook_size: int = 32
    commitment_weight: float = 0.25
    ema_decay: float = 0.99
    dead_code_steps: int = 200
    steps: int = 1500
    batch_size: int = 16
    crop_frames: int = 64
    lr: float = 2e-3
    seed: int = 0


def _conv_param(rng, k, cin, cout):
    s = 1.0 / np.sqrt(k * cin)
    return param(rng.uniform(-s, s, size=(k, cin, cout)))


class VqVaeModel(Module):
    """1-D conv encoder (one stride-2 layer: 100 Hz -> 50 Hz), EMA codebook, mirrored decoder."""

    def __init__(self, cfg, seed=0):
        rng = stream(seed, "vqvae", "init")
        C, D = cfg.channels, cfg.latent_dim
        self.cfg = cfg
        self.enc_w = [_conv_param(rng, 3, 1, C), _conv_param(rng, 4, C, C), _conv_param(rng, 3, C, D)]
        self.enc_b = [param(np.zeros(C)), param(np.zeros(C)), param(np.zeros(D))]
        self.dec_w = [_conv_param(rng, 3, D, C), _conv_param(rng, 3, C, C), _conv_param(rng, 3, C, 1)]
        self.dec_b = [param(np.zeros(C)), param(np.zeros(C)), param(np.zeros(1))]
        self.codebook = Codebook(rng.normal(0.0, 1.0, size=(cfg.codebook_size, D)))
        self.ema_size = np.ones(cfg.codebook_size)
        self.ema_sum = self.codebook.vectors.copy()
        self.last_used = np.zeros(cfg.codebook_size, dtype=np.int64)

    def encode_latents(self, z, mask=None):
        """z: (B, T, 1) normalized F0 at 100 Hz -> (B, T // 2, D) latents."""
        m100 = None if mask is None else mask[..., None].astype(z.data.dtype)
        h = z if m100 is None else z * m100
        h = F.relu(F.conv1d(h, self.enc_w[0], padding=1) + self.enc_b[0])
        if m100 is not None:
            h = h * m100
        h = F.relu(F.conv1d(h, self.enc_w[1], stride=2, padding=1) + self.enc_b[1])
        m50 = None if mask is None else downsample_mask(mask)[..., None].astype(z.data.dtype)
        if m50 is not None:
            h = h * m50
        return F.conv1d(h, self.enc_w[2], padding=1) + self.enc_b[2]

    def decode(self, q, mask50=None):
        m = None if mask50 is None else mask50[..., None].astype(q.data.dtype)
        h = q if m is None else q * m
        h = F.relu(F.conv1d(h, self.dec_w[0], padding=1) + self.dec_b[0])
        if m is not None:
            h = h * m
        T = h.shape[1]
        h = F.take(h, np.repeat(np.arange(T), 2), axis=1)
        if m is not None:
            h = h * np.repeat(m, 2, axis=1)
        h = F.relu(F.conv1d(h, self.dec_w[1], padding=1) + self.dec_b[1])
        if m is not None:
            h = h * np.repeat(m, 2, axis=1)
        return F.conv1d(h, self.dec_w[2], padding=1) + self.dec_b[2]

    def ema_update(self, latents, ids, mask50, step):
        cfg = self.cfg
        flat = latents.reshape(-1, cfg.latent_dim)
        ids = ids.reshape(-1)
        keep = np.ones(ids.size, dtype=bool) if mask50 is None else mask50.reshape(-1)
        flat, ids = flat[keep], ids[keep]
        counts = np.bincount(ids, minlength=cfg.codebook_size).astype(np.float64)
        sums = np.zeros_like(self.ema_sum)
        np.add.at(sums, ids, flat)
        d = cfg.ema_decay
        self.ema_size = d * self.ema_size + (1 - d) * counts
        self.ema_sum = d * self.ema_sum + (1 - d) * sums
        n = self.ema_size.sum()
        size = (self.ema_size + 1e-5) / (n + cfg.codebook_size * 1e-5) * n
        vectors = self.ema_sum / size[:, None]
        self.last_used[counts > 0] = step
        dead = np.flatnonzero(step - self.last_used >= cfg.dead_code_steps)
        if dead.size and flat.shape[0]:
            rng = stream(cfg.seed, "vqvae", "reseed", step)
            picks = flat[rng.integers(0, flat.shape[0], dead.size)]
            vectors[dead] = picks
            self.ema_sum[dead] = picks
            self.ema_size[dead] = 1.0
            self.last_used[dead] = step
        self.codebook = Codebook(vectors)

    def state_dict(self):
        sd = super().state_dict()
        sd["codebook"] = self.codebook.vectors.astype(np.float32)
        return sd

    def load_state_dict(self, state, strict=True):
        state = dict(state)
        self.codebook = Codebook(state.pop("codebook"))
        super().load_state_dict(state, strict)


def downsample_mask(mask):
    """Validity mask after the stride-2 encoder layer (T -> T // 2)."""
    mask = np.asarray(mask, dtype=bool)
    T2 = mask.shape[1] // 2
    return mask[:, 1:2 * T2:2] if T2 else mask[:, :0]


def _pitch_input(track):
    if track.normalized is None:
        raise ContractError("pitch track must be normalized (run normalize_f0 first)")
    return np.asarray(track.normalized, dtype=np.float64)


def vqvae_forward(model, z, mask=None):
    """Returns (reconstruction loss, commitment loss, VQOutput, latents)."""
    lat = model.encode_latents(z, mask)
    m50 = None if mask is None else downsample_mask(mask)
    vq = vq_quantize(lat, model.codebook, m50)
    rec = model.decode(vq.quantized, m50)
    T2 = rec.shape[1]
    target = Tensor(z.data[:, :T2])
    err = F.mean((rec - target) ** 2, axis=-1)
    if mask is None:
        rec_loss = F.mean(err)
    else:
        m = mask[:, :T2].astype(err.data.dtype)
        rec_loss = F.sum_(err * m) / max(float(m.sum()), 1.0)
    return rec_loss, vq.commitment_loss, vq, lat


def vqvae_train(tracks, cfg=None, log_fn=None):
    """Fit a pitch VQ-VAE on normalized pitch tracks.  Returns (model, loss history)."""
    cfg = cfg or VqVaeConfig()
    tracks = [_pitch_input(t) for t in tracks]
    if not tracks:
        raise ContractError("vqvae_train needs at least one pitch track")
    model = VqVaeModel(cfg, cfg.seed)
    opt = Adam(model.parameters(), lr=cfg.lr, warmup_steps=min(100, cfg.steps // 10))
    rng = stream(cfg.seed, "vqvae", "batches")
    # initialize the codebook from encoder outputs so codes start in use
    z0, m0 = _crop_batch(tracks, cfg, rng)
    lat0 = model.encode_latents(Tensor(z0[..., None]), m0).data
    pool = lat0[downsample_mask(m0)]
    model.codebook = Codebook(pool[stream(cfg.seed, "vqvae", "cbinit").integers(0, len(pool), cfg.codebook_size)]
                              + 1e-3 * stream(cfg.seed, "vqvae", "jitter").normal(size=(cfg.codebook_size, cfg.latent_dim)))
    model.ema_sum = model.codebook.vectors.copy()
    history = []
    for step in range(cfg.steps):
        z, mask = _crop_batch(tracks, cfg, rng)
        rec_loss, commit, vq, lat = vqvae_forward(model, Tensor(z[..., None]), mask)
        loss = rec_loss + cfg.commitment_weight * commit
        opt.zero_grad()
        loss.backward()
        opt.step()
        model.ema_update(lat.data, vq.ids, downsample_mask(mask), step + 1)
        history.append(float(loss.item()))
        if log_fn is not None:
            log_fn({"step": step, "loss": history[-1], "recon": float(rec_loss.item()),
                    "commit": float(commit.item()), "codebook": vq.codebook_loss})
    return model, history


def _crop_batch(tracks, cfg, rng):
    L = cfg.crop_frames
    crops = []
    for _ in range(cfg.batch_size):
        t = tracks[int(rng.integers(len(tracks)))]
        if t.size > L:
            s = int(rng.integers(0, t.size - L + 1))
            t = t[s:s + L]
        crops.append(t)
    T = max(c.size for c in crops)
    z = np.zeros((len(crops), T))
    mask = np.zeros((len(crops), T), dtype=bool)
    for i, c in enumerate(crops):
        z[i, :c.size] = c
        mask[i, :c.size] = True
    return z, mask


def vqvae_encode(track, model):
    """Pitch tokens at 50 Hz: a T-frame 100 Hz track gives T // 2 tokens."""
    z = _pitch_input(track)
    if z.size < 2:
        raise ContractError("pitch track needs at least 2 frames")
    lat = model.encode_latents(Tensor(z[None, :, None]))
    ids, _ = _accel.nearest_centroid(lat.data[0], model.codebook.vectors)
    return TokenSequence(ids, PITCH_RATE, "pitch", model.codebook.K)


def vqvae_reconstruct(track, model):
    z = _pitch_input(track)
    lat = model.encode_latents(Tensor(z[None, :, None]))
    vq = vq_quantize(lat, model.codebook)
    return model.decode(vq.quantized).data[0, :, 0]


def code_perplexity(ids, K):
    counts = np.bincount(np.asarray(ids).reshape(-1), minlength=K).astype(np.float64)
    p = counts / counts.sum()
    p = p[p > 0]
    return float(np.exp(-(p * np.log(p)).sum()))
