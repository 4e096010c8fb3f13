"""Pipeline configuration: one YAML file, nested sections, unknown keys rejected.

Resolution order: dataclass defaults, then the ``tiny`` profile (when
selected), then the file, then command-line flags.  ``FLOWSPEECH_SEED``
is used only when neither the file nor a flag sets the seed.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field

import yaml

from .errors import ContractError


@dataclass
class DspSection:
    griffin_lim_iters: int = 32
    f0_threshold: float = 0.3


@dataclass
class TokenizeSection:
    content_clusters: int = 100
    kmeans_iters: int = 50
    pitch_codebook: int = 32
    vqvae_channels: int = 64
    vqvae_steps: int = 1500
    vqvae_lr: float = 2e-3


@dataclass
class EncodersSection:
    hidden: int = 256
    blocks: int = 4
    heads: int = 4
    kernel: int = 15
    steps: int = 2000
    speaker_steps: int = 2000
    batch_seconds: float = 12.0
    lr: float = 1e-3
    warmup_steps: int = 1000
    label_smoothing: float = 0.1
    speaker_dim: int = 256
    embedder_hidden: int = 128
    embedder_steps: int = 600


@dataclass
class RfmSection:
    layers: int = 8
    hidden: int = 512
    heads: int = 4
    content_dim: int = 192
    pitch_dim: int = 64
    time_dim: int = 128
    cond_dropout: float = 0.1
    logit_mean: float = 0.0
    logit_std: float = 1.0
    steps: int = 20000
    batch_seconds: float = 12.0
    lr: float = 1e-4
    warmup_steps: int = 1000
    grad_clip: float = 1.0
    sampler_steps: int = 30
    cfg_scale: float = 2.0


@dataclass
class DataSection:
    manifest: str | None = None          # external corpus; synthetic when unset
    n_speakers: int = 4
    n_content_symbols: int = 8
    n_clips: int = 20
    min_seconds: float = 1.0
    max_seconds: float = 2.0
    formant_bandwidth: float = 120.0
    test_fraction: float = 0.2


@dataclass
class EvalSection:
    write_csv: bool = False


@dataclass
class PipelineConfig:
    seed: int = 0
    profile: str = "full"               # full | tiny
    dsp: DspSection = field(default_factory=DspSection)
    tokenize: TokenizeSection = field(default_factory=TokenizeSection)
    encoders: EncodersSection = field(default_factory=EncodersSection)
    rfm: RfmSection = field(default_factory=RfmSection)
    data: DataSection = field(default_factory=DataSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def to_dict(self):
        return dataclasses.asdict(self)

    @property
    def hash(self):
        """Short sha256 of the canonical resolved config (stamped into artifacts)."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


# Desk-test profile: small models and short schedules; content clusters
# follow the synthetic symbol inventory.
TINY = {
    "tokenize": {"kmeans_iters": 100, "vqvae_steps": 600},
    "encoders": {"hidden": 64, "blocks": 2, "kernel": 7, "steps": 300, "speaker_steps": 200,
                 "batch_seconds": 8.0, "lr": 2e-3, "warmup_steps": 50, "speaker_dim": 64},
    "rfm": {"layers": 2, "hidden": 128, "content_dim": 32, "pitch_dim": 16, "time_dim": 32,
            "steps": 2500, "batch_seconds": 8.0, "lr": 2e-3, "warmup_steps": 100},
}


def _apply(obj, values, path=""):
    known = {f.name: f for f in dataclasses.fields(obj)}
    for key, value in values.items():
        where = f"{path}{key}"
        if key not in known:
            raise ContractError(f"unknown config key '{where}'")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise ContractError(f"config section '{where}' must be a mapping")
            _apply(current, value, where + ".")
        else:
            setattr(obj, key, _coerce(current, value, where, known[key]))


def _coerce(current, value, where, f):
    if value is None or current is None:
        return value
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ContractError(f"config key '{where}' expects true/false")
        return value
    if isinstance(current, int) and not isinstance(value, bool):
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        if not isinstance(value, int):
            raise ContractError(f"config key '{where}' expects an integer")
        return value
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ContractError(f"config key '{where}' expects a number")
        return float(value)
    if isinstance(current, str) and not isinstance(value, str):
        raise ContractError(f"config key '{where}' expects a string")
    return value


def resolve(values=None, profile=None, seed=None, env=None):
    """Build a PipelineConfig from a raw mapping plus overrides."""
    values = dict(values or {})
    env = os.environ if env is None else env
    profile = profile or values.get("profile", "full")
    if profile not in ("full", "tiny"):
        raise ContractError(f"unknown profile '{profile}'")
    cfg = PipelineConfig()
    if profile == "tiny":
        _apply(cfg, TINY)
        cfg.tokenize.content_clusters = values.get("data", {}).get("n_content_symbols", cfg.data.n_content_symbols)
    _apply(cfg, values)
    cfg.profile = profile
    if seed is not None:
        cfg.seed = int(seed)
    elif "seed" not in values and env.get("FLOWSPEECH_SEED"):
        cfg.seed = int(env["FLOWSPEECH_SEED"])
    return cfg


def load_config(path=None, profile=None, seed=None, env=None):
    values = {}
    if path is not None:
        try:
            with open(path) as fh:
                values = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ContractError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(values, dict):
            raise ContractError(f"config {path} must be a mapping at the top level")
    return resolve(values, profile, seed, env)
