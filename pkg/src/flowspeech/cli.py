"""``flowspeech`` command line: prepare, train-*, synth, eval.

Every path lives under ``--out-dir``::

    corpus/            synthetic corpus (when no external manifest is configured)
    features/<kind>/   per-clip FSFT1 files: mel, f0, speaker, content, pitch
    models/            FSPK1 checkpoints
    logs/              JSONL training curves
    synth/<tag>/       generated mel (FSFT1) and WAV per clip
    reports/           EvalReport JSON (and CSV)
    stamps.json        config hash, content hash and input digest per artifact

Exit codes: 0 ok, 2 contract error, 3 missing prerequisite, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import shutil
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import dsp, encoders, rfm, tokenize
from . import eval as metrics
from .config import load_config
from .errors import ContractError, FlowSpeechError, MissingDependencyError
from .numerics import checkpoint
from .numerics.rng import stream
from .numerics.tensor import no_grad

log = logging.getLogger("flowspeech")

MEL_RATE = dsp.SAMPLE_RATE / dsp.HOP
TOKEN_RATE = MEL_RATE / 2


def _sha(blob):
    return hashlib.sha256(blob).hexdigest()


def _json_bytes(obj):
    return (json.dumps(obj, indent=1, sort_keys=True) + "\n").encode()


class Workspace:
    """Artifact layout, config-hash stamping and dependency checks for one run directory."""

    def __init__(self, out_dir, cfg, jobs=1):
        self.root = Path(out_dir)
        self.cfg = cfg
        self.jobs = max(1, int(jobs))
        self.root.mkdir(parents=True, exist_ok=True)
        self._stamps_path = self.root / "stamps.json"
        self.stamps = json.loads(self._stamps_path.read_text()) if self._stamps_path.exists() else {}
        self.written = 0
        self.skipped = 0

    # -- paths ---------------------------------------------------------------
    def path(self, *parts):
        return self.root.joinpath(*parts)

    def feature_path(self, kind, clip_id):
        return self.path("features", kind, f"{clip_id}.fsft")

    def model_path(self, name):
        return self.path("models", f"{name}.fspk")

    @property
    def manifest_path(self):
        if self.cfg.data.manifest:
            p = Path(self.cfg.data.manifest)
            return p if p.is_absolute() else self.root / p
        return self.path("corpus", "manifest.jsonl")

    # -- stamping ------------------------------------------------------------
    def rel(self, path):
        return Path(path).relative_to(self.root).as_posix()

    def write(self, path, blob, inputs=""):
        """Write ``blob`` unless identical bytes are already there; stamp it either way."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        if path.exists() and path.read_bytes() == blob:
            self.skipped += 1
        else:
            tmp = path.with_name(path.name + ".tmp")
            tmp.write_bytes(blob)
            tmp.replace(path)
            self.written += 1
        self.stamps[self.rel(path)] = {"config": self.cfg.hash, "sha256": _sha(blob), "inputs": inputs}

    def up_to_date(self, path, inputs):
        """True when ``path`` exists with the stamped content and was built from ``inputs``."""
        st = self.stamps.get(self.rel(path))
        if st is None or st.get("inputs") != inputs or st.get("config") != self.cfg.hash:
            return False
        path = Path(path)
        return path.exists() and _sha(path.read_bytes()) == st["sha256"]

    def save_stamps(self):
        self._stamps_path.write_bytes(_json_bytes(self.stamps))

    def stamp_of(self, path):
        st = self.stamps.get(self.rel(path))
        return st["config"] if st else None

    # -- dependencies ----------------------------------------------------------
    def require(self, path, producer):
        if not Path(path).exists():
            raise MissingDependencyError(
                f"missing {self.rel(path)}; run `flowspeech {producer}` first", producer=producer)
        return path

    def records(self):
        self.require(self.manifest_path, "prepare")
        return data_mod.load_manifest(self.manifest_path, check_files=False)

    def splits(self):
        return json.loads(self.require(self.path("splits.json"), "prepare").read_text())

    def mel_stats(self):
        d = json.loads(self.require(self.path("mel_stats.json"), "prepare").read_text())
        return dsp.MelStats(d["global_min"], d["global_max"])

    def feature(self, kind, clip_id, producer):
        return data_mod.load_feature(self.require(self.feature_path(kind, clip_id), producer))

    def save_feature(self, kind, clip_id, array, rate, normalized=False, inputs=""):
        feat = data_mod.Feature(kind, array, rate, normalized, {"config_hash": self.cfg.hash})
        self.write(self.feature_path(kind, clip_id), data_mod.feature_bytes(feat), inputs)

    def save_model(self, name, module, meta=None):
        meta = dict(meta or {}, config_hash=self.cfg.hash)
        records = dict(module.state_dict())
        self.write(self.model_path(name), checkpoint.dumps(records, meta))

    def load_model(self, name, module, producer):
        records, meta = checkpoint.load(self.require(self.model_path(name), producer))
        module.load_state_dict({k: v for k, v in records.items() if not k.startswith("__")})
        return meta

    def model_meta(self, name, producer):
        return checkpoint.load(self.require(self.model_path(name), producer))[1]

    def log_run(self, name, rows):
        blob = "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows).encode()
        self.write(self.path("logs", f"{name}.jsonl"), blob)

    def map(self, fn, items):
        items = list(items)
        if self.jobs == 1 or len(items) < 2:
            return [fn(i) for i in items]
        with ThreadPoolExecutor(max_workers=self.jobs) as pool:
            return list(pool.map(fn, items))

    def wav_path(self, rec):
        return self.manifest_path.parent / rec["wav"]

    def visual(self, rec):
        rel = (rec.get("features") or {}).get("visual")
        if rel is None:
            raise ContractError(f"clip {rec['id']} has no visual features in the manifest")
        return data_mod.load_feature(self.manifest_path.parent / rel, kind="visual").data


# -- prepare -------------------------------------------------------------------------------
def _synthetic_spec(cfg):
    d = cfg.data
    return data_mod.SyntheticSpec(n_speakers=d.n_speakers, n_content_symbols=d.n_content_symbols,
                                  n_clips=d.n_clips, min_seconds=d.min_seconds, max_seconds=d.max_seconds,
                                  formant_bandwidth=d.formant_bandwidth, seed=cfg.seed)


def _prepare_corpus(ws):
    spec = _synthetic_spec(ws.cfg)
    with tempfile.TemporaryDirectory(dir=ws.root) as tmp:
        data_mod.generate_synthetic_corpus(spec, tmp)
        for src in sorted(Path(tmp).rglob("*")):
            if src.is_file():
                ws.write(ws.path("corpus", src.relative_to(tmp).as_posix()), src.read_bytes())


def _check_inputs(ws, records):
    base = ws.manifest_path.parent
    missing = []
    for rec in records:
        if not rec.get("wav"):
            missing.append(f"{rec['id']}: no 'wav' entry")
        for rel in data_mod._record_paths(rec):
            if not (base / rel).exists():
                missing.append(f"{rec['id']}: {base / rel}")
        if not (rec.get("features") or {}).get("visual"):
            missing.append(f"{rec['id']}: no visual feature entry")
    if missing:
        raise ContractError("missing inputs:\n  " + "\n  ".join(missing))


def cmd_prepare(ws, args):
    cfg = ws.cfg
    if not cfg.data.manifest:
        _prepare_corpus(ws)
    elif not ws.manifest_path.exists():
        raise ContractError(f"manifest {ws.manifest_path} does not exist")
    records = data_mod.load_manifest(ws.manifest_path, check_files=False)
    _check_inputs(ws, records)
    if not records:
        raise ContractError("manifest has no clips")

    ids = [r["id"] for r in records]
    n_test = max(1, int(round(len(ids) * cfg.data.test_fraction))) if len(ids) > 1 else 0
    splits = {"train": ids[:len(ids) - n_test], "test": ids[len(ids) - n_test:]}
    ws.write(ws.path("splits.json"), _json_bytes(splits))

    dsp_key = json.dumps({"dsp": vars(cfg.dsp)}, sort_keys=True)
    wav_digest = {r["id"]: _sha(ws.wav_path(r).read_bytes() + dsp_key.encode()) for r in records}

    # raw mels are needed for the global stats; cheap enough to recompute
    raw = dict(zip(ids, ws.map(lambda r: dsp.compute_mel(data_mod.read_wav(ws.wav_path(r))), records)))
    stats = dsp.compute_mel_stats(raw[i] for i in splits["train"] or ids)
    stats_blob = _json_bytes({"global_min": stats.global_min, "global_max": stats.global_max,
                              "config_hash": cfg.hash})
    ws.write(ws.path("mel_stats.json"), stats_blob)
    stats_key = _sha(stats_blob)

    def per_clip(rec):
        cid = rec["id"]
        inputs = wav_digest[cid] + stats_key
        if not ws.up_to_date(ws.feature_path("mel", cid), inputs):
            ws.save_feature("mel", cid, dsp.normalize_mel(raw[cid], stats).frames, MEL_RATE, True, inputs)
        else:
            ws.skipped += 1
        if not ws.up_to_date(ws.feature_path("f0", cid), wav_digest[cid]):
            track = dsp.normalize_f0(dsp.estimate_f0(data_mod.read_wav(ws.wav_path(rec)), cfg.dsp.f0_threshold))
            ws.save_feature("f0", cid, np.stack([track.f0, track.normalized], axis=1), MEL_RATE,
                            inputs=wav_digest[cid])
        else:
            ws.skipped += 1

    for rec in records:      # writes touch shared stamps, so keep this loop serial
        per_clip(rec)

    # bootstrap speaker embedder on the training clips -> speaker targets
    train = [r for r in records if r["id"] in set(splits["train"] or ids)]
    emb_inputs = _sha("".join(ws.stamps[ws.rel(ws.feature_path("mel", r["id"]))]["sha256"]
                              for r in train).encode())
    if not ws.up_to_date(ws.model_path("embedder"), emb_inputs):
        emb_cfg = encoders.EmbedderConfig(dim=cfg.encoders.speaker_dim, hidden=cfg.encoders.embedder_hidden,
                                          steps=cfg.encoders.embedder_steps, seed=cfg.seed)
        mels = [ws.feature("mel", r["id"], "prepare").data for r in train]
        embedder, hist = encoders.train_audio_embedder(mels, [r.get("speaker", "spk?") for r in train], emb_cfg)
        records_ = dict(embedder.state_dict())
        ws.write(ws.model_path("embedder"), checkpoint.dumps(records_, {"config_hash": cfg.hash}), emb_inputs)
        ws.log_run("embedder", [{"step": i, "loss": v} for i, v in enumerate(hist)])
    embedder = load_embedder(ws)
    for rec in records:
        cid = rec["id"]
        inputs = emb_inputs + ws.stamps[ws.rel(ws.feature_path("mel", cid))]["sha256"]
        if ws.up_to_date(ws.feature_path("speaker", cid), inputs):
            ws.skipped += 1
            continue
        vec = embedder.embed(ws.feature("mel", cid, "prepare").data).vector
        ws.save_feature("speaker", cid, vec, 0.0, inputs=inputs)
    return {"clips": len(records), "written": ws.written, "skipped": ws.skipped}


def load_embedder(ws):
    cfg = ws.cfg
    emb = encoders.AudioSpeakerEmbedder(encoders.EmbedderConfig(
        dim=cfg.encoders.speaker_dim, hidden=cfg.encoders.embedder_hidden, seed=cfg.seed))
    records, _ = checkpoint.load(ws.require(ws.model_path("embedder"), "prepare"))
    emb.load_state_dict(records)
    return emb


# -- tokenizers ---------------------------------------------------------------------------
def _train_ids(ws):
    return ws.splits()["train"] or [r["id"] for r in ws.records()]


def _codebook(ws):
    records, _ = checkpoint.load(ws.require(ws.model_path("kmeans"), "train-kmeans"))
    return tokenize.Codebook(records["centroids"])


def cmd_train_kmeans(ws, args):
    cfg = ws.cfg
    records = ws.records()
    feats = np.concatenate([tokenize.content_features(ws.feature("mel", i, "prepare").data)
                            for i in _train_ids(ws)])
    res = tokenize.kmeans_fit(feats, cfg.tokenize.content_clusters, iters=cfg.tokenize.kmeans_iters,
                              seed=cfg.seed, return_history=True)
    cb = res.codebook
    ws.write(ws.model_path("kmeans"), checkpoint.dumps({"centroids": cb.vectors},
                                                       {"config_hash": cfg.hash, "K": cb.K}))
    ws.log_run("train-kmeans", [{"iter": i, "inertia": v} for i, v in enumerate(res.inertia_history)])
    for rec in records:
        ids = tokenize.kmeans_assign(tokenize.content_features(ws.feature("mel", rec["id"], "prepare").data), cb).ids
        ws.save_feature("content", rec["id"], ids, TOKEN_RATE)
    return {"K": cb.K, "inertia": float(res.inertia_history[-1])}


def _vq_config(cfg):
    t = cfg.tokenize
    return tokenize.VqVaeConfig(channels=t.vqvae_channels, latent_dim=t.vqvae_channels,
                                codebook_size=t.pitch_codebook, steps=t.vqvae_steps, lr=t.vqvae_lr, seed=cfg.seed)


def _pitch_track(ws, cid):
    f = ws.feature("f0", cid, "prepare").data
    return dsp.PitchTrack(f[:, 0], normalized=f[:, 1].astype(np.float64), voiced=f[:, 0] > 0)


def cmd_train_vqvae(ws, args):
    cfg = ws.cfg
    records = ws.records()
    rows = []
    model, hist = tokenize.vqvae_train([_pitch_track(ws, i) for i in _train_ids(ws)], _vq_config(cfg),
                                       log_fn=rows.append)
    ws.save_model("vqvae", model)
    ws.log_run("train-vqvae", rows)
    used = []
    for rec in records:
        ids = tokenize.vqvae_encode(_pitch_track(ws, rec["id"]), model).ids
        used.append(ids)
        ws.save_feature("pitch", rec["id"], ids, TOKEN_RATE)
    return {"final_loss": float(hist[-1]),
            "perplexity": float(tokenize.code_perplexity(np.concatenate(used), cfg.tokenize.pitch_codebook))}


def load_vqvae(ws):
    model = tokenize.VqVaeModel(_vq_config(ws.cfg), seed=ws.cfg.seed)
    ws.load_model("vqvae", model, "train-vqvae")
    return model


# -- attribute encoders ----------------------------------------------------------------------
def _encoder_config(ws, kind, input_dim):
    e, cfg = ws.cfg.encoders, ws.cfg
    out = {"content": cfg.tokenize.content_clusters, "pitch": cfg.tokenize.pitch_codebook,
           "speaker": e.speaker_dim}[kind]
    return encoders.EncoderConfig(input_dim=input_dim, hidden=e.hidden, blocks=e.blocks, heads=e.heads,
                                  kernel=e.kernel, output_dim=out, head="embed" if kind == "speaker" else "classify",
                                  steps=e.speaker_steps if kind == "speaker" else e.steps,
                                  batch_seconds=e.batch_seconds, lr=e.lr, warmup_steps=e.warmup_steps,
                                  label_smoothing=e.label_smoothing, seed=cfg.seed)


_TARGET = {"content": ("content", "train-kmeans"), "pitch": ("pitch", "train-vqvae"),
           "speaker": ("speaker", "prepare")}


def _train_encoder(ws, kind):
    feature_kind, producer = _TARGET[kind]
    by_id = {r["id"]: r for r in ws.records()}
    if kind == "content":
        ws.require(ws.model_path("kmeans"), "train-kmeans")
    if kind == "pitch":
        ws.require(ws.model_path("vqvae"), "train-vqvae")
    dataset = []
    for cid in _train_ids(ws):
        target = ws.feature(feature_kind, cid, producer).data
        target = target.astype(np.int64) if kind != "speaker" else target.astype(np.float64)
        dataset.append(encoders.EncoderExample(cid, ws.visual(by_id[cid]), target, by_id[cid]["duration"]))
    cfg = _encoder_config(ws, kind, dataset[0].visual.shape[1])
    rows = []
    model, hist = encoders.train_attribute_encoder(kind, dataset, cfg, log_fn=rows.append)
    ws.save_model(kind, model, {"input_dim": cfg.input_dim})
    ws.log_run(f"train-{kind}", rows)
    return {"initial_loss": hist[0], "final_loss": float(np.mean(hist[-10:]))}


def load_encoder(ws, kind):
    meta = ws.model_meta(kind, f"train-{kind}")
    model = encoders.ConformerEncoder(_encoder_config(ws, kind, int(meta["input_dim"])))
    ws.load_model(kind, model, f"train-{kind}")
    return model


# -- decoder ----------------------------------------------------------------------------------
def _decoder_config(ws, parameterization="velocity"):
    r, cfg = ws.cfg.rfm, ws.cfg
    return rfm.DecoderConfig(layers=r.layers, hidden=r.hidden, heads=r.heads,
                             content_vocab=cfg.tokenize.content_clusters, pitch_vocab=cfg.tokenize.pitch_codebook,
                             content_dim=r.content_dim, pitch_dim=r.pitch_dim, speaker_dim=cfg.encoders.speaker_dim,
                             time_dim=r.time_dim, parameterization=parameterization, cond_dropout=r.cond_dropout,
                             logit_mean=r.logit_mean, logit_std=r.logit_std, steps=r.steps,
                             batch_seconds=r.batch_seconds, lr=r.lr, warmup_steps=r.warmup_steps,
                             grad_clip=r.grad_clip, seed=cfg.seed)


def _train_decoder(ws, name, parameterization):
    by_id = {r["id"]: r for r in ws.records()}
    for kind, producer in (("content", "train-kmeans"), ("pitch", "train-vqvae")):
        ws.require(ws.path("features", kind), producer)
    dataset = []
    for cid in _train_ids(ws):
        dataset.append(rfm.DecoderExample(
            cid, ws.feature("mel", cid, "prepare").data,
            ws.feature("content", cid, "train-kmeans").data.astype(np.int64),
            ws.feature("pitch", cid, "train-vqvae").data.astype(np.int64),
            ws.feature("speaker", cid, "prepare").data.astype(np.float64), by_id[cid]["duration"]))
    rows = []
    model, hist, null_frac = rfm.train_decoder(dataset, _decoder_config(ws, parameterization), log_fn=rows.append)
    ws.save_model(name, model)
    ws.log_run(name if name != "decoder" else "train-decoder", rows)
    return {"initial_loss": hist[0], "final_loss": float(np.mean(hist[-50:])), "null_fraction": null_frac}


def load_decoder(ws, name="decoder"):
    producer = "train-decoder" if name == "decoder" else "train-ddim-baseline"
    model = rfm.Decoder(_decoder_config(ws, "velocity" if name == "decoder" else "epsilon"))
    ws.load_model(name, model, producer)
    return model


# -- synthesis ------------------------------------------------------------------------------
def synth_tag(variant, ablate=None, sampler="rfm"):
    tag = variant
    if sampler != "rfm":
        tag += f"-{sampler}"
    if ablate:
        tag += f"-no-{ablate}"
    return tag


class Synthesizer:
    """Full inference: visual -> attributes -> condition -> sampler -> mel -> Griffin-Lim."""

    def __init__(self, ws, variant="v", steps=None, cfg_scale=None, seed=None, ablate=None, sampler="rfm"):
        if variant not in ("a", "v"):
            raise ContractError(f"unknown variant '{variant}' (use a or v)")
        if ablate is not None and ablate not in rfm.STREAMS:
            raise ContractError(f"unknown stream '{ablate}' (use content, pitch or speaker)")
        self.ws = ws
        r = ws.cfg.rfm
        self.variant = variant
        self.ablate = ablate
        self.sampler = sampler
        self.sampler_cfg = rfm.SamplerConfig(steps if steps is not None else r.sampler_steps,
                                             cfg_scale if cfg_scale is not None else r.cfg_scale,
                                             seed if seed is not None else ws.cfg.seed)
        self.content = load_encoder(ws, "content")
        self.pitch = load_encoder(ws, "pitch")
        self.speaker = load_encoder(ws, "speaker") if variant == "v" else None
        self.embedder = load_embedder(ws) if variant == "a" else None
        self.decoder = load_decoder(ws, "decoder" if sampler == "rfm" else "ddim")
        self.stats = ws.mel_stats()

    def attributes(self, rec):
        visual = self.ws.visual(rec)
        T = dsp.num_frames(int(round(rec["duration"] * dsp.SAMPLE_RATE)))
        if T < 2:
            raise ContractError(f"clip {rec['id']} is too short to synthesize")
        content = encoders.predict_tokens(self.content, visual)
        pitch = encoders.predict_tokens(self.pitch, visual)
        if self.variant == "a":
            wav = self.ws.wav_path(rec) if rec.get("wav") else None
            if wav is None or not wav.exists():
                raise ContractError(f"variant a needs reference audio for clip {rec['id']}")
            mel = dsp.normalize_mel(dsp.compute_mel(data_mod.read_wav(wav)), self.stats)
            speaker = self.embedder.embed(mel.frames)
        else:
            speaker = encoders.speaker_forward(visual, self.speaker)
        return content, pitch, speaker, T

    def __call__(self, rec):
        content, pitch, speaker, T = self.attributes(rec)
        model = self.decoder
        with no_grad():
            bundle = rfm.assemble_condition(content, pitch, speaker, T, model.embedder)
            if self.ablate:
                bundle = rfm.ablate_condition(bundle, self.ablate, model.embedder)
        x0 = stream(self.sampler_cfg.seed, "synth", rec["id"]).standard_normal((T, model.out_dim))
        if self.sampler == "rfm":
            mel = rfm.euler_sample_cfg(bundle, T, self.sampler_cfg, model, x0=x0)
        else:
            mel = rfm.ddim_sample(bundle, T, self.sampler_cfg.steps, model, x0=x0)
        if not np.all(np.isfinite(mel)):
            raise FloatingPointError(f"non-finite mel for clip {rec['id']}")
        norm = dsp.MelSpectrogram(mel, normalized=True)
        wav = dsp.griffin_lim(dsp.denormalize_mel(norm, self.stats), iters=self.ws.cfg.dsp.griffin_lim_iters,
                              seed=int(stream(self.sampler_cfg.seed, "griffin_lim", rec["id"]).integers(2 ** 31)))
        return norm.frames, wav


def _select(ws, clip_ids):
    records = {r["id"]: r for r in ws.records()}
    ids = clip_ids or ws.splits()["test"] or sorted(records)
    unknown = [i for i in ids if i not in records]
    if unknown:
        raise ContractError(f"unknown clip ids: {unknown}")
    return [records[i] for i in ids]


def run_synth(ws, variant="v", clip_ids=None, steps=None, cfg_scale=None, seed=None, ablate=None, sampler="rfm"):
    synth = Synthesizer(ws, variant, steps, cfg_scale, seed, ablate, sampler)
    recs = _select(ws, clip_ids)
    tag = synth_tag(variant, ablate, sampler)
    outputs = ws.map(synth, recs)
    for rec, (mel, wav) in zip(recs, outputs):
        feat = data_mod.Feature("mel", mel, MEL_RATE, True, {"config_hash": ws.cfg.hash})
        ws.write(ws.path("synth", tag, f"{rec['id']}.fsft"), data_mod.feature_bytes(feat))
        with tempfile.TemporaryDirectory(dir=ws.root) as tmp:
            p = Path(tmp) / "out.wav"
            data_mod.write_wav(p, wav)
            ws.write(ws.path("synth", tag, f"{rec['id']}.wav"), p.read_bytes())
    params = {"variant": variant, "steps": synth.sampler_cfg.steps, "cfg_scale": synth.sampler_cfg.guidance_scale,
              "seed": synth.sampler_cfg.seed, "ablate": ablate, "sampler": sampler,
              "clips": [r["id"] for r in recs], "config_hash": ws.cfg.hash}
    ws.write(ws.path("synth", tag, "synth.json"), _json_bytes(params))
    return {"tag": tag, **params}


# -- evaluation -----------------------------------------------------------------------------
def run_eval(ws, tag="v", force=False):
    gen_dir = ws.require(ws.path("synth", tag, "synth.json"), "synth").parent
    params = json.loads((gen_dir / "synth.json").read_text())
    mixed = {params.get("config_hash"), ws.stamp_of(ws.path("mel_stats.json"))} - {ws.cfg.hash}
    if mixed and not force:
        raise ContractError(f"artifacts in {gen_dir} were produced under config {sorted(mixed)}, "
                            f"current config is {ws.cfg.hash}; pass --force to compare anyway")
    records = {r["id"]: r for r in ws.records()}
    embedder = load_embedder(ws)
    cb = _codebook(ws)
    stats = ws.mel_stats()
    report = metrics.EvalReport(config_hash=ws.cfg.hash)
    missing = []

    def one(cid):
        gen_mel, gen_wav = gen_dir / f"{cid}.fsft", gen_dir / f"{cid}.wav"
        if cid not in records or not gen_mel.exists() or not gen_wav.exists():
            return cid, None
        rec = records[cid]
        ref_wav = data_mod.read_wav(ws.wav_path(rec))
        ref_mel = ws.feature("mel", cid, "prepare").data
        wav = data_mod.read_wav(gen_wav)
        heard = dsp.normalize_mel(dsp.compute_mel(wav), stats)
        f0 = metrics.compare_f0(wav, ref_wav)
        tokens = tokenize.kmeans_assign(tokenize.content_features(heard), cb)
        target = ws.feature("content", cid, "train-kmeans").data.astype(np.int64)
        return cid, {
            "mae_f0": f0.value, "f0_warning": f0.warning,
            "secs": metrics.secs(heard, dsp.MelSpectrogram(ref_mel, normalized=True), embedder),
            "mel_mse": metrics.mel_mse(data_mod.load_feature(gen_mel).data, ref_mel),
            "token_accuracy": metrics.token_accuracy(tokens.ids, target),
        }

    for cid, vals in ws.map(one, params["clips"]):
        if vals is None:
            missing.append(cid)
            continue
        if vals.pop("f0_warning"):
            report.warnings.append(f"{cid}: no co-voiced frames for mae_f0")
        report.add(cid, **vals)
    out = report.to_dict()
    out["generated"] = tag
    out["missing"] = missing
    ws.write(ws.path("reports", f"{tag}.json"), _json_bytes(out))
    if ws.cfg.eval.write_csv:
        ws.write(ws.path("reports", f"{tag}.csv"), report.to_csv().encode())
    if missing:
        raise ContractError(f"missing generated/reference pairs for clips: {missing}")
    return out


def run_ablation(ws, stream_name, variant="v", force=False, **synth_kw):
    full_tag = synth_tag(variant)
    if not ws.path("synth", full_tag, "synth.json").exists():
        run_synth(ws, variant, **synth_kw)
    run_synth(ws, variant, ablate=stream_name, **synth_kw)
    full = run_eval(ws, full_tag, force)["means"]
    ablated = run_eval(ws, synth_tag(variant, stream_name), force)["means"]
    out = {"ablate": stream_name, "full": full, "ablated": ablated,
           "delta": {k: ablated[k] - full[k] for k in full if k in ablated},
           "content_error_ratio": (1 - ablated["token_accuracy"]) / max(1 - full["token_accuracy"], 1e-9),
           "config_hash": ws.cfg.hash}
    ws.write(ws.path("reports", f"ablate-{stream_name}.json"), _json_bytes(out))
    return out


# -- argument parsing ----------------------------------------------------------------------
def build_parser():
    p = argparse.ArgumentParser(prog="flowspeech", description=__doc__.split("\n")[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML pipeline config")
    common.add_argument("--out-dir", default="runs/default", help="root for every artifact")
    common.add_argument("--tiny", action="store_true", help="small desk-test profile")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--jobs", type=int, default=1, help="worker threads for per-clip work")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("prepare", "train-kmeans", "train-vqvae", "train-content", "train-pitch",
                 "train-speaker", "train-decoder", "train-ddim-baseline"):
        sub.add_parser(name, parents=[common])
    s = sub.add_parser("synth", parents=[common])
    s.add_argument("--variant", choices=("a", "v"), default="v")
    s.add_argument("--clips", nargs="*", help="clip ids (default: the test split)")
    s.add_argument("--steps", type=int)
    s.add_argument("--cfg-scale", type=float)
    s.add_argument("--ablate", choices=rfm.STREAMS)
    s.add_argument("--sampler", choices=("rfm", "ddim"), default="rfm")
    e = sub.add_parser("eval", parents=[common])
    e.add_argument("--variant", choices=("a", "v"), default="v")
    e.add_argument("--generated", help="synth tag to evaluate (default: the variant)")
    e.add_argument("--ablate", choices=rfm.STREAMS, help="synthesize with one stream nulled and report deltas")
    e.add_argument("--force", action="store_true", help="allow comparing artifacts from different configs")
    return p


def dispatch(args):
    cfg = load_config(args.config, profile="tiny" if args.tiny else None, seed=args.seed)
    ws = Workspace(args.out_dir, cfg, args.jobs)
    try:
        c = args.command
        if c == "prepare":
            out = cmd_prepare(ws, args)
        elif c == "train-kmeans":
            out = cmd_train_kmeans(ws, args)
        elif c == "train-vqvae":
            out = cmd_train_vqvae(ws, args)
        elif c in ("train-content", "train-pitch", "train-speaker"):
            out = _train_encoder(ws, c.split("-", 1)[1])
        elif c == "train-decoder":
            out = _train_decoder(ws, "decoder", "velocity")
        elif c == "train-ddim-baseline":
            out = _train_decoder(ws, "ddim", "epsilon")
        elif c == "synth":
            out = run_synth(ws, args.variant, args.clips, args.steps, args.cfg_scale, args.seed,
                            args.ablate, args.sampler)
        elif c == "eval":
            if args.ablate:
                out = run_ablation(ws, args.ablate, args.variant, args.force)
            else:
                out = run_eval(ws, args.generated or args.variant, args.force)
        else:  # pragma: no cover - argparse guards this
            raise ContractError(f"unknown command {c}")
        out = dict(out, config_hash=cfg.hash)
    finally:
        ws.save_stamps()
    return out


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        out = dispatch(args)
    except FlowSpeechError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FloatingPointError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4
    except (ValueError, KeyError) as exc:
        print(f"contract error: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(out, indent=1, sort_keys=True, default=float))
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
