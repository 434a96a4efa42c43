"""Dataset synthesis, feature statistics, batching, training, enhancement.

A dataset lives under one root directory:

    root/
      bank/rir_0000.wav ...     float32 RIR renders
      bank/manifest.csv         one row per RIR
      pairs/p000000.wav ...     reverberant renders
      clean/...                 16 kHz mono copies of ingested clean files
                                (only when conversion was needed)
      pairs.csv                 pair manifest with train/val/test splits
      stats.json                per-bin feature statistics of the train split
      features/                 optional float32 feature cache (.npy)

All manifest paths are relative to the root. Randomness is derived per
item from the run seed, so manifests, renders, batches, and trained
parameters are reproducible bit-for-bit on one platform, regardless of
worker count.
"""

import csv
import hashlib
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import nn
from .acoustics import (AcousticsError, RoomImpulseResponse, estimate_t60,
                        fft_convolve, image_source_rir, sample_room)
from .autodiff import Rng, Tape, Tensor
from .dsp import (AudioBuffer, StftConfig, WavError, log_magnitude, phase,
                  griffin_lim_refine, reconstruct, resample, stft, wav_read,
                  wav_write)
from .model import (Checkpoint, DereverbModel, ModelConfig, NormStats,
                    build_model, checkpoint_from_model, load_checkpoint,
                    normalize, save_checkpoint)

log = logging.getLogger("dereverb")


class PipelineError(Exception):
    pass


class TrainingError(PipelineError):
    pass


# ---------------------------------------------------------------------------
# manifests


@dataclass
class RirRecord:
    rir_id: str
    path: str
    target_t60: float
    estimated_t60: float
    room: str
    seed: int


@dataclass
class PairRecord:
    pair_id: str
    clean_path: str
    rir_id: str
    reverb_path: str
    split: str
    seed: int


@dataclass
class BankManifest:
    records: list[RirRecord] = field(default_factory=list)

    def save(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["rir_id", "path", "target_t60", "estimated_t60",
                        "room", "seed"])
            for r in self.records:
                w.writerow([r.rir_id, r.path, f"{r.target_t60:.17g}",
                            f"{r.estimated_t60:.17g}", r.room, r.seed])

    @classmethod
    def load(cls, path) -> "BankManifest":
        records = []
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                records.append(RirRecord(row["rir_id"], row["path"],
                                         float(row["target_t60"]),
                                         float(row["estimated_t60"]),
                                         row["room"], int(row["seed"])))
        return cls(records)

    def by_id(self) -> dict[str, RirRecord]:
        return {r.rir_id: r for r in self.records}


@dataclass
class PairManifest:
    records: list[PairRecord] = field(default_factory=list)

    def save(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["pair_id", "clean_path", "rir_id", "reverb_path",
                        "split", "seed"])
            for r in self.records:
                w.writerow([r.pair_id, r.clean_path, r.rir_id, r.reverb_path,
                            r.split, r.seed])

    @classmethod
    def load(cls, path) -> "PairManifest":
        records = []
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                records.append(PairRecord(row["pair_id"], row["clean_path"],
                                          row["rir_id"], row["reverb_path"],
                                          row["split"], int(row["seed"])))
        return cls(records)

    def split(self, name: str) -> list[PairRecord]:
        return [r for r in self.records if r.split == name]


def t60_grid(start: float = 0.2, stop: float = 2.0, step: float = 0.05) -> list[float]:
    """Inclusive grid of target reverberation times (37 values by default)."""
    n = int(round((stop - start) / step)) + 1
    return [round(start + k * step, 6) for k in range(n)]


def val_count(n_pairs: int, fraction: float = 0.05) -> int:
    """Validation-row count: round(n·fraction), at least 1 when n ≥ 2.

    round() is banker's-free: exact .5 goes up. 37,000 pairs at 5 %
    gives 1,850 validation / 35,150 training rows.
    """
    if n_pairs < 2:
        return 0
    return max(1, int(math.floor(n_pairs * fraction + 0.5)))


# ---------------------------------------------------------------------------
# RIR bank generation


def _render_rir(job: tuple) -> tuple:
    seed, spawn_key, index, target = job
    rng = Rng(seed, spawn_key).derive(index)
    spec = sample_room(rng.derive(0), target)
    rir = image_source_rir(spec, rng.derive(1))
    try:
        est = estimate_t60(rir).fullband
    except AcousticsError as exc:
        log.warning("rir %d: T60 estimate failed: %s", index, exc)
        est = float("nan")
    return index, rir.samples, spec.summary(), est


def generate_bank(grid: list[float], per_t60: int, rng: Rng, root,
                  workers: int = 1) -> BankManifest:
    """Render per_t60 random-room RIRs for every grid value.

    Deterministic for a given rng seed independently of worker count:
    every RIR draws from its own derived stream and files are written
    in index order by the parent process.
    """
    if not grid:
        raise PipelineError("empty T60 grid")
    root = Path(root)
    bank_dir = root / "bank"
    bank_dir.mkdir(parents=True, exist_ok=True)
    jobs = []
    for gi, target in enumerate(grid):
        for k in range(per_t60):
            jobs.append((rng.seed, rng.spawn_key, gi * per_t60 + k, target))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_render_rir, jobs, chunksize=4))
    else:
        results = [_render_rir(j) for j in jobs]
    results.sort(key=lambda r: r[0])
    manifest = BankManifest()
    for (index, samples, room, est), job in zip(results, jobs):
        target = job[3]
        rir_id = f"rir_{index:04d}"
        rel = f"bank/{rir_id}.wav"
        wav_write(root / rel, AudioBuffer(samples, 16000))
        manifest.records.append(RirRecord(rir_id, rel, target, est, room, index))
    manifest.save(bank_dir / "manifest.csv")
    return manifest


# ---------------------------------------------------------------------------
# pair synthesis


def list_clean_pool(clean_dir) -> list[Path]:
    pool = sorted(Path(clean_dir).glob("*.wav"))
    if not pool:
        raise PipelineError(f"no .wav files found in {clean_dir}")
    return pool


def _ingest_clean(path: Path, root: Path, cache: dict) -> str:
    """Return a root-relative (or absolute) path to a 16 kHz mono copy."""
    key = str(path)
    if key in cache:
        return cache[key]
    buf = wav_read(path)
    if buf.sample_rate == 16000:
        try:
            rel = str(path.resolve().relative_to(root.resolve()))
        except ValueError:
            rel = str(path.resolve())
        cache[key] = rel
        return rel
    converted = AudioBuffer(resample(buf.samples, buf.sample_rate, 16000), 16000)
    rel = f"clean/{path.stem}_16k.wav"
    (root / "clean").mkdir(parents=True, exist_ok=True)
    wav_write(root / rel, converted)
    cache[key] = rel
    return rel


def synthesize_pairs(clean_dir, bank: BankManifest, per_rir: int, rng: Rng,
                     root, subset: str = "trainval",
                     val_fraction: float = 0.05) -> PairManifest:
    """Convolve randomly drawn clean utterances with every bank RIR.

    Utterances are sampled with replacement from the clean pool. With
    subset='trainval' a seeded random 5 % of the rows become the
    validation split; subset='test' marks every row as test.
    """
    if subset not in ("trainval", "test"):
        raise PipelineError(f"unknown subset {subset!r}")
    root = Path(root)
    pool = list_clean_pool(clean_dir)
    (root / "pairs").mkdir(parents=True, exist_ok=True)
    prefix = "p" if subset == "trainval" else "t"
    existing = PairManifest()
    if (root / "pairs.csv").exists():
        existing = PairManifest.load(root / "pairs.csv")
        if any(r.pair_id.startswith(prefix) for r in existing.records):
            raise PipelineError(
                f"{root / 'pairs.csv'} already holds {subset!r} pairs; "
                f"use a fresh dataset root")
    cache: dict = {}
    manifest = PairManifest()
    idx = 0
    for rec in bank.records:
        rir = RoomImpulseResponse(wav_read(root / rec.path).samples, 16000)
        draws = rng.derive(rec.seed).integers(0, len(pool), size=per_rir)
        for draw in draws:
            src = pool[int(draw)]
            try:
                clean_rel = _ingest_clean(src, root, cache)
            except (WavError, OSError) as exc:
                log.warning("skipping unreadable clean file %s: %s", src, exc)
                continue
            clean = wav_read(root / clean_rel if not Path(clean_rel).is_absolute()
                             else clean_rel)
            reverb = fft_convolve(clean, rir)
            pair_id = f"{prefix}{idx:06d}"
            rel = f"pairs/{pair_id}.wav"
            wav_write(root / rel, reverb)
            manifest.records.append(PairRecord(
                pair_id, clean_rel, rec.rir_id, rel, "train", idx))
            idx += 1
    if not manifest.records:
        raise PipelineError("pair synthesis produced no usable pairs")
    if subset == "test":
        for r in manifest.records:
            r.split = "test"
    else:
        n_val = val_count(len(manifest.records), val_fraction)
        order = rng.derive(10**6).permutation(len(manifest.records))
        for j in order[:n_val]:
            manifest.records[int(j)].split = "val"
    merged = PairManifest(existing.records + manifest.records)
    merged.save(root / "pairs.csv")
    return merged


# ---------------------------------------------------------------------------
# features and statistics


def _resolve(root: Path, rel: str) -> Path:
    p = Path(rel)
    return p if p.is_absolute() else root / p


def utterance_features(clean_path, reverb_path,
                       cfg: StftConfig) -> tuple[np.ndarray, np.ndarray]:
    """(reverberant, clean) raw log-magnitude features of one pair."""
    reverb = wav_read(reverb_path)
    clean = wav_read(clean_path)
    n = min(len(clean.samples), len(reverb.samples))
    feats_in = log_magnitude(stft(AudioBuffer(reverb.samples[:n], 16000), cfg))
    feats_tgt = log_magnitude(stft(AudioBuffer(clean.samples[:n], 16000), cfg))
    return feats_in, feats_tgt


class _Welford:
    """Chunk-merging mean/variance accumulator (Chan et al. update)."""

    def __init__(self, width: int):
        self.n = 0
        self.mean = np.zeros(width)
        self.m2 = np.zeros(width)

    def add(self, frames: np.ndarray) -> None:
        cn = frames.shape[0]
        if cn == 0:
            return
        cmean = frames.mean(axis=0)
        cm2 = ((frames - cmean) ** 2).sum(axis=0)
        if self.n == 0:
            self.n, self.mean, self.m2 = cn, cmean, cm2
            return
        delta = cmean - self.mean
        total = self.n + cn
        self.mean = self.mean + delta * (cn / total)
        self.m2 = self.m2 + cm2 + delta ** 2 * (self.n * cn / total)
        self.n = total

    def std(self) -> np.ndarray:
        return np.sqrt(self.m2 / max(self.n, 1))


def compute_stats(manifest: PairManifest, root, cfg: StftConfig,
                  split: str = "train") -> NormStats:
    """Per-bin mean/std of input and target features over one split."""
    root = Path(root)
    records = manifest.split(split)
    if not records:
        raise PipelineError(f"no records in split {split!r}")
    acc_in = _Welford(cfg.bins)
    acc_tgt = _Welford(cfg.bins)
    for rec in records:
        fi, ft = utterance_features(_resolve(root, rec.clean_path),
                                    _resolve(root, rec.reverb_path), cfg)
        acc_in.add(fi)
        acc_tgt.add(ft)
    return NormStats(acc_in.mean, acc_in.std(), acc_tgt.mean, acc_tgt.std())


def save_stats(stats: NormStats, path) -> None:
    with open(path, "w") as fh:
        json.dump({k: list(getattr(stats, k)) for k in
                   ("input_mean", "input_std", "target_mean", "target_std")},
                  fh)


def load_stats(path) -> NormStats:
    with open(path) as fh:
        d = json.load(fh)
    return NormStats(d["input_mean"], d["input_std"],
                     d["target_mean"], d["target_std"])


@dataclass
class UtteranceFeatures:
    pair_id: str
    inputs: np.ndarray     # (T, B) normalized reverberant log-magnitude
    targets: np.ndarray    # (T, B) normalized clean log-magnitude

    @property
    def frames(self) -> int:
        return self.inputs.shape[0]


def load_features(manifest: PairManifest, root, split: str, stats: NormStats,
                  cfg: StftConfig, cache_dir=None,
                  dtype=np.float32) -> list[UtteranceFeatures]:
    """Normalized features for a split, optionally cached as .npy pairs."""
    root = Path(root)
    cache = Path(cache_dir) if cache_dir else None
    if cache:
        cache.mkdir(parents=True, exist_ok=True)
    out = []
    for rec in manifest.split(split):
        loaded = False
        if cache:
            fi_p = cache / f"{rec.pair_id}_in.npy"
            ft_p = cache / f"{rec.pair_id}_tgt.npy"
            if fi_p.exists() and ft_p.exists():
                fi, ft = np.load(fi_p), np.load(ft_p)
                loaded = True
        if not loaded:
            raw_in, raw_tgt = utterance_features(
                _resolve(root, rec.clean_path),
                _resolve(root, rec.reverb_path), cfg)
            fi = normalize(raw_in, stats, "input").astype(dtype)
            ft = normalize(raw_tgt, stats, "target").astype(dtype)
            if cache:
                np.save(cache / f"{rec.pair_id}_in.npy", fi)
                np.save(cache / f"{rec.pair_id}_tgt.npy", ft)
        if fi.shape[0] < 1:
            log.warning("skipping %s: shorter than one frame", rec.pair_id)
            continue
        out.append(UtteranceFeatures(rec.pair_id, fi.astype(dtype),
                                     ft.astype(dtype)))
    return out


@dataclass
class Batch:
    inputs: np.ndarray     # (N, T_max, B)
    targets: np.ndarray    # (N, T_max, B)
    mask: np.ndarray       # (N, T_max), 1.0 on valid frames
    lengths: list[int]
    pair_ids: list[str]


def collate(items: list[UtteranceFeatures], pad_to: int | None = None) -> Batch:
    t_max = pad_to if pad_to is not None else max(u.frames for u in items)
    n = len(items)
    b = items[0].inputs.shape[1]
    dtype = items[0].inputs.dtype
    inputs = np.zeros((n, t_max, b), dtype=dtype)
    targets = np.zeros((n, t_max, b), dtype=dtype)
    mask = np.zeros((n, t_max))
    for i, u in enumerate(items):
        inputs[i, :u.frames] = u.inputs
        targets[i, :u.frames] = u.targets
        mask[i, :u.frames] = 1.0
    return Batch(inputs, targets, mask, [u.frames for u in items],
                 [u.pair_id for u in items])


def make_batches(features: list[UtteranceFeatures], batch_size: int,
                 rng: Rng) -> list[Batch]:
    """Length-bucketed batches in a seeded random order.

    Items are sorted by (frames, pair_id) into contiguous buckets of
    ``batch_size`` (minimizing padding), then the bucket order is
    shuffled with the given stream.
    """
    if not features:
        raise PipelineError("no features to batch")
    items = sorted(features, key=lambda u: (u.frames, u.pair_id))
    buckets = [items[i:i + batch_size] for i in range(0, len(items), batch_size)]
    order = rng.permutation(len(buckets))
    return [collate(buckets[int(i)]) for i in order]


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainParams:
    epochs: int = 100
    batch_size: int = 16
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainReport:
    train_losses: list[float] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = math.inf
    wall_seconds: float = 0.0
    seed: int = 0
    config_hash: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def config_hash(model_cfg: ModelConfig, params: TrainParams, seed: int) -> str:
    blob = json.dumps({"model": model_cfg.to_dict(),
                       "train": params.to_dict(), "seed": seed},
                      sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _epoch_pass(model: DereverbModel, batches: list[Batch],
                opt: nn.AdamState | None, epoch: int) -> float:
    """One full pass; returns frame-weighted mean loss. Trains when opt given."""
    b = model.cfg.bins
    total_sse = 0.0
    total_frames = 0
    for bi, batch in enumerate(batches):
        if opt is not None:
            ad.zero_grads(model.parameters())
            with Tape() as tape:
                pred = model.forward_batch(batch.inputs, batch.lengths)
                loss = nn.masked_mse(pred, Tensor(batch.targets.astype(
                    model.cfg.dtype)), batch.mask)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch {bi} "
                    f"(pairs {batch.pair_ids[:3]}...)")
            ad.backward(tape, loss)
            nn.adam_step(opt)
        else:
            pred = model.forward_batch(batch.inputs, batch.lengths)
            loss = nn.masked_mse(pred, Tensor(batch.targets.astype(
                model.cfg.dtype)), batch.mask)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(
                    f"non-finite validation loss at epoch {epoch}, batch {bi}")
        frames = int(sum(batch.lengths))
        total_sse += value * frames * b
        total_frames += frames
    return total_sse / (total_frames * b)


def train(model_cfg: ModelConfig, manifest: PairManifest, root,
          stats: NormStats, params: TrainParams, rng: Rng,
          checkpoint_path, stft_cfg: StftConfig = StftConfig(),
          cache_dir=None, resume_from=None,
          log_every: int = 1) -> tuple[Checkpoint, TrainReport]:
    """Train with per-epoch validation; keep the lowest-validation model.

    The model initializes from rng.derive(0) and epoch e shuffles with
    rng.derive(e), so a (seed, config) pair fixes the whole trajectory;
    resuming from a checkpoint at epoch k reproduces the unresumed run
    bit-for-bit because the optimizer state rides along in the file.
    """
    t_start = time.time()
    dtype = model_cfg.dtype
    feats_train = load_features(manifest, root, "train", stats, stft_cfg,
                                cache_dir, dtype)
    feats_val = load_features(manifest, root, "val", stats, stft_cfg,
                              cache_dir, dtype)
    if not feats_train or not feats_val:
        raise TrainingError("need non-empty train and val splits")

    start_epoch = 1
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        if ckpt.config.to_dict() != model_cfg.to_dict():
            raise TrainingError("resume checkpoint config differs from request")
        model = ckpt.restore()
        opt = nn.AdamState(model.parameters(), params.lr, params.beta1,
                           params.beta2, params.eps)
        opt.t = int(ckpt.metadata["adam_t"])
        for i, p in enumerate(model.params):
            opt.m[i] = ckpt.opt_state[f"m.{p}"].copy()
            opt.v[i] = ckpt.opt_state[f"v.{p}"].copy()
        start_epoch = int(ckpt.metadata["epoch"]) + 1
        best_val = float(ckpt.metadata["val_loss"])
        best_epoch = int(ckpt.metadata["epoch"])
    else:
        model = build_model(model_cfg, rng.derive(0))
        opt = nn.AdamState(model.parameters(), params.lr, params.beta1,
                           params.beta2, params.eps)
        best_val = math.inf
        best_epoch = 0

    report = TrainReport(seed=rng.seed,
                         config_hash=config_hash(model_cfg, params, rng.seed))
    for epoch in range(start_epoch, params.epochs + 1):
        batches = make_batches(feats_train, params.batch_size, rng.derive(epoch))
        train_loss = _epoch_pass(model, batches, opt, epoch)
        val_batches = [collate([u]) for u in feats_val]
        val_loss = _epoch_pass(model, val_batches, None, epoch)
        report.train_losses.append(train_loss)
        report.val_losses.append(val_loss)
        if log_every and epoch % log_every == 0:
            log.info("epoch %d: train %.6f  val %.6f", epoch, train_loss, val_loss)
        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            opt_state = {}
            for i, name in enumerate(model.params):
                opt_state[f"m.{name}"] = opt.m[i]
                opt_state[f"v.{name}"] = opt.v[i]
            ckpt = checkpoint_from_model(
                model, stats,
                metadata={"epoch": epoch, "val_loss": val_loss,
                          "seed": rng.seed, "adam_t": opt.t},
                opt_state=opt_state)
            save_checkpoint(checkpoint_path, ckpt)
    report.best_epoch = best_epoch
    report.best_val_loss = best_val
    report.wall_seconds = time.time() - t_start
    return load_checkpoint(checkpoint_path), report


# ---------------------------------------------------------------------------
# enhancement


def enhance(model: DereverbModel, stats: NormStats, audio: AudioBuffer,
            stft_cfg: StftConfig = StftConfig(),
            griffin_lim_iters: int = 0) -> AudioBuffer:
    """Dereverberate one utterance; output length equals input length.

    The reverberant phase is reused directly (griffin_lim_iters = 0) or
    refined iteratively under the predicted magnitude.
    """
    if audio.sample_rate != stft_cfg.sample_rate:
        audio = AudioBuffer(resample(audio.samples, audio.sample_rate,
                                     stft_cfg.sample_rate),
                            stft_cfg.sample_rate)
    spec = stft(audio, stft_cfg)
    feats = normalize(log_magnitude(spec), stats, "input")
    pred = model.forward_utterance(feats.astype(model.cfg.dtype))
    pred_logmag = normalize(np.asarray(pred, dtype=np.float64), stats,
                            "invert-target")
    if griffin_lim_iters > 0:
        return griffin_lim_refine(pred_logmag, phase(spec), griffin_lim_iters,
                                  stft_cfg, spec.n_samples)
    return reconstruct(pred_logmag, phase(spec), stft_cfg, spec.n_samples)
