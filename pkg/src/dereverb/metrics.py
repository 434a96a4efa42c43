"""Objective speech metrics: STOI, SRMR, and corpus-level reporting.

STOI follows Taal et al. (2011): 10 kHz internal rate, silent-frame
removal keyed on the clean reference, 15 one-third-octave band
envelopes from 256-sample frames, and mean correlation of normalized,
clipped 30-frame segments.

SRMR is the speech-to-reverberation modulation energy ratio: a
23-channel gammatone front-end (125 Hz up to near Nyquist), Hilbert
temporal envelopes, an 8-band modulation filterbank with centers
geometrically spaced over ~4-128 Hz, and the global energy ratio of
modulation bands 1-4 over bands 5-8 (the non-windowed form). PESQ and
POLQA are proprietary ITU-T algorithms and are deliberately absent;
reported numbers are not comparable to studies quoting them.
"""

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import fftconvolve, hilbert

from .dsp import AudioBuffer, DspError, hann_periodic, resample

EPS = np.finfo(np.float64).eps


class MetricError(Exception):
    pass


@dataclass(frozen=True)
class StoiConfig:
    sample_rate: int = 10000
    frame: int = 256
    hop: int = 128
    nfft: int = 512
    n_bands: int = 15
    min_freq: float = 150.0
    seg_frames: int = 30          # ~384 ms analysis window
    dyn_range: float = 40.0       # silence removal threshold below peak
    clip_db: float = -15.0        # SDR lower bound before correlation


@dataclass(frozen=True)
class SrmrConfig:
    n_channels: int = 23
    low_freq: float = 125.0
    n_mod_bands: int = 8
    mod_low: float = 4.0
    mod_high: float = 128.0
    min_seconds: float = 0.5


def _frames(x: np.ndarray, frame: int, hop: int) -> np.ndarray:
    n = 1 + max(0, (len(x) - frame)) // hop
    idx = np.arange(frame)[None, :] + hop * np.arange(n)[:, None]
    return x[idx]


def _remove_silent_frames(x: np.ndarray, y: np.ndarray,
                          cfg: StoiConfig) -> tuple[np.ndarray, np.ndarray]:
    w = hann_periodic(cfg.frame)
    xf = _frames(x, cfg.frame, cfg.hop) * w
    yf = _frames(y, cfg.frame, cfg.hop) * w
    energy = 20.0 * np.log10(np.linalg.norm(xf, axis=1) + EPS)
    keep = energy > energy.max() - cfg.dyn_range
    xf, yf = xf[keep], yf[keep]
    n_out = cfg.frame + cfg.hop * (len(xf) - 1)
    xs = np.zeros(n_out)
    ys = np.zeros(n_out)
    for i in range(len(xf)):
        xs[i * cfg.hop:i * cfg.hop + cfg.frame] += xf[i]
        ys[i * cfg.hop:i * cfg.hop + cfg.frame] += yf[i]
    return xs, ys


def _third_octave_matrix(cfg: StoiConfig) -> np.ndarray:
    f = np.arange(cfg.nfft // 2 + 1) * cfg.sample_rate / cfg.nfft
    k = np.arange(cfg.n_bands)
    lo = cfg.min_freq * 2.0 ** ((2 * k - 1) / 6.0)
    hi = cfg.min_freq * 2.0 ** ((2 * k + 1) / 6.0)
    obm = np.zeros((cfg.n_bands, len(f)))
    for j in range(cfg.n_bands):
        lo_bin = int(np.argmin(np.square(f - lo[j])))
        hi_bin = int(np.argmin(np.square(f - hi[j])))
        obm[j, lo_bin:hi_bin] = 1.0
    return obm


def _band_envelopes(x: np.ndarray, cfg: StoiConfig) -> np.ndarray:
    w = hann_periodic(cfg.frame)
    frames = _frames(x, cfg.frame, cfg.hop) * w
    spec = np.fft.rfft(frames, n=cfg.nfft, axis=1)
    power = np.abs(spec) ** 2
    return np.sqrt(power @ _third_octave_matrix(cfg).T)  # (frames, bands)


def stoi(clean: AudioBuffer, processed: AudioBuffer,
         cfg: StoiConfig = StoiConfig()) -> float:
    """Short-time objective intelligibility of ``processed`` against ``clean``.

    Returns the mean band/segment correlation, practically in [0, 1].
    Signals are aligned by trimming to the shorter length and resampled
    to 10 kHz internally. A fully silent reference is undefined.
    """
    if clean.sample_rate != processed.sample_rate:
        raise MetricError("stoi: sample rates differ; resample first")
    n = min(len(clean.samples), len(processed.samples))
    if n == 0:
        raise MetricError("stoi: empty input")
    x = resample(clean.samples[:n], clean.sample_rate, cfg.sample_rate)
    y = resample(processed.samples[:n], processed.sample_rate, cfg.sample_rate)
    if not np.any(x):
        raise MetricError("stoi: reference signal is silent; metric undefined")
    x, y = _remove_silent_frames(x, y, cfg)
    xe = _band_envelopes(x, cfg)
    ye = _band_envelopes(y, cfg)
    m = xe.shape[0]
    if m < cfg.seg_frames:
        raise MetricError(
            f"stoi: only {m} frames after silence removal; need {cfg.seg_frames}")
    clip = 10.0 ** (-cfg.clip_db / 20.0)
    scores = []
    for end in range(cfg.seg_frames, m + 1):
        xs = xe[end - cfg.seg_frames:end]            # (N, bands)
        ys = ye[end - cfg.seg_frames:end]
        alpha = np.sqrt(np.sum(xs ** 2, axis=0) / (np.sum(ys ** 2, axis=0) + EPS))
        yn = np.minimum(ys * alpha, xs * (1.0 + clip))
        xs = xs - xs.mean(axis=0)
        yn = yn - yn.mean(axis=0)
        denom = (np.linalg.norm(xs, axis=0) * np.linalg.norm(yn, axis=0)) + EPS
        scores.append(np.sum(xs * yn, axis=0) / denom)
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# SRMR


def _erb_rate(f):
    return 21.4 * np.log10(1.0 + 4.37 * f / 1000.0)


def _erb_rate_inv(r):
    return (10.0 ** (r / 21.4) - 1.0) * 1000.0 / 4.37


def _gammatone_bank(fs: int, cfg: SrmrConfig) -> np.ndarray:
    """4th-order gammatone FIR kernels, peak magnitude response 1."""
    top = 0.95 * fs / 2.0
    rates = np.linspace(_erb_rate(cfg.low_freq), _erb_rate(top), cfg.n_channels)
    centers = _erb_rate_inv(rates)
    length = int(0.128 * fs)
    t = np.arange(length) / fs
    bank = np.zeros((cfg.n_channels, length))
    for i, fc in enumerate(centers):
        bw = 1.019 * 24.7 * (4.37 * fc / 1000.0 + 1.0)
        g = t ** 3 * np.exp(-2.0 * np.pi * bw * t) * np.cos(2.0 * np.pi * fc * t)
        gain = np.max(np.abs(np.fft.rfft(g, n=4 * length)))
        bank[i] = g / gain
    return bank


def _mod_band_edges(cfg: SrmrConfig) -> list[tuple[float, float]]:
    step = (cfg.mod_high / cfg.mod_low) ** (1.0 / (cfg.n_mod_bands - 1))
    centers = cfg.mod_low * step ** np.arange(cfg.n_mod_bands)
    half = np.sqrt(step)
    return [(c / half, c * half) for c in centers]


def _mod_band_energy(env: np.ndarray, fs: int, lo: float, hi: float) -> float:
    # zero-phase frequency mask with raised-cosine edges (20 % of width)
    n = len(env)
    spec = np.fft.rfft(env)
    f = np.fft.rfftfreq(n, 1.0 / fs)
    w = 0.2 * (hi - lo)
    mask = np.zeros_like(f)
    mask[(f >= lo + w / 2) & (f < hi - w / 2)] = 1.0
    up = (f >= lo - w / 2) & (f < lo + w / 2)
    mask[up] = 0.5 * (1.0 + np.cos(np.pi * (f[up] - (lo + w / 2)) / w))
    down = (f >= hi - w / 2) & (f < hi + w / 2)
    mask[down] = 0.5 * (1.0 + np.cos(np.pi * (f[down] - (hi - w / 2)) / w))
    band = np.fft.irfft(spec * mask, n=n)
    return float(np.sum(band ** 2))


def srmr(signal: AudioBuffer, cfg: SrmrConfig = SrmrConfig()) -> float:
    """Speech-to-reverberation modulation energy ratio (non-intrusive).

    Ratio of summed modulation energy in the four low modulation bands
    to the four high ones, accumulated over all gammatone channels.
    Scale-invariant; larger is cleaner. Needs at least 0.5 s of
    non-silent audio.
    """
    x = signal.samples
    fs = signal.sample_rate
    if len(x) < cfg.min_seconds * fs:
        raise MetricError(f"srmr: need at least {cfg.min_seconds} s of audio")
    if not np.any(x):
        raise MetricError("srmr: silent input")
    bank = _gammatone_bank(fs, cfg)
    edges = _mod_band_edges(cfg)
    energies = np.zeros(cfg.n_mod_bands)
    for kernel in bank:
        stream = fftconvolve(x, kernel)[:len(x)]
        env = np.abs(hilbert(stream))
        for b, (lo, hi) in enumerate(edges):
            energies[b] += _mod_band_energy(env, fs, lo, hi)
    low = energies[:4].sum()
    high = energies[4:].sum()
    return float(low / max(high, EPS))


# ---------------------------------------------------------------------------
# corpus evaluation


@dataclass
class EvalRow:
    pair_id: str
    t60: float
    stoi_enhanced: float | None = None
    srmr_enhanced: float | None = None
    stoi_reverb: float | None = None
    srmr_reverb: float | None = None
    error: str = ""

    @property
    def delta_stoi(self) -> float | None:
        if self.stoi_enhanced is None or self.stoi_reverb is None:
            return None
        return self.stoi_enhanced - self.stoi_reverb

    @property
    def delta_srmr(self) -> float | None:
        if self.srmr_enhanced is None or self.srmr_reverb is None:
            return None
        return self.srmr_enhanced - self.srmr_reverb


@dataclass
class MetricReport:
    rows: list[EvalRow] = field(default_factory=list)

    def bucket_means(self) -> dict[float, dict[str, float]]:
        buckets: dict[float, list[EvalRow]] = {}
        for r in self.rows:
            if r.error:
                continue
            buckets.setdefault(r.t60, []).append(r)
        out = {}
        for t60 in sorted(buckets):
            rows = buckets[t60]
            out[t60] = {
                "stoi": float(np.mean([r.stoi_enhanced for r in rows])),
                "srmr": float(np.mean([r.srmr_enhanced for r in rows])),
                "delta_stoi": float(np.mean([r.delta_stoi for r in rows])),
                "delta_srmr": float(np.mean([r.delta_srmr for r in rows])),
                "count": len(rows),
            }
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write("# SRMR variant: global low/high modulation energy ratio "
                     "(bands 1-4 over 5-8), non-windowed\n")
            fh.write("# PESQ/POLQA not included (proprietary ITU-T standards)\n")
            writer = csv.writer(fh)
            writer.writerow(["pair_id", "t60", "stoi", "srmr",
                             "stoi_reverb", "srmr_reverb",
                             "delta_stoi", "delta_srmr", "error"])
            fmt = lambda v: "" if v is None else f"{v:.6f}"
            for r in self.rows:
                writer.writerow([r.pair_id, f"{r.t60:g}", fmt(r.stoi_enhanced),
                                 fmt(r.srmr_enhanced), fmt(r.stoi_reverb),
                                 fmt(r.srmr_reverb), fmt(r.delta_stoi),
                                 fmt(r.delta_srmr), r.error])
            for t60, means in self.bucket_means().items():
                fh.write(f"# bucket t60={t60:g}: n={means['count']} "
                         f"stoi={means['stoi']:.4f} srmr={means['srmr']:.4f} "
                         f"delta_stoi={means['delta_stoi']:+.4f} "
                         f"delta_srmr={means['delta_srmr']:+.4f}\n")


def evaluate_corpus(items) -> MetricReport:
    """Score (clean, reverberant, enhanced) triples.

    ``items`` is an iterable of dicts with keys pair_id, t60, clean,
    reverb, enhanced (AudioBuffers or paths). Rows are ordered by
    pair_id; a failing pair is flagged in its row and scoring continues.
    """
    from .dsp import wav_read

    def as_buffer(v):
        return v if isinstance(v, AudioBuffer) else wav_read(v)

    report = MetricReport()
    for item in sorted(items, key=lambda d: str(d["pair_id"])):
        row = EvalRow(pair_id=str(item["pair_id"]), t60=float(item["t60"]))
        try:
            clean = as_buffer(item["clean"])
            reverb = as_buffer(item["reverb"])
            enhanced = as_buffer(item["enhanced"])
            row.stoi_enhanced = stoi(clean, enhanced)
            row.srmr_enhanced = srmr(enhanced)
            row.stoi_reverb = stoi(clean, reverb)
            row.srmr_reverb = srmr(reverb)
        except (OSError, DspError, MetricError) as exc:
            row.error = str(exc)
        report.rows.append(row)
    return report
