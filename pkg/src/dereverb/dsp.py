"""STFT analysis/synthesis, magnitude-plus-phase reconstruction, WAV I/O.

Canonical processing format is mono float64 in memory, 16 kHz, with a
512-sample (32 ms) periodic Hann window, 256-sample (16 ms) hop, and a
one-sided 512-point FFT (257 bins). Analysis zero-pads half a window on
each side so every input sample lies in the fully-overlapped interior;
synthesis is weighted overlap-add with the analysis window reused and
an explicit division by the summed squared-window envelope, which makes
the round trip exact to rounding for all original samples.
"""

import struct
from dataclasses import dataclass, field

import numpy as np


class DspError(Exception):
    pass


class WavError(DspError):
    """Malformed or unsupported WAV content."""


LOG_FLOOR = 1e-8  # magnitude floor before taking logs


@dataclass
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise DspError(f"AudioBuffer expects mono 1-d samples, got {self.samples.shape}")
        if self.sample_rate <= 0:
            raise DspError(f"sample_rate must be positive, got {self.sample_rate}")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class StftConfig:
    window: int = 512
    hop: int = 256
    nfft: int = 512
    sample_rate: int = 16000

    def __post_init__(self):
        if self.nfft < self.window or self.hop < 1 or self.hop > self.window:
            raise DspError(f"invalid STFT config {self}")

    @property
    def bins(self) -> int:
        return self.nfft // 2 + 1


@dataclass
class Spectrogram:
    coeffs: np.ndarray          # complex (T, bins)
    config: StftConfig
    n_samples: int              # original length, for synthesis trimming

    def __post_init__(self):
        if self.coeffs.ndim != 2 or self.coeffs.shape[1] != self.config.bins:
            raise DspError(f"coefficient shape {self.coeffs.shape} does not match "
                           f"config bins {self.config.bins}")

    @property
    def frames(self) -> int:
        return self.coeffs.shape[0]


def hann_periodic(n: int) -> np.ndarray:
    """Periodic Hann window: 0.5 - 0.5·cos(2πk/n)."""
    k = np.arange(n)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * k / n)


def stft(audio: AudioBuffer, cfg: StftConfig = StftConfig()) -> Spectrogram:
    """Hann-windowed one-sided STFT with half-window centering pads.

    Raises if the buffer is not at the config sample rate (resample
    first). Frame count is 1 + ceil(len/hop); frame t is centered on
    sample t·hop of the original signal.
    """
    if audio.sample_rate != cfg.sample_rate:
        raise DspError(
            f"sample rate {audio.sample_rate} != config rate {cfg.sample_rate}; "
            f"resample the input first")
    x = audio.samples
    n = len(x)
    lead = cfg.window // 2
    body = max(n, 1)
    n_hops = -(-body // cfg.hop)  # ceil
    padded_len = cfg.window + n_hops * cfg.hop
    buf = np.zeros(padded_len)
    buf[lead:lead + n] = x
    frames = n_hops + 1
    idx = np.arange(cfg.window)[None, :] + cfg.hop * np.arange(frames)[:, None]
    windowed = buf[idx] * hann_periodic(cfg.window)[None, :]
    coeffs = np.fft.rfft(windowed, n=cfg.nfft, axis=1)
    return Spectrogram(coeffs, cfg, n)


def _ola_envelope(cfg: StftConfig, frames: int, total: int) -> np.ndarray:
    env = np.zeros(total)
    w2 = hann_periodic(cfg.window) ** 2
    for t in range(frames):
        env[t * cfg.hop:t * cfg.hop + cfg.window] += w2
    return env


def istft(spec: Spectrogram) -> AudioBuffer:
    """Weighted overlap-add synthesis, trimmed to the original length."""
    cfg = spec.config
    frames = spec.frames
    total = cfg.window + (frames - 1) * cfg.hop
    w = hann_periodic(cfg.window)
    segs = np.fft.irfft(spec.coeffs, n=cfg.nfft, axis=1)[:, :cfg.window]
    num = np.zeros(total)
    for t in range(frames):
        num[t * cfg.hop:t * cfg.hop + cfg.window] += segs[t] * w
    env = _ola_envelope(cfg, frames, total)
    out = np.where(env > 1e-12, num / np.maximum(env, 1e-12), 0.0)
    lead = cfg.window // 2
    return AudioBuffer(out[lead:lead + spec.n_samples], cfg.sample_rate)


def log_magnitude(spec: Spectrogram) -> np.ndarray:
    """Natural-log magnitudes, floored at 1e-8 so silence stays finite."""
    return np.log(np.maximum(np.abs(spec.coeffs), LOG_FLOOR))


def phase(spec: Spectrogram) -> np.ndarray:
    return np.angle(spec.coeffs)


def reconstruct(pred_logmag: np.ndarray, phase_frames: np.ndarray,
                cfg: StftConfig, n_samples: int) -> AudioBuffer:
    """Synthesize audio from predicted log-magnitudes and a phase matrix."""
    pred_logmag = np.asarray(pred_logmag, dtype=np.float64)
    phase_frames = np.asarray(phase_frames, dtype=np.float64)
    if pred_logmag.shape != phase_frames.shape:
        raise DspError(f"magnitude {pred_logmag.shape} and phase "
                       f"{phase_frames.shape} shapes differ")
    coeffs = np.exp(pred_logmag) * np.exp(1j * phase_frames)
    return istft(Spectrogram(coeffs, cfg, n_samples))


def spectral_consistency(magnitudes: np.ndarray, audio: AudioBuffer,
                         cfg: StftConfig) -> float:
    """‖ |STFT(x)| − M ‖ between a signal and a target magnitude matrix."""
    got = np.abs(stft(audio, cfg).coeffs)
    m = magnitudes[:got.shape[0]]
    return float(np.linalg.norm(got - m))


def griffin_lim_refine(pred_logmag: np.ndarray, init_phase: np.ndarray,
                       iterations: int, cfg: StftConfig,
                       n_samples: int) -> AudioBuffer:
    """Iterative phase refinement under a fixed target magnitude.

    Each round resynthesizes, re-analyzes, keeps the updated phase and
    restores the target magnitude. iterations = 0 reduces exactly to
    :func:`reconstruct`. The spectral consistency error is
    non-increasing in expectation per the alternating-projection
    argument of Griffin & Lim (1984).
    """
    if iterations < 0:
        raise DspError("iterations must be >= 0")
    mags = np.exp(np.asarray(pred_logmag, dtype=np.float64))
    ph = np.asarray(init_phase, dtype=np.float64).copy()
    audio = istft(Spectrogram(mags * np.exp(1j * ph), cfg, n_samples))
    for _ in range(iterations):
        ph = phase(stft(audio, cfg))[:mags.shape[0]]
        audio = istft(Spectrogram(mags * np.exp(1j * ph), cfg, n_samples))
    return audio


# ---------------------------------------------------------------------------
# WAV files (RIFF/WAVE, mono, PCM16 or IEEE float32)


def wav_write(path, audio: AudioBuffer, pcm16: bool = False) -> None:
    """Write mono WAV. float32 by default (lossless for float32 data);
    pcm16 scales by 32768 and clips to the int16 range."""
    x = audio.samples
    if pcm16:
        scaled = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")
        payload = scaled.tobytes()
        fmt_tag, bits = 1, 16
    else:
        payload = x.astype("<f4").tobytes()
        fmt_tag, bits = 3, 32
    sr = audio.sample_rate
    block = bits // 8
    header = b"RIFF" + struct.pack("<I", 36 + len(payload)) + b"WAVE"
    fmt = b"fmt " + struct.pack("<IHHIIHH", 16, fmt_tag, 1, sr,
                                sr * block, block, bits)
    data = b"data" + struct.pack("<I", len(payload))
    with open(path, "wb") as fh:
        fh.write(header + fmt + data + payload)


def wav_read(path) -> AudioBuffer:
    """Read mono PCM16 or float32 WAV; PCM16 samples are scaled by 1/32768."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != b"RIFF":
        raise WavError(f"{path}: missing RIFF chunk")
    if blob[8:12] != b"WAVE":
        raise WavError(f"{path}: RIFF form is not WAVE")
    off = 12
    fmt = None
    data = None
    while off + 8 <= len(blob):
        cid = blob[off:off + 4]
        (size,) = struct.unpack("<I", blob[off + 4:off + 8])
        body = blob[off + 8:off + 8 + size]
        if len(body) < size:
            raise WavError(f"{path}: chunk {cid!r} truncated "
                           f"({len(body)} of {size} bytes)")
        if cid == b"fmt ":
            if size < 16:
                raise WavError(f"{path}: fmt chunk too short ({size} bytes)")
            fmt = struct.unpack("<HHIIHH", body[:16])
        elif cid == b"data":
            data = body
        off += 8 + size + (size & 1)
    if fmt is None:
        raise WavError(f"{path}: no fmt chunk")
    if data is None:
        raise WavError(f"{path}: no data chunk")
    tag, channels, rate, _, _, bits = fmt
    if channels != 1:
        raise WavError(f"{path}: {channels} channels; only mono is supported")
    if tag == 1 and bits == 16:
        samples = np.frombuffer(data, dtype="<i2").astype(np.float64) / 32768.0
    elif tag == 3 and bits == 32:
        samples = np.frombuffer(data, dtype="<f4").astype(np.float64)
    else:
        raise WavError(f"{path}: unsupported codec (format tag {tag}, "
                       f"{bits}-bit); need PCM16 or IEEE float32")
    return AudioBuffer(samples, rate)


# ---------------------------------------------------------------------------
# sample-rate conversion


def resample(samples: np.ndarray, sr_in: int, sr_out: int,
             half_taps: int = 32) -> np.ndarray:
    """Windowed-sinc resampler (Hann window, 2·half_taps+1 taps).

    The anti-alias cutoff is 90 % of the smaller Nyquist. Adequate for
    metric front-ends and ingest; not a mastering-grade filter.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if sr_in == sr_out:
        return samples.copy()
    if sr_in <= 0 or sr_out <= 0:
        raise DspError("sample rates must be positive")
    n_in = len(samples)
    n_out = int(round(n_in * sr_out / sr_in))
    if n_out == 0:
        return np.zeros(0)
    # output sample j sits at input position j·sr_in/sr_out
    pos = np.arange(n_out) * (sr_in / sr_out)
    base = np.floor(pos).astype(np.intp)
    frac = pos - base
    offs = np.arange(-half_taps, half_taps + 1)
    fc = 0.45 * min(sr_in, sr_out) / sr_in  # cycles per input sample
    delta = offs[None, :] - frac[:, None]
    kern = 2.0 * fc * np.sinc(2.0 * fc * delta)
    kern *= 0.5 + 0.5 * np.cos(np.pi * delta / (half_taps + 1))
    padded = np.concatenate([np.zeros(half_taps), samples, np.zeros(half_taps + 1)])
    rows = padded[(base[:, None] + half_taps) + offs[None, :]]
    return np.sum(rows * kern, axis=1)


def resample_buffer(audio: AudioBuffer, sr_out: int) -> AudioBuffer:
    return AudioBuffer(resample(audio.samples, audio.sample_rate, sr_out), sr_out)
