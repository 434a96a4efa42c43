"""Synthetic test signals: tones, modulated noise, and pseudo-speech.

The pseudo-speech generator alternates voiced stretches (impulse-train
excitation through a couple of moving resonances) and unvoiced bursts
(band-passed noise) at a syllabic rate of a few Hz, with short pauses.
It is nowhere near a speech corpus, but it has the right envelope
modulation statistics for exercising the training pipeline and the
objective metrics at desk scale.
"""

import numpy as np
from scipy.signal import lfilter

from .autodiff import Rng
from .dsp import AudioBuffer


def tone(freq: float, seconds: float, fs: int = 16000,
         amplitude: float = 0.5) -> AudioBuffer:
    t = np.arange(int(seconds * fs)) / fs
    return AudioBuffer(amplitude * np.sin(2 * np.pi * freq * t), fs)


def am_tone(carrier: float, mod_rate: float, seconds: float, fs: int = 16000,
            depth: float = 0.9, amplitude: float = 0.5) -> AudioBuffer:
    """Amplitude-modulated tone; modulation energy sits at mod_rate."""
    t = np.arange(int(seconds * fs)) / fs
    env = 1.0 + depth * np.sin(2 * np.pi * mod_rate * t)
    return AudioBuffer(amplitude * env * np.sin(2 * np.pi * carrier * t), fs)


def _resonator(x: np.ndarray, freq: float, bw: float, fs: int) -> np.ndarray:
    r = np.exp(-np.pi * bw / fs)
    theta = 2 * np.pi * freq / fs
    a = [1.0, -2.0 * r * np.cos(theta), r * r]
    return lfilter([1.0 - r], a, x)


def synthetic_speech(rng: Rng, seconds: float = 2.0, fs: int = 16000) -> AudioBuffer:
    """Speech-shaped babble: alternating voiced/unvoiced syllables."""
    n = int(seconds * fs)
    out = np.zeros(n)
    pos = 0
    f0 = rng.uniform(100.0, 180.0)
    while pos < n:
        syllable = int(rng.uniform(0.12, 0.25) * fs)
        syllable = min(syllable, n - pos)
        if syllable < fs // 50:
            break
        kind = rng.uniform(0.0, 1.0)
        seg = np.zeros(syllable)
        if kind < 0.7:  # voiced: pulse train through two formants
            period = max(int(fs / (f0 * rng.uniform(0.9, 1.1))), 8)
            exc = np.zeros(syllable)
            exc[::period] = 1.0
            seg = _resonator(exc, rng.uniform(350, 800), 90.0, fs)
            seg += 0.6 * _resonator(exc, rng.uniform(900, 2400), 140.0, fs)
            seg += 0.15 * _resonator(exc, rng.uniform(2500, 3400), 220.0, fs)
        else:  # unvoiced: shaped noise burst
            noise = rng.normal(size=syllable)
            seg = _resonator(noise, rng.uniform(2000, 5000), 1400.0, fs) * 0.25
        ramp = np.minimum(1.0, np.minimum(np.arange(syllable),
                                          syllable - 1 - np.arange(syllable))
                          / max(0.02 * fs, 1.0))
        out[pos:pos + syllable] = seg * ramp * rng.uniform(0.5, 1.0)
        pos += syllable
        pause = int(rng.uniform(0.0, 0.08) * fs)
        pos += pause
    peak = np.max(np.abs(out))
    if peak > 0:
        out *= 0.7 / peak
    return AudioBuffer(out, fs)


def exponential_decay_rir(rng: Rng, t60: float, seconds: float | None = None,
                          fs: int = 16000) -> np.ndarray:
    """Stochastic reverb surrogate: white noise under an exponential decay.

    Cheap stand-in for a simulated room when only the decay statistics
    matter (metric property tests).
    """
    if seconds is None:
        seconds = max(1.3 * t60, 0.1)
    t = np.arange(int(seconds * fs)) / fs
    h = rng.normal(size=len(t)) * np.exp(-3.0 * np.log(10.0) * t / t60)
    h[0] = 1.0  # direct path
    return h
