import numpy as np
import pytest

from dereverb.dsp import (AudioBuffer, DspError, Spectrogram, StftConfig,
                          WavError, griffin_lim_refine, hann_periodic, istft,
                          log_magnitude, phase, reconstruct, resample,
                          spectral_consistency, stft, wav_read, wav_write)


def snr_db(ref, got):
    err = ref - got
    return 10.0 * np.log10(np.sum(ref ** 2) / max(np.sum(err ** 2), 1e-300))


def dft_oracle(frame, nfft):
    """Direct O(n^2) DFT of one windowed frame (one-sided)."""
    n = len(frame)
    bins = nfft // 2 + 1
    out = np.zeros(bins, dtype=complex)
    for k in range(bins):
        for t in range(n):
            out[k] += frame[t] * np.exp(-2j * np.pi * k * t / nfft)
    return out


class TestStft:
    def test_zero_input(self):
        spec = stft(AudioBuffer(np.zeros(5000)))
        assert np.all(spec.coeffs == 0)

    def test_impulse_matches_direct_dft(self):
        # impulse at the center of frame 2 (sample 2*hop after centering pads)
        cfg = StftConfig()
        x = np.zeros(4 * cfg.hop)
        x[2 * cfg.hop] = 1.0
        spec = stft(AudioBuffer(x), cfg)
        # reconstruct the windowed frame the transform should have seen
        lead = cfg.window // 2
        buf = np.zeros(lead * 2 + len(x) + cfg.hop)
        buf[lead:lead + len(x)] = x
        frame = buf[2 * cfg.hop:2 * cfg.hop + cfg.window] * hann_periodic(cfg.window)
        want = dft_oracle(frame, cfg.nfft)
        assert np.max(np.abs(spec.coeffs[2] - want)) < 1e-10

    def test_sinusoid_peak_bin(self):
        t = np.arange(32000) / 16000.0
        spec = stft(AudioBuffer(np.sin(2 * np.pi * 1000.0 * t)))
        mags = np.abs(spec.coeffs[spec.frames // 2])
        assert int(np.argmax(mags)) == 32  # 1000 / (16000/512)

    def test_rate_mismatch_instructs_resample(self):
        with pytest.raises(DspError, match="resample"):
            stft(AudioBuffer(np.zeros(100), 8000))

    def test_frame_count_invariant(self):
        cfg = StftConfig()
        for n in (1, 255, 256, 257, 5000):
            spec = stft(AudioBuffer(np.zeros(n)), cfg)
            hops = -(-max(n, 1) // cfg.hop)
            assert spec.frames == hops + 1


class TestIstft:
    @pytest.mark.parametrize("n", [12345, 32000])
    def test_roundtrip_double(self, n, np_rng):
        x = np_rng.normal(size=n)
        y = istft(stft(AudioBuffer(x))).samples
        assert len(y) == n
        assert snr_db(x, y) >= 100.0

    def test_roundtrip_single_precision(self, np_rng):
        x = np_rng.normal(size=16000).astype(np.float32).astype(np.float64)
        spec = stft(AudioBuffer(x))
        spec.coeffs = spec.coeffs.astype(np.complex64).astype(np.complex128)
        y = istft(spec).samples
        assert snr_db(x, y) >= 60.0

    def test_zero_spectrogram(self):
        spec = Spectrogram(np.zeros((5, 257), dtype=complex), StftConfig(), 700)
        assert np.all(istft(spec).samples == 0)

    def test_linearity(self, np_rng):
        x = np_rng.normal(size=5000)
        spec = stft(AudioBuffer(x))
        doubled = Spectrogram(spec.coeffs * 2.0, spec.config, spec.n_samples)
        assert np.allclose(istft(doubled).samples, 2.0 * istft(spec).samples,
                           atol=1e-12)

    def test_cola_unit_window_sum(self):
        # periodic Hann at 50% overlap sums to exactly 1 on the interior
        cfg = StftConfig()
        w = hann_periodic(cfg.window)
        total = np.zeros(cfg.window * 6)
        for t in range(11):
            total[t * cfg.hop:t * cfg.hop + cfg.window] += w
        interior = total[cfg.window:-cfg.window]
        assert np.max(np.abs(interior - 1.0)) < 1e-12

    def test_parseval_per_frame(self, np_rng):
        cfg = StftConfig()
        x = np_rng.normal(size=8000)
        spec = stft(AudioBuffer(x), cfg)
        lead = cfg.window // 2
        hops = -(-8000 // cfg.hop)
        buf = np.zeros(cfg.window + hops * cfg.hop)
        buf[lead:lead + 8000] = x
        for t in (2, 5):
            frame = buf[t * cfg.hop:t * cfg.hop + cfg.window] * hann_periodic(cfg.window)
            time_energy = np.sum(frame ** 2)
            c = spec.coeffs[t]
            freq_energy = (np.abs(c[0]) ** 2 + np.abs(c[-1]) ** 2
                           + 2 * np.sum(np.abs(c[1:-1]) ** 2)) / cfg.nfft
            assert abs(time_energy - freq_energy) / time_energy < 1e-9


class TestReconstruct:
    def test_clean_magnitude_and_phase_recovers_clean(self, np_rng):
        x = np_rng.normal(size=9000)
        spec = stft(AudioBuffer(x))
        y = reconstruct(log_magnitude(spec), phase(spec), spec.config,
                        spec.n_samples)
        # log floor clips near-zero magnitudes; SNR still far above 60 dB
        assert snr_db(x, y.samples) >= 60.0
        assert len(y.samples) == 9000

    def test_shape_mismatch(self):
        with pytest.raises(DspError):
            reconstruct(np.zeros((4, 257)), np.zeros((5, 257)), StftConfig(), 100)


class TestGriffinLim:
    def setup_case(self):
        t = np.arange(16000) / 16000.0
        x = np.sin(2 * np.pi * 440 * t) * np.hanning(16000)
        spec = stft(AudioBuffer(x))
        rng = np.random.default_rng(5)
        ph0 = rng.uniform(-np.pi, np.pi, spec.coeffs.shape)
        return spec, log_magnitude(spec), ph0

    def test_zero_iterations_equals_reconstruct(self):
        spec, logmag, ph0 = self.setup_case()
        a = griffin_lim_refine(logmag, ph0, 0, spec.config, spec.n_samples)
        b = reconstruct(logmag, ph0, spec.config, spec.n_samples)
        assert np.array_equal(a.samples, b.samples)

    def test_consistency_error_non_increasing(self):
        spec, logmag, ph0 = self.setup_case()
        mags = np.exp(logmag)
        errors = []
        for n in (0, 2, 5, 10, 25):
            audio = griffin_lim_refine(logmag, ph0, n, spec.config,
                                       spec.n_samples)
            errors.append(spectral_consistency(mags, audio, spec.config))
        assert all(b <= a * (1 + 1e-9) for a, b in zip(errors, errors[1:]))

    def test_fifty_iterations_drop_10db(self):
        spec, logmag, ph0 = self.setup_case()
        mags = np.exp(logmag)
        e0 = spectral_consistency(
            mags, griffin_lim_refine(logmag, ph0, 0, spec.config, spec.n_samples),
            spec.config)
        e50 = spectral_consistency(
            mags, griffin_lim_refine(logmag, ph0, 50, spec.config, spec.n_samples),
            spec.config)
        assert 20.0 * np.log10(e0 / e50) >= 10.0

    def test_negative_iterations_rejected(self):
        spec, logmag, ph0 = self.setup_case()
        with pytest.raises(DspError):
            griffin_lim_refine(logmag, ph0, -1, spec.config, spec.n_samples)


class TestWav:
    def test_float32_roundtrip_bit_exact(self, tmp_path, np_rng):
        x = (np_rng.normal(size=777) * 0.2).astype(np.float32).astype(np.float64)
        p = tmp_path / "f32.wav"
        wav_write(p, AudioBuffer(x))
        back = wav_read(p)
        assert back.sample_rate == 16000
        assert np.array_equal(back.samples, x)

    def test_pcm16_quantization_bound(self, tmp_path, np_rng):
        x = np.clip(np_rng.normal(size=500) * 0.3, -1.0, 1.0)
        p = tmp_path / "pcm.wav"
        wav_write(p, AudioBuffer(x), pcm16=True)
        back = wav_read(p)
        assert np.max(np.abs(back.samples - x)) <= 1.0 / 32768.0

    def test_malformed_headers(self, tmp_path):
        cases = {
            b"JUNK": "RIFF",
            b"RIFF\x10\x00\x00\x00DATA": "WAVE",
            b"RIFF\x10\x00\x00\x00WAVEdata\x02\x00\x00\x00ab": "fmt",
        }
        for blob, needle in cases.items():
            p = tmp_path / "bad.wav"
            p.write_bytes(blob)
            with pytest.raises(WavError, match=needle):
                wav_read(p)

    def test_truncated_data_chunk(self, tmp_path):
        p = tmp_path / "trunc.wav"
        wav_write(p, AudioBuffer(np.zeros(100)))
        blob = p.read_bytes()
        p.write_bytes(blob[:-50])
        with pytest.raises(WavError, match="truncated"):
            wav_read(p)

    def test_stereo_rejected(self, tmp_path):
        import struct
        payload = np.zeros(4, dtype="<i2").tobytes()
        fmt = b"fmt " + struct.pack("<IHHIIHH", 16, 1, 2, 16000, 64000, 4, 16)
        data = b"data" + struct.pack("<I", len(payload)) + payload
        blob = b"RIFF" + struct.pack("<I", 36 + len(payload)) + b"WAVE" + fmt + data
        p = tmp_path / "st.wav"
        p.write_bytes(blob)
        with pytest.raises(WavError, match="mono"):
            wav_read(p)


class TestResample:
    def test_length(self):
        assert len(resample(np.zeros(16000), 16000, 10000)) == 10000

    def test_tone_preserved(self):
        t = np.arange(32000) / 16000.0
        x = np.sin(2 * np.pi * 440.0 * t)
        y = resample(x, 16000, 10000)
        tt = np.arange(len(y)) / 10000.0
        want = np.sin(2 * np.pi * 440.0 * tt)
        err = np.sqrt(np.mean((y[300:-300] - want[300:-300]) ** 2))
        assert err < 1e-3

    def test_identity_rate(self, np_rng):
        x = np_rng.normal(size=100)
        assert np.array_equal(resample(x, 16000, 16000), x)
