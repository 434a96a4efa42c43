import time

import numpy as np
import pytest

from dereverb.autodiff import Rng
from dereverb.cli import load_config, main, UsageError
from dereverb.dsp import wav_read, wav_write
from dereverb.signals import synthetic_speech


@pytest.fixture(scope="module")
def cli_root(tmp_path_factory):
    """Desk-scale dataset rendered through the CLI itself."""
    root = tmp_path_factory.mktemp("cliroot")
    clean = root / "clean"
    clean.mkdir()
    for i in range(4):
        wav_write(clean / f"utt{i}.wav", synthetic_speech(Rng(2000 + i), 1.0))
    base = ["--set", "bank.t60_start=0.3", "--set", "bank.t60_stop=0.6",
            "--set", "bank.t60_step=0.3", "--set", "bank.per_t60=2",
            "--set", "run.workers=1"]
    assert main(base + ["rir-gen", "--root", str(root)]) == 0
    assert main(base + ["--set", "synth.per_rir=3",
                        "synth", "--root", str(root),
                        "--clean", str(clean)]) == 0
    assert main(["stats", "--root", str(root)]) == 0
    model_flags = ["--set", "model.conv_filters=4", "--set", "model.context_frames=3",
                   "--set", "model.hidden=16", "--set", "model.precision=single",
                   "--set", "train.epochs=2", "--set", "train.batch_size=4"]
    assert main(model_flags + ["train", "--root", str(root)]) == 0
    return root, clean


class TestParams:
    def test_contains_all_table_values(self, capsys):
        t0 = time.time()
        assert main(["params"]) == 0
        assert time.time() - t0 < 1.0
        out = capsys.readouterr().out
        for value in (7439873, 7434497, 7429121, 1838593, 4458753, 14711041):
            assert str(value) in out


class TestConfig:
    def test_defaults_load(self):
        cfg = load_config(None, [])
        assert cfg["train"]["epochs"] == 100
        assert cfg["bank"]["per_t60"] == 20

    def test_file_and_override(self, tmp_path):
        p = tmp_path / "run.ini"
        p.write_text("[train]\nepochs = 7\n")
        cfg = load_config(str(p), ["train.lr=0.01"])
        assert cfg["train"]["epochs"] == 7
        assert cfg["train"]["lr"] == 0.01

    def test_unknown_key_rejected(self, tmp_path):
        p = tmp_path / "run.ini"
        p.write_text("[train]\nbogus = 1\n")
        with pytest.raises(UsageError):
            load_config(str(p), [])
        with pytest.raises(UsageError):
            load_config(None, ["nope.key=1"])

    def test_unknown_key_exit_code(self):
        assert main(["--set", "bogus.key=1", "params"]) == 1

    def test_config_echoed(self, cli_root):
        root, _ = cli_root
        echoed = (root / "config.echo.ini").read_text()
        assert "[bank]" in echoed and "per_t60 = 2" in echoed


class TestDataCommands:
    def test_outputs_exist(self, cli_root):
        root, _ = cli_root
        assert (root / "bank" / "manifest.csv").exists()
        assert (root / "pairs.csv").exists()
        assert (root / "stats.json").exists()
        assert (root / "model.ckpt").exists()
        assert (root / "train_report.json").exists()

    def test_t60_command(self, cli_root, capsys):
        root, _ = cli_root
        assert main(["t60", str(root / "bank" / "rir_0000.wav")]) == 0
        out = capsys.readouterr().out
        assert "fullband" in out and "400 Hz" in out

    def test_missing_file_is_data_error(self, tmp_path):
        assert main(["t60", str(tmp_path / "nope.wav")]) == 2

    def test_enhance_preserves_duration(self, cli_root, tmp_path):
        root, _ = cli_root
        src = root / "pairs" / "p000000.wav"
        out = tmp_path / "enh.wav"
        assert main(["enhance", "--checkpoint", str(root / "model.ckpt"),
                     "--in", str(src), "--out", str(out)]) == 0
        assert len(wav_read(out).samples) == len(wav_read(src).samples)

    def test_enhance_directory_and_eval(self, cli_root, tmp_path):
        root, _ = cli_root
        enhanced = tmp_path / "enhanced"
        assert main(["enhance", "--checkpoint", str(root / "model.ckpt"),
                     "--in", str(root / "pairs"), "--out", str(enhanced)]) == 0
        report = tmp_path / "report.csv"
        assert main(["eval", "--root", str(root), "--enhanced", str(enhanced),
                     "--out", str(report), "--subset", "train"]) == 0
        lines = [l for l in report.read_text().splitlines()
                 if l and not l.startswith("#")]
        n_train = sum(1 for l in (root / "pairs.csv").read_text().splitlines()
                      if l.endswith(",train,") or ",train," in l)
        assert len(lines) - 1 == n_train  # header plus one row per pair

    def test_usage_error_on_bad_subcommand(self):
        assert main(["frobnicate"]) == 1
