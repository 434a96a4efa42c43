"""Command-line front end.

One tool, subcommand style:

    dereverb rir-gen   --root DIR                render the RIR bank
    dereverb synth     --root DIR --clean DIR    render reverberant pairs
    dereverb stats     --root DIR                feature statistics
    dereverb train     --root DIR                train, keep best-val model
    dereverb enhance   --checkpoint F --in X --out Y [--griffin-lim N]
    dereverb eval      --root DIR --enhanced DIR --out CSV
    dereverb t60       RIR.wav                   estimate reverberation time
    dereverb gradcheck                           finite-difference audit
    dereverb params                              parameter-count table

Configuration is an INI file (``--config``) whose keys mirror the
defaults below; any value can also be overridden on the command line
with ``--set section.key=value`` (repeatable). Unknown sections or keys
are rejected. Commands that write into a dataset root echo the resolved
configuration there for provenance.

Exit codes: 0 success, 1 usage error, 2 data error, 3 verification
failure. Logs go to stderr; machine-readable output goes to files.
"""

import argparse
import configparser
import logging
import os
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("dereverb")

DEFAULTS: dict[str, dict] = {
    "run": {"seed": 0, "workers": 0},          # workers 0 = use all cores
    "stft": {"window": 512, "hop": 256, "nfft": 512, "sample_rate": 16000},
    "model": {"variant": "context", "context_frames": 11, "bins": 257,
              "conv_filters": 64, "conv_freq_kernel": 21, "freq_stride": 2,
              "hidden": "", "ff_hidden": 2048, "ff_context": 11,
              "precision": "double"},
    "bank": {"t60_start": 0.2, "t60_stop": 2.0, "t60_step": 0.05,
             "per_t60": 20},
    "synth": {"per_rir": 50, "val_fraction": 0.05},
    "train": {"epochs": 100, "batch_size": 16, "lr": 1e-3, "beta1": 0.9,
              "beta2": 0.999, "eps": 1e-8},
    "enhance": {"griffin_lim_iters": 0},
}


class UsageError(Exception):
    pass


class VerificationFailure(Exception):
    pass


def _coerce(section: str, key: str, raw: str):
    ref = DEFAULTS[section][key]
    if isinstance(ref, bool):
        return raw.lower() in ("1", "true", "yes")
    if isinstance(ref, int) and not isinstance(ref, bool):
        return int(raw)
    if isinstance(ref, float):
        return float(raw)
    return raw


def load_config(path: str | None, overrides: list[str]) -> dict[str, dict]:
    cfg = {s: dict(kv) for s, kv in DEFAULTS.items()}
    if path:
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise UsageError(f"config file not found: {path}")
        for section in parser.sections():
            if section not in cfg:
                raise UsageError(f"unknown config section [{section}]")
            for key, raw in parser.items(section):
                if key not in cfg[section]:
                    raise UsageError(f"unknown config key {section}.{key}")
                cfg[section][key] = _coerce(section, key, raw)
    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        target, raw = item.split("=", 1)
        section, key = target.split(".", 1)
        if section not in cfg or key not in cfg[section]:
            raise UsageError(f"unknown config key {section}.{key}")
        cfg[section][key] = _coerce(section, key, raw)
    return cfg


def echo_config(cfg: dict, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for section, kv in cfg.items():
        lines.append(f"[{section}]")
        lines.extend(f"{k} = {v}" for k, v in kv.items())
        lines.append("")
    (directory / "config.echo.ini").write_text("\n".join(lines))


def _model_config(cfg: dict):
    from .model import ModelConfig
    m = dict(cfg["model"])
    hidden = m.pop("hidden")
    return ModelConfig(hidden=int(hidden) if str(hidden).strip() else None, **m)


def _stft_config(cfg: dict):
    from .dsp import StftConfig
    return StftConfig(**cfg["stft"])


def _workers(cfg: dict) -> int:
    w = int(cfg["run"]["workers"])
    return w if w > 0 else (os.cpu_count() or 1)


# ---------------------------------------------------------------------------
# subcommands


def cmd_params(cfg, args) -> int:
    from .model import ModelConfig, count_params_config
    rows = [
        ("gru", ModelConfig(variant="gru")),
        ("feedforward", ModelConfig(variant="feedforward")),
        ("no-context", ModelConfig(variant="no-context")),
        ("context C=3", ModelConfig(variant="context", context_frames=3)),
        ("context C=7", ModelConfig(variant="context", context_frames=7)),
        ("context C=11", ModelConfig(variant="context", context_frames=11)),
    ]
    print(f"{'model':<16} {'parameters':>12}")
    for name, mc in rows:
        print(f"{name:<16} {count_params_config(mc):>12}")
    return 0


def cmd_rir_gen(cfg, args) -> int:
    from .autodiff import Rng
    from .pipeline import generate_bank, t60_grid
    root = Path(args.root)
    grid = t60_grid(cfg["bank"]["t60_start"], cfg["bank"]["t60_stop"],
                    cfg["bank"]["t60_step"])
    bank = generate_bank(grid, cfg["bank"]["per_t60"],
                         Rng(cfg["run"]["seed"]).derive(1), root,
                         workers=_workers(cfg))
    echo_config(cfg, root)
    log.info("rendered %d RIRs into %s", len(bank.records), root / "bank")
    print(len(bank.records))
    return 0


def cmd_synth(cfg, args) -> int:
    from .autodiff import Rng
    from .pipeline import BankManifest, synthesize_pairs
    root = Path(args.root)
    bank = BankManifest.load(root / "bank" / "manifest.csv")
    pairs = synthesize_pairs(args.clean, bank, cfg["synth"]["per_rir"],
                             Rng(cfg["run"]["seed"]).derive(2), root,
                             subset=args.subset,
                             val_fraction=cfg["synth"]["val_fraction"])
    echo_config(cfg, root)
    counts = {s: len(pairs.split(s)) for s in ("train", "val", "test")}
    log.info("synthesized %d pairs: %s", len(pairs.records), counts)
    print(len(pairs.records))
    return 0


def cmd_stats(cfg, args) -> int:
    from .pipeline import PairManifest, compute_stats, save_stats
    root = Path(args.root)
    manifest = PairManifest.load(root / "pairs.csv")
    stats = compute_stats(manifest, root, _stft_config(cfg))
    save_stats(stats, root / "stats.json")
    log.info("wrote %s", root / "stats.json")
    return 0


def cmd_train(cfg, args) -> int:
    from .autodiff import Rng
    from .pipeline import PairManifest, TrainParams, load_stats, train
    root = Path(args.root)
    manifest = PairManifest.load(root / "pairs.csv")
    stats = load_stats(root / "stats.json")
    params = TrainParams(**cfg["train"])
    ckpt_path = Path(args.checkpoint) if args.checkpoint else root / "model.ckpt"
    _, report = train(_model_config(cfg), manifest, root, stats, params,
                      Rng(cfg["run"]["seed"]), ckpt_path, _stft_config(cfg),
                      cache_dir=root / "features" if args.cache else None,
                      resume_from=args.resume)
    echo_config(cfg, root)
    (root / "train_report.json").write_text(report.to_json())
    log.info("best epoch %d (val %.6f); checkpoint %s",
             report.best_epoch, report.best_val_loss, ckpt_path)
    return 0


def _enhance_one(model, stats, in_path: Path, out_path: Path, cfg, iters) -> None:
    from .dsp import wav_read, wav_write
    from .pipeline import enhance
    audio = wav_read(in_path)
    out = enhance(model, stats, audio, _stft_config(cfg), iters)
    peak = float(np.max(np.abs(out.samples))) if len(out.samples) else 0.0
    if peak > 1.0:
        log.warning("%s: peak %.3f exceeds full scale (written unclipped)",
                    out_path, peak)
    wav_write(out_path, out)


def cmd_enhance(cfg, args) -> int:
    from .model import load_checkpoint
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.restore()
    iters = (args.griffin_lim if args.griffin_lim is not None
             else cfg["enhance"]["griffin_lim_iters"])
    src, dst = Path(args.input), Path(args.output)
    if src.is_dir():
        dst.mkdir(parents=True, exist_ok=True)
        files = sorted(src.glob("*.wav"))
        if not files:
            raise FileNotFoundError(f"no .wav files in {src}")
        for f in files:
            _enhance_one(model, ckpt.stats, f, dst / f.name, cfg, iters)
        log.info("enhanced %d files into %s", len(files), dst)
    else:
        _enhance_one(model, ckpt.stats, src, dst, cfg, iters)
    return 0


def cmd_eval(cfg, args) -> int:
    from .metrics import evaluate_corpus
    from .pipeline import BankManifest, PairManifest, _resolve
    root = Path(args.root)
    manifest = PairManifest.load(root / "pairs.csv")
    bank = BankManifest.load(root / "bank" / "manifest.csv").by_id()
    enhanced = Path(args.enhanced)
    records = manifest.split(args.subset)
    if not records:
        raise FileNotFoundError(f"no pairs in split {args.subset!r}")
    items = [{
        "pair_id": r.pair_id,
        "t60": bank[r.rir_id].target_t60,
        "clean": str(_resolve(root, r.clean_path)),
        "reverb": str(_resolve(root, r.reverb_path)),
        "enhanced": str(enhanced / f"{r.pair_id}.wav"),
    } for r in records]
    report = evaluate_corpus(items)
    report.write_csv(args.output)
    flagged = sum(1 for r in report.rows if r.error)
    log.info("scored %d pairs (%d flagged) -> %s",
             len(report.rows), flagged, args.output)
    return 0


def cmd_t60(cfg, args) -> int:
    from .acoustics import RoomImpulseResponse, estimate_t60
    from .dsp import wav_read
    buf = wav_read(args.rir)
    est = estimate_t60(RoomImpulseResponse(buf.samples, buf.sample_rate))
    for fc, value in zip(est.band_centers, est.band_t60):
        print(f"{fc:7.0f} Hz  {value:.3f} s")
    print(f"fullband  {est.fullband:.3f} s")
    return 0


def cmd_gradcheck(cfg, args) -> int:
    from .verify import gradient_suite
    reports = gradient_suite()
    failed = False
    for name, rep in reports.items():
        status = "pass" if rep.passed else "FAIL"
        print(f"{name:<24} max rel err {rep.max_error:.3e}  "
              f"(tol {rep.tolerance:.0e})  {status}")
        failed = failed or not rep.passed
    if failed:
        raise VerificationFailure("gradient checks exceeded tolerance")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dereverb",
                                description="speech dereverberation toolkit")
    p.add_argument("--config", help="INI configuration file")
    p.add_argument("--set", action="append", default=[], metavar="S.K=V",
                   help="override one config value (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("params", help="print parameter counts of all variants")

    sp = sub.add_parser("rir-gen", help="render the RIR bank")
    sp.add_argument("--root", required=True)

    sp = sub.add_parser("synth", help="render reverberant pairs")
    sp.add_argument("--root", required=True)
    sp.add_argument("--clean", required=True, help="directory of clean .wav files")
    sp.add_argument("--subset", choices=("trainval", "test"), default="trainval")

    sp = sub.add_parser("stats", help="compute feature statistics")
    sp.add_argument("--root", required=True)

    sp = sub.add_parser("train", help="train a model")
    sp.add_argument("--root", required=True)
    sp.add_argument("--checkpoint", help="output path (default root/model.ckpt)")
    sp.add_argument("--resume", help="resume from an existing checkpoint")
    sp.add_argument("--cache", action="store_true",
                    help="cache features under root/features")

    sp = sub.add_parser("enhance", help="dereverberate a file or directory")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out", dest="output", required=True)
    sp.add_argument("--griffin-lim", type=int, default=None,
                    help="phase refinement iterations (default from config)")

    sp = sub.add_parser("eval", help="objective metrics over a corpus")
    sp.add_argument("--root", required=True)
    sp.add_argument("--enhanced", required=True)
    sp.add_argument("--out", dest="output", required=True)
    sp.add_argument("--subset", default="test")

    sp = sub.add_parser("t60", help="estimate T60 of an impulse response")
    sp.add_argument("rir")

    sub.add_parser("gradcheck", help="finite-difference verification suite")
    return p


COMMANDS = {
    "params": cmd_params,
    "rir-gen": cmd_rir_gen,
    "synth": cmd_synth,
    "stats": cmd_stats,
    "train": cmd_train,
    "enhance": cmd_enhance,
    "eval": cmd_eval,
    "t60": cmd_t60,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code not in (0, None) else 0
    logging.basicConfig(stream=sys.stderr,
                        level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s")
    from .acoustics import AcousticsError
    from .dsp import DspError
    from .metrics import MetricError
    from .model import CheckpointError, ModelConfigError
    from .pipeline import PipelineError
    try:
        cfg = load_config(args.config, args.set)
        return COMMANDS[args.command](cfg, args)
    except UsageError as exc:
        log.error("%s", exc)
        return 1
    except VerificationFailure as exc:
        log.error("%s", exc)
        return 3
    except (PipelineError, AcousticsError, DspError, MetricError,
            CheckpointError, ModelConfigError, FileNotFoundError,
            OSError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
