"""Command-line entry point: ``varflow <command> ...``.

Exit codes: 0 success, 1 usage, 2 data/config validation, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import signal as S
from .config import ConfigError, RunConfig, dump_config, load_config
from .training import CheckpointError, TrainingDivergence

log = logging.getLogger("varflow")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_run_record(out_dir: Path, command: str, args: argparse.Namespace,
                      cfg: RunConfig | None, seed: int | None, checkpoint: str | None,
                      extra: dict | None = None) -> None:
    record = {
        "command": command,
        "version": __version__,
        "argv": sys.argv[1:],
        "args": {k: v for k, v in vars(args).items() if k != "func"},
        "config_hash": cfg.hash() if cfg else None,
        "config": cfg.to_dict() if cfg else None,
        "seed": seed,
        "checkpoint": checkpoint,
        "checkpoint_sha256": _sha256(checkpoint) if checkpoint else None,
        "time": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    record.update(extra or {})
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run.json").write_text(json.dumps(record, indent=2, sort_keys=True, default=str))


def _parse_ids(text: str | None, ids: str | None, vocab: int) -> np.ndarray:
    if (text is None) == (ids is None):
        raise UsageError("give exactly one of --text or --phoneme-ids")
    if ids is not None:
        try:
            seq = [int(t) for t in ids.replace(",", " ").split()]
        except ValueError:
            raise UsageError(f"--phoneme-ids must be integers, got {ids!r}") from None
    else:
        # letters a, b, c, ... stand for symbols 0, 1, 2, ...; spaces are ignored
        seq = [ord(c) - ord("a") for c in text.lower() if not c.isspace()]
        if any(not 0 <= s < 26 for s in seq):
            raise UsageError("--text accepts letters only")
    if not seq:
        raise UsageError("empty phoneme sequence")
    bad = [s for s in seq if not 0 <= s < vocab]
    if bad:
        raise ConfigError(f"phoneme ids {bad} outside the model vocabulary [0, {vocab})")
    return np.asarray(seq, dtype=np.int64)


def _load(checkpoint: str):
    from .training import load_model

    if not Path(checkpoint).exists():
        raise FileNotFoundError(f"checkpoint not found: {checkpoint}")
    return load_model(checkpoint)


def _out_dir(path: str) -> Path:
    p = Path(path)
    return p if p.suffix == "" else p.parent


def _save_mel(path: Path, mel: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    np.save(path, mel)


def _save_wav(path: str, mel: np.ndarray, cfg: RunConfig) -> None:
    from scipy.io import wavfile

    sig = cfg.signal
    audio = S.griffin_lim(mel, sig.sample_rate, cfg.synth.griffin_lim_iters, sig.n_fft,
                          sig.hop_length, sig.fmin, sig.fmax).samples
    peak = float(np.max(np.abs(audio))) or 1.0
    wavfile.write(path, sig.sample_rate, (audio / peak * 0.9).astype(np.float32))


def _test_texts(features: str | None, n: int) -> list[np.ndarray]:
    from .data import Dataset

    if features is None:
        raise UsageError("--features is required to pick evaluation sentences")
    ds = Dataset.from_cache(features)
    return [u.phonemes for u in ds.utterances[:n]]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_make_toy(args) -> int:
    from .data import ToyCorpusSpec, generate_toy_corpus

    spec = ToyCorpusSpec(n_utterances=args.n, seed=args.seed)
    entries = generate_toy_corpus(spec, args.out)
    _write_run_record(Path(args.out), "make-toy", args, None, args.seed, None,
                      {"utterances": len(entries)})
    print(f"wrote {len(entries)} utterances to {args.out}")
    return EXIT_OK


def cmd_prepare(args) -> int:
    from .data import prepare

    cfg = load_config(args.config)
    summary = prepare(args.manifest, cfg.signal, args.out, workers=args.workers)
    _write_run_record(Path(args.out), "prepare", args, cfg, None, None,
                      {"accepted": len(summary["accepted"]), "rejected": summary["rejected"]})
    print(f"cached {len(summary['accepted'])} utterances, rejected {len(summary['rejected'])}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .data import Dataset
    from .training import Trainer

    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.train.seed = args.seed
    ds = Dataset.from_cache(args.features)
    out = Path(args.out)
    if args.resume:
        trainer = Trainer.resume(args.resume, ds)
        cfg = trainer.cfg
    else:
        trainer = Trainer(cfg, ds)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.yaml")
    trainer.run(out, args.steps)
    ckpt = out / "latest.bin"
    _write_run_record(out, "train", args, cfg, cfg.train.seed, str(ckpt), {"step": trainer.step})
    print(f"trained to step {trainer.step}; checkpoint {ckpt}")
    return EXIT_OK


def cmd_synth(args) -> int:
    model, cfg = _load(args.checkpoint)
    ids = _parse_ids(args.text, args.phoneme_ids, cfg.model.vocab_size)
    syn = model.synthesize(ids, sigma=args.sigma, seed=args.seed,
                           dropout_at_inference=args.dropout_at_inference)
    out = Path(args.out)
    _save_mel(out, syn.mel)
    if args.wav:
        _save_wav(args.wav, syn.mel, cfg)
    _write_run_record(_out_dir(args.out), "synth", args, cfg, args.seed, args.checkpoint,
                      {"durations": syn.durations.tolist(), "mode": syn.mode})
    print(f"wrote mel {syn.mel.shape} to {out}")
    return EXIT_OK


def cmd_control(args) -> int:
    from .config import ModelConfig
    from .control import controlled_synthesize

    model, cfg = _load(args.checkpoint)
    if args.mode is not None:
        wanted = ModelConfig(variance_mode=args.mode).variance_mode
        if wanted != model.mode:
            raise ConfigError(f"checkpoint was trained in {model.mode!r} mode, not {wanted!r}")
    ids = _parse_ids(args.text, args.phoneme_ids, cfg.model.vocab_size)
    syn = controlled_synthesize(model, ids, args.lam, sigma=args.sigma, seed=args.seed,
                                energy_factor=args.energy_scale)
    out = Path(args.out)
    _save_mel(out, syn.mel)
    if args.wav:
        _save_wav(args.wav, syn.mel, cfg)
    _write_run_record(_out_dir(args.out), "control", args, cfg, args.seed, args.checkpoint,
                      {"mode": syn.mode, "lambda": args.lam,
                       "provided_f0_hz": syn.pitch_hz(model.stats).tolist()})
    print(f"wrote λ={args.lam:+g} mel {syn.mel.shape} ({syn.mode} mode) to {out}")
    return EXIT_OK


def cmd_eval_ffe(args) -> int:
    from .control import evaluate_responsiveness

    model, cfg = _load(args.checkpoint)
    texts = _test_texts(args.features, args.n)
    lambdas = cfg.eval.lambdas if args.lambdas is None else _floats(args.lambdas)
    table = evaluate_responsiveness(model, texts, cfg.signal, cfg.eval, lambdas,
                                    sigma=args.sigma, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ffe_table.md").write_text(table.format() + "\n")
    (out / "ffe.json").write_text(json.dumps(table.to_dict(), indent=2))
    _write_run_record(out, "eval-ffe", args, cfg, args.seed, args.checkpoint)
    print(table.format())
    return EXIT_OK


def cmd_diversity(args) -> int:
    from .control import diversity_sample, write_contours

    model, cfg = _load(args.checkpoint)
    ids = _parse_ids(args.text, args.phoneme_ids, cfg.model.vocab_size)
    results = diversity_sample(model, ids, cfg.signal, cfg.eval, _floats(args.sigmas), args.n,
                               args.dropout_at_inference, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_contours(out / "contours.tsv", results)
    summary = {f"{r.sigma:g}": r.dispersion for r in results}
    _write_run_record(out, "diversity", args, cfg, args.seed, args.checkpoint,
                      {"dispersion": summary})
    for r in results:
        print(f"sigma={r.sigma:g} dispersion={r.dispersion:.3f} Hz")
    return EXIT_OK


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .control import read_contours

    sets = read_contours(args.contours)
    fig, axes = plt.subplots(1, len(sets), figsize=(4.5 * len(sets), 3.2), squeeze=False,
                             sharey=True)
    for ax, (sigma, contours) in zip(axes[0], sorted(sets.items())):
        for c in contours:
            ax.plot(np.where(c > 0, c, np.nan), lw=1, alpha=0.8)
        ax.set_title(f"σ = {sigma:g}")
        ax.set_xlabel("frame")
    axes[0][0].set_ylabel("f0 (Hz)")
    fig.tight_layout()
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(args.out, dpi=120)
    plt.close(fig)
    _write_run_record(_out_dir(args.out), "plot", args, None, None, None)
    print(f"wrote {args.out}")
    return EXIT_OK


def _floats(text) -> tuple[float, ...]:
    if isinstance(text, (tuple, list)):
        return tuple(float(v) for v in text)
    try:
        return tuple(float(v) for v in str(text).split(","))
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from None


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_text(p):
    p.add_argument("--text", help="letters a, b, ... naming symbols 0, 1, ...")
    p.add_argument("--phoneme-ids", help="comma-separated symbol ids")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="varflow", description="flow-based variance modeling for TTS (toy scale)")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("make-toy", help="generate the synthetic harmonic-tone corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=96)
    p.add_argument("--seed", type=int, default=7)
    p.set_defaults(func=cmd_make_toy)

    p = sub.add_parser("prepare", help="extract and cache features from a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", default="toy")
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train an acoustic model")
    p.add_argument("--config", default="toy")
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--resume")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("synth", help="synthesize a mel spectrogram")
    p.add_argument("--checkpoint", required=True)
    _add_text(p)
    p.add_argument("--sigma", type=float, default=0.333)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dropout-at-inference", action="store_true")
    p.add_argument("--out", required=True, help=".npy mel output")
    p.add_argument("--wav", help="optional Griffin-Lim waveform")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("control", help="synthesize with a semitone pitch shift")
    p.add_argument("--checkpoint", required=True)
    _add_text(p)
    p.add_argument("--lambda", dest="lam", type=float, required=True)
    p.add_argument("--mode", choices=["flow", "reversed", "mse"])
    p.add_argument("--energy-scale", type=float, default=1.0)
    p.add_argument("--sigma", type=float, default=0.333)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--wav")
    p.set_defaults(func=cmd_control)

    p = sub.add_parser("eval-ffe", help="FFE under pitch shifts (λ × FFE table)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--n", type=int, default=16, help="number of evaluation sentences")
    p.add_argument("--lambdas")
    p.add_argument("--sigma", type=float, default=0.333)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval_ffe)

    p = sub.add_parser("diversity", help="repeated sampling at several prior widths")
    p.add_argument("--checkpoint", required=True)
    _add_text(p)
    p.add_argument("--sigmas", default="0.0,0.667")
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--dropout-at-inference", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_diversity)

    p = sub.add_parser("plot", help="render f0 contour overlays")
    p.add_argument("--contours", required=True)
    p.add_argument("--out", required=True, help="image path (.png)")
    p.set_defaults(func=cmd_plot)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"varflow: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDivergence, FloatingPointError) as e:
        print(f"varflow: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, CheckpointError, FileNotFoundError, ValueError, KeyError) as e:
        print(f"varflow: invalid input: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
