"""Toy-scale reproduction: corpus -> features -> training -> control/diversity/latent reports.

    python scripts/run_toy_experiment.py --out runs/toy [--modes flow,mse] [--steps N]

Each variance mode is trained from the same seed and data. Results land in
``<out>/<mode>/`` and a combined FFE table in ``<out>/ffe_table.md``.
"""

from __future__ import annotations

import argparse
import copy
import json
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from varflow import control as C
from varflow.config import dump_config, load_config
from varflow.data import Dataset, ToyCorpusSpec, generate_toy_corpus, prepare
from varflow.training import Trainer


def held_out_texts(n: int, seed: int = 2024) -> list[np.ndarray]:
    spec = ToyCorpusSpec()
    rng = np.random.default_rng(seed)
    return [rng.integers(0, spec.n_symbols, rng.integers(spec.min_phonemes, spec.max_phonemes + 1))
            for _ in range(n)]


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/toy")
    ap.add_argument("--modes", default="flow,mse", help="comma list of flow, reversed, mse")
    ap.add_argument("--steps", type=int, help="override train.max_steps")
    ap.add_argument("--n-eval", type=int, default=16)
    args = ap.parse_args()

    out = Path(args.out)
    base = load_config("toy")
    if args.steps:
        base.train.max_steps = args.steps

    corpus = out / "corpus"
    if not (corpus / "manifest.jsonl").exists():
        generate_toy_corpus(ToyCorpusSpec(), corpus)
    feats = out / "features"
    if not any(feats.glob("*.vfc")):
        prepare(corpus / "manifest.jsonl", base.signal, feats)
    ds = Dataset.from_cache(feats)
    texts = held_out_texts(args.n_eval)

    tables, summary = [], {}
    for mode in args.modes.split(","):
        cfg = copy.deepcopy(base)
        cfg.model.variance_mode = mode
        run = out / mode
        run.mkdir(parents=True, exist_ok=True)
        dump_config(cfg, run / "config.yaml")
        t0 = time.perf_counter()
        trainer = Trainer(cfg, ds)
        records = trainer.run(run, log_every=500)
        secs = time.perf_counter() - t0
        model = trainer.model.eval()

        lambdas = (-6.0, -4.0, -2.0, 0.0, 2.0, 4.0, 6.0)
        table = C.evaluate_responsiveness(model, texts, cfg.signal, cfg.eval, lambdas)
        tables.append(table.format())
        info = {"train_seconds": secs, "final": records[-1], "ffe": table.to_dict()}

        if mode != "mse":
            div = C.diversity_sample(model, texts[0], cfg.signal, cfg.eval, (0.0, 0.667), n=10)
            C.write_contours(run / "contours.tsv", div)
            info["dispersion_hz"] = {f"{r.sigma:g}": r.dispersion for r in div}
            info["latent"] = asdict(C.latent_gaussianity_check(model, ds))
        (run / "summary.json").write_text(json.dumps(info, indent=2, default=float))
        summary[mode] = info
        print(f"[{mode}] trained {len(records)} steps in {secs:.0f}s")
        print(table.format())

    (out / "ffe_table.md").write_text("\n\n".join(tables) + "\n")
    for mode, info in summary.items():
        if "latent" in info:
            lat = info["latent"]
            print(f"[{mode}] z mean {lat['z_mean']:+.3f} var {lat['z_var']:.3f}; "
                  f"corr(z,h) {lat['corr_z_h']:.3f} vs corr(x,h) {lat['corr_x_h']:.3f}; "
                  f"dispersion {info['dispersion_hz']}")


if __name__ == "__main__":
    main()
