import time

import numpy as np
import pytest

from varflow.config import load_config
from varflow.data import Dataset, ToyCorpusSpec, generate_toy_corpus, prepare
from varflow.model import AcousticModel, Batch, NormStats
from varflow.training import Trainer


@pytest.fixture(scope="session")
def toy_cfg():
    return load_config("toy")


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    entries = generate_toy_corpus(ToyCorpusSpec(), root)
    return root, entries


@pytest.fixture(scope="session")
def toy_features(toy_corpus, toy_cfg, tmp_path_factory):
    root, _ = toy_corpus
    out = tmp_path_factory.mktemp("feats")
    summary = prepare(root / "manifest.jsonl", toy_cfg.signal, out)
    return out, summary


@pytest.fixture(scope="session")
def toy_dataset(toy_features):
    return Dataset.from_cache(toy_features[0])


@pytest.fixture(scope="session")
def trained_toy(toy_cfg, toy_dataset, tmp_path_factory):
    """The toy preset trained once for the whole session (about 4 minutes)."""
    out = tmp_path_factory.mktemp("toy_run")
    start = time.perf_counter()
    trainer = Trainer(toy_cfg, toy_dataset)
    records = trainer.run(out, log_every=10**9)
    elapsed = time.perf_counter() - start
    model = trainer.model.eval()
    return {"model": model, "trainer": trainer, "records": records, "seconds": elapsed,
            "checkpoint": out / "latest.bin", "dir": out}


def micro_batch(rng, n_mels=4, vocab=5, durations=((2, 1, 3), (1, 2, 0))):
    """Small ragged batch with hand-picked durations (0 marks phoneme padding)."""
    durations = np.asarray(durations, dtype=np.int64)
    ph_mask = durations > 0
    lengths = durations.sum(1)
    n_frames = int(lengths.max())
    frame_mask = np.arange(n_frames)[None] < lengths[:, None]
    phonemes = rng.integers(0, vocab, durations.shape) * ph_mask
    return Batch(
        phonemes=phonemes,
        phoneme_mask=ph_mask,
        durations=durations,
        mel=rng.normal(size=(len(durations), n_frames, n_mels)) * frame_mask[..., None],
        pitch=rng.normal(size=frame_mask.shape) * frame_mask,
        energy=rng.normal(size=frame_mask.shape) * frame_mask,
        frame_mask=frame_mask,
        ids=[f"u{i}" for i in range(len(durations))],
    )


def micro_model(mode="flow", granularity="frame", seed=0, n_mels=4, **over):
    from varflow.config import ModelConfig

    kw = dict(vocab_size=5, d_model=8, n_heads=2, encoder_layers=1, decoder_layers=1,
              ffn_dim=16, conv_kernel=3, dropout=0.0, variance_mode=mode,
              granularity=granularity, flow_layers=2, flow_bins=4)
    kw.update(over)
    model = AcousticModel(ModelConfig(**kw), n_mels, seed=seed)
    model.stats = NormStats(5.0, 0.4, 80.0, 20.0)
    return model


ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record a PASS/FAIL line for an acceptance criterion, then assert it."""
    lines = request.config.stash.setdefault(ACCEPTANCE_KEY, [])

    def check(number: int, name: str, ok: bool, detail: str):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d} {name}: {detail}"
        print(line)
        lines.append((number, line))
        assert ok, line

    return check


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
