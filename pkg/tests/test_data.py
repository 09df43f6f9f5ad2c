import json

import numpy as np
import pytest

from varflow import signal as S
from varflow.config import SignalConfig
from varflow.data import (
    Dataset,
    ToyCorpusSpec,
    collate,
    generate_toy_corpus,
    prepare,
    read_manifest,
    toy_utterances,
    write_manifest,
)


def test_toy_corpus_is_byte_reproducible(tmp_path):
    spec = ToyCorpusSpec(n_utterances=4)
    generate_toy_corpus(spec, tmp_path / "a")
    generate_toy_corpus(spec, tmp_path / "b")
    for name in ["manifest.jsonl"] + [f"wavs/toy{i:04d}.wav" for i in range(4)]:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_toy_symbols_cover_estimator_band():
    spec = ToyCorpusSpec()
    base = spec.base_f0()
    assert base.min() >= 60 and base.max() <= 800
    prof = spec.harmonic_profiles()
    assert np.all(prof[:, 0] > prof[:, 1]) and np.all(prof[:, 1] > prof[:, 2])


def test_generator_and_estimator_agree_inside_spans():
    spec = ToyCorpusSpec(n_utterances=12)
    errs = []
    for u in toy_utterances(spec):
        c = S.estimate_f0(S.Waveform(u.samples, u.sample_rate))
        start = 0
        for f, d in zip(u.f0, u.durations):
            # frames whose analysis window lies inside this symbol's span
            for t in range(start + 2, start + d - 2):
                assert c.voiced[t]
                errs.append(abs(c.f0[t] / f - 1))
            start += d
    assert errs and max(errs) < 0.02


def test_durations_sum_to_frames(toy_features, toy_corpus):
    out, summary = toy_features
    assert not summary["rejected"]
    entries = {e["id"]: e for e in toy_corpus[1]}
    for path in sorted(out.glob("*.vfc"))[:20]:
        f = S.read_feature_cache(path)
        assert f.durations.sum() == f.n_frames == len(f.f0) == len(f.energy)
        assert f.durations.tolist() == entries[path.stem]["durations"]


def test_standardized_pitch_has_zero_mean(toy_dataset):
    x = np.concatenate([u.pitch[u.voiced] for u in toy_dataset.utterances])
    assert abs(x.mean()) < 1e-10
    assert x.std() == pytest.approx(1.0, abs=1e-10)


def test_prepare_is_idempotent(toy_corpus, tmp_path):
    root, entries = toy_corpus
    cfg = SignalConfig()
    prepare(entries[:5], cfg, tmp_path / "a", root=root)
    prepare(entries[:5], cfg, tmp_path / "b", root=root, workers=3)
    for p in sorted((tmp_path / "a").iterdir()):
        assert p.read_bytes() == (tmp_path / "b" / p.name).read_bytes(), p.name


def test_prepare_rejects_bad_utterances(toy_corpus, tmp_path):
    root, entries = toy_corpus
    bad_dur = dict(entries[0], id="bad_dur", durations=[d + 1 for d in entries[0]["durations"]])
    silent = dict(entries[1], id="silent", audio="silent.wav")
    from scipy.io import wavfile

    wavfile.write(root / "silent.wav", 22050, np.zeros(256 * 20 - 128, dtype=np.float32))
    silent["durations"] = [20]
    silent["phonemes"] = [0]
    summary = prepare([entries[2], bad_dur, silent], SignalConfig(), tmp_path, root=root)
    assert summary["accepted"] == [entries[2]["id"]]
    assert set(summary["rejected"]) == {"bad_dur", "silent"}
    assert "voiced" in summary["rejected"]["silent"]
    assert json.loads((tmp_path / "rejected.json").read_text()) == summary["rejected"]


def test_manifest_validation(tmp_path):
    e = {"id": "a", "audio": "a.wav", "phonemes": [1, 2], "durations": [3, 4], "sample_rate": 22050}
    write_manifest(tmp_path / "m.jsonl", [e])
    assert read_manifest(tmp_path / "m.jsonl") == [e]
    write_manifest(tmp_path / "dup.jsonl", [e, e])
    with pytest.raises(ValueError, match="duplicate"):
        read_manifest(tmp_path / "dup.jsonl")
    write_manifest(tmp_path / "len.jsonl", [dict(e, durations=[3])])
    with pytest.raises(ValueError, match="length"):
        read_manifest(tmp_path / "len.jsonl")
    write_manifest(tmp_path / "miss.jsonl", [{"id": "a"}])
    with pytest.raises(ValueError, match="missing"):
        read_manifest(tmp_path / "miss.jsonl")


def test_collate_pads_and_masks(toy_dataset):
    utts = toy_dataset.utterances[:3]
    b = collate(utts)
    for i, u in enumerate(utts):
        t = len(u.pitch)
        assert b.frame_mask[i].sum() == t and b.phoneme_mask[i].sum() == len(u.phonemes)
        assert not b.mel[i, t:].any()
        assert b.durations[i].sum() == t


def test_missing_cache_is_reported(tmp_path):
    with pytest.raises(FileNotFoundError, match="prepare"):
        Dataset.from_cache(tmp_path)
