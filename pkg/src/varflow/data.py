"""Toy corpus generation, manifest handling, feature preparation and batching."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from . import signal as S
from .config import SignalConfig
from .model import Batch, NormStats

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.jsonl"
STATS_NAME = "stats.json"
REJECTED_NAME = "rejected.json"
CACHE_SUFFIX = ".vfc"


# ---------------------------------------------------------------------------
# Toy corpus
# ---------------------------------------------------------------------------

@dataclass
class ToyCorpusSpec:
    n_symbols: int = 12
    f0_low: float = 110.0
    f0_high: float = 330.0
    n_utterances: int = 96
    min_phonemes: int = 5
    max_phonemes: int = 10
    min_frames: int = 3
    max_frames: int = 9
    utterance_jitter_semitones: float = 3.0
    phoneme_jitter_semitones: float = 1.0
    sample_rate: int = 22050
    hop_length: int = 256
    seed: int = 7

    def base_f0(self) -> np.ndarray:
        return np.geomspace(self.f0_low, self.f0_high, self.n_symbols)

    def harmonic_profiles(self) -> np.ndarray:
        """(n_symbols, 3) amplitudes of f0, 2 f0, 3 f0; strictly decaying."""
        rng = np.random.default_rng([self.seed, 1])
        a2 = rng.uniform(0.15, 0.6, self.n_symbols)
        a3 = a2 * rng.uniform(0.2, 0.8, self.n_symbols)
        return np.stack([np.ones(self.n_symbols), a2, a3], axis=1)


@dataclass
class ToyUtterance:
    id: str
    samples: np.ndarray
    phonemes: np.ndarray
    durations: np.ndarray
    f0: np.ndarray  # per phoneme, Hz
    sample_rate: int


def toy_utterances(spec: ToyCorpusSpec) -> list[ToyUtterance]:
    """Concatenated harmonic tones, one per symbol, with phase continuity.

    Each utterance is ``hop * sum(durations) - hop // 2`` samples long, so that
    centered framing yields exactly ``sum(durations)`` frames.
    """
    if not (60.0 <= spec.f0_low < spec.f0_high <= 800.0):
        raise ValueError("toy f0 range must lie inside the estimator band [60, 800] Hz")
    base = spec.base_f0()
    prof = spec.harmonic_profiles()
    rng = np.random.default_rng([spec.seed, 2])
    sr, hop = spec.sample_rate, spec.hop_length
    out = []
    for u in range(spec.n_utterances):
        n = int(rng.integers(spec.min_phonemes, spec.max_phonemes + 1))
        ph = rng.integers(0, spec.n_symbols, n)
        dur = rng.integers(spec.min_frames, spec.max_frames + 1, n)
        utt_shift = rng.uniform(-1, 1) * spec.utterance_jitter_semitones
        ph_shift = rng.uniform(-1, 1, n) * spec.phoneme_jitter_semitones
        f0 = base[ph] * 2.0 ** ((utt_shift + ph_shift) / 12.0)
        gain = rng.uniform(0.25, 0.6) * rng.uniform(0.7, 1.0, n)
        length = hop * int(dur.sum()) - hop // 2
        per_sample = np.repeat(np.arange(n), dur * hop)[:length]
        phase = 2 * np.pi * np.cumsum(f0[per_sample]) / sr
        amp = prof[ph][per_sample]
        wave = sum(amp[:, k] * np.sin((k + 1) * phase) for k in range(3))
        wave = wave * gain[per_sample] / prof[ph].sum(axis=1)[per_sample]
        out.append(ToyUtterance(f"toy{u:04d}", wave, ph, dur, f0, sr))
    return out


def generate_toy_corpus(spec: ToyCorpusSpec, out_dir: str | Path) -> list[dict]:
    """Write toy WAVs plus a line-delimited JSON manifest; returns the entries."""
    out_dir = Path(out_dir)
    (out_dir / "wavs").mkdir(parents=True, exist_ok=True)
    entries = []
    for utt in toy_utterances(spec):
        rel = f"wavs/{utt.id}.wav"
        wavfile.write(out_dir / rel, utt.sample_rate, utt.samples.astype(np.float32))
        entries.append({
            "id": utt.id,
            "audio": rel,
            "phonemes": utt.phonemes.tolist(),
            "durations": utt.durations.tolist(),
            "sample_rate": utt.sample_rate,
        })
    write_manifest(out_dir / MANIFEST_NAME, entries)
    (out_dir / "toy_spec.json").write_text(json.dumps(asdict(spec), indent=2))
    return entries


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------

def write_manifest(path: str | Path, entries: list[dict]) -> None:
    with open(path, "w") as f:
        for e in entries:
            f.write(json.dumps(e, sort_keys=True) + "\n")


def read_manifest(path: str | Path) -> list[dict]:
    entries, seen = [], set()
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        e = json.loads(line)
        missing = {"id", "audio", "phonemes", "durations", "sample_rate"} - set(e)
        if missing:
            raise ValueError(f"{path}:{lineno}: missing fields {sorted(missing)}")
        if e["id"] in seen:
            raise ValueError(f"{path}:{lineno}: duplicate id {e['id']!r}")
        if len(e["phonemes"]) != len(e["durations"]):
            raise ValueError(f"{path}:{lineno}: phonemes and durations differ in length")
        seen.add(e["id"])
        entries.append(e)
    return entries


def load_audio(path: str | Path) -> S.Waveform:
    sr, data = wavfile.read(path)
    if data.dtype.kind == "i":
        data = data / float(np.iinfo(data.dtype).max)
    elif data.dtype.kind == "u":
        data = (data.astype(np.float64) - 128.0) / 128.0
    if data.ndim > 1:
        data = data.mean(axis=1)
    return S.Waveform(data.astype(np.float64), int(sr))


# ---------------------------------------------------------------------------
# Feature preparation
# ---------------------------------------------------------------------------

def extract_features(w: S.Waveform, phonemes, durations, cfg: SignalConfig) -> S.UtteranceFeatures:
    if w.sample_rate != cfg.sample_rate:
        raise ValueError(f"sample rate {w.sample_rate} != configured {cfg.sample_rate}")
    mag = S.magnitude_frames(w, cfg.n_fft, cfg.hop_length)
    mel = S.mel_from_magnitude(mag, cfg.sample_rate, cfg.n_fft, cfg.n_mels, cfg.fmin,
                               cfg.fmax, cfg.floor_eps)
    pitch = S.estimate_f0(w, cfg.hop_length, cfg.f0_fmin, cfg.f0_fmax, cfg.voicing_threshold,
                          cfg.f0_frame_length)
    return S.UtteranceFeatures(
        phonemes=np.asarray(phonemes, dtype=np.int64),
        durations=np.asarray(durations, dtype=np.int64),
        mel=mel,
        f0=pitch.f0,
        voiced=pitch.voiced,
        energy=S.extract_energy(mag),
        sample_rate=w.sample_rate,
        hop=cfg.hop_length,
    )


def _validate(feats: S.UtteranceFeatures) -> str | None:
    if int(feats.durations.sum()) != feats.n_frames:
        return f"durations sum to {int(feats.durations.sum())} but audio has {feats.n_frames} frames"
    if np.any(feats.durations < 1):
        return "non-positive phoneme duration"
    if not feats.voiced.any():
        return "no voiced frame"
    return None


def prepare(manifest: str | Path | list[dict], cfg: SignalConfig, out_dir: str | Path,
            root: str | Path | None = None, workers: int = 1) -> dict:
    """Extract and cache features for every manifest entry, then write corpus stats.

    Returns a summary with the accepted ids, rejected ids (with reasons) and stats.
    """
    if not isinstance(manifest, list):
        root = Path(manifest).parent if root is None else root
        manifest = read_manifest(manifest)
    root = Path(root or ".")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def work(entry):
        w = load_audio(root / entry["audio"])
        return extract_features(w, entry["phonemes"], entry["durations"], cfg)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            feats_list = list(pool.map(work, manifest))
    else:
        feats_list = [work(e) for e in manifest]

    accepted, rejected = [], {}
    log_f0, energy = [], []
    for entry, feats in zip(manifest, feats_list):
        reason = _validate(feats)
        if reason:
            log.warning("rejecting %s: %s", entry["id"], reason)
            rejected[entry["id"]] = reason
            continue
        S.write_feature_cache(out_dir / f"{entry['id']}{CACHE_SUFFIX}", feats)
        accepted.append(entry["id"])
        log_f0.append(np.log(feats.f0[feats.voiced]))
        energy.append(feats.energy)
    if not accepted:
        raise ValueError("no usable utterance in the manifest")
    lf, en = np.concatenate(log_f0), np.concatenate(energy)
    stats = NormStats(float(lf.mean()), float(lf.std()), float(en.mean()), float(en.std()))
    (out_dir / STATS_NAME).write_text(json.dumps(stats.to_dict(), indent=2, sort_keys=True))
    (out_dir / REJECTED_NAME).write_text(json.dumps(rejected, indent=2, sort_keys=True))
    return {"accepted": accepted, "rejected": rejected, "stats": stats}


# ---------------------------------------------------------------------------
# Dataset and batching
# ---------------------------------------------------------------------------

@dataclass
class Utterance:
    id: str
    phonemes: np.ndarray
    durations: np.ndarray
    mel: np.ndarray
    pitch: np.ndarray  # standardized filled log-f0
    energy: np.ndarray  # standardized
    voiced: np.ndarray


@dataclass
class Dataset:
    utterances: list[Utterance]
    stats: NormStats
    n_mels: int = field(init=False)

    def __post_init__(self):
        self.n_mels = self.utterances[0].mel.shape[1]

    def __len__(self) -> int:
        return len(self.utterances)

    @classmethod
    def from_cache(cls, cache_dir: str | Path) -> Dataset:
        cache_dir = Path(cache_dir)
        stats_path = cache_dir / STATS_NAME
        if not stats_path.exists():
            raise FileNotFoundError(f"{stats_path} missing; run prepare first")
        stats = NormStats(**json.loads(stats_path.read_text()))
        utts = []
        for path in sorted(cache_dir.glob(f"*{CACHE_SUFFIX}")):
            f = S.read_feature_cache(path)
            utts.append(standardize(path.stem, f, stats))
        if not utts:
            raise FileNotFoundError(f"no feature cache files in {cache_dir}")
        return cls(utts, stats)

    def batch(self, indices) -> Batch:
        return collate([self.utterances[i] for i in indices])


def standardize(uid: str, f: S.UtteranceFeatures, stats: NormStats) -> Utterance:
    lf = S.fill_and_log_pitch(f.f0, f.voiced)
    return Utterance(
        id=uid,
        phonemes=f.phonemes,
        durations=f.durations,
        mel=f.mel,
        pitch=(lf - stats.pitch_mean) / stats.pitch_std,
        energy=(f.energy - stats.energy_mean) / stats.energy_std,
        voiced=f.voiced,
    )


def collate(utts: list[Utterance], n_frames: int | None = None,
            n_phonemes: int | None = None) -> Batch:
    B = len(utts)
    N = max(len(u.phonemes) for u in utts) if n_phonemes is None else n_phonemes
    T_ = max(len(u.pitch) for u in utts) if n_frames is None else n_frames
    M = utts[0].mel.shape[1]
    b = Batch(
        phonemes=np.zeros((B, N), dtype=np.int64),
        phoneme_mask=np.zeros((B, N), dtype=bool),
        durations=np.zeros((B, N), dtype=np.int64),
        mel=np.zeros((B, T_, M)),
        pitch=np.zeros((B, T_)),
        energy=np.zeros((B, T_)),
        frame_mask=np.zeros((B, T_), dtype=bool),
        ids=[u.id for u in utts],
    )
    for i, u in enumerate(utts):
        n, t = len(u.phonemes), len(u.pitch)
        b.phonemes[i, :n] = u.phonemes
        b.phoneme_mask[i, :n] = True
        b.durations[i, :n] = u.durations
        b.mel[i, :t] = u.mel
        b.pitch[i, :t] = u.pitch
        b.energy[i, :t] = u.energy
        b.frame_mask[i, :t] = True
    return b
