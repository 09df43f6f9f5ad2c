"""Feature extraction: log-mel, autocorrelation f0, frame energy, Griffin-Lim.

All framing is centered with reflection padding, so a waveform of ``n`` samples
yields ``n // hop + 1`` frames for every feature stream.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FLOOR_EPS = 1e-5


class UnusablePitch(ValueError):
    """The utterance has no voiced frame, so its pitch cannot be filled."""


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")


@dataclass
class MelSpectrogram:
    frames: np.ndarray  # (T, n_mels), natural-log magnitude
    hop_length: int
    n_fft: int


@dataclass
class PitchContour:
    f0: np.ndarray  # Hz, 0 where unvoiced
    voiced: np.ndarray  # bool
    log_f0_filled: np.ndarray | None = None


# ---------------------------------------------------------------------------
# STFT and mel
# ---------------------------------------------------------------------------

def num_frames(n_samples: int, hop: int) -> int:
    return n_samples // hop + 1


def _frame(samples: np.ndarray, frame_len: int, hop: int) -> np.ndarray:
    """Centered frames of ``frame_len`` samples, one per ``hop``."""
    pad = frame_len // 2
    padded = np.pad(samples, (pad, pad), mode="reflect") if len(samples) > 1 else np.pad(
        samples, (pad, pad), mode="edge"
    )
    T = num_frames(len(samples), hop)
    idx = np.arange(T)[:, None] * hop + np.arange(frame_len)[None, :]
    return padded[idx]


def stft(samples: np.ndarray, n_fft: int, hop: int) -> np.ndarray:
    """Complex STFT, shape (T, n_fft // 2 + 1), Hann window."""
    window = np.hanning(n_fft + 1)[:-1]
    return np.fft.rfft(_frame(samples, n_fft, hop) * window, axis=-1)


def istft(spec: np.ndarray, n_fft: int, hop: int, length: int | None = None) -> np.ndarray:
    window = np.hanning(n_fft + 1)[:-1]
    frames = np.fft.irfft(spec, n=n_fft, axis=-1) * window
    T = spec.shape[0]
    total = n_fft + hop * (T - 1)
    out = np.zeros(total)
    norm = np.zeros(total)
    for t in range(T):
        out[t * hop : t * hop + n_fft] += frames[t]
        norm[t * hop : t * hop + n_fft] += window**2
    out = np.where(norm > 1e-8, out / np.maximum(norm, 1e-8), 0.0)
    pad = n_fft // 2
    out = out[pad : total - pad]
    if length is None:
        length = hop * (T - 1)
    if len(out) < length:
        out = np.pad(out, (0, length - len(out)))
    return out[:length]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_centers(n_mels: int, fmin: float, fmax: float) -> np.ndarray:
    return mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))[1:-1]


def mel_filterbank(sample_rate: int, n_fft: int, n_mels: int, fmin: float = 0.0,
                   fmax: float | None = None) -> np.ndarray:
    """Triangular HTK-scale filters with area normalization, shape (n_mels, n_fft//2+1)."""
    n_bins = n_fft // 2 + 1
    if n_mels > n_bins:
        raise ValueError(f"n_mels={n_mels} exceeds the {n_bins} STFT bins")
    fmax = sample_rate / 2 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.linspace(0.0, sample_rate / 2, n_bins)
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None, :] - lo) / (mid - lo)
    down = (hi - freqs[None, :]) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(up, down))
    return fb * (2.0 / (edges[2:] - edges[:-2]))[:, None]


def magnitude_frames(w: Waveform, n_fft: int = 1024, hop: int = 256) -> np.ndarray:
    if len(w.samples) == 0:
        raise ValueError("empty waveform")
    return np.abs(stft(w.samples, n_fft, hop))


def mel_from_magnitude(mag: np.ndarray, sample_rate: int, n_fft: int, n_mels: int,
                       fmin: float = 0.0, fmax: float | None = None,
                       floor_eps: float = FLOOR_EPS) -> np.ndarray:
    fb = mel_filterbank(sample_rate, n_fft, n_mels, fmin, fmax)
    return np.log(np.maximum(mag @ fb.T, floor_eps))


def mel_spectrogram(w: Waveform, n_fft: int = 1024, hop: int = 256, n_mels: int = 80,
                    fmin: float = 0.0, fmax: float | None = None,
                    floor_eps: float = FLOOR_EPS) -> MelSpectrogram:
    if len(w.samples) == 0:
        raise ValueError("empty waveform")
    fb_check = n_fft // 2 + 1
    if n_mels > fb_check:
        raise ValueError(f"n_mels={n_mels} exceeds the {fb_check} STFT bins")
    mag = magnitude_frames(w, n_fft, hop)
    frames = mel_from_magnitude(mag, w.sample_rate, n_fft, n_mels, fmin, fmax, floor_eps)
    return MelSpectrogram(frames, hop, n_fft)


# ---------------------------------------------------------------------------
# Pitch and energy
# ---------------------------------------------------------------------------

def estimate_f0(w: Waveform, hop: int = 256, fmin: float = 60.0, fmax: float = 800.0,
                voicing_threshold: float = 0.45, frame_length: int = 1024) -> PitchContour:
    """Normalized-autocorrelation pitch tracker with parabolic peak refinement.

    The candidate lag is the shortest local maximum of the normalized
    autocorrelation within the lag band whose value is at least 0.9 times the
    band maximum; this suppresses subharmonic (octave-down) picks.
    """
    if fmin >= fmax:
        raise ValueError(f"fmin={fmin} must be below fmax={fmax}")
    sr = w.sample_rate
    if sr < 2 * fmax:
        raise ValueError(f"sample_rate={sr} below 2*fmax={2 * fmax}")
    if len(w.samples) == 0:
        raise ValueError("empty waveform")
    lag_lo = max(1, int(np.floor(sr / fmax)))
    lag_hi = min(frame_length - 2, int(np.ceil(sr / fmin)))

    frames = _frame(w.samples, frame_length, hop)
    frames = frames - frames.mean(axis=1, keepdims=True)
    n = frame_length
    spec = np.fft.rfft(frames, n=2 * n, axis=1)
    acf = np.fft.irfft(np.abs(spec) ** 2, n=2 * n, axis=1)[:, : lag_hi + 2]
    sq = np.cumsum(frames**2, axis=1)
    total = sq[:, -1:]
    lags = np.arange(lag_hi + 2)
    # energy of frame[:n-lag] and frame[lag:]
    head = np.where(lags > 0, sq[:, np.clip(n - 1 - lags, 0, n - 1)], total)
    tail = total - np.where(lags > 0, sq[:, np.clip(lags - 1, 0, n - 1)], 0.0)
    denom = np.sqrt(np.maximum(head * tail, 0.0))
    with np.errstate(invalid="ignore", divide="ignore"):
        nccf = np.where(denom > 1e-12 * max(1.0, float(total.max())), acf / denom, 0.0)

    T = frames.shape[0]
    f0 = np.zeros(T)
    voiced = np.zeros(T, dtype=bool)
    band = nccf[:, lag_lo : lag_hi + 1]
    for t in range(T):
        r = band[t]
        peak = r.max()
        if peak < voicing_threshold:
            continue
        interior = np.flatnonzero(
            (r[1:-1] >= r[:-2]) & (r[1:-1] >= r[2:]) & (r[1:-1] >= 0.9 * peak)
        )
        k = interior[0] + 1 if interior.size else int(np.argmax(r))
        lag = float(k + lag_lo)
        if 0 < k < len(r) - 1:
            a, b, c = r[k - 1], r[k], r[k + 1]
            curv = a - 2 * b + c
            if curv < 0:
                lag += 0.5 * (a - c) / curv
        f0[t] = sr / lag
        voiced[t] = True
    return PitchContour(f0=f0, voiced=voiced)


def fill_and_log_pitch(f0: np.ndarray, voiced: np.ndarray) -> np.ndarray:
    """Linearly bridge unvoiced gaps (edges held), then take the natural log."""
    f0 = np.asarray(f0, dtype=np.float64)
    voiced = np.asarray(voiced, dtype=bool)
    idx = np.flatnonzero(voiced)
    if idx.size == 0:
        raise UnusablePitch("no voiced frame to interpolate from")
    if idx.size == f0.size:
        return np.log(f0)
    filled = np.interp(np.arange(f0.size), idx, f0[idx])
    return np.log(filled)


def extract_energy(mag: np.ndarray) -> np.ndarray:
    """L2 norm of each magnitude frame."""
    return np.linalg.norm(np.asarray(mag, dtype=np.float64), axis=-1)


def phoneme_average(values: np.ndarray, durations: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    durations = np.asarray(durations, dtype=np.int64)
    if durations.sum() != len(values):
        raise ValueError(f"durations sum to {durations.sum()} but there are {len(values)} frames")
    ends = np.cumsum(durations)
    sums = np.add.reduceat(np.append(values, 0.0), np.append(0, ends[:-1])) if len(values) else np.zeros(len(durations))
    out = np.where(durations > 0, sums / np.maximum(durations, 1), 0.0)
    return out


def expand(values: np.ndarray, durations: np.ndarray) -> np.ndarray:
    return np.repeat(np.asarray(values), np.asarray(durations, dtype=np.int64), axis=0)


def mel_dominant_f0(mel: np.ndarray, sample_rate: int, fmin: float = 0.0,
                    fmax: float | None = None, search_lo: float = 60.0,
                    search_hi: float = 800.0, voicing_floor: float = -4.0) -> PitchContour:
    """Per-frame frequency of the strongest mel band inside [search_lo, search_hi].

    The peak is refined by a parabola through the neighbouring log energies and
    mapped back through the band-center curve. A frame is voiced when its peak
    log energy exceeds ``voicing_floor``.
    """
    mel = np.asarray(mel, dtype=np.float64)
    n_mels = mel.shape[1]
    fmax = sample_rate / 2 if fmax is None else fmax
    centers_mel = np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2)[1:-1]
    centers = mel_to_hz(centers_mel)
    bands = np.flatnonzero((centers >= search_lo) & (centers <= search_hi))
    if bands.size == 0:
        raise ValueError("no mel band inside the search range")
    f0 = np.zeros(mel.shape[0])
    voiced = np.zeros(mel.shape[0], dtype=bool)
    for t, row in enumerate(mel):
        k = bands[np.argmax(row[bands])]
        if row[k] < voicing_floor:
            continue
        pos = float(k)
        if 0 < k < n_mels - 1:
            a, b, c = row[k - 1], row[k], row[k + 1]
            curv = a - 2 * b + c
            if curv < 0:
                pos += float(np.clip(0.5 * (a - c) / curv, -0.5, 0.5))
        f0[t] = float(mel_to_hz(np.interp(pos, np.arange(n_mels), centers_mel)))
        voiced[t] = True
    return PitchContour(f0=f0, voiced=voiced)


# ---------------------------------------------------------------------------
# Griffin-Lim
# ---------------------------------------------------------------------------

def griffin_lim(mel: MelSpectrogram | np.ndarray, sample_rate: int, iters: int = 32,
                n_fft: int = 1024, hop: int = 256, fmin: float = 0.0,
                fmax: float | None = None, seed: int = 0) -> Waveform:
    """Phase reconstruction from a log-mel via the filterbank pseudo-inverse."""
    frames = mel.frames if isinstance(mel, MelSpectrogram) else np.asarray(mel)
    n_mels = frames.shape[1]
    fb = mel_filterbank(sample_rate, n_fft, n_mels, fmin, fmax)
    mag = np.maximum(np.exp(frames) @ np.linalg.pinv(fb).T, 0.0)
    rng = np.random.default_rng(seed)
    angles = np.exp(2j * np.pi * rng.random(mag.shape))
    length = hop * (frames.shape[0] - 1)
    for _ in range(iters):
        x = istft(mag * angles, n_fft, hop, length)
        spec = stft(x, n_fft, hop)
        angles = spec / np.maximum(np.abs(spec), 1e-12)
    return Waveform(istft(mag * angles, n_fft, hop, length), sample_rate)


# ---------------------------------------------------------------------------
# Feature cache container
# ---------------------------------------------------------------------------

CACHE_MAGIC = b"VFFC"
CACHE_VERSION = 1
_HEADER = struct.Struct("<4sBIIIII")


@dataclass
class UtteranceFeatures:
    phonemes: np.ndarray  # (N,) int
    durations: np.ndarray  # (N,) int, frames
    mel: np.ndarray  # (T, n_mels)
    f0: np.ndarray  # (T,)
    voiced: np.ndarray  # (T,) bool
    energy: np.ndarray  # (T,)
    sample_rate: int
    hop: int

    @property
    def n_frames(self) -> int:
        return self.mel.shape[0]


def write_feature_cache(path: str | Path, feats: UtteranceFeatures) -> None:
    T, n_mels = feats.mel.shape
    N = len(feats.phonemes)
    if not (len(feats.f0) == len(feats.voiced) == len(feats.energy) == T):
        raise ValueError("feature streams have unequal frame counts")
    if len(feats.durations) != N:
        raise ValueError("durations and phonemes differ in length")
    parts = [
        _HEADER.pack(CACHE_MAGIC, CACHE_VERSION, T, n_mels, N, feats.sample_rate, feats.hop),
        np.ascontiguousarray(feats.mel, dtype="<f8").tobytes(),
        np.ascontiguousarray(feats.f0, dtype="<f8").tobytes(),
        np.ascontiguousarray(feats.voiced, dtype="u1").tobytes(),
        np.ascontiguousarray(feats.energy, dtype="<f8").tobytes(),
        np.ascontiguousarray(feats.durations, dtype="<i4").tobytes(),
        np.ascontiguousarray(feats.phonemes, dtype="<i4").tobytes(),
    ]
    Path(path).write_bytes(b"".join(parts))


def read_feature_cache(path: str | Path) -> UtteranceFeatures:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated feature cache header")
    magic, version, T, n_mels, N, sr, hop = _HEADER.unpack_from(raw)
    if magic != CACHE_MAGIC:
        raise ValueError(f"{path}: not a feature cache file")
    if version != CACHE_VERSION:
        raise ValueError(f"{path}: feature cache version {version}, expected {CACHE_VERSION}")
    layout = [("mel", "<f8", T * n_mels), ("f0", "<f8", T), ("voiced", "u1", T),
              ("energy", "<f8", T), ("durations", "<i4", N), ("phonemes", "<i4", N)]
    need = _HEADER.size + sum(np.dtype(d).itemsize * n for _, d, n in layout)
    if len(raw) != need:
        raise ValueError(f"{path}: expected {need} bytes, found {len(raw)}")
    offset = _HEADER.size
    arrays = {}
    for name, dtype, count in layout:
        arrays[name] = np.frombuffer(raw, dtype=dtype, count=count, offset=offset).copy()
        offset += np.dtype(dtype).itemsize * count
    return UtteranceFeatures(
        phonemes=arrays["phonemes"].astype(np.int64),
        durations=arrays["durations"].astype(np.int64),
        mel=arrays["mel"].astype(np.float64).reshape(T, n_mels),
        f0=arrays["f0"].astype(np.float64),
        voiced=arrays["voiced"].astype(bool),
        energy=arrays["energy"].astype(np.float64),
        sample_rate=sr,
        hop=hop,
    )
