"""Pitch control through the flow inverse, FFE evaluation, diversity and latent diagnostics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import signal as S
from .config import EvalConfig, SignalConfig
from .data import Dataset
from .model import (AcousticModel, ModelNotReady, NormStats, Synthesis, length_regulate,
                    phoneme_average_batch)
from .numerics.tensor import no_grad

SEMITONE = math.log(2.0) / 12.0


def shift_pitch(x, lam: float, domain: str = "log", std: float | None = None):
    """Shift a pitch sequence by ``lam`` semitones.

    ``domain`` is ``"hz"`` (multiplicative), ``"log"`` (additive) or
    ``"standardized"`` (additive, divided by the log-f0 std, which is required).
    """
    x = np.asarray(x, dtype=np.float64)
    if domain == "hz":
        return x * 2.0 ** (lam / 12.0)
    if domain == "log":
        return x + lam * SEMITONE
    if domain == "standardized":
        if std is None or std <= 0:
            raise ValueError("standardized shift needs a positive log-f0 std")
        return x + lam * SEMITONE / std
    raise ValueError(f"domain must be hz|log|standardized, got {domain!r}")


def scale_energy(x, factor: float, stats: NormStats):
    """Multiply raw energy by ``factor`` and return it re-standardized."""
    raw = np.asarray(x) * stats.energy_std + stats.energy_mean
    return (raw * factor - stats.energy_mean) / stats.energy_std


def controlled_synthesize(model: AcousticModel, phonemes, lam: float, sigma: float = 0.333,
                          seed: int = 0, energy_factor: float = 1.0,
                          dropout_at_inference: bool = False) -> Synthesis:
    """Sample, pull the pitch back to raw space, shift it, and push it forward again.

    In flow mode the decoder sees the latent of the shifted pitch; in reversed
    and mse modes it sees the shifted pitch itself. ``Synthesis.mode`` records which.
    """
    stats = model.stats
    if stats is None:
        raise ModelNotReady("model has no normalization statistics")
    energy_tf = None
    if energy_factor != 1.0:
        energy_tf = lambda x: scale_energy(x, energy_factor, stats)  # noqa: E731
    return model.synthesize(
        phonemes, sigma=sigma, seed=seed, dropout_at_inference=dropout_at_inference,
        pitch_transform=lambda x: shift_pitch(x, lam, "standardized", stats.pitch_std),
        energy_transform=energy_tf,
    )


# ---------------------------------------------------------------------------
# FFE
# ---------------------------------------------------------------------------

@dataclass
class FfeReport:
    ffe_percent: float
    voicing_error_frames: int
    gross_pitch_error_frames: int
    total_frames: int


def compute_ffe(ref: S.PitchContour, est: S.PitchContour, threshold: float = 0.2) -> FfeReport:
    rv, ev = np.asarray(ref.voiced, bool), np.asarray(est.voiced, bool)
    if rv.shape != ev.shape or np.shape(ref.f0) != np.shape(est.f0) or rv.shape != np.shape(ref.f0):
        raise ValueError(f"contour lengths differ: {np.shape(ref.f0)} vs {np.shape(est.f0)}")
    n = rv.size
    if n == 0:
        raise ValueError("empty contours")
    voicing = int(np.sum(rv != ev))
    both = rv & ev
    rf = np.asarray(ref.f0, dtype=np.float64)
    dev = np.abs(np.asarray(est.f0, dtype=np.float64)[both] - rf[both]) / rf[both]
    gross = int(np.sum(dev > threshold))
    return FfeReport(100.0 * (voicing + gross) / n, voicing, gross, n)


def compute_ffe_naive(ref: S.PitchContour, est: S.PitchContour, threshold: float = 0.2) -> float:
    errors = 0
    for t in range(len(ref.f0)):
        if bool(ref.voiced[t]) != bool(est.voiced[t]):
            errors += 1
        elif ref.voiced[t] and abs(est.f0[t] - ref.f0[t]) / ref.f0[t] > threshold:
            errors += 1
    return 100.0 * errors / len(ref.f0)


def _mel_pitch(mel: np.ndarray, sig: SignalConfig, ev: EvalConfig) -> S.PitchContour:
    return S.mel_dominant_f0(mel, sig.sample_rate, sig.fmin, sig.fmax, ev.search_lo,
                             ev.search_hi, ev.voicing_floor)


def _median_voiced(c: S.PitchContour) -> float:
    return float(np.median(c.f0[c.voiced])) if c.voiced.any() else float("nan")


@dataclass
class ResponsivenessRow:
    lam: float
    ffe_percent: float
    frequency_ratio: float  # median dominant frequency vs. the unshifted synthesis
    target_ratio: float
    frames: int


@dataclass
class ResponsivenessTable:
    rows: list[ResponsivenessRow]
    mode: str

    def row(self, lam: float) -> ResponsivenessRow:
        return next(r for r in self.rows if r.lam == lam)

    def format(self) -> str:
        lams = [r.lam for r in self.rows]
        head = "| model | " + " | ".join(f"λ={lam:+g}" for lam in lams) + " |"
        rule = "|---|" + "---|" * len(lams)
        ffe = f"| {self.mode} FFE (%) | " + " | ".join(f"{r.ffe_percent:.2f}" for r in self.rows) + " |"
        ratio = "| freq. ratio (target) | " + " | ".join(
            f"{r.frequency_ratio:.3f} ({r.target_ratio:.3f})" for r in self.rows) + " |"
        return "\n".join([head, rule, ffe, ratio])

    def to_dict(self) -> dict:
        return {"mode": self.mode, "rows": [vars(r) for r in self.rows]}


def evaluate_responsiveness(model: AcousticModel, texts, sig: SignalConfig, ev: EvalConfig,
                            lambdas=None, sigma: float = 0.333, seed: int = 0) -> ResponsivenessTable:
    """FFE between the pitch handed to the decoder and the pitch read back off the mel.

    Frames from all ``texts`` are pooled per λ. Every synthesis of one text
    shares a seed so that λ is the only difference between them.
    """
    lambdas = ev.lambdas if lambdas is None else tuple(float(v) for v in lambdas)
    stats = model.stats
    base = []
    for i, p in enumerate(texts):
        syn = controlled_synthesize(model, p, 0.0, sigma, seed + i)
        base.append(_median_voiced(_mel_pitch(syn.mel, sig, ev)))
    rows = []
    for lam in lambdas:
        refs, ests, ratios = [], [], []
        for i, p in enumerate(texts):
            syn = controlled_synthesize(model, p, lam, sigma, seed + i)
            ref_hz = syn.pitch_hz(stats)
            refs.append(S.PitchContour(ref_hz, np.ones(ref_hz.shape, bool)))
            ests.append(_mel_pitch(syn.mel, sig, ev))
            ratios.append(_median_voiced(ests[-1]) / base[i])
        ref = S.PitchContour(np.concatenate([r.f0 for r in refs]),
                             np.concatenate([r.voiced for r in refs]))
        est = S.PitchContour(np.concatenate([e.f0 for e in ests]),
                             np.concatenate([e.voiced for e in ests]))
        rep = compute_ffe(ref, est, ev.gross_error)
        rows.append(ResponsivenessRow(lam, rep.ffe_percent, float(np.nanmedian(ratios)),
                                      2.0 ** (lam / 12.0), rep.total_frames))
    return ResponsivenessTable(rows, model.mode)


# ---------------------------------------------------------------------------
# Diversity
# ---------------------------------------------------------------------------

@dataclass
class DiversityResult:
    sigma: float
    contours: list[np.ndarray]  # extracted f0 per sample (Hz, 0 where unvoiced)
    provided: list[np.ndarray]  # f0 handed to the decoder (Hz)
    durations: list[np.ndarray]
    dispersion: float


def _dispersion(contours: list[np.ndarray]) -> float:
    n = min(len(c) for c in contours)
    stack = np.stack([c[:n] for c in contours])
    # std is shift invariant; centring on one sample keeps identical sets at exactly 0
    return float(np.mean(np.std(stack - stack[0], axis=0)))


def diversity_sample(model: AcousticModel, phonemes, sig: SignalConfig, ev: EvalConfig,
                     sigmas=(0.0, 0.667), n: int = 10, dropout_at_inference: bool = False,
                     seed: int = 0) -> list[DiversityResult]:
    """``n`` syntheses per σ; dispersion is the mean per-frame std of extracted f0.

    Samples of different lengths (possible with dropout at inference) are
    compared over their common prefix.
    """
    out = []
    for sigma in sigmas:
        contours, provided, durs = [], [], []
        for k in range(n):
            syn = model.synthesize(phonemes, sigma=sigma, seed=seed + k,
                                   dropout_at_inference=dropout_at_inference)
            contours.append(_mel_pitch(syn.mel, sig, ev).f0)
            provided.append(syn.pitch_hz(model.stats))
            durs.append(syn.durations)
        out.append(DiversityResult(float(sigma), contours, provided, durs, _dispersion(contours)))
    return out


def write_contours(path, results: list[DiversityResult]) -> None:
    """Columnar text: sigma, sample, frame, extracted_hz, provided_hz."""
    with open(path, "w") as f:
        f.write("sigma\tsample\tframe\textracted_hz\tprovided_hz\n")
        for r in results:
            for k, (c, p) in enumerate(zip(r.contours, r.provided)):
                for t in range(len(c)):
                    f.write(f"{r.sigma:g}\t{k}\t{t}\t{c[t]:.4f}\t{p[t]:.4f}\n")


def read_contours(path) -> dict[float, list[np.ndarray]]:
    data = np.genfromtxt(path, delimiter="\t", names=True)
    data = np.atleast_1d(data)
    out: dict[float, list[np.ndarray]] = {}
    for sigma in np.unique(data["sigma"]):
        rows = data[data["sigma"] == sigma]
        out[float(sigma)] = [rows["extracted_hz"][rows["sample"] == k] for k in np.unique(rows["sample"])]
    return out


# ---------------------------------------------------------------------------
# Latent diagnostic
# ---------------------------------------------------------------------------

@dataclass
class LatentReport:
    """Latent moments and dependence on the conditioning.

    ``corr_z_h``/``corr_x_h`` use the linear summary of h: the least-squares
    projection of h onto the variable, so the value is the largest correlation
    any affine scalar summary of h can reach. ``corr_*_norm`` use the
    per-position hidden norm, which LayerNorm makes nearly constant.
    """

    z_mean: float
    z_var: float
    corr_z_h: float
    corr_x_h: float
    corr_z_norm: float
    corr_x_norm: float
    frames: int
    extra: dict = field(default_factory=dict)


def _corr(a: np.ndarray, b: np.ndarray) -> float:
    if a.std() == 0 or b.std() == 0:
        return 0.0
    return float(np.corrcoef(a, b)[0, 1])


def linear_summary_corr(v: np.ndarray, h: np.ndarray) -> float:
    """Multiple correlation of ``v`` with the rows of ``h`` (affine least squares)."""
    design = np.column_stack([h, np.ones(len(h))])
    coef, *_ = np.linalg.lstsq(design, v, rcond=None)
    return _corr(v, design @ coef)


def latent_gaussianity_check(model: AcousticModel, dataset: Dataset, batch_size: int = 16,
                             variance: str = "pitch") -> LatentReport:
    """Map ground-truth variance to the latent and measure how much of h it still carries."""
    if model.mode == "mse":
        raise ValueError("latent diagnostic needs a flow-based model")
    flow = model.pitch_model if variance == "pitch" else model.energy_model
    was_training = model.training
    model.eval()
    zs, xs, hs = [], [], []
    try:
        with no_grad():
            for start in range(0, len(dataset), batch_size):
                b = dataset.batch(np.arange(start, min(start + batch_size, len(dataset))))
                h_ph = model.encode(b.phonemes, b.phoneme_mask)
                h_fr, fr_mask = length_regulate(h_ph, b.durations, b.phoneme_mask,
                                                b.frame_mask.shape[1])
                cond, cmask = model._condition(h_ph, b.phoneme_mask, h_fr, fr_mask)
                x = b.pitch if variance == "pitch" else b.energy
                if model.cfg.granularity == "phoneme":
                    x = phoneme_average_batch(x, b.durations, b.phoneme_mask)
                x = x * cmask
                z, _ = flow.forward(x, cond, cmask)
                zs.append(z.data[cmask])
                xs.append(x[cmask])
                hs.append(cond.data[cmask])
    finally:
        model.train(was_training)
    z, x, h = (np.concatenate(v) for v in (zs, xs, hs))
    hn = np.linalg.norm(h, axis=1)
    return LatentReport(float(z.mean()), float(z.var()), linear_summary_corr(z, h),
                        linear_summary_corr(x, h), _corr(z, hn), _corr(x, hn), int(z.size),
                        {"x_mean": float(x.mean()), "x_var": float(x.var())})
