"""Text-to-mel acoustic model with flow-based (or MSE) pitch and energy modeling."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import ModelConfig
from .flows import LOG_2PI, FlowStack
from .numerics import nn
from .numerics import tensor as T
from .numerics.tensor import Tensor, as_tensor, no_grad


class ModelNotReady(RuntimeError):
    """Synthesis was requested from a model without normalization statistics."""


@dataclass
class NormStats:
    pitch_mean: float
    pitch_std: float
    energy_mean: float
    energy_std: float

    def to_dict(self) -> dict:
        return dict(vars(self))


@dataclass
class Batch:
    phonemes: np.ndarray  # (B, N) int
    phoneme_mask: np.ndarray  # (B, N) bool
    durations: np.ndarray  # (B, N) int
    mel: np.ndarray  # (B, T, M)
    pitch: np.ndarray  # (B, T) standardized log-f0
    energy: np.ndarray  # (B, T) standardized energy
    frame_mask: np.ndarray  # (B, T) bool
    ids: list[str] = field(default_factory=list)


def frame_index(durations: np.ndarray, n_frames: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Frame-to-phoneme index and frame mask for a (B, N) duration matrix."""
    durations = np.asarray(durations, dtype=np.int64)
    lengths = durations.sum(axis=1)
    T_ = int(lengths.max()) if n_frames is None else n_frames
    idx = np.zeros((durations.shape[0], T_), dtype=np.int64)
    for b, row in enumerate(durations):
        rep = np.repeat(np.arange(len(row)), np.maximum(row, 0))
        idx[b, : len(rep)] = rep
    mask = np.arange(T_)[None, :] < lengths[:, None]
    return idx, mask


def length_regulate(h, durations: np.ndarray, phoneme_mask: np.ndarray | None = None,
                    n_frames: int | None = None) -> tuple[Tensor, np.ndarray]:
    """Repeat each phoneme row ``durations[i]`` times. ``h``: (B, N, d) or (B, N)."""
    h = as_tensor(h)
    durations = np.asarray(durations, dtype=np.int64)
    if phoneme_mask is None:
        phoneme_mask = np.ones(durations.shape, dtype=bool)
    if np.any(durations[phoneme_mask] < 1):
        raise ValueError("every real phoneme needs a duration of at least 1 frame")
    idx, mask = frame_index(durations * phoneme_mask, n_frames)
    if h.ndim == 3:
        full = np.broadcast_to(idx[..., None], idx.shape + (h.shape[2],))
        out = T.gather(h, full, axis=1) * mask[..., None].astype(T.DTYPE)
    else:
        out = T.gather(h, idx, axis=1) * mask.astype(T.DTYPE)
    return out, mask


def phoneme_average_batch(values: np.ndarray, durations: np.ndarray,
                          phoneme_mask: np.ndarray) -> np.ndarray:
    durations = np.where(phoneme_mask, durations, 0)
    out = np.zeros(durations.shape)
    for b in range(durations.shape[0]):
        ends = np.cumsum(durations[b])
        for i, d in enumerate(durations[b]):
            if d > 0:
                out[b, i] = values[b, ends[i] - d : ends[i]].mean()
    return out


class VariancePredictor(nn.Module):
    """Two conv/ReLU/LayerNorm stages and a scalar head per position."""

    def __init__(self, d: int, kernel: int, p_drop: float, rng: np.random.Generator):
        self.conv1 = nn.Conv1d(d, d, kernel, rng)
        self.norm1 = nn.LayerNorm(d)
        self.conv2 = nn.Conv1d(d, d, kernel, rng)
        self.norm2 = nn.LayerNorm(d)
        self.head = nn.Linear(d, 1, rng)
        self.p_drop = p_drop

    def forward(self, h, mask, rng=None, drop=False) -> Tensor:
        m = mask[..., None].astype(T.DTYPE)
        a = nn.dropout(self.norm1(self.conv1(h * m).relu()), self.p_drop, rng, drop) * m
        a = nn.dropout(self.norm2(self.conv2(a).relu()), self.p_drop, rng, drop) * m
        return self.head(a)[..., 0] * mask.astype(T.DTYPE)


@dataclass
class Adapted:
    h: Tensor  # decoder input, (B, T, d)
    pitch_loss: Tensor
    energy_loss: Tensor
    z_pitch: Tensor | None = None
    z_energy: Tensor | None = None


@dataclass
class Synthesis:
    mel: np.ndarray
    durations: np.ndarray
    x_pitch: np.ndarray  # standardized log-f0 per frame provided to the decoder path
    x_energy: np.ndarray
    x_pitch_sampled: np.ndarray  # before any control transform
    z_pitch: np.ndarray | None
    z_energy: np.ndarray | None
    fed_pitch: np.ndarray  # what reached the pitch projection
    fed_energy: np.ndarray
    mode: str

    def pitch_hz(self, stats: NormStats, x: np.ndarray | None = None) -> np.ndarray:
        x = self.x_pitch if x is None else x
        return np.exp(x * stats.pitch_std + stats.pitch_mean)


class AcousticModel(nn.Module):
    def __init__(self, cfg: ModelConfig, n_mels: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        d = cfg.d_model
        self.cfg = cfg
        self.n_mels = n_mels
        self.stats: NormStats | None = None
        self.embed = nn.Embedding(cfg.vocab_size, d, rng)
        self.encoder = [
            nn.FFTBlock(d, cfg.n_heads, cfg.ffn_dim, cfg.conv_kernel, cfg.dropout, rng)
            for _ in range(cfg.encoder_layers)
        ]
        self.duration_predictor = VariancePredictor(d, cfg.conv_kernel, cfg.dropout, rng)
        if cfg.variance_mode == "mse":
            self.pitch_model = VariancePredictor(d, cfg.conv_kernel, cfg.dropout, rng)
            self.energy_model = VariancePredictor(d, cfg.conv_kernel, cfg.dropout, rng)
        else:
            flow_kw = dict(n_layers=cfg.flow_layers, bins=cfg.flow_bins, bound=cfg.flow_bound,
                           min_bin=cfg.flow_min_bin, min_derivative=cfg.flow_min_derivative,
                           kernel=cfg.flow_kernel)
            self.pitch_model = FlowStack(d, rng=rng, **flow_kw)
            self.energy_model = FlowStack(d, rng=rng, **flow_kw)
        self.pitch_proj = nn.Linear(1, d, rng)
        self.energy_proj = nn.Linear(1, d, rng)
        self.decoder = [
            nn.FFTBlock(d, cfg.n_heads, cfg.ffn_dim, cfg.conv_kernel, cfg.dropout, rng)
            for _ in range(cfg.decoder_layers)
        ]
        self.mel_out = nn.Linear(d, n_mels, rng)

    @property
    def mode(self) -> str:
        return self.cfg.variance_mode

    # -- pieces ---------------------------------------------------------------
    def encode(self, phonemes: np.ndarray, mask: np.ndarray, rng=None, drop: bool = False) -> Tensor:
        phonemes = np.atleast_2d(np.asarray(phonemes))
        if phonemes.shape[1] == 0:
            raise ValueError("cannot encode an empty phoneme sequence")
        x = self.embed(phonemes) + nn.sinusoid_positions(phonemes.shape[1], self.cfg.d_model)
        x = x * mask[..., None].astype(T.DTYPE)
        for block in self.encoder:
            x = block(x, mask, rng, drop)
        return x

    def predict_durations(self, h: Tensor, mask: np.ndarray, rng=None, drop: bool = False) -> Tensor:
        """Log-duration (frames) per phoneme."""
        return self.duration_predictor(h, mask, rng, drop)

    @staticmethod
    def durations_from_log(log_d: np.ndarray) -> np.ndarray:
        return np.maximum(1, np.floor(np.exp(log_d) + 0.5)).astype(np.int64)

    def decode(self, h: Tensor, mask: np.ndarray, rng=None, drop: bool = False) -> Tensor:
        x = h + nn.sinusoid_positions(h.shape[1], self.cfg.d_model) * mask[..., None]
        for block in self.decoder:
            x = block(x, mask, rng, drop)
        return self.mel_out(x) * mask[..., None].astype(T.DTYPE)

    def _project(self, h_frame: Tensor, frame_mask, pitch_feed, energy_feed) -> Tensor:
        fm = frame_mask[..., None].astype(T.DTYPE)
        p = self.pitch_proj(as_tensor(pitch_feed)[..., None]) * fm
        e = self.energy_proj(as_tensor(energy_feed)[..., None]) * fm
        return h_frame + p + e

    def _condition(self, h_ph, ph_mask, h_fr, fr_mask):
        if self.cfg.granularity == "phoneme":
            return h_ph, ph_mask
        return h_fr, fr_mask

    def _to_frames(self, v, durations, ph_mask, n_frames):
        if self.cfg.granularity == "phoneme":
            return length_regulate(v, durations, ph_mask, n_frames)[0]
        return v

    # -- training path -------------------------------------------------------
    def variance_adapt(self, h_ph: Tensor, ph_mask, h_fr: Tensor, fr_mask, durations,
                       x_pitch, x_energy, rng=None, drop: bool = False,
                       latent_override: dict | None = None) -> Adapted:
        """Model ground-truth variance and build the decoder input.

        ``latent_override`` maps ``"pitch"``/``"energy"`` to tensors that replace the
        flow latent before projection; in reversed and mse modes the latent never
        reaches the decoder, so overrides have no effect there.
        """
        x_pitch, x_energy = np.asarray(x_pitch), np.asarray(x_energy)
        if x_pitch.shape != fr_mask.shape or x_energy.shape != fr_mask.shape:
            raise ValueError(f"variance length {x_pitch.shape} != frames {fr_mask.shape}")
        if h_fr.shape[:2] != fr_mask.shape:
            raise ValueError("hidden sequence and frame mask lengths differ")
        cond, cmask = self._condition(h_ph, ph_mask, h_fr, fr_mask)
        targets = {"pitch": x_pitch, "energy": x_energy}
        if self.cfg.granularity == "phoneme":
            targets = {k: phoneme_average_batch(v, durations, ph_mask) for k, v in targets.items()}
        n_frames = fr_mask.shape[1]
        losses, feeds, latents = {}, {}, {}
        override = latent_override or {}
        for name, model in (("pitch", self.pitch_model), ("energy", self.energy_model)):
            x = targets[name] * cmask
            if self.mode == "mse":
                pred = model(cond, cmask, rng, drop)
                losses[name] = T.masked_mean((pred - x) ** 2, cmask)
                feeds[name] = x
                latents[name] = None
                continue
            z, logdet = model.forward(x, cond, cmask)
            n = max(int(cmask.sum()), 1)
            fm = cmask.astype(T.DTYPE)
            losses[name] = (T.tsum(z * z * fm) * 0.5 + 0.5 * LOG_2PI * cmask.sum()
                            - T.tsum(logdet)) * (1.0 / n)
            latents[name] = z
            if self.mode == "flow":
                feeds[name] = override.get(name, z)
            else:
                feeds[name] = x
        pf = self._to_frames(feeds["pitch"], durations, ph_mask, n_frames)
        ef = self._to_frames(feeds["energy"], durations, ph_mask, n_frames)
        return Adapted(self._project(h_fr, fr_mask, pf, ef), losses["pitch"], losses["energy"],
                       latents["pitch"], latents["energy"])

    def forward(self, batch: Batch, rng=None, latent_override=None) -> dict:
        drop = self.training
        h_ph = self.encode(batch.phonemes, batch.phoneme_mask, rng, drop)
        log_d = self.predict_durations(h_ph, batch.phoneme_mask, rng, drop)
        h_fr, fr_mask = length_regulate(h_ph, batch.durations, batch.phoneme_mask,
                                        batch.frame_mask.shape[1])
        if not np.array_equal(fr_mask, batch.frame_mask):
            raise ValueError("durations do not sum to the frame counts of the batch")
        adapted = self.variance_adapt(h_ph, batch.phoneme_mask, h_fr, fr_mask, batch.durations,
                                      batch.pitch, batch.energy, rng, drop, latent_override)
        mel = self.decode(adapted.h, fr_mask, rng, drop)
        return {"mel": mel, "log_durations": log_d, "pitch_loss": adapted.pitch_loss,
                "energy_loss": adapted.energy_loss, "adapted": adapted, "h_frame": h_fr}

    # -- inference -----------------------------------------------------------
    def synthesize(self, phonemes, sigma: float = 0.333, dropout_at_inference: bool = False,
                   seed: int = 0, pitch_transform=None, energy_transform=None,
                   durations: np.ndarray | None = None) -> Synthesis:
        """Generate a mel for one phoneme sequence.

        ``pitch_transform``/``energy_transform`` act on the standardized raw
        variance after it has been recovered from the latent; in flow mode the
        transformed value is mapped forward through the flow again before it
        reaches the decoder.
        """
        if self.stats is None:
            raise ModelNotReady("model has no normalization statistics; train or load a checkpoint")
        if sigma < 0:
            raise ValueError(f"sigma must be non-negative, got {sigma}")
        phonemes = np.asarray(phonemes, dtype=np.int64).reshape(1, -1)
        ph_mask = np.ones(phonemes.shape, dtype=bool)
        drop_rng, p_rng, e_rng = (np.random.default_rng(s)
                                  for s in np.random.SeedSequence(seed).spawn(3))
        with no_grad():
            h_ph = self.encode(phonemes, ph_mask, drop_rng, dropout_at_inference)
            if durations is None:
                log_d = self.predict_durations(h_ph, ph_mask).data
                durations = self.durations_from_log(log_d)
            durations = np.asarray(durations, dtype=np.int64).reshape(1, -1)
            h_fr, fr_mask = length_regulate(h_ph, durations, ph_mask)
            cond, cmask = self._condition(h_ph, ph_mask, h_fr, fr_mask)
            out = {}
            for name, model, rng, transform in (
                ("pitch", self.pitch_model, p_rng, pitch_transform),
                ("energy", self.energy_model, e_rng, energy_transform),
            ):
                if self.mode == "mse":
                    z = None
                    x = model(cond, cmask).data
                else:
                    z, x = model.sample(cond, cmask, sigma, rng)
                    z, x = z.data, x.data
                feed_x = x if transform is None else transform(x)
                if self.mode == "flow":
                    feed = z if transform is None else model.forward(feed_x, cond, cmask)[0].data
                else:
                    feed = feed_x
                out[name] = (x, z, feed_x, feed)
            n_frames = fr_mask.shape[1]

            def frames(v):
                return self._to_frames(Tensor(v), durations, ph_mask, n_frames).data

            h = self._project(h_fr, fr_mask, frames(out["pitch"][3]), frames(out["energy"][3]))
            mel = self.decode(h, fr_mask).data[0]
        px, pz, pfx, pfeed = out["pitch"]
        ex, ez, efx, efeed = out["energy"]
        return Synthesis(
            mel=mel,
            durations=durations[0],
            x_pitch=frames(pfx)[0],
            x_energy=frames(efx)[0],
            x_pitch_sampled=frames(px)[0],
            z_pitch=None if pz is None else pz[0],
            z_energy=None if ez is None else ez[0],
            fed_pitch=frames(pfeed)[0],
            fed_energy=frames(efeed)[0],
            mode=self.mode,
        )
