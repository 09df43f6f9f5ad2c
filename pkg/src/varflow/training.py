"""Objective, optimizer, training loop and checkpoints."""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig, from_dict
from .data import Dataset
from .model import AcousticModel, Batch, NormStats
from .numerics import tensor as T
from .numerics.tensor import Tensor, backward

log = logging.getLogger(__name__)


class TrainingDivergence(FloatingPointError):
    def __init__(self, component: str, step: int | None = None):
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"non-finite {component} loss{where}")
        self.component = component
        self.step = step


# ---------------------------------------------------------------------------
# Objective
# ---------------------------------------------------------------------------

@dataclass
class LossBreakdown:
    melspec: float
    duration: float
    pitch: float
    energy: float
    total: float
    alpha: float

    def recompose(self) -> float:
        return self.melspec + self.duration + self.alpha * self.pitch + self.alpha * self.energy


def total_loss(preds: dict, batch: Batch, alpha: float) -> tuple[LossBreakdown, Tensor]:
    """Mel MSE + log-duration MSE + alpha * (pitch term + energy term)."""
    mel_mask = np.broadcast_to(batch.frame_mask[..., None], batch.mel.shape)
    mel = T.masked_mean((preds["mel"] - batch.mel) ** 2, mel_mask)
    log_target = np.where(batch.phoneme_mask, np.log(np.maximum(batch.durations, 1)), 0.0)
    dur = T.masked_mean((preds["log_durations"] - log_target) ** 2, batch.phoneme_mask)
    pitch, energy = preds["pitch_loss"], preds["energy_loss"]
    total = mel + dur + pitch * alpha + energy * alpha
    parts = {"melspec": mel, "duration": dur, "pitch": pitch, "energy": energy}
    for name, value in parts.items():
        if not np.isfinite(value.item()):
            raise TrainingDivergence(name)
    br = LossBreakdown(mel.item(), dur.item(), pitch.item(), energy.item(), total.item(), alpha)
    return br, total


# ---------------------------------------------------------------------------
# Schedule and optimizer
# ---------------------------------------------------------------------------

def noam_lr(step: int, d_model: int, warmup: int, scale: float = 1.0) -> float:
    if step < 1:
        raise ValueError("noam_lr is defined for step >= 1")
    return scale * d_model**-0.5 * min(step**-0.5, step * warmup**-1.5)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros(cls, params) -> AdamState:
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def optimizer_step(params, grads, state: AdamState, lr: float, betas=(0.9, 0.98),
                   weight_decay: float = 0.0, eps: float = 1e-9) -> None:
    """AdamW: decoupled decay on the weights, then the bias-corrected Adam step."""
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = np.zeros_like(p.data) if g is None else g
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def clip_grad_norm(params, max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"VFCK"
CKPT_VERSION = 1


def _pack_array(name: str, arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    key = name.encode()
    head = struct.pack("<H", len(key)) + key + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def save_checkpoint(path: str | Path, trainer: Trainer) -> None:
    params = trainer.model.named_parameters()
    names, arrays = [], []
    for (name, p), m, v in zip(params, trainer.opt_state.m, trainer.opt_state.v):
        names.append(name)
        arrays += [(f"param/{name}", p.data), (f"adam_m/{name}", m), (f"adam_v/{name}", v)]
    meta = {
        "config": trainer.cfg.to_dict(),
        "stats": trainer.model.stats.to_dict() if trainer.model.stats else None,
        "n_mels": trainer.model.n_mels,
        "step": trainer.step,
        "adam_t": trainer.opt_state.t,
        "data_rng": trainer.data_rng.bit_generator.state,
        "dropout_rng": trainer.dropout_rng.bit_generator.state,
        "params": names,
    }
    blob = json.dumps(meta, sort_keys=True).encode()
    parts = [CKPT_MAGIC, struct.pack("<BI", CKPT_VERSION, len(blob)), blob,
             struct.pack("<I", len(arrays))]
    parts += [_pack_array(n, a) for n, a in arrays]
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


class CheckpointError(ValueError):
    pass


def _read(raw: bytes, offset: int, fmt: str):
    size = struct.calcsize(fmt)
    if offset + size > len(raw):
        raise CheckpointError("checkpoint is truncated")
    return struct.unpack_from(fmt, raw, offset), offset + size


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (version, n_meta), off = _read(raw, 4, "<BI")
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    if off + n_meta > len(raw):
        raise CheckpointError("checkpoint is truncated")
    meta = json.loads(raw[off : off + n_meta])
    off += n_meta
    (count,), off = _read(raw, off, "<I")
    arrays = {}
    for _ in range(count):
        (klen,), off = _read(raw, off, "<H")
        key = raw[off : off + klen].decode()
        off += klen
        (ndim,), off = _read(raw, off, "<B")
        shape, off = _read(raw, off, f"<{ndim}I")
        nbytes = 8 * int(np.prod(shape))
        if off + nbytes > len(raw):
            raise CheckpointError("checkpoint is truncated")
        arrays[key] = np.frombuffer(raw, "<f8", int(np.prod(shape)), off).reshape(shape).copy()
        off += nbytes
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    return meta, arrays


def load_model(path: str | Path) -> tuple[AcousticModel, RunConfig]:
    """Model (eval mode) plus its run config from a checkpoint."""
    meta, arrays = read_checkpoint(path)
    cfg = from_dict(meta["config"])
    model = AcousticModel(cfg.model, meta["n_mels"], seed=cfg.train.seed)
    _restore_params(model, meta, arrays)
    model.stats = NormStats(**meta["stats"]) if meta["stats"] else None
    return model.eval(), cfg


def _restore_params(model: AcousticModel, meta: dict, arrays: dict) -> None:
    named = dict(model.named_parameters())
    if sorted(named) != sorted(meta["params"]):
        raise CheckpointError("checkpoint parameters do not match the configured architecture")
    for name, p in named.items():
        src = arrays[f"param/{name}"]
        if src.shape != p.shape:
            raise CheckpointError(f"shape mismatch for {name}: {src.shape} vs {p.shape}")
        p.data[...] = src


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

class Trainer:
    def __init__(self, cfg: RunConfig, dataset: Dataset):
        self.cfg = cfg
        self.dataset = dataset
        self.model = AcousticModel(cfg.model, dataset.n_mels, seed=cfg.train.seed)
        self.model.stats = dataset.stats
        self.params = self.model.parameters()
        self.opt_state = AdamState.zeros(self.params)
        data_seed, drop_seed = np.random.SeedSequence(cfg.train.seed).spawn(2)
        self.data_rng = np.random.default_rng(data_seed)
        self.dropout_rng = np.random.default_rng(drop_seed)
        self.step = 0

    @classmethod
    def resume(cls, path: str | Path, dataset: Dataset) -> Trainer:
        meta, arrays = read_checkpoint(path)
        trainer = cls(from_dict(meta["config"]), dataset)
        _restore_params(trainer.model, meta, arrays)
        for (name, _), m, v in zip(trainer.model.named_parameters(), trainer.opt_state.m,
                                   trainer.opt_state.v):
            m[...] = arrays[f"adam_m/{name}"]
            v[...] = arrays[f"adam_v/{name}"]
        trainer.opt_state.t = meta["adam_t"]
        trainer.step = meta["step"]
        trainer.data_rng.bit_generator.state = meta["data_rng"]
        trainer.dropout_rng.bit_generator.state = meta["dropout_rng"]
        if meta["stats"]:
            trainer.model.stats = NormStats(**meta["stats"])
        return trainer

    def next_batch(self) -> Batch:
        n = len(self.dataset)
        k = min(self.cfg.train.batch_size, n)
        return self.dataset.batch(self.data_rng.permutation(n)[:k])

    def train_step(self) -> dict:
        tc = self.cfg.train
        self.model.train()
        batch = self.next_batch()
        self.model.zero_grad()
        preds = self.model.forward(batch, self.dropout_rng)
        try:
            br, total = total_loss(preds, batch, tc.alpha)
        except TrainingDivergence as e:
            raise TrainingDivergence(e.component, self.step + 1) from None
        backward(total)
        grad_norm = clip_grad_norm(self.params, tc.grad_clip)
        self.step += 1
        lr = noam_lr(self.step, self.cfg.model.d_model, tc.warmup_steps, tc.lr_scale)
        optimizer_step(self.params, [p.grad for p in self.params], self.opt_state, lr,
                       tc.betas, tc.weight_decay, tc.adam_eps)
        return {"step": self.step, "lr": lr, **asdict(br), "grad_norm": grad_norm}

    def run(self, out_dir: str | Path | None = None, max_steps: int | None = None,
            log_every: int = 100) -> list[dict]:
        """Train until ``max_steps``; append metrics and write checkpoints under ``out_dir``."""
        tc = self.cfg.train
        max_steps = tc.max_steps if max_steps is None else max_steps
        out = Path(out_dir) if out_dir is not None else None
        metrics_f = None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            metrics_f = open(out / "metrics.jsonl", "a")
        records = []
        try:
            while self.step < max_steps:
                rec = self.train_step()
                records.append(rec)
                if metrics_f:
                    metrics_f.write(json.dumps(rec, sort_keys=True) + "\n")
                if rec["step"] % log_every == 0:
                    log.info("step %d total %.4f mel %.4f pitch %.4f energy %.4f", rec["step"],
                             rec["total"], rec["melspec"], rec["pitch"], rec["energy"])
                if out is not None and self.step % tc.checkpoint_every == 0:
                    self.save(out / f"ckpt_{self.step:07d}.bin")
                    self.save(out / "latest.bin")
        finally:
            if metrics_f:
                metrics_f.close()
        if out is not None and self.step % tc.checkpoint_every:
            self.save(out / "latest.bin")
        return records

    def save(self, path: str | Path) -> None:
        save_checkpoint(path, self)


def train(cfg: RunConfig, dataset: Dataset, out_dir: str | Path | None = None,
          resume_from: str | Path | None = None, max_steps: int | None = None) -> Trainer:
    trainer = Trainer.resume(resume_from, dataset) if resume_from else Trainer(cfg, dataset)
    trainer.run(out_dir, max_steps)
    return trainer
