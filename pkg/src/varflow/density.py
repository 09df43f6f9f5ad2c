"""Unconditional density fitting with a flow stack (1-D samples, fixed conditioning)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .flows import FlowStack
from .numerics.tensor import Tensor, backward, no_grad
from .training import AdamState, clip_grad_norm, optimizer_step


@dataclass
class DensityFit:
    flow: FlowStack
    seq_len: int
    history: list[float]

    def _shape(self, x: np.ndarray):
        x = np.asarray(x, dtype=np.float64).ravel()
        n = len(x)
        rows = -(-n // self.seq_len)
        padded = np.zeros(rows * self.seq_len)
        padded[:n] = x
        mask = np.zeros(rows * self.seq_len, dtype=bool)
        mask[:n] = True
        shape = (rows, self.seq_len)
        return padded.reshape(shape), mask.reshape(shape), np.zeros(shape + (self.flow.d_hidden,))

    def nll(self, x: np.ndarray) -> float:
        """Mean negative log-density (nats) of the samples ``x``."""
        xs, m, h = self._shape(x)
        with no_grad():
            return self.flow.nll(xs, h, m).item()


def fit_density(samples: np.ndarray, steps: int = 400, seq_len: int = 32, batch: int = 16,
                lr: float = 1e-2, n_layers: int = 4, bins: int = 10, hidden: int = 16,
                seed: int = 0) -> DensityFit:
    """Maximum-likelihood fit of a flow to i.i.d. scalar samples.

    Samples are laid out as sequences of ``seq_len`` frames with an all-zero
    hidden sequence, so the time-squeezed stack models pairs of draws.
    """
    rng = np.random.default_rng(seed)
    flow = FlowStack(d_hidden=1, n_layers=n_layers, bins=bins, rng=rng, conv_hidden=hidden)
    params = flow.parameters()
    state = AdamState.zeros(params)
    samples = np.asarray(samples, dtype=np.float64).ravel()
    h = np.zeros((batch, seq_len, 1))
    history = []
    for _ in range(steps):
        x = rng.choice(samples, size=(batch, seq_len))
        flow.zero_grad()
        loss = flow.nll(Tensor(x), h)
        backward(loss)
        clip_grad_norm(params, 5.0)
        optimizer_step(params, [p.grad for p in params], state, lr)
        history.append(loss.item())
    return DensityFit(flow, seq_len, history)
