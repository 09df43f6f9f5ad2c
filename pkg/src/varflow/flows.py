"""Conditional rational-quadratic spline flows over scalar-per-frame sequences.

A sequence ``x`` of shape (B, T) is squeezed in time into pairs
``(x[2t], x[2t+1])`` that form two channels. Coupling layers alternate which
channel they transform; the other channel, together with the pair's hidden
vectors, parameterizes a monotonic spline. Padded slots are zero and pass
through every layer unchanged, which keeps the likelihood exact for odd and
ragged lengths.
"""

from __future__ import annotations

import math

import numpy as np

from .numerics import nn
from .numerics import tensor as T
from .numerics.tensor import Tensor, as_tensor

LOG_2PI = math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# Rational-quadratic spline
# ---------------------------------------------------------------------------

def _check_finite(*raws) -> None:
    for r in raws:
        if not np.all(np.isfinite(as_tensor(r).data)):
            raise ValueError("spline parameters contain non-finite values")


def spline_knots(raw, bound: float, min_bin: float) -> tuple[Tensor, Tensor]:
    """Map unconstrained bin logits to knot positions on [-bound, bound].

    Every bin is at least ``min_bin`` wide and the bins sum to ``2 * bound``.
    Returns ``(knots, sizes)`` with shapes (..., K + 1) and (..., K).
    """
    raw = as_tensor(raw)
    K = raw.shape[-1]
    if K * min_bin >= 2 * bound:
        raise ValueError(f"{K} bins of min size {min_bin} do not fit in [-{bound}, {bound}]")
    sizes = T.softmax(raw, axis=-1) * (2 * bound - K * min_bin) + min_bin
    inner = T.cumsum(sizes, axis=-1)[..., :-1] - bound
    edge = np.full(raw.shape[:-1] + (1,), float(bound))
    knots = T.concat([Tensor(-edge), inner, Tensor(edge)], axis=-1)
    return knots, knots[..., 1:] - knots[..., :-1]


def spline_derivatives(raw, min_derivative: float) -> Tensor:
    """Interior knot slopes from ``K - 1`` raw values; boundary slopes fixed at 1.

    A zero raw value maps to slope exactly 1 so zero parameters give the identity.
    """
    raw = as_tensor(raw)
    shift = math.log(math.expm1(1.0 - min_derivative))
    inner = T.softplus(raw + shift) + min_derivative
    one = Tensor(np.ones(raw.shape[:-1] + (1,)))
    return T.concat([one, inner, one], axis=-1)


def _locate(knots: np.ndarray, v: np.ndarray) -> np.ndarray:
    K = knots.shape[-1] - 1
    idx = (v[..., None] >= knots[..., 1:-1]).sum(axis=-1)
    return np.clip(idx, 0, K - 1)[..., None]


def _pick(t: Tensor, idx: np.ndarray) -> Tensor:
    return T.gather(t, idx, axis=-1)[..., 0]


def rq_spline_forward(x, widths_raw, heights_raw, derivs_raw, bound: float = 5.0,
                      min_bin: float = 1e-3, min_derivative: float = 1e-3) -> tuple[Tensor, Tensor]:
    """Elementwise monotonic spline ``y = g(x)`` with ``log g'(x)``; identity outside the interval."""
    _check_finite(widths_raw, heights_raw, derivs_raw)
    x = as_tensor(x)
    xk, wk = spline_knots(widths_raw, bound, min_bin)
    yk, hk = spline_knots(heights_raw, bound, min_bin)
    d = spline_derivatives(derivs_raw, min_derivative)

    inside = (x.data >= -bound) & (x.data <= bound)
    xin = T.where(inside, x, 0.0)
    idx = _locate(xk.data, xin.data)
    x_lo, w, y_lo, h = _pick(xk, idx), _pick(wk, idx), _pick(yk, idx), _pick(hk, idx)
    d_lo, d_hi = _pick(d, idx), _pick(d, idx + 1)
    s = h / w
    xi = (xin - x_lo) / w
    xi1 = xi * (1.0 - xi)
    denom = s + (d_hi + d_lo - 2.0 * s) * xi1
    y = y_lo + h * (s * xi * xi + d_lo * xi1) / denom
    dnum = s * s * (d_hi * xi * xi + 2.0 * s * xi1 + d_lo * (1.0 - xi) * (1.0 - xi))
    logdet = T.log(dnum) - 2.0 * T.log(denom)
    return T.where(inside, y, x), T.where(inside, logdet, 0.0)


def rq_spline_inverse(y, widths_raw, heights_raw, derivs_raw, bound: float = 5.0,
                      min_bin: float = 1e-3, min_derivative: float = 1e-3) -> tuple[Tensor, Tensor]:
    """Inverse of :func:`rq_spline_forward`; returns ``(x, -log g'(x))``.

    The in-bin position solves a quadratic, taken in the cancellation-free root
    form ``2c / (-b - sqrt(b^2 - 4ac))``.
    """
    _check_finite(widths_raw, heights_raw, derivs_raw)
    y = as_tensor(y)
    xk, wk = spline_knots(widths_raw, bound, min_bin)
    yk, hk = spline_knots(heights_raw, bound, min_bin)
    d = spline_derivatives(derivs_raw, min_derivative)

    inside = (y.data >= -bound) & (y.data <= bound)
    yin = T.where(inside, y, 0.0)
    idx = _locate(yk.data, yin.data)
    x_lo, w, y_lo, h = _pick(xk, idx), _pick(wk, idx), _pick(yk, idx), _pick(hk, idx)
    d_lo, d_hi = _pick(d, idx), _pick(d, idx + 1)
    s = h / w
    dy = yin - y_lo
    curv = d_hi + d_lo - 2.0 * s
    a = h * (s - d_lo) + dy * curv
    b = h * d_lo - dy * curv
    c = -s * dy
    disc = b * b - 4.0 * a * c
    scale = b.data**2 + np.abs(4.0 * a.data * c.data)
    assert np.all(disc.data[inside] >= -1e-9 * scale[inside]), "spline inverse out of range"
    disc = T.where(disc.data > 0, disc, 0.0)
    root = -b - T.sqrt(disc)
    xi = 2.0 * c / root
    x = xi * w + x_lo
    xi1 = xi * (1.0 - xi)
    denom = s + curv * xi1
    dnum = s * s * (d_hi * xi * xi + 2.0 * s * xi1 + d_lo * (1.0 - xi) * (1.0 - xi))
    logdet = T.log(dnum) - 2.0 * T.log(denom)
    return T.where(inside, x, y), T.where(inside, -logdet, 0.0)


# ---------------------------------------------------------------------------
# Coupling layers and the stack
# ---------------------------------------------------------------------------

class CouplingLayer(nn.Module):
    """Transforms channel ``parity`` of a squeezed pair sequence."""

    def __init__(self, d_cond: int, hidden: int, bins: int, parity: int,
                 rng: np.random.Generator, kernel: int = 3, bound: float = 5.0,
                 min_bin: float = 1e-3, min_derivative: float = 1e-3):
        self.parity = parity
        self.bins = bins
        self.bound = bound
        self.min_bin = min_bin
        self.min_derivative = min_derivative
        self.conv1 = nn.Conv1d(1 + d_cond, hidden, kernel, rng)
        self.norm1 = nn.LayerNorm(hidden)
        self.conv2 = nn.Conv1d(hidden, hidden, kernel, rng)
        self.norm2 = nn.LayerNorm(hidden)
        self.proj = nn.Linear(hidden, 3 * bins - 1, rng, zero_init=True)

    def spline_params(self, cond: Tensor, hsq, pair_mask: np.ndarray):
        m = pair_mask[..., None].astype(T.DTYPE)
        inp = T.concat([cond[..., None], as_tensor(hsq)], axis=-1) * m
        a = T.tanh(self.norm1(self.conv1(inp))) * m
        a = T.tanh(self.norm2(self.conv2(a))) * m
        raw = self.proj(a)
        K = self.bins
        return raw[..., :K], raw[..., K : 2 * K], raw[..., 2 * K :]

    def _kw(self):
        return dict(bound=self.bound, min_bin=self.min_bin, min_derivative=self.min_derivative)

    def forward(self, target: Tensor, cond: Tensor, hsq, pair_mask, slot_mask):
        w, h, d = self.spline_params(cond, hsq, pair_mask)
        y, ld = rq_spline_forward(target, w, h, d, **self._kw())
        return T.where(slot_mask, y, target), ld * slot_mask.astype(T.DTYPE)

    def inverse(self, target: Tensor, cond: Tensor, hsq, pair_mask, slot_mask):
        w, h, d = self.spline_params(cond, hsq, pair_mask)
        x, ld = rq_spline_inverse(target, w, h, d, **self._kw())
        return T.where(slot_mask, x, target), ld * slot_mask.astype(T.DTYPE)


class _Squeezed:
    """Pair view of a padded (B, T) sequence and its (B, T, d) conditioning."""

    def __init__(self, x, h, mask):
        x = as_tensor(x)
        h = as_tensor(h)
        mask = np.asarray(mask, dtype=bool)
        if x.shape != mask.shape or h.shape[:2] != x.shape:
            raise ValueError(
                f"length mismatch: x {x.shape}, h {h.shape}, mask {mask.shape}"
            )
        B, L = x.shape
        self.length = L
        if L % 2:
            x = T.concat([x, Tensor(np.zeros((B, 1)))], axis=1)
            h = T.concat([h, Tensor(np.zeros((B, 1, h.shape[2])))], axis=1)
            mask = np.concatenate([mask, np.zeros((B, 1), dtype=bool)], axis=1)
        P = x.shape[1] // 2
        fm = mask.astype(T.DTYPE)
        pairs = (x * fm).reshape(B, P, 2)
        self.channels = [pairs[..., 0], pairs[..., 1]]
        self.hsq = (h * fm[..., None]).reshape(B, P, 2 * h.shape[2])
        self.slot = [mask[:, 0::2], mask[:, 1::2]]
        self.pair = self.slot[0] | self.slot[1]
        self.shape = (B, P)

    def unsqueeze(self, channels) -> Tensor:
        B, P = self.shape
        z = T.concat([channels[0][..., None], channels[1][..., None]], axis=-1).reshape(B, 2 * P)
        return z[:, : self.length]


def _batched(x, h, mask):
    x, h = as_tensor(x), as_tensor(h)
    single = x.ndim == 1
    if single:
        x = x.reshape(1, -1)
        h = h.reshape(1, *h.shape)
        mask = None if mask is None else np.asarray(mask)[None]
    if mask is None:
        mask = np.ones(x.shape, dtype=bool)
    return x, h, np.asarray(mask, dtype=bool), single


class FlowStack(nn.Module):
    """Ordered coupling layers mapping variance sequences to a unit-Gaussian latent."""

    def __init__(self, d_hidden: int, n_layers: int = 4, bins: int = 10, bound: float = 5.0,
                 min_bin: float = 1e-3, min_derivative: float = 1e-3, kernel: int = 3,
                 rng: np.random.Generator | None = None, conv_hidden: int | None = None):
        rng = np.random.default_rng(0) if rng is None else rng
        self.d_hidden = d_hidden
        self.layers = [
            CouplingLayer(2 * d_hidden, conv_hidden or d_hidden, bins, i % 2, rng, kernel,
                          bound, min_bin, min_derivative)
            for i in range(n_layers)
        ]

    def forward(self, x, h, mask=None, return_layer_logdets: bool = False):
        """x -> z. Returns ``(z, sum_logdet)`` with ``sum_logdet`` per utterance."""
        x, h, mask, single = _batched(x, h, mask)
        sq = _Squeezed(x, h, mask)
        ch = list(sq.channels)
        total = Tensor(np.zeros(sq.shape[0]))
        per_layer = []
        for layer in self.layers:
            p = layer.parity
            ch[p], ld = layer(ch[p], ch[1 - p], sq.hsq, sq.pair, sq.slot[p])
            ld = T.tsum(ld, axis=1)
            per_layer.append(ld)
            total = total + ld
        z = sq.unsqueeze(ch)
        if single:
            z, total = z[0], total[0]
            per_layer = [ld[0] for ld in per_layer]
        if return_layer_logdets:
            return z, total, per_layer
        return z, total

    def inverse(self, z, h, mask=None):
        """z -> x, the exact inverse of :meth:`forward`."""
        z, h, mask, single = _batched(z, h, mask)
        sq = _Squeezed(z, h, mask)
        ch = list(sq.channels)
        for layer in reversed(self.layers):
            p = layer.parity
            ch[p], _ = layer.inverse(ch[p], ch[1 - p], sq.hsq, sq.pair, sq.slot[p])
        x = sq.unsqueeze(ch)
        return x[0] if single else x

    def nll(self, x, h, mask=None) -> Tensor:
        """Negative log-likelihood per real frame under a unit-Gaussian prior."""
        xb, hb, mb, _ = _batched(x, h, mask)
        n = mb.sum()
        if n == 0:
            return Tensor(0.0)
        z, logdet = self.forward(xb, hb, mb)
        fm = mb.astype(T.DTYPE)
        neg_logp = T.tsum(z * z * fm) * 0.5 + 0.5 * LOG_2PI * n
        return (neg_logp - T.tsum(logdet)) * (1.0 / n)

    def sample(self, h, mask=None, sigma: float = 0.333,
               rng: np.random.Generator | None = None):
        """Draw ``z ~ N(0, sigma^2)`` on real frames and map it back to ``x``."""
        if sigma < 0:
            raise ValueError(f"sigma must be non-negative, got {sigma}")
        h = as_tensor(h)
        single = h.ndim == 2
        shape = h.shape[:-1]
        mask = np.ones(shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
        if sigma == 0:
            z = np.zeros(shape)
        else:
            rng = np.random.default_rng() if rng is None else rng
            z = sigma * rng.standard_normal(shape) * mask
        z = Tensor(z)
        x = self.inverse(z, h, mask)
        return z, x


def gaussian_nll(z: np.ndarray) -> np.ndarray:
    return 0.5 * np.asarray(z) ** 2 + 0.5 * LOG_2PI
