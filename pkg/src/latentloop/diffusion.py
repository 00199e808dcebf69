"""Diffusion-based latent reconstruction.

A noise schedule corrupts a fixed latent image target x_0 as
x_t = sqrt(alpha_bar_t) x_0 + sqrt(1 - alpha_bar_t) eps, and a small
encoder-decoder denoiser with one bottleneck cross-attention block predicts
eps from (x_t, t, thought chain).  Minimizing the mean squared error between
true and predicted noise pulls visual detail into the thought vectors: the
loss gradient flows through the cross-attention keys/values back into the
chain (switchable off for ablation).  Ancestral sampling runs the learned
reverse process for qualitative reconstructions.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .fusion import ThoughtChain
from .rng import stream
from .tensor import Tensor

SCHEDULE_KINDS = ("linear", "cosine", "squared_cosine")
# the ablation sweep's schedule configuration matrix: every kind at two caps
SCHEDULE_GRID = tuple((kind, beta_max) for kind in SCHEDULE_KINDS for beta_max in (0.02, 0.05))


@dataclass
class NoiseSchedule:
    kind: str
    beta: np.ndarray  # [T], beta[t-1] is the step-t rate
    alpha_bar: np.ndarray  # [T], cumulative product of (1 - beta)
    beta_start: float
    beta_end: float
    T_diff: int


def build_schedule(kind: str, beta_start: float, beta_end: float, T_diff: int) -> NoiseSchedule:
    """Construct a noise schedule.

    linear: beta linearly spaced from beta_start to beta_end.
    cosine / squared_cosine: alpha_bar follows cos^2 / cos^4 of the shifted
    phase (offset 0.008), converted to per-step betas and clipped above at
    beta_end; alpha_bar is then recomputed from the clipped betas so it stays
    strictly decreasing.
    """
    if T_diff < 1:
        raise ConfigError(f"schedule length must be >= 1, got {T_diff}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    if kind == "linear":
        beta = np.linspace(beta_start, beta_end, T_diff)
    elif kind in ("cosine", "squared_cosine"):
        power = 2 if kind == "cosine" else 4
        s = 0.008
        ts = np.arange(T_diff + 1, dtype=np.float64) / T_diff
        f = np.cos((ts + s) / (1.0 + s) * (np.pi / 2.0)) ** power
        raw = f / f[0]
        beta = np.clip(1.0 - raw[1:] / raw[:-1], 1e-12, beta_end)
    else:
        raise ConfigError(f"unknown schedule kind {kind!r}; expected one of {SCHEDULE_KINDS}")
    alpha_bar = np.cumprod(1.0 - beta)
    return NoiseSchedule(kind=kind, beta=beta, alpha_bar=alpha_bar, beta_start=beta_start, beta_end=beta_end, T_diff=T_diff)


def forward_diffuse(x0, t, eps, schedule: NoiseSchedule) -> Tensor:
    """x_t = sqrt(alpha_bar_t) x_0 + sqrt(1 - alpha_bar_t) eps (pure function).

    `t` is a 1-based step index, or an array of them for batched x0.
    """
    x0 = T.as_tensor(x0)
    eps = T.as_tensor(eps)
    if eps.shape != x0.shape:
        raise ShapeError(f"noise shape {eps.shape} != target shape {x0.shape}")
    t_arr = np.atleast_1d(np.asarray(t, dtype=np.int64))
    if np.any(t_arr < 1) or np.any(t_arr > schedule.T_diff):
        raise ValueError(f"timestep {t} outside [1, {schedule.T_diff}]")
    ab = schedule.alpha_bar[t_arr - 1]
    if np.ndim(t) == 0:
        ab = float(ab[0])
        return x0 * float(np.sqrt(ab)) + eps * float(np.sqrt(1.0 - ab))
    extra = x0.ndim - 1
    coef_sig = np.sqrt(ab).reshape((-1,) + (1,) * extra)
    coef_noise = np.sqrt(1.0 - ab).reshape((-1,) + (1,) * extra)
    return x0 * Tensor(coef_sig) + eps * Tensor(coef_noise)


def sinusoidal_embedding(t, dim: int) -> np.ndarray:
    """Standard sin/cos timestep features, shape [len(t), dim]."""
    t_arr = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    args = t_arr[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if emb.shape[1] < dim:
        emb = np.concatenate([emb, np.zeros((emb.shape[0], dim - emb.shape[1]))], axis=1)
    return emb


@lru_cache(maxsize=64)
def _im2col_indices(c_in: int, h: int, w: int, kh: int, kw: int, stride: int):
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    ci, di, dj = np.meshgrid(np.arange(c_in), np.arange(kh), np.arange(kw), indexing="ij")
    base = ci * h * w + di * w + dj  # [C, kh, kw]
    oi, oj = np.meshgrid(np.arange(oh) * stride, np.arange(ow) * stride, indexing="ij")
    offset = (oi * w + oj).reshape(-1)  # [oh*ow]
    return base.reshape(-1, 1) + offset[None, :], oh, ow  # [C*kh*kw, oh*ow]


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Minimal 2-D convolution via im2col; x is [B, Cin, H, W]."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects [B, C, H, W], got {x.shape}")
    c_out, c_in, kh, kw = w.shape
    if x.shape[1] != c_in:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs weight {w.shape}")
    xp = T.pad2d(x, pad)
    bsz, _, hp, wp = xp.shape
    idx, oh, ow = _im2col_indices(c_in, hp, wp, kh, kw, stride)
    cols = T.take_flat(xp, idx, batch_ndim=1)  # [B, C*kh*kw, oh*ow]
    out = T.matmul(T.reshape(w, (c_out, c_in * kh * kw)), cols)  # [B, Cout, oh*ow]
    out = out + T.reshape(b, (c_out, 1))
    return T.reshape(out, (bsz, c_out, oh, ow))


@lru_cache(maxsize=32)
def _upsample_indices(h: int, w: int):
    rows = np.repeat(np.arange(h), 2)
    cols = np.repeat(np.arange(w), 2)
    return (rows[:, None] * w + cols[None, :]).reshape(-1)  # [(2h)*(2w)]


def upsample_nearest2(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of [B, C, H, W]."""
    bsz, c, h, w = x.shape
    idx = _upsample_indices(h, w)
    out = T.take_flat(x, idx, batch_ndim=2)
    return T.reshape(out, (bsz, c, 2 * h, 2 * w))


class Denoiser:
    """Conditional noise predictor with skip connections.

    `channels` lists the width per level; each extra width adds one stride-2
    downsample (and matching upsample).  The thought chain conditions the
    bottleneck through cross-attention, with a learned positional embedding
    over thought order.  The timestep enters as a sinusoidal embedding added
    to the stem features.
    """

    def __init__(
        self,
        in_channels: int,
        channels: tuple,
        cond_dim: int,
        rng,
        layers_per_block: int = 1,
        t_emb_dim: int = 16,
        max_thoughts: int = 16,
    ):
        if len(channels) < 2:
            raise ConfigError(f"need at least two channel widths, got {channels}")
        self.in_channels = in_channels
        self.channels = tuple(int(c) for c in channels)
        self.cond_dim = cond_dim
        self.layers_per_block = layers_per_block
        self.t_emb_dim = t_emb_dim
        self.params: dict[str, Tensor] = {}
        p = self.params

        def conv_param(name, c_out, c_in, k=3):
            p[f"{name}_w"] = Tensor(rng.standard_normal((c_out, c_in, k, k)) / np.sqrt(c_in * k * k), requires_grad=True)
            p[f"{name}_b"] = Tensor(np.zeros(c_out), requires_grad=True)

        conv_param("stem", self.channels[0], in_channels)
        p["temb_w"] = Tensor(rng.standard_normal((t_emb_dim, self.channels[0])) / np.sqrt(t_emb_dim), requires_grad=True)
        p["temb_b"] = Tensor(np.zeros(self.channels[0]), requires_grad=True)
        for i in range(len(self.channels) - 1):
            for j in range(layers_per_block):
                conv_param(f"down{i}.conv{j}", self.channels[i], self.channels[i])
            conv_param(f"down{i}.reduce", self.channels[i + 1], self.channels[i])
        cm = self.channels[-1]
        conv_param("mid_in", cm, cm)
        for name, shape in (
            ("attn_wq", (cm, cm)),
            ("attn_wk", (cond_dim, cm)),
            ("attn_wv", (cond_dim, cm)),
            ("attn_wo", (cm, cm)),
        ):
            p[name] = Tensor(rng.standard_normal(shape) / np.sqrt(shape[0]), requires_grad=True)
        for name in ("attn_bq", "attn_bk", "attn_bv", "attn_bo"):
            p[name] = Tensor(np.zeros(cm), requires_grad=True)
        p["thought_pos"] = Tensor(rng.standard_normal((max_thoughts, cond_dim)) * 0.1, requires_grad=True)
        conv_param("mid_out", cm, cm)
        for i in reversed(range(len(self.channels) - 1)):
            conv_param(f"up{i}.expand", self.channels[i], self.channels[i + 1])
            conv_param(f"up{i}.fuse", self.channels[i], 2 * self.channels[i])
        conv_param("out", in_channels, self.channels[0])

    def _stack_thoughts(self, chain, batch: int) -> Tensor:
        thoughts = chain.thoughts if isinstance(chain, ThoughtChain) else list(chain)
        if len(thoughts) == 0:
            raise ValueError("denoiser conditioning needs a non-empty thought chain")
        if len(thoughts) > self.params["thought_pos"].shape[0]:
            raise ConfigError(f"chain length {len(thoughts)} exceeds positional table {self.params['thought_pos'].shape[0]}")
        rows = []
        for k, z in enumerate(thoughts):
            z = T.as_tensor(z)
            if z.ndim == 1:
                z = T.reshape(z, (1, -1))
                if batch > 1:
                    z = T.concat([z] * batch, axis=0)
            rows.append(z + self.params["thought_pos"][k])
        return T.stack(rows, axis=1)  # [B, K, cond_dim]

    def predict(self, x_t, t, chain) -> Tensor:
        """Predict the injected noise for x_t at step t, conditioned on the chain."""
        x = T.as_tensor(x_t)
        squeeze = x.ndim == 3
        if squeeze:
            x = T.reshape(x, (1,) + x.shape)
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"expected [B, {self.in_channels}, h, w] input, got {x.shape}")
        bsz = x.shape[0]
        p = self.params

        temb = Tensor(sinusoidal_embedding(t, self.t_emb_dim))
        if temb.shape[0] == 1 and bsz > 1:
            temb = T.concat([temb] * bsz, axis=0)
        tfeat = T.reshape(T.linear(temb, p["temb_w"], p["temb_b"]), (bsz, self.channels[0], 1, 1))

        h = T.gelu(conv2d(x, p["stem_w"], p["stem_b"], pad=1) + tfeat)
        skips = []
        for i in range(len(self.channels) - 1):
            for j in range(self.layers_per_block):
                h = T.gelu(conv2d(h, p[f"down{i}.conv{j}_w"], p[f"down{i}.conv{j}_b"], pad=1))
            skips.append(h)
            h = T.gelu(conv2d(h, p[f"down{i}.reduce_w"], p[f"down{i}.reduce_b"], stride=2, pad=1))

        h = T.gelu(conv2d(h, p["mid_in_w"], p["mid_in_b"], pad=1))
        h = h + self._cross_attend(h, self._stack_thoughts(chain, bsz))
        h = T.gelu(conv2d(h, p["mid_out_w"], p["mid_out_b"], pad=1))

        for i in reversed(range(len(self.channels) - 1)):
            skip = skips[i]
            h = upsample_nearest2(h)
            h = T.gelu(conv2d(h, p[f"up{i}.expand_w"], p[f"up{i}.expand_b"], pad=1))
            if h.shape[-2:] != skip.shape[-2:]:
                h = h[:, :, : skip.shape[-2], : skip.shape[-1]]
            h = T.gelu(conv2d(T.concat([h, skip], axis=1), p[f"up{i}.fuse_w"], p[f"up{i}.fuse_b"], pad=1))

        out = conv2d(h, p["out_w"], p["out_b"], pad=1)
        return out[0] if squeeze else out

    def _cross_attend(self, h: Tensor, thoughts: Tensor) -> Tensor:
        """Bottleneck feature positions query the thought chain."""
        p = self.params
        bsz, cm, hh, ww = h.shape
        tokens = T.swapaxes(T.reshape(h, (bsz, cm, hh * ww)), -1, -2)  # [B, hw, cm]
        q = T.linear(tokens, p["attn_wq"], p["attn_bq"])
        k = T.linear(thoughts, p["attn_wk"], p["attn_bk"])
        v = T.linear(thoughts, p["attn_wv"], p["attn_bv"])
        probs = T.softmax(T.matmul(q, T.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(cm)), axis=-1)
        ctx = T.linear(T.matmul(probs, v), p["attn_wo"], p["attn_bo"])  # [B, hw, cm]
        return T.reshape(T.swapaxes(ctx, -1, -2), (bsz, cm, hh, ww))


def recon_loss(x0, chain, schedule: NoiseSchedule, denoiser: Denoiser, rng, stop_gradient_chain: bool = False) -> Tensor:
    """Denoising score-matching loss: E ||eps - eps_hat||^2 / numel.

    Draws one timestep per example and fresh unit-normal noise from `rng`;
    gradient reaches the denoiser and (unless stopped) the thought chain.
    """
    x0t = T.as_tensor(x0)
    batched = x0t.ndim == 4
    bsz = x0t.shape[0] if batched else 1
    t = rng.integers(1, schedule.T_diff + 1, size=bsz)
    eps = rng.standard_normal(x0t.shape)
    if not batched:
        t = int(t[0])
    return recon_loss_fixed(x0t, chain, schedule, denoiser, t, eps, stop_gradient_chain=stop_gradient_chain)


def recon_loss_fixed(x0, chain, schedule, denoiser, t, eps, stop_gradient_chain: bool = False) -> Tensor:
    """recon_loss with caller-supplied (t, eps); used by gradient oracles."""
    x0t = T.as_tensor(x0)
    eps_t = T.as_tensor(eps)
    x_t = forward_diffuse(x0t.detach(), t, eps_t.detach(), schedule)
    cond = chain
    if stop_gradient_chain:
        thoughts = chain.thoughts if isinstance(chain, ThoughtChain) else list(chain)
        cond = [T.as_tensor(z).detach() for z in thoughts]
    eps_hat = denoiser.predict(x_t, t, cond)
    diff = eps_hat - Tensor(eps_t.data)
    return T.tmean(diff * diff)


def sample_reconstruction(chain, schedule: NoiseSchedule, denoiser: Denoiser, rng, shape: tuple) -> np.ndarray:
    """Ancestral sampling: start from unit Gaussian noise, walk t = T..1 using
    the predicted noise and the posterior reparameterization; deterministic
    given the rng state."""
    x = rng.standard_normal(shape)
    with T.no_grad():
        for t in range(schedule.T_diff, 0, -1):
            beta_t = schedule.beta[t - 1]
            ab_t = schedule.alpha_bar[t - 1]
            alpha_t = 1.0 - beta_t
            eps_hat = denoiser.predict(Tensor(x), t, chain).data
            mean = (x - beta_t / np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(alpha_t)
            if t > 1:
                ab_prev = schedule.alpha_bar[t - 2]
                var = beta_t * (1.0 - ab_prev) / (1.0 - ab_t)
                x = mean + np.sqrt(var) * rng.standard_normal(shape)
            else:
                x = mean
    return x


def _area_resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic matrix averaging input cells over each output cell's span."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        lo, hi = i * scale, (i + 1) * scale
        for j in range(n_in):
            overlap = max(0.0, min(hi, j + 1.0) - max(lo, j))
            m[i, j] = overlap
    return m / m.sum(axis=1, keepdims=True)


def make_latent_target(patches: np.ndarray, grid_h: int, grid_w: int, out_shape: tuple, seed: int) -> np.ndarray:
    """Fixed, untrained map from the raw patch grid to the reconstruction
    target: area-average spatial resampling plus a seeded random channel mix.
    Deterministic given (shapes, seed)."""
    c, h, w = out_shape
    grid = np.asarray(patches, dtype=np.float64).reshape(grid_h, grid_w, -1)
    rows = _area_resize_matrix(grid_h, h)
    cols = _area_resize_matrix(grid_w, w)
    resized = np.einsum("ab,bcf,dc->adf", rows, grid, cols)  # [h, w, d_patch]
    mix = stream(seed, "latent_target_mix").standard_normal((grid.shape[-1], c)) / np.sqrt(grid.shape[-1])
    return np.einsum("hwf,fc->chw", resized, mix)
