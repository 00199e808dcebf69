"""Training objectives: pooled representations, contrastive alignment,
autoregressive + latent-prefix language modeling, and the weighted total.

Conventions: sequence losses sum token negative log-likelihoods within an
example (padding excluded) and average across a batch; the contrastive loss
is the batch-mean cross-entropy of each anchor recovering its own target
under a temperature-scaled similarity softmax.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor


@dataclass
class LossWeights:
    lambda1: float = 1.0  # latent-prefix term inside the AR loss
    lambda2: float = 0.9  # symmetric contrastive term
    lambda3: float = 0.9  # reconstruction term
    tau: float = 0.07  # contrastive temperature

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.tau <= 0:
            raise ConfigError(f"temperature must be positive, got {self.tau}")


@dataclass
class SequenceTargets:
    """Full target token sequence Y and the rationale prefix length |R|."""

    full: list
    prefix_len: int

    def __post_init__(self):
        if not (0 <= self.prefix_len <= len(self.full)):
            raise ValueError(f"prefix length {self.prefix_len} outside [0, {len(self.full)}]")

    @property
    def prefix(self):
        return self.full[: self.prefix_len]


@dataclass
class PooledTriple:
    """Unit-norm pooled projections of thoughts, visuals, and rationale."""

    f_z: Tensor
    f_v: Tensor
    f_t: Tensor


def pool_meanmax(rows: Tensor) -> Tensor:
    """Concatenate the elementwise mean and max over the row axis: [.., n, d] -> [.., 2d]."""
    rows = T.as_tensor(rows)
    if rows.ndim < 2 or rows.shape[-2] < 1:
        raise ValueError(f"mean-max pooling needs at least one [n, d] row, got shape {rows.shape}")
    return T.concat([T.tmean(rows, axis=-2), T.tmax(rows, axis=-2)], axis=-1)


def pool_project(rows: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Mean-max pool, project to the shared probe dimension, L2-normalize."""
    return T.l2_normalize(T.linear(pool_meanmax(rows), w, b), axis=-1)


class AlignmentHeads:
    """Projection heads mapping pooled thoughts / visuals / rationale hidden
    states into one d_p-dimensional unit sphere."""

    def __init__(self, d_t: int, d_v: int, d_p: int, rng):
        self.d_p = d_p

        def head(fan_in):
            return Tensor(rng.standard_normal((fan_in, d_p)) / np.sqrt(fan_in), requires_grad=True)

        self.params = {
            "pool_z_w": head(2 * d_t),
            "pool_z_b": Tensor(np.zeros(d_p), requires_grad=True),
            "pool_v_w": head(2 * d_v),
            "pool_v_b": Tensor(np.zeros(d_p), requires_grad=True),
            "pool_t_w": head(2 * d_t),
            "pool_t_b": Tensor(np.zeros(d_p), requires_grad=True),
        }

    def project_thoughts(self, rows: Tensor) -> Tensor:
        return pool_project(rows, self.params["pool_z_w"], self.params["pool_z_b"])

    def project_visual(self, rows: Tensor) -> Tensor:
        return pool_project(rows, self.params["pool_v_w"], self.params["pool_v_b"])

    def project_rationale(self, rows: Tensor) -> Tensor:
        return pool_project(rows, self.params["pool_t_w"], self.params["pool_t_b"])


def info_nce(anchors: Tensor, targets: Tensor, tau: float) -> Tensor:
    """One-directional contrastive loss: each anchor must pick out its own
    target among the batch under dot-product similarity at temperature tau."""
    anchors, targets = T.as_tensor(anchors), T.as_tensor(targets)
    if anchors.ndim != 2 or targets.ndim != 2 or anchors.shape != targets.shape:
        raise ShapeError(f"contrastive batches must share shape [B, d], got {anchors.shape} and {targets.shape}")
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    b = anchors.shape[0]
    logits = T.matmul(anchors, T.transpose(targets)) * (1.0 / tau)
    lsm = T.log_softmax(logits, axis=-1)
    diag_idx = np.arange(b) * b + np.arange(b)
    return -T.tmean(T.take_flat(lsm, diag_idx))


def symmetric_info_nce(f_z: Tensor, f_v: Tensor, f_t: Tensor, tau: float) -> Tensor:
    """Sum of thought-to-visual and thought-to-rationale contrastive terms."""
    if f_z.shape != f_v.shape or f_z.shape != f_t.shape:
        raise ShapeError(f"pooled batches disagree: {f_z.shape}, {f_v.shape}, {f_t.shape}")
    return info_nce(f_z, f_v, tau) + info_nce(f_z, f_t, tau)


def sequence_nll(logits: Tensor, ids, pad_id: int = -1) -> Tensor:
    """Token-level negative log-likelihood, summed within each sequence and
    averaged over the batch.  Positions where ids == pad_id are excluded.
    Accepts [N, V] with [N] ids or [B, N, V] with [B, N] ids."""
    logits = T.as_tensor(logits)
    ids_arr = np.asarray(ids, dtype=np.int64)
    if logits.ndim == 2:
        if ids_arr.shape != (logits.shape[0],):
            raise ShapeError(f"ids shape {ids_arr.shape} does not match logits {logits.shape}")
        batch = 1
        flat_ids = ids_arr
        flat_logits = logits
    elif logits.ndim == 3:
        if ids_arr.shape != logits.shape[:2]:
            raise ShapeError(f"ids shape {ids_arr.shape} does not match logits {logits.shape}")
        batch = logits.shape[0]
        flat_ids = ids_arr.reshape(-1)
        flat_logits = T.reshape(logits, (-1, logits.shape[-1]))
    else:
        raise ShapeError(f"logits must be [N, V] or [B, N, V], got {logits.shape}")
    vocab = flat_logits.shape[-1]
    keep = flat_ids != pad_id
    lsm = T.log_softmax(flat_logits, axis=-1)
    gather_idx = np.arange(flat_ids.size) * vocab + np.where(keep, flat_ids, 0)
    picked = T.take_flat(lsm, gather_idx)
    masked = picked * Tensor(keep.astype(np.float64))
    return -T.tsum(masked) * (1.0 / batch)


def ar_and_prefix_loss(
    logits_full: Tensor,
    logits_prefix_run: Tensor,
    targets: SequenceTargets,
    lambda1: float,
    pad_id: int = -1,
) -> Tensor:
    """Answer-sequence NLL plus lambda1 times the prefix NLL from the
    thoughts-only forward.  `logits_full` must align position-for-position
    with Y, `logits_prefix_run` with the first |R| tokens of Y."""
    y = np.asarray(targets.full, dtype=np.int64)
    logits_full = T.as_tensor(logits_full)
    if logits_full.shape[-2] != len(targets.full):
        raise ShapeError(f"full-run logits cover {logits_full.shape[-2]} positions, target has {len(targets.full)}")
    loss = sequence_nll(logits_full, np.broadcast_to(y, logits_full.shape[:-1]), pad_id)
    if lambda1 != 0.0 and targets.prefix_len > 0:
        logits_prefix_run = T.as_tensor(logits_prefix_run)
        if logits_prefix_run.shape[-2] != targets.prefix_len:
            raise ShapeError(
                f"prefix-run logits cover {logits_prefix_run.shape[-2]} positions, prefix length is {targets.prefix_len}"
            )
        r = y[: targets.prefix_len]
        loss = loss + lambda1 * sequence_nll(logits_prefix_run, np.broadcast_to(r, logits_prefix_run.shape[:-1]), pad_id)
    return loss


def total_latent_loss(ar_prefix: Tensor, sym_nce, recon, weights: LossWeights) -> Tensor:
    """Weighted sum of the three multi-task terms (each also reported separately)."""
    total = T.as_tensor(ar_prefix)
    if sym_nce is not None and weights.lambda2 != 0.0:
        total = total + weights.lambda2 * T.as_tensor(sym_nce)
    if recon is not None and weights.lambda3 != 0.0:
        total = total + weights.lambda3 * T.as_tensor(recon)
    return total
