"""Attention-driven visual token selection.

The saliency of each visual token is the mean attention it receives from the
final-position query across every LM layer and head.  Reshaped onto the
patch grid, a w-by-w window of ones slides over the saliency map (stride 1,
no padding); the window with the largest cumulative score wins, ties broken
row-major (smallest row index, then smallest column).  A binary mask zeroes
every feature row outside the winning window.  The mask is a constant: no
gradient flows through the argmax, only through the masking multiply.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import LMForwardRecord, VisualFeatures
from .errors import ShapeError
from .tensor import Tensor


@dataclass
class SaliencySelection:
    saliency: np.ndarray  # [P]
    grid: np.ndarray  # [H', W']
    window_scores: np.ndarray  # [H'-w+1, W'-w+1]
    anchor: tuple  # (i*, j*)
    mask: np.ndarray  # [N_v] of {0.0, 1.0}
    w: int


def aggregate_saliency(record: LMForwardRecord) -> np.ndarray:
    """Mean attention mass from the final-position query to each visual token.

    Averages over all layers and heads of the recorded [L, N_h, 1, S]
    attention; returns a length-P vector over the image span.
    """
    if record.img_span is None:
        raise ValueError("aggregate_saliency needs a record with an image span")
    lo, hi = record.img_span
    if hi <= lo:
        raise ValueError(f"empty image span {record.img_span}")
    attn = record.attention.data
    if attn.ndim != 4:
        raise ShapeError(f"expected unbatched attention [L, N_h, 1, S], got {attn.shape}")
    return attn[:, :, 0, lo:hi].mean(axis=(0, 1))


def select_window(saliency: np.ndarray, grid_h: int, grid_w: int, w: int) -> SaliencySelection:
    saliency = np.asarray(saliency, dtype=np.float64)
    if saliency.shape != (grid_h * grid_w,):
        raise ShapeError(f"saliency length {saliency.shape} does not tile a {grid_h}x{grid_w} grid")
    if not (1 <= w <= min(grid_h, grid_w)):
        raise ValueError(f"window size {w} out of range for grid {grid_h}x{grid_w}")
    grid = saliency.reshape(grid_h, grid_w)
    scores = T.window_sum_2d(Tensor(grid), w).data
    flat = int(np.argmax(scores))  # np.argmax returns the first max in row-major order
    anchor = (flat // scores.shape[1], flat % scores.shape[1])
    mask2d = np.zeros((grid_h, grid_w))
    mask2d[anchor[0] : anchor[0] + w, anchor[1] : anchor[1] + w] = 1.0
    return SaliencySelection(
        saliency=saliency,
        grid=grid,
        window_scores=scores,
        anchor=anchor,
        mask=mask2d.reshape(-1),
        w=w,
    )


def apply_mask(v: VisualFeatures, sel: SaliencySelection) -> Tensor:
    """Zero every feature row outside the selected window (elementwise multiply)."""
    n = v.tokens.shape[0]
    if sel.mask.shape != (n,):
        raise ShapeError(f"mask length {sel.mask.shape[0]} != token count {n}")
    return v.tokens * Tensor(sel.mask[:, None])


def apply_mask_batched(tokens: Tensor, masks: np.ndarray) -> Tensor:
    """Batched variant: tokens [B, N_v, d_v] * masks [B, N_v]."""
    if tokens.shape[:2] != masks.shape:
        raise ShapeError(f"mask batch {masks.shape} does not match tokens {tokens.shape}")
    return tokens * Tensor(masks[:, :, None])


def select_for_record(record: LMForwardRecord, grid_h: int, grid_w: int, w: int) -> SaliencySelection:
    return select_window(aggregate_saliency(record), grid_h, grid_w, w)


def saliency_grid_csv_rows(sel: SaliencySelection):
    """Rows for the CLI's per-example saliency CSV dump (row-major grid)."""
    return [[repr(float(x)) for x in row] for row in sel.grid]
