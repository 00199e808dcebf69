"""Iterative gated cross-modal fusion: the latent reasoning engine.

One reasoning step turns the current context state h_k into a continuous
thought vector:

    h_fus = CrossAttn(LayerNorm(h_k), V_selected)        (query from h_k,
                                                          keys/values from the
                                                          masked visual rows)
    h_glu = (h_fus W1 + b) * sigmoid(h_k W2 + c)          (gated linear unit)
    z_k   = FFN(LayerNorm(h_k + h_glu))

Run K times against a context provider (which re-runs the LM over the
growing [visual; text; <bot>; z_1..z_{k-1}] sequence), this yields a chain
of thought vectors.  Chains with a fixed seed and weights are bitwise
deterministic, and a K-step chain always extends the (K-1)-step chain: each
z_k depends only on earlier thoughts.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor

HALT_METRICS = ("cosine", "L1", "L2")


def thought_distance(a: np.ndarray, b: np.ndarray, metric: str) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if metric == "L1":
        return float(np.sum(np.abs(a - b)))
    if metric == "L2":
        return float(np.sqrt(np.sum((a - b) ** 2)))
    if metric == "cosine":
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if na == 0.0 or nb == 0.0:
            return 1.0
        return float(1.0 - np.dot(a, b) / (na * nb))
    raise ConfigError(f"unknown halting metric {metric!r}; expected one of {HALT_METRICS}")


@dataclass
class ThoughtChain:
    """Ordered latent thoughts plus per-step diagnostics.

    `thoughts` entries are [d_t] tensors (or [B, d_t] when produced by a
    batched trainer step).  `step_distances[m][k]` is the distance between
    thoughts k+1 and k under metric m, computed on the first batch element.
    """

    thoughts: list = field(default_factory=list)
    step_distances: dict = field(default_factory=lambda: {m: [] for m in HALT_METRICS})
    halted_early: bool = False
    h0: Optional[Tensor] = None

    def __len__(self):
        return len(self.thoughts)

    def as_matrix(self, batch_index: Optional[int] = None) -> np.ndarray:
        """Thought vectors as a [K, d_t] float64 matrix for one example."""
        rows = []
        for z in self.thoughts:
            d = z.data
            rows.append(d if d.ndim == 1 else d[batch_index or 0])
        return np.asarray(rows, dtype=np.float64)

    def record_distances(self):
        self.step_distances = {m: [] for m in HALT_METRICS}
        for prev, cur in zip(self.thoughts, self.thoughts[1:]):
            a = prev.data if prev.data.ndim == 1 else prev.data[0]
            b = cur.data if cur.data.ndim == 1 else cur.data[0]
            for m in HALT_METRICS:
                self.step_distances[m].append(thought_distance(a, b, m))


def init_thought_state(instruction_embeddings: Tensor, mode: str = "mean") -> Tensor:
    """Initial thought state from the instruction token embeddings."""
    emb = T.as_tensor(instruction_embeddings)
    if emb.ndim != 2 or emb.shape[0] < 1:
        raise ValueError(f"instruction embeddings must be a non-empty [M_i, d_t] matrix, got {emb.shape}")
    if mode == "mean":
        return T.tmean(emb, axis=0)
    if mode == "last":
        return emb[-1]
    raise ConfigError(f"unknown thought-state init mode {mode!r}")


class FusionEngine:
    """Parameters and step logic for the gated cross-modal fusion cycle.

    Owns the key/value projection from visual space, the multi-head
    cross-attention, the GLU gate, the output FFN, both layer norms, and the
    <|bot|>/<|eot|> delimiter embeddings that bracket spliced thoughts.
    """

    def __init__(self, d_v: int, d_t: int, heads: int, rng, kv_gain: float = 0.5):
        if d_t % heads != 0:
            raise ConfigError(f"d_t={d_t} not divisible by fusion heads={heads}")
        self.d_v = d_v
        self.d_t = d_t
        self.n_heads = heads
        std = kv_gain / np.sqrt(d_v)
        self.params: dict[str, Tensor] = {
            "kv_wk": Tensor(rng.standard_normal((d_v, d_t)) * std, requires_grad=True),
            "kv_bk": Tensor(np.zeros(d_t), requires_grad=True),
            "kv_wv": Tensor(rng.standard_normal((d_v, d_t)) * std, requires_grad=True),
            "kv_bv": Tensor(np.zeros(d_t), requires_grad=True),
            "attn_wq": Tensor(rng.standard_normal((d_t, d_t)) / np.sqrt(d_t), requires_grad=True),
            "attn_bq": Tensor(np.zeros(d_t), requires_grad=True),
            "attn_wo": Tensor(rng.standard_normal((d_t, d_t)) / np.sqrt(d_t), requires_grad=True),
            "attn_bo": Tensor(np.zeros(d_t), requires_grad=True),
            "glu_w1": Tensor(rng.standard_normal((d_t, d_t)) / np.sqrt(d_t), requires_grad=True),
            "glu_b": Tensor(np.zeros(d_t), requires_grad=True),
            "glu_w2": Tensor(rng.standard_normal((d_t, d_t)) / np.sqrt(d_t), requires_grad=True),
            "glu_c": Tensor(np.zeros(d_t), requires_grad=True),
            "ffn_w1": Tensor(rng.standard_normal((d_t, 4 * d_t)) / np.sqrt(d_t), requires_grad=True),
            "ffn_b1": Tensor(np.zeros(4 * d_t), requires_grad=True),
            "ffn_w2": Tensor(rng.standard_normal((4 * d_t, d_t)) / np.sqrt(4 * d_t), requires_grad=True),
            "ffn_b2": Tensor(np.zeros(d_t), requires_grad=True),
            "ln1_g": Tensor(np.ones(d_t), requires_grad=True),
            "ln1_b": Tensor(np.zeros(d_t), requires_grad=True),
            "ln2_g": Tensor(np.ones(d_t), requires_grad=True),
            "ln2_b": Tensor(np.zeros(d_t), requires_grad=True),
            "bot_emb": Tensor(rng.standard_normal(d_t) * 0.05, requires_grad=True),
            "eot_emb": Tensor(rng.standard_normal(d_t) * 0.05, requires_grad=True),
        }

    def reinit_delimiters(self, rng):
        """Fresh <|bot|>/<|eot|> embeddings (curriculum stage-II entry)."""
        self.params["bot_emb"].data = rng.standard_normal(self.d_t) * 0.05
        self.params["eot_emb"].data = rng.standard_normal(self.d_t) * 0.05

    def fusion_step(self, h_k: Tensor, v_selected: Tensor, return_details: bool = False):
        """One gated fusion step; h_k is [d_t] or [B, d_t], v_selected is
        [N, d_v] or [B, N, d_v].  Zero rows are legal keys: the projection
        biases keep attention over them well defined."""
        p = self.params
        h_k = T.as_tensor(h_k)
        v_selected = T.as_tensor(v_selected)
        if h_k.shape[-1] != self.d_t:
            raise ShapeError(f"thought state width {h_k.shape} != d_t {self.d_t}")
        if v_selected.shape[-1] != self.d_v:
            raise ShapeError(f"visual feature width {v_selected.shape} != d_v {self.d_v}")
        squeeze = h_k.ndim == 1
        if squeeze:
            h_k = T.reshape(h_k, (1, -1))
        if v_selected.ndim == 2:
            v_selected = T.reshape(v_selected, (1,) + v_selected.shape)
        b = h_k.shape[0]
        n = v_selected.shape[-2]
        dh = self.d_t // self.n_heads

        q = T.linear(T.layer_norm(h_k, p["ln1_g"], p["ln1_b"]), p["attn_wq"], p["attn_bq"])
        q = T.swapaxes(T.reshape(q, (b, 1, self.n_heads, dh)), -2, -3)  # [B, H, 1, dh]
        keys = T.linear(v_selected, p["kv_wk"], p["kv_bk"])
        vals = T.linear(v_selected, p["kv_wv"], p["kv_bv"])
        keys = T.swapaxes(T.reshape(keys, (b, n, self.n_heads, dh)), -2, -3)
        vals = T.swapaxes(T.reshape(vals, (b, n, self.n_heads, dh)), -2, -3)
        probs = T.softmax(T.matmul(q, T.swapaxes(keys, -1, -2)) * (1.0 / np.sqrt(dh)), axis=-1)
        ctx = T.reshape(T.swapaxes(T.matmul(probs, vals), -2, -3), (b, self.d_t))
        h_fus = T.linear(ctx, p["attn_wo"], p["attn_bo"])

        gate = T.sigmoid(T.linear(h_k, p["glu_w2"], p["glu_c"]))
        h_glu = T.linear(h_fus, p["glu_w1"], p["glu_b"]) * gate

        pre = T.layer_norm(h_k + h_glu, p["ln2_g"], p["ln2_b"])
        z = T.linear(T.gelu(T.linear(pre, p["ffn_w1"], p["ffn_b1"])), p["ffn_w2"], p["ffn_b2"])
        if squeeze:
            z = z[0]
        if return_details:
            if squeeze:
                h_fus, gate, h_glu = h_fus[0], gate[0], h_glu[0]
            return z, {"h_fus": h_fus, "gate": gate, "h_glu": h_glu, "attn": probs}
        return z

    def reason_chain(
        self,
        context_provider: Callable[[list], Tensor],
        v_selected: Tensor,
        steps: int,
        h0: Optional[Tensor] = None,
        h0_first_query: bool = False,
    ) -> ThoughtChain:
        """Run `steps` fusion steps; the provider maps the thoughts so far to
        the next context state h_k.  steps=0 yields an empty chain (plain VLM
        path).  With h0_first_query, step 1 queries with h0 directly instead
        of calling the provider."""
        if steps < 0:
            raise ValueError(f"step count must be >= 0, got {steps}")
        chain = ThoughtChain(h0=h0)
        for k in range(1, steps + 1):
            if k == 1 and h0_first_query:
                if h0 is None:
                    raise ValueError("h0_first_query requires an initial thought state")
                h_k = h0
            else:
                h_k = context_provider(chain.thoughts)
            chain.thoughts.append(self.fusion_step(h_k, v_selected))
        chain.record_distances()
        return chain

    def adaptive_reason(
        self,
        context_provider: Callable[[list], Tensor],
        v_selected: Tensor,
        metric: str,
        threshold: float,
        max_steps: int,
        h0: Optional[Tensor] = None,
    ) -> ThoughtChain:
        """Reason until consecutive thoughts stop moving.

        Halts after step k >= 2 once distance(z_k, z_{k-1}) < threshold under
        the chosen metric (cosine uses 1 - cosine similarity), else runs to
        max_steps.  Distances for all metrics are recorded either way.
        """
        if metric not in HALT_METRICS:
            raise ConfigError(f"unknown halting metric {metric!r}; expected one of {HALT_METRICS}")
        if max_steps < 2:
            raise ValueError(f"adaptive reasoning needs max_steps >= 2, got {max_steps}")
        if threshold <= 0:
            raise ValueError(f"halting threshold must be positive, got {threshold}")
        if metric == "cosine" and threshold > 1.0:
            raise ValueError(f"cosine halting threshold must lie in (0, 1], got {threshold}")

        def step_fn(thoughts_so_far):
            h_k = context_provider(thoughts_so_far)
            return self.fusion_step(h_k, v_selected)

        return run_halting_loop(step_fn, metric, threshold, max_steps, h0=h0)


def run_halting_loop(
    step_fn: Callable[[list], Tensor],
    metric: str,
    threshold: float,
    max_steps: int,
    h0: Optional[Tensor] = None,
) -> ThoughtChain:
    """Generic halting loop over any thought producer (separable for oracle tests)."""
    chain = ThoughtChain(h0=h0)
    for k in range(1, max_steps + 1):
        z = step_fn(chain.thoughts)
        chain.thoughts.append(z)
        if k >= 2:
            a = chain.thoughts[-2].data
            b = chain.thoughts[-1].data
            a = a if a.ndim == 1 else a[0]
            b = b if b.ndim == 1 else b[0]
            if thought_distance(a, b, metric) < threshold:
                chain.halted_early = k < max_steps
                break
    chain.record_distances()
    return chain


def interleaved_generate(
    decode_next: Callable[[list], int],
    run_burst: Callable[[int], ThoughtChain],
    newline_id: int,
    eos_id: int,
    latent_burst: int,
    max_segments: int,
    max_new_tokens: int,
):
    """Alternate text decoding with latent bursts.

    Decodes greedily via `decode_next` (which owns the growing context);
    every time a newline is emitted and segments remain, `run_burst` inserts
    `latent_burst` fusion steps into that context.  Returns (ids, chains).
    max_segments=0 degenerates to plain decoding.
    """
    if latent_burst < 1:
        raise ValueError(f"latent burst size must be >= 1, got {latent_burst}")
    ids: list[int] = []
    chains: list[ThoughtChain] = []
    while len(ids) < max_new_tokens:
        next_id = decode_next(ids)
        ids.append(next_id)
        if next_id == eos_id:
            break
        if next_id == newline_id and len(chains) < max_segments:
            chains.append(run_burst(latent_burst))
    return ids, chains
