"""Toy stand-ins for the vision encoder, the vision-to-language projector,
and the decoder language model.

These are real (random-initialized, trainable) networks at desk scale, not
mocks.  They expose exactly the internal signals the latent-reasoning
machinery consumes: projected visual tokens, the final-position hidden state
of every LM layer, last-query attention tensors, and logits.  The vision
encoder is permanently frozen by the curriculum; everything else trains in
some stage.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor

NEG_INF = -1e30


@dataclass
class VisualFeatures:
    """Encoder output: one feature row per patch, row-major over the grid.
    `tokens` is [N_v, d_v], or [B, N_v, d_v] for a batched encode."""

    tokens: Tensor
    grid_h: int
    grid_w: int

    def __post_init__(self):
        n = self.tokens.shape[-2]
        if n != self.grid_h * self.grid_w:
            raise ShapeError(f"{n} visual tokens cannot tile a {self.grid_h}x{self.grid_w} grid")

    def to_grid(self) -> np.ndarray:
        return self.tokens.data.reshape(self.tokens.shape[:-2] + (self.grid_h, self.grid_w, -1))


@dataclass
class TextSequence:
    ids: list
    embeddings: Tensor  # [M_t, d_t]


@dataclass
class LMForwardRecord:
    """Signals recorded during one LM forward pass.

    `attention` keeps only the final-position query row of every layer/head
    (shape [..., L, N_h, 1, S]): that is the query the selection mechanism
    and the attention statistics consume.  `logits` and the hidden-state
    fields stay on the gradient tape.
    """

    per_layer_last_hidden: Tensor  # [..., L, d_t]
    attention: Tensor  # [..., L, N_h, 1, S]
    logits: Tensor  # [..., S, vocab]
    last_layer_hidden: Tensor  # [..., S, d_t]
    img_span: Optional[tuple] = None


def _init_weight(rng, fan_in: int, fan_out: int, gain: float = 1.0) -> Tensor:
    return Tensor(rng.standard_normal((fan_in, fan_out)) * (gain / np.sqrt(fan_in)), requires_grad=True)


def _zeros(*shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def _ones(*shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


class VisionEncoder:
    """Linear patch embedding + learned positional table + a few single-head
    self-attention layers.  Deterministic under its init stream; never trained."""

    def __init__(self, d_patch: int, d_v: int, grid_h: int, grid_w: int, layers: int, rng):
        self.d_patch = d_patch
        self.d_v = d_v
        self.grid_h = grid_h
        self.grid_w = grid_w
        self.n_tokens = grid_h * grid_w
        self.params: dict[str, Tensor] = {
            "patch_w": _init_weight(rng, d_patch, d_v),
            "patch_b": _zeros(d_v),
            "pos": Tensor(rng.standard_normal((self.n_tokens, d_v)) * 0.02, requires_grad=True),
        }
        for i in range(layers):
            for name in ("wq", "wk", "wv", "wo"):
                self.params[f"block{i}.{name}"] = _init_weight(rng, d_v, d_v)
            self.params[f"block{i}.bo"] = _zeros(d_v)
        self.n_layers = layers

    def encode(self, patches: Tensor) -> VisualFeatures:
        patches = T.as_tensor(patches)
        if patches.shape[-2:] != (self.n_tokens, self.d_patch):
            raise ConfigError(
                f"expected patches [... x {self.n_tokens} x {self.d_patch}] for a "
                f"{self.grid_h}x{self.grid_w} grid, got {patches.shape}"
            )
        p = self.params
        h = T.linear(patches, p["patch_w"], p["patch_b"]) + p["pos"]
        scale = 1.0 / np.sqrt(self.d_v)
        for i in range(self.n_layers):
            q = T.matmul(h, p[f"block{i}.wq"])
            k = T.matmul(h, p[f"block{i}.wk"])
            v = T.matmul(h, p[f"block{i}.wv"])
            probs = T.softmax(T.matmul(q, T.swapaxes(k, -1, -2)) * scale, axis=-1)
            h = h + T.linear(T.matmul(probs, v), p[f"block{i}.wo"], p[f"block{i}.bo"])
        return VisualFeatures(tokens=h, grid_h=self.grid_h, grid_w=self.grid_w)


class VisionProjector:
    """Two-layer perceptron mapping encoder features into the LM embedding
    space.  `activation="none"` makes the map affine (used by contract tests
    that exercise exact identity behaviour)."""

    def __init__(self, d_v: int, d_t: int, rng, activation: str = "gelu"):
        if activation not in ("gelu", "none"):
            raise ConfigError(f"unknown projector activation {activation!r}")
        self.activation = activation
        self.params = {
            "w1": _init_weight(rng, d_v, d_t),
            "b1": _zeros(d_t),
            "w2": _init_weight(rng, d_t, d_t),
            "b2": _zeros(d_t),
        }

    def init_identity(self):
        d = self.params["w1"].shape
        if d[0] != d[1]:
            raise ConfigError(f"identity init needs d_v == d_t, got {d}")
        self.params["w1"].data = np.eye(d[0])
        self.params["b1"].data[:] = 0.0
        self.params["w2"].data = np.eye(d[0])
        self.params["b2"].data[:] = 0.0

    def project(self, v) -> Tensor:
        tokens = v.tokens if isinstance(v, VisualFeatures) else T.as_tensor(v)
        h = T.linear(tokens, self.params["w1"], self.params["b1"])
        if self.activation == "gelu":
            h = T.gelu(h)
        return T.linear(h, self.params["w2"], self.params["b2"])


class ToyLM:
    """Small causal decoder transformer operating directly on embeddings.

    Inputs are embedding sequences (soft tokens welcome), so visual rows and
    continuous thought vectors splice in without touching the vocabulary
    table.  forward() accepts [S, d_t] or batched [B, S, d_t].
    """

    def __init__(self, vocab: int, d_t: int, layers: int, heads: int, max_seq: int, rng):
        if d_t % heads != 0:
            raise ConfigError(f"d_t={d_t} not divisible by heads={heads}")
        self.vocab = vocab
        self.d_t = d_t
        self.n_layers = layers
        self.n_heads = heads
        self.max_seq = max_seq
        self.params: dict[str, Tensor] = {
            "tok_emb": Tensor(rng.standard_normal((vocab, d_t)) * 0.05, requires_grad=True),
            "pos_emb": Tensor(rng.standard_normal((max_seq, d_t)) * 0.02, requires_grad=True),
            "lnf_g": _ones(d_t),
            "lnf_b": _zeros(d_t),
            "head_w": _init_weight(rng, d_t, vocab),
            "head_b": _zeros(vocab),
        }
        for i in range(layers):
            self.params[f"block{i}.ln1_g"] = _ones(d_t)
            self.params[f"block{i}.ln1_b"] = _zeros(d_t)
            self.params[f"block{i}.w_qkv"] = _init_weight(rng, d_t, 3 * d_t)
            self.params[f"block{i}.b_qkv"] = _zeros(3 * d_t)
            self.params[f"block{i}.w_o"] = _init_weight(rng, d_t, d_t, gain=1.0 / np.sqrt(2 * layers))
            self.params[f"block{i}.b_o"] = _zeros(d_t)
            self.params[f"block{i}.ln2_g"] = _ones(d_t)
            self.params[f"block{i}.ln2_b"] = _zeros(d_t)
            self.params[f"block{i}.w_f1"] = _init_weight(rng, d_t, 4 * d_t)
            self.params[f"block{i}.b_f1"] = _zeros(4 * d_t)
            self.params[f"block{i}.w_f2"] = _init_weight(rng, 4 * d_t, d_t, gain=1.0 / np.sqrt(2 * layers))
            self.params[f"block{i}.b_f2"] = _zeros(d_t)

    def embed_ids(self, ids) -> Tensor:
        return T.take_rows(self.params["tok_emb"], np.asarray(ids, dtype=np.int64))

    def forward(self, x: Tensor, img_span: Optional[tuple] = None) -> LMForwardRecord:
        x = T.as_tensor(x)
        squeeze = x.ndim == 2
        if squeeze:
            x = T.reshape(x, (1,) + x.shape)
        if x.ndim != 3:
            raise ShapeError(f"lm_forward expects [S, d_t] or [B, S, d_t], got {x.shape}")
        b, s, d = x.shape
        if s < 1:
            raise ValueError("lm_forward: empty sequence")
        if s > self.max_seq:
            raise ConfigError(f"sequence length {s} exceeds max_seq {self.max_seq}")
        if d != self.d_t:
            raise ShapeError(f"embedding width {d} != d_t {self.d_t}")
        if img_span is not None:
            lo, hi = img_span
            if not (0 <= lo <= hi <= s):
                raise ValueError(f"img_span {img_span} outside sequence of length {s}")

        p = self.params
        h = x + p["pos_emb"][:s]
        mask = Tensor(np.triu(np.full((s, s), NEG_INF), k=1))
        dh = self.d_t // self.n_heads
        scale = 1.0 / np.sqrt(dh)
        last_hiddens = []
        attn_rows = []
        for i in range(self.n_layers):
            normed = T.layer_norm(h, p[f"block{i}.ln1_g"], p[f"block{i}.ln1_b"])
            qkv = T.linear(normed, p[f"block{i}.w_qkv"], p[f"block{i}.b_qkv"])
            q, k, v = qkv[:, :, : self.d_t], qkv[:, :, self.d_t : 2 * self.d_t], qkv[:, :, 2 * self.d_t :]
            # [B, S, d] -> [B, H, S, dh]
            q = T.swapaxes(T.reshape(q, (b, s, self.n_heads, dh)), 1, 2)
            k = T.swapaxes(T.reshape(k, (b, s, self.n_heads, dh)), 1, 2)
            v = T.swapaxes(T.reshape(v, (b, s, self.n_heads, dh)), 1, 2)
            scores = T.matmul(q, T.swapaxes(k, -1, -2)) * scale + mask
            probs = T.softmax(scores, axis=-1)
            ctx = T.reshape(T.swapaxes(T.matmul(probs, v), 1, 2), (b, s, self.d_t))
            h = h + T.linear(ctx, p[f"block{i}.w_o"], p[f"block{i}.b_o"])
            normed2 = T.layer_norm(h, p[f"block{i}.ln2_g"], p[f"block{i}.ln2_b"])
            ff = T.linear(T.gelu(T.linear(normed2, p[f"block{i}.w_f1"], p[f"block{i}.b_f1"])), p[f"block{i}.w_f2"], p[f"block{i}.b_f2"])
            h = h + ff
            last_hiddens.append(h[:, -1, :])  # [B, d_t]
            attn_rows.append(probs[:, :, -1:, :])  # [B, H, 1, S]

        final = T.layer_norm(h, p["lnf_g"], p["lnf_b"])
        logits = T.linear(final, p["head_w"], p["head_b"])
        per_layer = T.stack(last_hiddens, axis=1)  # [B, L, d_t]
        attention = T.stack(attn_rows, axis=1)  # [B, L, H, 1, S]
        if squeeze:
            per_layer = per_layer[0]
            attention = attention[0]
            logits = logits[0]
            final = final[0]
        return LMForwardRecord(
            per_layer_last_hidden=per_layer,
            attention=attention,
            logits=logits,
            last_layer_hidden=final,
            img_span=img_span,
        )


def generate_greedy(lm: ToyLM, context: Tensor, eos_id: int, max_new_tokens: int) -> list:
    """Greedy autoregressive decoding from an embedding context.

    Returns the generated token ids (eos included when emitted).  Decoding is
    deterministic: argmax tie-break is lowest id.
    """
    context = T.as_tensor(context)
    if context.ndim != 2 or context.shape[0] < 1:
        raise ValueError(f"generation context must be a non-empty [S, d_t] sequence, got {context.shape}")
    ids: list[int] = []
    with T.no_grad():
        current = context
        for _ in range(max_new_tokens):
            rec = lm.forward(current)
            next_id = int(np.argmax(rec.logits.data[-1]))
            ids.append(next_id)
            if next_id == eos_id:
                break
            current = T.concat([current, lm.embed_ids([next_id])], axis=0)
    return ids
