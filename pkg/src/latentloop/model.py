"""Full model assembly and the end-to-end forward paths.

Wires encoder -> projector -> LM -> selection -> fusion -> objectives into
the canonical pipeline: encode and project the image, run one pass over
[visual; question] to pick the salient window, loop the fusion engine K
times splicing each thought back into the LM context after <|bot|>, close
with <|eot|>, then decode the answer conditioned on the enriched context.
`training_forward` runs the same pipeline batched and returns every loss
term; `infer` is the single-example greedy path used for evaluation,
analysis, and export.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .backbone import ToyLM, VisionEncoder, VisionProjector, generate_greedy
from .config import RunConfig
from .data import BOT, EOS, EOT, NEWLINE, PAD, SyntheticExample
from .diffusion import Denoiser, build_schedule, make_latent_target, recon_loss
from .errors import ShapeError
from .fusion import FusionEngine, ThoughtChain, init_thought_state, interleaved_generate
from .losses import AlignmentHeads, LossWeights, SequenceTargets, sequence_nll, symmetric_info_nce
from .rng import stream
from .selection import SaliencySelection, apply_mask_batched, select_window
from .tensor import Tensor

PARAM_GROUPS = ("vision_encoder", "vision_projector", "lm", "lqformer", "denoiser")


@dataclass
class InferenceResult:
    ids: list
    chain: ThoughtChain
    selection: Optional[SaliencySelection]
    token_count: int
    first_token_attention: Optional[np.ndarray] = None  # [P] saliency of the first generated token
    segments: list = field(default_factory=list)  # burst chains (interleaved mode)


class ReasonerModel:
    def __init__(self, cfg: RunConfig, seed: Optional[int] = None):
        self.cfg = cfg
        self.seed = cfg.seed if seed is None else seed
        s = self.seed
        self.encoder = VisionEncoder(cfg.d_patch, cfg.d_v, cfg.grid_h, cfg.grid_w, cfg.enc_layers, stream(s, "init", "encoder"))
        self.projector = VisionProjector(cfg.d_v, cfg.d_t, stream(s, "init", "projector"))
        self.lm = ToyLM(cfg.vocab_size, cfg.d_t, cfg.lm_layers, cfg.lm_heads, cfg.max_seq, stream(s, "init", "lm"))
        self.fusion = FusionEngine(cfg.d_v, cfg.d_t, cfg.fusion_heads, stream(s, "init", "fusion"))
        self.heads = AlignmentHeads(cfg.d_t, cfg.d_v, cfg.d_p, stream(s, "init", "heads"))
        self.denoiser = Denoiser(
            cfg.recon_channels,
            cfg.denoiser_channels,
            cfg.d_t,
            stream(s, "init", "denoiser"),
            layers_per_block=cfg.denoiser_layers_per_block,
            max_thoughts=max(16, cfg.k_steps),
        )
        self.schedule = build_schedule(cfg.schedule_kind, cfg.beta_start, cfg.beta_end, cfg.t_diff)
        self.weights = LossWeights(
            lambda1=0.0 if cfg.no_prefix else cfg.lambda1,
            lambda2=0.0 if cfg.no_nce else cfg.lambda2,
            lambda3=0.0 if cfg.no_recon else cfg.lambda3,
            tau=cfg.tau,
        )

    # -- parameter registry ---------------------------------------------------

    def param_groups(self) -> dict:
        """The frozen/trainable partition unit: delimiter embeddings and the
        alignment heads train with the fusion module, so they live in its group."""
        lq = dict(self.fusion.params)
        lq.update(self.heads.params)
        return {
            "vision_encoder": self.encoder.params,
            "vision_projector": self.projector.params,
            "lm": self.lm.params,
            "lqformer": lq,
            "denoiser": self.denoiser.params,
        }

    def named_parameters(self) -> dict:
        out = {}
        for group, params in self.param_groups().items():
            for name, tensor in params.items():
                out[f"{group}/{name}"] = tensor
        return out

    def set_trainable(self, groups):
        for group, params in self.param_groups().items():
            flag = group in groups
            for tensor in params.values():
                tensor.requires_grad = flag

    # -- shared context building ------------------------------------------------

    def _visual_tokens(self, patches: np.ndarray):
        """Frozen-encoder features (constant) and their trainable projection."""
        with T.no_grad():
            feat = self.encoder.encode(Tensor(patches))
        v_const = Tensor(feat.tokens.data)
        return v_const, self.projector.project(v_const)

    def _row(self, vec: Tensor, batch: Optional[int]) -> Tensor:
        if batch is None:
            return T.reshape(vec, (1, -1))
        return T.reshape(vec, (1, 1, -1)) + Tensor(np.zeros((batch, 1, vec.shape[0])))

    def _select_from_attention(self, attention: np.ndarray, n_visual: int):
        """Per-example window selection from detached [.., L, H, 1, S] attention."""
        cfg = self.cfg
        if attention.ndim == 4:
            attention = attention[None]
        masks = np.ones((attention.shape[0], n_visual))
        selections = []
        for b in range(attention.shape[0]):
            saliency = attention[b, :, :, 0, :n_visual].mean(axis=(0, 1))
            sel = select_window(saliency, cfg.grid_h, cfg.grid_w, cfg.window)
            selections.append(sel)
            masks[b] = sel.mask
        return masks, selections

    # -- batched training forward -------------------------------------------------

    def training_forward(self, batch: list, step_rng, active_losses: frozenset = frozenset({"latent_total"})):
        """Run the full pipeline over a batch and return the loss terms.

        active_losses = {"ar"} runs the plain [visual; question] -> Y path
        (stage I); {"latent_total"} runs selection, K fusion steps, the
        thoughts-only prefix pass, contrastive alignment, and reconstruction.
        Every example in the batch must share its question/target lengths.
        """
        cfg = self.cfg
        bsz = len(batch)
        n_vis = cfg.n_visual_tokens
        patches = np.stack([ex.image_patches for ex in batch])
        q_ids = np.stack([ex.question_ids for ex in batch])
        y_ids = np.stack([ex.y_ids for ex in batch])
        y_len = y_ids.shape[1]

        v_const, v_t = self._visual_tokens(patches)
        q_emb = self.lm.embed_ids(q_ids)
        base = T.concat([v_t, q_emb], axis=1)
        img_span = (0, n_vis)

        plain = "ar" in active_losses and "latent_total" not in active_losses
        k_steps = 0 if (plain or cfg.no_lqformer) else cfg.k_steps

        losses: dict[str, Tensor] = {}
        chain = ThoughtChain()
        selections = None

        if k_steps > 0:
            if cfg.no_selection:
                masks = np.ones((bsz, n_vis))
            else:
                with T.no_grad():
                    rec0 = self.lm.forward(base, img_span)
                masks, selections = self._select_from_attention(rec0.attention.data, n_vis)
            v_sel = apply_mask_batched(v_const, masks)

            bot = self._row(self.fusion.params["bot_emb"], bsz)
            h0 = T.tmean(q_emb, axis=-2)
            chain = ThoughtChain(h0=h0)
            for k in range(1, k_steps + 1):
                if k == 1 and cfg.h0_first_query:
                    h_k = h0
                else:
                    ctx = T.concat([base, bot] + [T.reshape(z, (bsz, 1, cfg.d_t)) for z in chain.thoughts], axis=1)
                    rec = self.lm.forward(ctx, img_span)
                    if cfg.reselect_each_step and not cfg.no_selection:
                        masks, selections = self._select_from_attention(rec.attention.data, n_vis)
                        v_sel = apply_mask_batched(v_const, masks)
                    h_k = self._context_state(rec)
                chain.thoughts.append(self.fusion.fusion_step(h_k, v_sel))
            chain.record_distances()

            eot = self._row(self.fusion.params["eot_emb"], bsz)
            z_rows = [T.reshape(z, (bsz, 1, cfg.d_t)) for z in chain.thoughts]
            ctx_full = T.concat([base, bot] + z_rows + [eot], axis=1)
        else:
            ctx_full = base

        ctx_len = ctx_full.shape[1]
        y_in = self.lm.embed_ids(y_ids[:, :-1])
        rec_ar = self.lm.forward(T.concat([ctx_full, y_in], axis=1), img_span)
        logits_y = rec_ar.logits[:, ctx_len - 1 : ctx_len - 1 + y_len, :]
        l_ar = sequence_nll(logits_y, y_ids, pad_id=PAD)
        losses["ar"] = l_ar

        if plain or k_steps == 0:
            losses["total"] = l_ar
            return {"losses": losses, "chain": chain, "selections": selections, "logits_y": logits_y}

        # latent-prefix pass: predict the first |R| target tokens from the thoughts alone
        prefix_len = min(cfg.prefix_len, y_len)
        targets = SequenceTargets(full=list(y_ids[0]), prefix_len=prefix_len)
        l_prefix = Tensor(0.0)
        if self.weights.lambda1 != 0.0 and prefix_len > 0:
            bot = self._row(self.fusion.params["bot_emb"], bsz)
            eot = self._row(self.fusion.params["eot_emb"], bsz)
            ctx_p = T.concat([bot] + [T.reshape(z, (bsz, 1, cfg.d_t)) for z in chain.thoughts] + [eot], axis=1)
            cp = ctx_p.shape[1]
            if prefix_len > 1:
                ctx_p = T.concat([ctx_p, self.lm.embed_ids(y_ids[:, : prefix_len - 1])], axis=1)
            rec_p = self.lm.forward(ctx_p)
            logits_r = rec_p.logits[:, cp - 1 : cp - 1 + prefix_len, :]
            l_prefix = sequence_nll(logits_r, y_ids[:, :prefix_len], pad_id=PAD)
        losses["prefix"] = l_prefix
        ar_prefix = l_ar + self.weights.lambda1 * l_prefix

        # contrastive alignment over pooled thought / visual / rationale views
        l_nce = Tensor(0.0)
        if self.weights.lambda2 != 0.0:
            rat_len = len(batch[0].rationale_ids)
            f_z = self.heads.project_thoughts(T.stack(chain.thoughts, axis=1))
            f_v = self.heads.project_visual(v_const)
            f_t = self.heads.project_rationale(rec_ar.last_layer_hidden[:, ctx_len : ctx_len + rat_len, :])
            l_nce = symmetric_info_nce(f_z, f_v, f_t, self.weights.tau)
        losses["nce"] = l_nce

        l_recon = Tensor(0.0)
        if self.weights.lambda3 != 0.0:
            x0 = np.stack([self.latent_target(ex) for ex in batch])
            l_recon = recon_loss(
                Tensor(x0), chain, self.schedule, self.denoiser, step_rng,
                stop_gradient_chain=cfg.stop_grad_chain,
            )
        losses["recon"] = l_recon

        losses["total"] = ar_prefix + self.weights.lambda2 * l_nce + self.weights.lambda3 * l_recon
        return {
            "losses": losses,
            "chain": chain,
            "selections": selections,
            "targets": targets,
            "logits_y": logits_y,
        }

    def _context_state(self, rec) -> Tensor:
        if self.cfg.context_mode == "last_layer":
            return rec.per_layer_last_hidden[:, -1, :]
        return T.tmean(rec.per_layer_last_hidden, axis=-2)

    def latent_target(self, ex: SyntheticExample) -> np.ndarray:
        cfg = self.cfg
        return make_latent_target(
            ex.image_patches, cfg.grid_h, cfg.grid_w,
            (cfg.recon_channels, cfg.recon_h, cfg.recon_w), cfg.seed,
        )

    # -- single-example inference ---------------------------------------------------

    def _prepare_context(self, ex: SyntheticExample, k_steps: Optional[int] = None,
                         adaptive: Optional[dict] = None):
        cfg = self.cfg
        n_vis = cfg.n_visual_tokens
        v_const, v_t = self._visual_tokens(ex.image_patches[None])
        v_t = v_t[0]
        v_const = Tensor(v_const.data[0])
        q_emb = self.lm.embed_ids(np.asarray(ex.question_ids))
        base = T.concat([v_t, q_emb], axis=0)
        img_span = (0, n_vis)

        k = 0 if cfg.no_lqformer else (cfg.k_steps if k_steps is None else k_steps)
        selection = None
        if k == 0 and adaptive is None:
            return base, ThoughtChain(), None, img_span, v_const

        if cfg.no_selection:
            v_sel = v_const
        else:
            rec0 = self.lm.forward(base, img_span)
            masks, sels = self._select_from_attention(rec0.attention.data, n_vis)
            selection = sels[0]
            if cfg.drop_masked_keys:
                keep = np.flatnonzero(masks[0])
                v_sel = Tensor(v_const.data[keep])
            else:
                v_sel = Tensor(v_const.data * masks[0][:, None])

        bot = self._row(self.fusion.params["bot_emb"], None)
        h0 = init_thought_state(q_emb, cfg.h0_mode)

        def provider(thoughts):
            ctx = T.concat([base, bot] + [T.reshape(z, (1, cfg.d_t)) for z in thoughts], axis=0)
            rec = self.lm.forward(ctx, img_span)
            if self.cfg.context_mode == "last_layer":
                return rec.per_layer_last_hidden[-1]
            return T.tmean(rec.per_layer_last_hidden, axis=0)

        if adaptive is not None:
            chain = self.fusion.adaptive_reason(
                provider, v_sel, adaptive["metric"], adaptive["threshold"],
                adaptive.get("max_steps", max(2, cfg.k_steps)), h0=h0,
            )
        else:
            chain = self.fusion.reason_chain(provider, v_sel, k, h0=h0, h0_first_query=cfg.h0_first_query)

        if len(chain) > 0:
            eot = self._row(self.fusion.params["eot_emb"], None)
            ctx = T.concat([base, bot] + [T.reshape(z, (1, cfg.d_t)) for z in chain.thoughts] + [eot], axis=0)
        else:
            ctx = base
        return ctx, chain, selection, img_span, v_sel

    def infer(self, ex: SyntheticExample, k_steps: Optional[int] = None,
              adaptive: Optional[dict] = None, max_new_tokens: Optional[int] = None,
              collect_attention: bool = False) -> InferenceResult:
        """Greedy answer generation via the full pipeline (no gradients)."""
        cfg = self.cfg
        with T.no_grad():
            ctx, chain, selection, img_span, _ = self._prepare_context(ex, k_steps, adaptive)
            attn = None
            if collect_attention:
                rec = self.lm.forward(ctx, img_span)
                attn = rec.attention.data[:, :, 0, : cfg.n_visual_tokens].mean(axis=(0, 1))
            ids = generate_greedy(self.lm, ctx, EOS, cfg.max_new_tokens if max_new_tokens is None else max_new_tokens)
        return InferenceResult(
            ids=ids, chain=chain, selection=selection,
            token_count=len(ids), first_token_attention=attn,
        )

    def interleaved_infer(self, ex: SyntheticExample, latent_burst: int, max_segments: int,
                          max_new_tokens: Optional[int] = None) -> InferenceResult:
        """Alternate text decoding with latent bursts triggered by newline tokens."""
        cfg = self.cfg
        with T.no_grad():
            ctx, chain, selection, img_span, v_sel = self._prepare_context(ex)
            state = {"ctx": ctx}
            bot = self._row(self.fusion.params["bot_emb"], None)
            eot = self._row(self.fusion.params["eot_emb"], None)

            def decode_next(_ids):
                rec = self.lm.forward(state["ctx"])
                next_id = int(np.argmax(rec.logits.data[-1]))
                state["ctx"] = T.concat([state["ctx"], self.lm.embed_ids([next_id])], axis=0)
                return next_id

            def provider(thoughts):
                extra = [bot] + [T.reshape(z, (1, cfg.d_t)) for z in thoughts]
                rec = self.lm.forward(T.concat([state["ctx"]] + extra, axis=0))
                return T.tmean(rec.per_layer_last_hidden, axis=0)

            def run_burst(n):
                burst = self.fusion.reason_chain(provider, v_sel, n)
                rows = [bot] + [T.reshape(z, (1, cfg.d_t)) for z in burst.thoughts] + [eot]
                state["ctx"] = T.concat([state["ctx"]] + rows, axis=0)
                return burst

            ids, segments = interleaved_generate(
                decode_next, run_burst, NEWLINE, EOS, latent_burst, max_segments,
                cfg.max_new_tokens if max_new_tokens is None else max_new_tokens,
            )
        return InferenceResult(
            ids=ids, chain=chain, selection=selection,
            token_count=len(ids), segments=segments,
        )


def answer_matches(ids: list, answer_ids: list) -> bool:
    """Exact-match accuracy rule: after truncating at the first end-of-sequence
    token (inclusive), the generation must end with the target answer ids."""
    if EOS in ids:
        ids = ids[: ids.index(EOS) + 1]
    else:
        return False
    if len(ids) < len(answer_ids):
        return False
    return list(ids[-len(answer_ids):]) == list(answer_ids)


def evaluate(model: ReasonerModel, examples, k_steps: Optional[int] = None,
             interleaved: Optional[dict] = None) -> dict:
    """Exact-match accuracy and mean generated-token count over a dataset."""
    correct = 0
    tokens = 0
    results = []
    for ex in examples:
        if interleaved is not None:
            res = model.interleaved_infer(ex, interleaved["latent_burst"], interleaved["max_segments"])
        else:
            res = model.infer(ex, k_steps=k_steps)
        results.append(res)
        tokens += res.token_count
        correct += int(answer_matches(res.ids, ex.answer_ids))
    n = max(1, len(examples))
    return {"accuracy": correct / n, "mean_tokens": tokens / n, "results": results}
