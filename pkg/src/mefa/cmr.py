"""Cross-modal refinement pathway.

Local features of one modality are reweighted by their total attention
mass against the other modality's locals (one softmax over all patch/token
pairs), then fused with the item's global embedding through a tanh gate.
A soft-label symmetric contrastive loss (NITC) aligns the refined global
summaries of matched pairs across the batch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import EncodedItem
from .numerics import (
    Tensor,
    concat_last_dim,
    log,
    matmul,
    normalize_rows,
    reshape,
    softmax,
    stack_rows,
    tanh,
    tmean,
    transpose,
    tsum,
)


@dataclass
class FusionParams:
    """Learnable gate and projection for one modality's refinement."""

    w_u: Tensor  # content projection, 2D -> D
    w_f: Tensor  # gate projection, 2D -> D
    b_f: Tensor  # gate bias, 1 x D
    w_p: Tensor  # summary projection for the refined global, 2D -> D

    @classmethod
    def create(cls, dim: int, seed: int, dtype=np.float32) -> "FusionParams":
        rng = np.random.Generator(np.random.PCG64(seed))
        scale = (2 * dim) ** -0.5

        def mat(rows, cols, s):
            return Tensor(rng.standard_normal((rows, cols)) * s,
                          requires_grad=True, dtype=dtype)

        # w_p starts as a passthrough of the global half of its input, so the
        # refined summary initially equals the encoder global (plus a small
        # learnable contribution from the refined locals) instead of a random
        # mixture fighting the rest of the objective
        w_p = rng.standard_normal((2 * dim, dim)) * (0.1 * scale)
        w_p[dim:, :] += np.eye(dim)
        return cls(
            w_u=mat(2 * dim, dim, scale),
            w_f=mat(2 * dim, dim, scale),
            b_f=Tensor(np.zeros((1, dim)), requires_grad=True, dtype=dtype),
            w_p=Tensor(w_p, requires_grad=True, dtype=dtype),
        )

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w_u": self.w_u, f"{prefix}.w_f": self.w_f,
                f"{prefix}.b_f": self.b_f, f"{prefix}.w_p": self.w_p}


@dataclass
class RefinedPair:
    """One matched image/text pair after cross-modal refinement."""

    image_locals_refined: Tensor  # n x D
    text_locals_refined: Tensor   # M x D
    attention: Tensor             # n x M, entries sum to 1
    g_img: Tensor                 # D, refined image summary
    g_txt: Tensor                 # D, refined text summary


def attention_weights(img_locals: Tensor, txt_locals: Tensor) -> Tensor:
    """Pairwise cosine similarities, softmax-normalized over all n*M entries."""
    sims = matmul(normalize_rows(img_locals), transpose(normalize_rows(txt_locals)))
    return softmax(sims, axis=None)


def weight_locals(attn: Tensor, img_locals: Tensor,
                  txt_locals: Tensor) -> tuple[Tensor, Tensor]:
    """Scale each local by its total cross-modal attention mass."""
    n, m = attn.shape
    if img_locals.shape[0] != n or txt_locals.shape[0] != m:
        raise ValueError(
            f"attention {attn.shape} does not match locals "
            f"{img_locals.shape} / {txt_locals.shape}"
        )
    img_mass = tsum(attn, axis=1, keepdims=True)            # n x 1
    txt_mass = transpose(tsum(attn, axis=0, keepdims=True))  # M x 1
    return img_locals * img_mass, txt_locals * txt_mass


def gated_fuse(locals_hat: Tensor, global_feat: Tensor,
               params: FusionParams) -> Tensor:
    """Fuse each weighted local with the global: (W_u c) * tanh(W_f c + b_f).

    c is the row-wise concatenation of the local with the global embedding.
    """
    r = locals_hat.shape[0]
    ones = Tensor(np.ones((r, 1), dtype=locals_hat.dtype))
    g_rows = matmul(ones, reshape(global_feat, (1, global_feat.shape[0])))
    c = concat_last_dim(locals_hat, g_rows)
    content = matmul(c, params.w_u)
    gate = tanh(matmul(c, params.w_f) + params.b_f)
    return content * gate


def refined_summary(locals_refined: Tensor, global_feat: Tensor,
                    params: FusionParams) -> Tensor:
    """Project [mean of refined locals ++ encoder global] back to D."""
    pooled = tmean(locals_refined, axis=0)
    joint = concat_last_dim(pooled, global_feat)
    out = matmul(reshape(joint, (1, joint.shape[0])), params.w_p)
    return reshape(out, (out.shape[1],))


def refine_pair(img: EncodedItem, txt: EncodedItem,
                img_params: FusionParams, txt_params: FusionParams) -> RefinedPair:
    attn = attention_weights(img.locals, txt.locals)
    v_hat, t_hat = weight_locals(attn, img.locals, txt.locals)
    v_ref = gated_fuse(v_hat, img.global_feat, img_params)
    t_ref = gated_fuse(t_hat, txt.global_feat, txt_params)
    return RefinedPair(
        image_locals_refined=v_ref,
        text_locals_refined=t_ref,
        attention=attn,
        g_img=refined_summary(v_ref, img.global_feat, img_params),
        g_txt=refined_summary(t_ref, txt.global_feat, txt_params),
    )


def identity_targets(identity_ids: Sequence[int], dtype=np.float64) -> np.ndarray:
    """Row-stochastic target matrix: uniform over batch entries sharing the row's identity."""
    ids = np.asarray(identity_ids)
    same = ids[:, None] == ids[None, :]
    return (same / same.sum(axis=1, keepdims=True)).astype(dtype)


def loss_nitc(img_globals: Sequence[Tensor], txt_globals: Sequence[Tensor],
              identity_ids: Sequence[int], temperature: float = 0.07) -> Tensor:
    """Symmetric soft-label cross-entropy between matched global summaries.

    Predictions are softmax-over-batch cosine similarities at the given
    temperature, in both retrieval directions; targets spread mass uniformly
    over same-identity entries.
    """
    n = len(img_globals)
    if n < 2:
        raise ValueError(f"batch must hold at least 2 pairs, got {n}")
    if not (n == len(txt_globals) == len(identity_ids)):
        raise ValueError("globals and identity labels must align")
    img = normalize_rows(stack_rows(img_globals))
    txt = normalize_rows(stack_rows(txt_globals))
    sims = matmul(img, transpose(txt))
    log_q = log(softmax(sims, temperature=temperature, axis=1))  # image -> text
    log_p = log(softmax(sims, temperature=temperature, axis=0))  # text -> image
    targets = Tensor(identity_targets(identity_ids, dtype=img.dtype))
    total = tsum(targets * log_q) + tsum(targets * log_p)
    return total * (-1.0 / (2.0 * n))
