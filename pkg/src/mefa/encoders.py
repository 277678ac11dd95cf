"""Toy dual encoders.

Both modalities produce the same feature layout: a stack of local
embeddings (one per image patch or text token) plus a single global
embedding taken from a learned slot prepended to the sequence. The
stack is a small single-head self-attention network; capacity is
deliberately tiny, the interface is what matters downstream.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .data import Caption, EncodedItem, ImageGrid, UNK_TOKEN
from .numerics import (
    Tensor,
    matmul,
    reshape,
    slice_rows,
    softmax,
    take_rows,
    tanh,
    transpose,
    vstack,
)


@dataclass
class EncoderConfig:
    dim: int = 64
    depth: int = 2
    patch: int = 8
    image_h: int = 32
    image_w: int = 32
    image_c: int = 3
    mlp_hidden: int = 64
    max_tokens: int = 77

    @property
    def n_patches(self) -> int:
        if self.image_h % self.patch or self.image_w % self.patch:
            raise ValueError(
                f"image {self.image_h}x{self.image_w} not divisible by patch {self.patch}"
            )
        return (self.image_h // self.patch) * (self.image_w // self.patch)

    @property
    def patch_values(self) -> int:
        return self.patch * self.patch * self.image_c


def build_vocab(captions: Iterable[Caption], extra_words: Iterable[str] = ()) -> dict[str, int]:
    """Token -> id map with the unknown token reserved at id 0."""
    words = set(extra_words)
    for cap in captions:
        words.update(cap.tokens)
    words.discard(UNK_TOKEN)
    vocab = {UNK_TOKEN: 0}
    for i, w in enumerate(sorted(words), start=1):
        vocab[w] = i
    return vocab


def patch_grid(values: np.ndarray, patch: int) -> np.ndarray:
    """Split an HxWxC grid into non-overlapping flattened patches, row-major."""
    h, w, c = values.shape
    if h % patch or w % patch:
        raise ValueError(f"image {h}x{w} not divisible by patch size {patch}")
    rows = h // patch
    cols = w // patch
    blocks = values.reshape(rows, patch, cols, patch, c)
    blocks = blocks.transpose(0, 2, 1, 3, 4)
    return blocks.reshape(rows * cols, patch * patch * c)


def init_encoder_params(config: EncoderConfig, vocab_size: int, seed: int,
                        dtype=np.float32) -> dict[str, Tensor]:
    """Seeded Gaussian initialization for both encoder towers."""
    rng = np.random.Generator(np.random.PCG64(seed))
    d = config.dim
    params: dict[str, Tensor] = {}

    def mat(name: str, rows: int, cols: int, scale: float) -> None:
        params[name] = Tensor(
            rng.standard_normal((rows, cols)) * scale, requires_grad=True, dtype=dtype
        )

    mat("img.patch_w", config.patch_values, d, config.patch_values ** -0.5)
    mat("img.patch_b", 1, d, 0.0)
    mat("img.cls", 1, d, 0.2)
    mat("img.pos", config.n_patches + 1, d, 0.05)

    mat("txt.embed", vocab_size, d, 0.2)
    mat("txt.cls", 1, d, 0.2)
    mat("txt.pos", config.max_tokens + 1, d, 0.05)

    for tower in ("img", "txt"):
        for layer in range(config.depth):
            pre = f"{tower}.blk{layer}"
            for w in ("wq", "wk", "wv", "wo"):
                mat(f"{pre}.{w}", d, d, d ** -0.5)
            mat(f"{pre}.w1", d, config.mlp_hidden, d ** -0.5)
            mat(f"{pre}.b1", 1, config.mlp_hidden, 0.0)
            mat(f"{pre}.w2", config.mlp_hidden, d, config.mlp_hidden ** -0.5)
            mat(f"{pre}.b2", 1, d, 0.0)
    return params


def _attention_block(x: Tensor, params: dict[str, Tensor], prefix: str, dim: int) -> Tensor:
    q = matmul(x, params[f"{prefix}.wq"])
    k = matmul(x, params[f"{prefix}.wk"])
    v = matmul(x, params[f"{prefix}.wv"])
    # the 1/sqrt(D) score scaling rides on the softmax temperature
    attn = softmax(matmul(q, transpose(k)), temperature=dim ** 0.5, axis=-1)
    x = x + matmul(matmul(attn, v), params[f"{prefix}.wo"])
    hidden = tanh(matmul(x, params[f"{prefix}.w1"]) + params[f"{prefix}.b1"])
    return x + matmul(hidden, params[f"{prefix}.w2"]) + params[f"{prefix}.b2"]


class DualEncoder:
    """Image and text towers sharing one embedding dimension."""

    def __init__(self, config: EncoderConfig, vocab: dict[str, int],
                 params: dict[str, Tensor]):
        self.config = config
        self.vocab = vocab
        self.params = params

    @classmethod
    def create(cls, config: EncoderConfig, vocab: dict[str, int], seed: int,
               dtype=np.float32) -> "DualEncoder":
        return cls(config, vocab, init_encoder_params(config, len(vocab), seed, dtype))

    # -- image tower -----------------------------------------------------------

    def encode_patches(self, patches: np.ndarray, identity_id: int) -> EncodedItem:
        """Encode pre-extracted patches (the hot path for training loops)."""
        cfg = self.config
        x = matmul(Tensor(patches.astype(self.params["img.patch_w"].dtype)),
                   self.params["img.patch_w"]) + self.params["img.patch_b"]
        x = vstack(self.params["img.cls"], x)
        x = x + take_rows(self.params["img.pos"], list(range(patches.shape[0] + 1)))
        for layer in range(cfg.depth):
            x = _attention_block(x, self.params, f"img.blk{layer}", cfg.dim)
        n = patches.shape[0]
        return EncodedItem(
            locals=slice_rows(x, 1, n + 1),
            global_feat=reshape(slice_rows(x, 0, 1), (cfg.dim,)),
            identity_id=identity_id,
        )

    def encode_image(self, img: ImageGrid) -> EncodedItem:
        return self.encode_patches(patch_grid(img.values, self.config.patch),
                                   img.identity_id)

    # -- text tower ------------------------------------------------------------

    def token_ids(self, tokens: list[str]) -> list[int]:
        return [self.vocab.get(t, self.vocab[UNK_TOKEN]) for t in tokens]

    def encode_tokens(self, token_ids: list[int], identity_id: int,
                      truncated: bool = False) -> EncodedItem:
        if not token_ids:
            raise ValueError("cannot encode an empty caption")
        cfg = self.config
        x = take_rows(self.params["txt.embed"], token_ids)
        x = vstack(self.params["txt.cls"], x)
        m = len(token_ids)
        x = x + take_rows(self.params["txt.pos"], list(range(m + 1)))
        for layer in range(cfg.depth):
            x = _attention_block(x, self.params, f"txt.blk{layer}", cfg.dim)
        return EncodedItem(
            locals=slice_rows(x, 1, m + 1),
            global_feat=reshape(slice_rows(x, 0, 1), (cfg.dim,)),
            identity_id=identity_id,
            truncated=truncated,
        )

    def encode_text(self, cap: Caption) -> EncodedItem:
        ids = self.token_ids(cap.tokens)
        truncated = len(ids) > self.config.max_tokens
        if truncated:
            ids = ids[: self.config.max_tokens]
        return self.encode_tokens(ids, cap.identity_id, truncated=truncated)
