"""Discriminative clue correction pathway.

Words that are only secondarily similar to the paired image (adjectives,
rare nouns) carry the cues that separate lookalike identities. This module
profiles per-token relevance against image regions, pools the top-K tokens
inside an intermediate-similarity percentile band into a corrective cue
embedding, and applies a cue-to-image contrastive loss over the batch.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import EncodedItem
from .numerics import (
    DegenerateInputError,
    Tensor,
    log,
    matmul,
    normalize_rows,
    softmax,
    stack_rows,
    take_rows,
    tmean,
    transpose,
    tsum,
)


@dataclass
class DccParams:
    k: int = 5
    band: tuple[float, float] = (40.0, 80.0)
    tau: float = 0.07

    def __post_init__(self):
        lo, hi = self.band
        if not (0.0 <= lo < hi <= 100.0):
            raise ValueError(f"band must satisfy 0 <= lo < hi <= 100, got {self.band}")
        if self.k < 1:
            raise ValueError(f"k must be at least 1, got {self.k}")
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")


@dataclass
class CueState:
    """Selected secondary-relevance tokens pooled into one cue embedding."""

    word_indices: list[int]
    cue_embedding: Tensor
    similarity_band: tuple[float, float]
    fallback: bool = False


def word_relevance_profile(text_item: EncodedItem,
                           image_item: EncodedItem) -> list[tuple[int, float]]:
    """Per-token relevance: max cosine against any image local.

    Returned sorted by descending relevance, ties by ascending token index.
    """
    img = image_item.locals.numpy().astype(np.float64)
    txt = text_item.locals.numpy().astype(np.float64)
    if img.size == 0 or txt.size == 0:
        raise ValueError("both items must be nonempty")
    img_n = np.linalg.norm(img, axis=1)
    txt_n = np.linalg.norm(txt, axis=1)
    tiny = np.finfo(np.float64).tiny
    if np.any(img_n < tiny) or np.any(txt_n < tiny):
        raise DegenerateInputError("zero-norm local row in relevance profile")
    sims = (img / img_n[:, None]) @ (txt / txt_n[:, None]).T
    relevance = sims.max(axis=0)
    order = sorted(range(len(relevance)), key=lambda j: (-relevance[j], j))
    return [(j, float(relevance[j])) for j in order]


def _percentile_ranks(values: np.ndarray) -> np.ndarray:
    """Empirical CDF percent rank: 100 * fraction of values <= each value."""
    return 100.0 * (values[:, None] >= values[None, :]).mean(axis=1)


def build_cue_state(profile: Sequence[tuple[int, float]], token_feats: Tensor,
                    params: DccParams) -> CueState:
    """Pool the top-K tokens whose relevance sits inside the percentile band.

    Band membership uses empirical-CDF percent ranks, lo inclusive and hi
    exclusive, so the most relevant token (rank 100) stays out whenever
    hi < 100. An empty band falls back to the tokens ranked 2..K+1 overall.
    """
    if not profile:
        raise ValueError("empty relevance profile")
    lo, hi = params.band
    indices = np.array([j for j, _ in profile])
    rels = np.array([r for _, r in profile])
    ranks = _percentile_ranks(rels)
    in_band = (ranks >= lo) & (ranks < hi)

    fallback = not in_band.any()
    if fallback:
        chosen = [indices[pos] for pos in range(1, min(params.k + 1, len(profile)))]
        if not chosen:  # single-token caption: nothing below the top
            chosen = [indices[0]]
    else:
        band_positions = [pos for pos in range(len(profile)) if in_band[pos]]
        chosen = [indices[pos] for pos in band_positions[: params.k]]

    chosen = [int(c) for c in chosen]
    cue = tmean(take_rows(token_feats, chosen), axis=0)
    if float(np.linalg.norm(cue.numpy())) < np.finfo(np.float64).tiny:
        raise DegenerateInputError("cue embedding has zero norm")
    return CueState(word_indices=chosen, cue_embedding=cue,
                    similarity_band=(lo, hi), fallback=fallback)


def loss_ditc(cue_states: Sequence[CueState], image_items: Sequence[EncodedItem],
              params: DccParams | None = None) -> Tensor:
    """Cue-to-image contrastive loss: -sum_i log softmax_j cos(R_i, vbar_j) / tau.

    vbar_j is the mean of image j's local embeddings; the matching image of
    each cue is the positive.
    """
    params = params or DccParams()
    n = len(cue_states)
    if n < 2:
        raise ValueError(f"batch must hold at least 2 items, got {n}")
    if n != len(image_items):
        raise ValueError("cue states and image items must align")
    cues = normalize_rows(stack_rows([c.cue_embedding for c in cue_states]))
    pooled = normalize_rows(stack_rows([tmean(item.locals, axis=0)
                                        for item in image_items]))
    sims = matmul(cues, transpose(pooled))
    log_prob = log(softmax(sims, temperature=params.tau, axis=1))
    eye = Tensor(np.eye(n, dtype=sims.dtype))
    return -tsum(log_prob * eye)


def write_profile_tsv(path: str | Path, rows: Sequence[tuple[str, str, float]]) -> None:
    """Export (token, pos_tag, relevance) rows as TSV."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(["token", "pos_tag", "relevance"])
        for token, tag, rel in rows:
            writer.writerow([token, tag, f"{rel:.6f}"])
