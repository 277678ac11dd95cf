"""Intra-modal reasoning pathway.

Builds hard negatives inside each modality and scores the model against
them. Text negatives come in three tiers: swapping two nouns (subject and
object trade places), substituting a verb or adjective from a lexicon, and
masking a content word then refilling it from the corpus unigram
distribution of the same part of speech. Visual negatives are the top-k
most similar wrong-identity gallery items. Two losses consume them: a
margin hinge on single triplets and a batch contrastive term against the
hardest negative of each anchor's set.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import Caption, CorpusStats, EmbeddingBank, EncodedItem
from .numerics import Tensor, cosine_similarity, relu, softplus

TEXT_TIERS = (1, 2, 3)
VISUAL_TIER = "visual"


@dataclass
class ImrLossParams:
    """Margin and scaling for the two intra-modal losses.

    ``d_as_similarity`` keeps the literal cosine-similarity form of the
    separation score instead of the default cosine distance (1 - cos).
    """

    alpha: float = 0.2
    gamma: float = 8.0
    d_as_similarity: bool = False

    def __post_init__(self):
        if not 0.0 < self.alpha < 2.0:
            raise ValueError(f"alpha must be in (0, 2), got {self.alpha}")
        if self.gamma <= 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")


@dataclass
class NegativeSet:
    """Negatives attached to one anchor, with the rule that produced each."""

    anchor_id: int
    negatives: list[tuple[object, object]] = field(default_factory=list)
    provenance: list[str] = field(default_factory=list)
    shortfall: bool = False


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


# -- text perturbations -----------------------------------------------------------


def perturb_tier1_noun_swap(cap: Caption, seed: int = 0) -> Caption | None:
    """Exchange two differing noun tokens; None if the caption has no such pair.

    Prefers the first and last noun positions, scanning inward when those
    hold the same word. Deterministic regardless of seed.
    """
    nouns = [i for i, tag in enumerate(cap.pos_tags) if tag == "NOUN"]
    if len(nouns) < 2:
        return None
    for i in nouns:
        for j in reversed(nouns):
            if j > i and cap.tokens[i] != cap.tokens[j]:
                return cap.swapped(i, j)
    return None


def perturb_tier2_substitute(cap: Caption, lexicon: dict[str, Sequence[str]],
                             seed: int) -> Caption | None:
    """Replace one verb or adjective with a different same-POS lexicon word."""
    slots = []
    for i, tag in enumerate(cap.pos_tags):
        if tag in ("VERB", "ADJ"):
            alts = sorted(w for w in lexicon.get(tag, ()) if w != cap.tokens[i])
            if alts:
                slots.append((i, alts))
    if not slots:
        return None
    rng = _rng(seed)
    i, alts = slots[rng.integers(len(slots))]
    return cap.replaced(i, alts[rng.integers(len(alts))])


def perturb_tier3_mask_fill(cap: Caption, corpus_stats: CorpusStats,
                            seed: int) -> Caption | None:
    """Mask one content word and refill it from the same-POS corpus unigrams.

    The fill is drawn with probability proportional to corpus counts; the
    original word is never a candidate.
    """
    slots = []
    for i, tag in enumerate(cap.pos_tags):
        if tag in ("NOUN", "VERB", "ADJ"):
            words, probs = corpus_stats.candidates(tag, exclude=cap.tokens[i])
            if words:
                slots.append((i, words, probs))
    if not slots:
        return None
    rng = _rng(seed)
    i, words, probs = slots[rng.integers(len(slots))]
    return cap.replaced(i, words[rng.choice(len(words), p=probs)])


PERTURB_ORDER = (1, 2, 3)


def perturb_with_fallback(cap: Caption, lexicon: dict[str, Sequence[str]],
                          corpus_stats: CorpusStats, seed: int,
                          start_tier: int = 1) -> tuple[Caption, int] | None:
    """Apply the tier chain starting at ``start_tier``; None if no tier applies."""
    if start_tier not in PERTURB_ORDER:
        raise ValueError(f"unknown tier {start_tier}")
    chain = PERTURB_ORDER[PERTURB_ORDER.index(start_tier):]
    for tier in chain:
        if tier == 1:
            out = perturb_tier1_noun_swap(cap, seed)
        elif tier == 2:
            out = perturb_tier2_substitute(cap, lexicon, seed)
        else:
            out = perturb_tier3_mask_fill(cap, corpus_stats, seed)
        if out is not None:
            return out, tier
    return None


# -- visual negative mining ---------------------------------------------------------


def mine_visual_negatives(anchor: EncodedItem, gallery: EmbeddingBank,
                          k: int) -> NegativeSet:
    """Top-k most similar wrong-identity gallery items, ties by index.

    Similarity is cosine between global embeddings. Fewer than k candidates
    sets the shortfall flag instead of erroring.
    """
    if gallery.modality != "image":
        raise ValueError(f"visual mining needs an image gallery, got {gallery.modality}")
    if len(gallery) == 0:
        return NegativeSet(anchor_id=anchor.identity_id, shortfall=True)
    mat = gallery.globals_matrix().astype(np.float64)
    norms = np.linalg.norm(mat, axis=1)
    a = anchor.global_feat.numpy().astype(np.float64)
    an = np.linalg.norm(a)
    sims = (mat @ a) / (norms * an)
    order = np.argsort(-sims, kind="stable")
    picked = NegativeSet(anchor_id=anchor.identity_id)
    for idx in order:
        item = gallery.items[int(idx)]
        if item.identity_id == anchor.identity_id:
            continue
        picked.negatives.append((item, VISUAL_TIER))
        picked.provenance.append(f"gallery[{int(idx)}] sim={sims[idx]:.6f}")
        if len(picked.negatives) == k:
            break
    picked.shortfall = len(picked.negatives) < k
    return picked


# -- losses ------------------------------------------------------------------------


def _separation_score(u: Tensor, v: Tensor, params: ImrLossParams) -> Tensor:
    cos = cosine_similarity(u, v)
    return cos if params.d_as_similarity else 1.0 - cos


def loss_imr(f_a: Tensor, f_p: Tensor, f_n: Tensor,
             params: ImrLossParams | None = None) -> Tensor:
    """Hinge max(0, alpha + D(a,p) - D(a,n)) over cosine distances."""
    params = params or ImrLossParams()
    d_pos = _separation_score(f_a, f_p, params)
    d_neg = _separation_score(f_a, f_n, params)
    return relu(params.alpha + d_pos - d_neg)


def hinge_terms(f_a: Tensor, f_p: Tensor, negatives: Sequence[Tensor],
                params: ImrLossParams | None = None) -> list[Tensor]:
    """One hinge per negative, sharing the anchor-positive score."""
    params = params or ImrLossParams()
    d_pos = _separation_score(f_a, f_p, params)
    return [relu(params.alpha + d_pos - _separation_score(f_a, n, params))
            for n in negatives]


def loss_imc(anchors: Sequence[Tensor], positives: Sequence[Tensor],
             negative_sets: Sequence[Sequence[Tensor]],
             params: ImrLossParams | None = None) -> Tensor:
    """Mean of log(1 + exp(gamma * (D(a,p) - min_n D(a,n)))) over the batch.

    The min routes gradient to the single hardest negative (first index on
    ties), subgradient style.
    """
    params = params or ImrLossParams()
    if not (len(anchors) == len(positives) == len(negative_sets)):
        raise ValueError("anchors, positives, and negative sets must align")
    if len(anchors) == 0:
        raise ValueError("empty batch")
    terms = []
    for a, p, negs in zip(anchors, positives, negative_sets):
        if len(negs) == 0:
            raise ValueError("empty negative set")
        d_pos = _separation_score(a, p, params)
        d_negs = [_separation_score(a, n, params) for n in negs]
        hardest = int(np.argmin([d.item() for d in d_negs]))
        terms.append(softplus(params.gamma * (d_pos - d_negs[hardest])))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total / len(terms)
