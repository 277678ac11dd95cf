"""End-to-end training harness.

Wires the pathways together: per batch the matched pairs are encoded, the
enabled pathway losses (intra-modal text/visual negatives, cross-modal
refinement, discriminative cues) are added to a base global alignment
term, and LAMB applies the gradients under a linear warmup schedule.
Also provides evaluation against image galleries, checkpoint files,
ablation grids over the pathway toggles, and the high-frequency-noun
masking probe.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from pydantic import BaseModel, Field, model_validator

from . import __version__
from .cmr import FusionParams, loss_nitc, refine_pair
from .data import Caption, CorpusStats, EmbeddingBank, EncodedItem, ImageGrid
from .dcc import DccParams, build_cue_state, loss_ditc, word_relevance_profile
from .encoders import DualEncoder, EncoderConfig, build_vocab, patch_grid
from .evalret import (
    RetrievalReport,
    SimilarityMatrix,
    build_report,
    config_fingerprint,
    rank_gallery,
    rank_k_accuracy,
    similarity_matrix,
)
from .imr import (
    ImrLossParams,
    hinge_terms,
    loss_imc,
    mine_visual_negatives,
    perturb_tier1_noun_swap,
    perturb_tier2_substitute,
    perturb_tier3_mask_fill,
)
from .numerics import Tensor, no_grad
from .optim import LambState, lamb_step, lr_schedule

CHECKPOINT_MAGIC = b"MEFACKP1"
CHECKPOINT_VERSION = 1


class TrainConfig(BaseModel):
    """Everything a training run depends on; JSON-serializable."""

    # schedule and batching
    batch_size: int = Field(default=32, ge=2)
    epochs: int = Field(default=12, ge=1)
    passes_per_epoch: int = Field(default=1, ge=1)
    lr_start: float = Field(default=1e-6, gt=0)
    lr_end: float = Field(default=1e-5, gt=0)
    weight_decay: float = Field(default=0.0, ge=0)
    # tail weight averaging: the returned model is the mean of the last K
    # epoch-end parameter snapshots (1 = plain final parameters)
    average_last_epochs: int = Field(default=1, ge=1)
    seed: int = 0
    val_fraction: float = Field(default=0.1, ge=0.0, lt=1.0)

    # pathway toggles and loss weights
    imr_t: bool = True
    imr_v: bool = True
    cmr: bool = True
    dcc: bool = True
    base_align: bool = True
    lambda_imr: float = Field(default=1.0, ge=0)
    lambda_imc: float = Field(default=1.0, ge=0)
    lambda_nitc: float = Field(default=1.0, ge=0)
    lambda_ditc: float = Field(default=1.0, ge=0)
    lambda_base: float = Field(default=1.0, ge=0)

    # encoders
    dim: int = Field(default=64, ge=2)
    depth: int = Field(default=2, ge=1)
    patch: int = Field(default=8, ge=1)
    mlp_hidden: int = Field(default=64, ge=2)
    max_tokens: int = Field(default=77, ge=1)

    # intra-modal reasoning
    alpha: float = 0.2
    gamma: float = 8.0
    mining_k: int = Field(default=5, ge=1)
    negatives_per_tier: int = Field(default=1, ge=1)
    d_as_similarity: bool = False

    # cross-modal refinement
    tau_nitc: float = Field(default=0.07, gt=0)
    separate_fusion: bool = True

    # discriminative clue correction
    dcc_k: int = Field(default=5, ge=1)
    dcc_band: tuple[float, float] = (40.0, 80.0)
    tau_ditc: float = Field(default=0.07, gt=0)

    @model_validator(mode="after")
    def _ordered_lr(self):
        if self.lr_start > self.lr_end:
            raise ValueError(f"lr_start {self.lr_start} exceeds lr_end {self.lr_end}")
        return self

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(dim=self.dim, depth=self.depth, patch=self.patch,
                             mlp_hidden=self.mlp_hidden, max_tokens=self.max_tokens)

    def imr_params(self) -> ImrLossParams:
        return ImrLossParams(alpha=self.alpha, gamma=self.gamma,
                             d_as_similarity=self.d_as_similarity)

    def dcc_params(self) -> DccParams:
        return DccParams(k=self.dcc_k, band=tuple(self.dcc_band), tau=self.tau_ditc)

    def fingerprint(self) -> str:
        return config_fingerprint(self.model_dump(mode="json"), self.seed)


@dataclass
class RetrievalModel:
    """Dual encoder plus the refinement parameters, as one named family."""

    encoder: DualEncoder
    fusion_img: FusionParams
    fusion_txt: FusionParams
    config: TrainConfig

    @classmethod
    def create(cls, config: TrainConfig, vocab: dict[str, int]) -> "RetrievalModel":
        encoder = DualEncoder.create(config.encoder_config(), vocab, seed=config.seed)
        fusion_img = FusionParams.create(config.dim, seed=config.seed + 7001)
        fusion_txt = (FusionParams.create(config.dim, seed=config.seed + 7002)
                      if config.separate_fusion else fusion_img)
        return cls(encoder, fusion_img, fusion_txt, config)

    def parameters(self) -> dict[str, Tensor]:
        params = dict(self.encoder.params)
        params.update(self.fusion_img.named("cmr.img"))
        if self.fusion_txt is not self.fusion_img:
            params.update(self.fusion_txt.named("cmr.txt"))
        return params

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()


@dataclass
class TrainResult:
    model: RetrievalModel
    history: list[dict]
    val_identity_ids: list[int]
    manifest: dict
    skipped_captions: int = 0


def _stable_seed(*parts: int) -> int:
    ss = np.random.SeedSequence(tuple(int(p) for p in parts))
    return int(ss.generate_state(1, dtype=np.uint64)[0] % (2**63))


def _child_rng(*parts: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(
        tuple(int(p) for p in parts))))


def split_identities(identity_ids: Sequence[int], val_fraction: float,
                     seed: int) -> tuple[list[int], list[int]]:
    """Identity-disjoint train/validation split."""
    ids = sorted(set(int(i) for i in identity_ids))
    if val_fraction == 0.0 or len(ids) < 2:
        return ids, []
    rng = _child_rng(seed, 11)
    perm = rng.permutation(len(ids))
    n_val = max(1, int(round(val_fraction * len(ids))))
    val = sorted(ids[i] for i in perm[:n_val])
    train = sorted(set(ids) - set(val))
    return train, val


def corpus_lexicon(stats: CorpusStats) -> dict[str, list[str]]:
    """Substitution alternatives straight from the corpus vocabulary."""
    return {"ADJ": sorted(stats.pos_word_counts["ADJ"]),
            "VERB": sorted(stats.pos_word_counts["VERB"])}


# -- batch loss assembly ------------------------------------------------------------


@dataclass
class _BatchContext:
    """Pairs of one batch plus the shared resources loss terms draw on."""

    images: list[ImageGrid]
    captions: list[Caption]
    image_patches: list[np.ndarray]
    pair_rows: list[tuple[int, int]]  # (image index, caption index)
    stats: CorpusStats
    lexicon: dict[str, list[str]]
    mining_gallery: EmbeddingBank | None
    epoch: int


def _text_negatives(cap: Caption, ctx: _BatchContext, cap_idx: int,
                    config: TrainConfig) -> list[Caption]:
    """One perturbed caption per applicable tier (deterministic seeds)."""
    negatives = []
    for rep in range(config.negatives_per_tier):
        for tier in (1, 2, 3):
            seed = _stable_seed(config.seed, 31, ctx.epoch, cap_idx, tier, rep)
            if tier == 1:
                out = perturb_tier1_noun_swap(cap, seed)
            elif tier == 2:
                out = perturb_tier2_substitute(cap, ctx.lexicon, seed)
            else:
                out = perturb_tier3_mask_fill(cap, ctx.stats, seed)
            if out is not None:
                negatives.append(out)
    return negatives


def batch_losses(model: RetrievalModel, ctx: _BatchContext) -> dict[str, Tensor]:
    """Unweighted loss components for one batch of matched pairs."""
    config = model.config
    encoder = model.encoder
    img_items: list[EncodedItem] = []
    txt_items: list[EncodedItem] = []
    for img_idx, cap_idx in ctx.pair_rows:
        img_items.append(encoder.encode_patches(ctx.image_patches[img_idx],
                                                ctx.images[img_idx].identity_id))
        txt_items.append(encoder.encode_text(ctx.captions[cap_idx]))
    ids = [item.identity_id for item in img_items]

    components: dict[str, Tensor] = {}

    if config.base_align:
        components["base"] = loss_nitc([i.global_feat for i in img_items],
                                       [t.global_feat for t in txt_items],
                                       ids, temperature=config.tau_nitc)

    imr_rows: list[tuple[Tensor, Tensor, list[Tensor]]] = []
    if config.imr_t:
        for row, (img_idx, cap_idx) in enumerate(ctx.pair_rows):
            negs = _text_negatives(ctx.captions[cap_idx], ctx, cap_idx, config)
            if not negs:
                continue
            neg_feats = [encoder.encode_text(n).global_feat for n in negs]
            imr_rows.append((img_items[row].global_feat,
                             txt_items[row].global_feat, neg_feats))
    if config.imr_v and ctx.mining_gallery is not None and len(ctx.mining_gallery) > 1:
        mined_cache: dict[int, Tensor] = {}
        for row, (img_idx, cap_idx) in enumerate(ctx.pair_rows):
            found = mine_visual_negatives(txt_items[row], ctx.mining_gallery,
                                          config.mining_k)
            neg_feats = []
            for item, _tier in found.negatives:
                # first local slot of a mining-gallery item carries its
                # source image index; re-encode that image with gradients
                src_image = int(item.locals.numpy()[0, 0])
                if src_image not in mined_cache:
                    mined_cache[src_image] = encoder.encode_patches(
                        ctx.image_patches[src_image], item.identity_id
                    ).global_feat
                neg_feats.append(mined_cache[src_image])
            if neg_feats:
                imr_rows.append((txt_items[row].global_feat,
                                 img_items[row].global_feat, neg_feats))

    if imr_rows:
        params = config.imr_params()
        hinges = []
        for anchor, positive, negs in imr_rows:
            hinges.extend(hinge_terms(anchor, positive, negs, params))
        total = hinges[0]
        for t in hinges[1:]:
            total = total + t
        components["imr"] = total / len(hinges)
        components["imc"] = loss_imc([r[0] for r in imr_rows],
                                     [r[1] for r in imr_rows],
                                     [r[2] for r in imr_rows], params)

    if config.cmr:
        refined = [refine_pair(i, t, model.fusion_img, model.fusion_txt)
                   for i, t in zip(img_items, txt_items)]
        components["nitc"] = loss_nitc([r.g_img for r in refined],
                                       [r.g_txt for r in refined],
                                       ids, temperature=config.tau_nitc)

    if config.dcc:
        dcc_params = config.dcc_params()
        cues = []
        for i_item, t_item in zip(img_items, txt_items):
            profile = word_relevance_profile(t_item, i_item)
            cues.append(build_cue_state(profile, t_item.locals, dcc_params))
        components["ditc"] = loss_ditc(cues, img_items, dcc_params)

    return components


_WEIGHT_KEYS = {"base": "lambda_base", "imr": "lambda_imr", "imc": "lambda_imc",
                "nitc": "lambda_nitc", "ditc": "lambda_ditc"}


def total_loss(components: dict[str, Tensor], config: TrainConfig) -> Tensor:
    total: Tensor | None = None
    for name, value in components.items():
        term = value * getattr(config, _WEIGHT_KEYS[name])
        total = term if total is None else total + term
    if total is None:
        total = Tensor(np.asarray(0.0, dtype=np.float32))
    return total


# -- training loop --------------------------------------------------------------------


def _epoch_batches(images_by_id: dict[int, list[int]],
                   captions_by_image: dict[int, list[int]],
                   config: TrainConfig, epoch: int) -> list[list[tuple[int, int]]]:
    """Batches of (image, caption) pairs with distinct identities per batch.

    One pass visits each training image once, pairing it with one of its
    captions chosen by seed; an epoch runs ``passes_per_epoch`` passes.
    Images of one identity are spread across rounds so a batch never
    repeats an identity (except in final partial rounds when identity
    counts are uneven).
    """
    ids = sorted(images_by_id)
    rounds: dict[tuple[int, int], list[tuple[int, int]]] = {}
    for p in range(config.passes_per_epoch):
        for ident in ids:
            img_indices = list(images_by_id[ident])
            order = _child_rng(config.seed, 21, epoch, p,
                               ident).permutation(len(img_indices))
            for r, pos in enumerate(order):
                img_idx = img_indices[int(pos)]
                caps = captions_by_image[img_idx]
                cap_pos = int(_child_rng(config.seed, 22, epoch, p, img_idx)
                              .integers(len(caps)))
                rounds.setdefault((p, r), []).append((img_idx, caps[cap_pos]))

    batches: list[list[tuple[int, int]]] = []
    for p, r in sorted(rounds):
        rows = rounds[(p, r)]
        perm = _child_rng(config.seed, 23, epoch, p, r).permutation(len(rows))
        shuffled = [rows[int(i)] for i in perm]
        for start in range(0, len(shuffled), config.batch_size):
            chunk = shuffled[start:start + config.batch_size]
            if len(chunk) >= 2:
                batches.append(chunk)
    return batches


def _mining_gallery(encoder: DualEncoder, images: list[ImageGrid],
                    image_patches: list[np.ndarray],
                    images_by_id: dict[int, list[int]]) -> EmbeddingBank:
    """One representative image per identity, encoded without gradients.

    Each item's first local row smuggles the source image index in slot 0
    so mined negatives can be re-encoded with gradients later.
    """
    items = []
    with no_grad():
        for ident in sorted(images_by_id):
            img_idx = images_by_id[ident][0]
            enc = encoder.encode_patches(image_patches[img_idx], ident)
            marker = np.zeros((1, enc.global_feat.shape[0]), dtype=np.float32)
            marker[0, 0] = img_idx
            items.append(EncodedItem(locals=Tensor(marker),
                                     global_feat=enc.global_feat.detach(),
                                     identity_id=ident))
    dim = items[0].global_feat.shape[0] if items else 0
    return EmbeddingBank("image", dim, items)


def train(images: list[ImageGrid], captions: list[Caption], config: TrainConfig,
          progress: Callable[[str], None] | None = None) -> TrainResult:
    """Run the full training loop; deterministic given (data, config)."""
    if not images or not captions:
        raise ValueError("dataset must contain images and captions")
    if len(captions) % len(images):
        raise ValueError(
            f"{len(captions)} captions do not evenly cover {len(images)} images"
        )
    cpi = len(captions) // len(images)
    for j, cap in enumerate(captions):
        if cap.identity_id != images[j // cpi].identity_id:
            raise ValueError(f"caption {j} identity does not match its image")

    stats = CorpusStats.from_captions(captions)
    lexicon = corpus_lexicon(stats)
    vocab = build_vocab(captions, extra_words=[w for ws in lexicon.values() for w in ws])
    model = RetrievalModel.create(config, vocab)
    params = model.parameters()
    opt_state = LambState.for_params(params, weight_decay=config.weight_decay)

    train_ids, val_ids = split_identities([img.identity_id for img in images],
                                          config.val_fraction, config.seed)
    train_id_set = set(train_ids)
    image_patches = [patch_grid(img.values, config.patch) for img in images]
    images_by_id: dict[int, list[int]] = {}
    for idx, img in enumerate(images):
        if img.identity_id in train_id_set:
            images_by_id.setdefault(img.identity_id, []).append(idx)
    captions_by_image = {i: list(range(i * cpi, (i + 1) * cpi))
                         for i in range(len(images))}

    plan = [_epoch_batches(images_by_id, captions_by_image, config, e)
            for e in range(config.epochs)]
    total_steps = max(1, sum(len(b) for b in plan))

    history: list[dict] = []
    tail_start = config.epochs - min(config.average_last_epochs, config.epochs)
    snapshots: list[dict[str, np.ndarray]] = []
    step = 0
    for epoch in range(config.epochs):
        gallery = (_mining_gallery(model.encoder, images, image_patches, images_by_id)
                   if config.imr_v else None)
        sums: dict[str, float] = {}
        count = 0
        for batch in plan[epoch]:
            ctx = _BatchContext(images=images, captions=captions,
                                image_patches=image_patches, pair_rows=batch,
                                stats=stats, lexicon=lexicon,
                                mining_gallery=gallery, epoch=epoch)
            components = batch_losses(model, ctx)
            loss = total_loss(components, config)
            if not np.isfinite(loss.numpy()):
                raise RuntimeError(
                    f"training diverged: non-finite loss at epoch {epoch} step {step}"
                )
            model.zero_grad()
            if loss.requires_grad:
                loss.backward()
            grads = {name: (p.grad if p.grad is not None else np.zeros_like(p.data))
                     for name, p in params.items()}
            lamb_step(params, grads, opt_state,
                      lr_schedule(step, total_steps, config.lr_start, config.lr_end))
            step += 1
            count += 1
            sums["total"] = sums.get("total", 0.0) + float(loss.numpy())
            for name, value in components.items():
                sums[name] = sums.get(name, 0.0) + float(value.numpy())

        if epoch >= tail_start:
            snapshots.append({name: p.data.copy() for name, p in params.items()})

        record = {"epoch": epoch}
        for name, total in sorted(sums.items()):
            record[f"loss_{name}"] = total / max(count, 1)
        if val_ids:
            record["val_rank1"] = validation_rank1(model, images, captions, val_ids)
        history.append(record)
        if progress is not None:
            progress(json.dumps(record, sort_keys=True))

    if len(snapshots) > 1:
        for name, p in params.items():
            stacked = np.stack([snap[name] for snap in snapshots])
            p.data = stacked.mean(axis=0).astype(p.dtype)

    manifest = {
        "kind": "mefa-train",
        "version": __version__,
        "seed": config.seed,
        "config_fingerprint": config.fingerprint(),
        "n_images": len(images),
        "n_captions": len(captions),
        "train_identities": len(train_ids),
        "val_identities": len(val_ids),
        "val_identity_ids": list(val_ids),
        "total_steps": total_steps,
        "averaged_epochs": len(snapshots) if len(snapshots) > 1 else 1,
    }
    return TrainResult(model=model, history=history, val_identity_ids=val_ids,
                       manifest=manifest)


# -- evaluation -----------------------------------------------------------------------


def encode_banks(model: RetrievalModel, images: list[ImageGrid],
                 captions: list[Caption]) -> tuple[EmbeddingBank, EmbeddingBank]:
    """Gradient-free image and text banks for retrieval."""
    with no_grad():
        img_items = [model.encoder.encode_image(img) for img in images]
        txt_items = [model.encoder.encode_text(cap) for cap in captions]
    dim = model.config.dim
    return (EmbeddingBank("image", dim, img_items),
            EmbeddingBank("text", dim, txt_items))


def retrieval_similarity(model: RetrievalModel, images: list[ImageGrid],
                         captions: list[Caption],
                         direction: str = "t2i") -> SimilarityMatrix:
    image_bank, text_bank = encode_banks(model, images, captions)
    if direction == "t2i":
        return similarity_matrix(text_bank, image_bank)
    if direction == "i2t":
        return similarity_matrix(image_bank, text_bank)
    raise ValueError(f"unknown direction {direction!r}")


def evaluate(model: RetrievalModel, images: list[ImageGrid],
             captions: list[Caption], query_identity_ids: Sequence[int] | None = None,
             direction: str = "t2i", extras: dict | None = None) -> RetrievalReport:
    """Retrieval report; queries optionally restricted to some identities.

    The gallery always contains every image, so held-out queries compete
    against the full distractor set.
    """
    if query_identity_ids is not None:
        keep = set(int(i) for i in query_identity_ids)
        queries = [c for c in captions if c.identity_id in keep]
    else:
        queries = captions
    if not queries:
        raise ValueError("no queries selected for evaluation")
    sim = retrieval_similarity(model, images, queries if direction == "t2i" else captions,
                               direction=direction)
    if direction == "i2t" and query_identity_ids is not None:
        raise ValueError("query filtering is only supported for text queries")
    merged = {"direction": direction,
              "seed": model.config.seed,
              "n_queries": int(sim.values.shape[0]),
              "n_gallery": int(sim.values.shape[1]),
              "gallery_identities": int(len(set(sim.gallery_ids.tolist())))}
    merged.update(extras or {})
    return build_report(sim, model.config.fingerprint(), extras=merged)


def validation_rank1(model: RetrievalModel, images: list[ImageGrid],
                     captions: list[Caption], val_ids: Sequence[int]) -> float:
    keep = set(int(i) for i in val_ids)
    queries = [c for c in captions if c.identity_id in keep]
    sim = retrieval_similarity(model, images, queries)
    ranked = rank_gallery(sim)
    return rank_k_accuracy(ranked, sim.query_ids, sim.gallery_ids, 1)


# -- masking probe ---------------------------------------------------------------------


def mask_topk_nouns(captions: list[Caption], k: int = 3,
                    stats: CorpusStats | None = None) -> tuple[list[Caption], list[str]]:
    """Replace the k most frequent nouns (ties lexicographic) with the UNK token."""
    from .data import UNK_TOKEN

    stats = stats or CorpusStats.from_captions(captions)
    nouns = stats.pos_word_counts["NOUN"]
    if len(nouns) < k:
        warnings.warn(
            f"only {len(nouns)} distinct nouns available; masking all of them",
            stacklevel=2,
        )
    masked_words = set(stats.top_nouns(k))
    out = []
    for cap in captions:
        tokens = [UNK_TOKEN if t in masked_words else t for t in cap.tokens]
        out.append(Caption(tokens, list(cap.pos_tags), cap.identity_id))
    return out, sorted(masked_words)


# -- checkpoints -----------------------------------------------------------------------


def save_checkpoint(ckpt_dir: str | Path, model: RetrievalModel,
                    history: list[dict] | None = None,
                    manifest: dict | None = None) -> None:
    """params.bin holds named f32 blocks under the MEFACKP1 header;
    meta.json carries vocab, config, and the run manifest."""
    out = Path(ckpt_dir)
    out.mkdir(parents=True, exist_ok=True)
    params = model.parameters()
    with open(out / "params.bin", "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<2I", CHECKPOINT_VERSION, len(params)))
        for name, p in params.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", p.data.ndim))
            fh.write(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
            fh.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    meta = {
        "kind": "mefa-checkpoint",
        "version": __version__,
        "config": model.config.model_dump(mode="json"),
        "vocab": model.encoder.vocab,
        "fingerprint": model.config.fingerprint(),
        "history": history or [],
        "manifest": manifest or {},
    }
    (out / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n",
                                   encoding="utf-8")


def _read_blocks(path: Path) -> dict[str, np.ndarray]:
    from .data import BankFormatError

    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise BankFormatError(f"bad checkpoint magic {magic!r} at offset 0")
        version, count = struct.unpack("<2I", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise BankFormatError(f"unsupported checkpoint version {version}")
        blocks = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            size = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(fh.read(4 * size), dtype="<f4").astype(np.float32)
            blocks[name] = data.reshape(shape)
    return blocks


def load_checkpoint(ckpt_dir: str | Path) -> tuple[RetrievalModel, dict]:
    root = Path(ckpt_dir)
    meta = json.loads((root / "meta.json").read_text(encoding="utf-8"))
    config = TrainConfig.model_validate(meta["config"])
    vocab = {k: int(v) for k, v in meta["vocab"].items()}
    model = RetrievalModel.create(config, vocab)
    blocks = _read_blocks(root / "params.bin")
    params = model.parameters()
    if set(blocks) != set(params):
        missing = set(params) ^ set(blocks)
        raise ValueError(f"checkpoint blocks do not match model: {sorted(missing)}")
    for name, arr in blocks.items():
        params[name].data = arr.astype(params[name].dtype)
    return model, meta


# -- ablation grid ---------------------------------------------------------------------


TABLE_ROWS: list[tuple[str, dict[str, bool]]] = [
    ("baseline", dict(imr_t=False, imr_v=False, cmr=False, dcc=False)),
    ("imr_t", dict(imr_t=True, imr_v=False, cmr=False, dcc=False)),
    ("imr_v", dict(imr_t=False, imr_v=True, cmr=False, dcc=False)),
    ("cmr", dict(imr_t=False, imr_v=False, cmr=True, dcc=False)),
    ("dcc", dict(imr_t=False, imr_v=False, cmr=False, dcc=True)),
    ("imr_t+imr_v", dict(imr_t=True, imr_v=True, cmr=False, dcc=False)),
    ("imr_t+imr_v+cmr", dict(imr_t=True, imr_v=True, cmr=True, dcc=False)),
    ("imr_t+imr_v+dcc", dict(imr_t=True, imr_v=True, cmr=False, dcc=True)),
    ("full", dict(imr_t=True, imr_v=True, cmr=True, dcc=True)),
]

ABLATION_TSV_HEADER = "config\timr_t\timr_v\tcmr\tdcc\trank1\trank5\trank10\tmap"


@dataclass
class AblationRow:
    name: str
    toggles: dict[str, bool]
    report: RetrievalReport


def run_ablation(images: list[ImageGrid], captions: list[Caption],
                 base_config: TrainConfig,
                 rows: list[tuple[str, dict[str, bool]]] | None = None,
                 progress: Callable[[str], None] | None = None) -> list[AblationRow]:
    """Train and evaluate every toggle combination from the same seed."""
    rows = rows if rows is not None else TABLE_ROWS
    out: list[AblationRow] = []
    for name, toggles in rows:
        config = base_config.model_copy(update=dict(toggles, base_align=True))
        result = train(images, captions, config)
        report = evaluate(result.model, images, captions,
                          query_identity_ids=result.val_identity_ids or None,
                          extras={"ablation_row": name})
        out.append(AblationRow(name=name, toggles=dict(toggles), report=report))
        if progress is not None:
            progress(f"{name}: rank1={report.rank1:.2f} map={report.map:.2f}")
    return out


def ablation_tsv(rows: list[AblationRow]) -> str:
    lines = [ABLATION_TSV_HEADER]
    for row in rows:
        t = row.toggles
        lines.append(
            f"{row.name}\t{int(t['imr_t'])}\t{int(t['imr_v'])}\t{int(t['cmr'])}"
            f"\t{int(t['dcc'])}\t{row.report.rank1}\t{row.report.rank5}"
            f"\t{row.report.rank10}\t{row.report.map}"
        )
    return "\n".join(lines) + "\n"


# -- word-image relevance export --------------------------------------------------------


def aggregate_word_relevance(model: RetrievalModel, images: list[ImageGrid],
                             captions: list[Caption],
                             max_pairs: int | None = None) -> list[tuple[str, str, float]]:
    """Mean per-word relevance against the matching image, across pairs.

    Returns (token, pos_tag, mean relevance) sorted by descending relevance,
    the flat profile behind the secondary-cue selection.
    """
    if len(captions) % len(images):
        raise ValueError("captions must evenly cover images")
    cpi = len(captions) // len(images)
    sums: dict[tuple[str, str], float] = {}
    counts: dict[tuple[str, str], int] = {}
    n = len(captions) if max_pairs is None else min(max_pairs, len(captions))
    with no_grad():
        for cap_idx in range(n):
            cap = captions[cap_idx]
            img = images[cap_idx // cpi]
            t_item = model.encoder.encode_text(cap)
            i_item = model.encoder.encode_image(img)
            for (tok_idx, rel) in word_relevance_profile(t_item, i_item):
                if tok_idx >= len(cap.tokens):
                    continue
                key = (cap.tokens[tok_idx], cap.pos_tags[tok_idx])
                sums[key] = sums.get(key, 0.0) + rel
                counts[key] = counts.get(key, 0) + 1
    rows = [(tok, tag, sums[(tok, tag)] / counts[(tok, tag)])
            for tok, tag in sums]
    rows.sort(key=lambda r: (-r[2], r[0]))
    return rows
