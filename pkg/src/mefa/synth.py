"""Synthetic person/caption data.

Every identity is an attribute tuple (garment types and colors, accessory,
action). Images are deterministic renderings of those attributes into
disjoint rectangular regions of a small grid, plus seeded noise; captions
are templated token sequences over the same attributes with construction-
time part-of-speech tags. Identities that differ in exactly one attribute
("confusers") are injected at a configured rate to force fine-grained
discrimination.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import numpy as np
from pydantic import BaseModel, Field, model_validator

from .data import COLOR_ADJECTIVES, Caption, ImageGrid

ATTRIBUTE_SLOTS = ("upper_color", "upper_garment", "lower_color",
                   "lower_garment", "accessory", "action")

COLOR_RGB = {
    "red": (0.85, 0.10, 0.10),
    "blue": (0.10, 0.20, 0.85),
    "green": (0.10, 0.70, 0.20),
    "yellow": (0.92, 0.88, 0.12),
    "black": (0.06, 0.06, 0.06),
    "white": (0.97, 0.97, 0.97),
    "purple": (0.55, 0.12, 0.68),
    "orange": (0.95, 0.55, 0.08),
    "pink": (0.95, 0.55, 0.70),
    "brown": (0.45, 0.28, 0.12),
    "gray": (0.50, 0.50, 0.50),
    "beige": (0.88, 0.82, 0.66),
}

# Pseudo-colors for non-color attributes (accessories, actions), by index.
PALETTE = [
    (0.70, 0.15, 0.45), (0.15, 0.70, 0.60), (0.35, 0.35, 0.90),
    (0.80, 0.65, 0.20), (0.25, 0.55, 0.25), (0.60, 0.30, 0.10),
    (0.10, 0.45, 0.75), (0.75, 0.25, 0.25), (0.45, 0.10, 0.60),
    (0.20, 0.20, 0.20), (0.85, 0.45, 0.60), (0.30, 0.75, 0.40),
]


class AttributeCatalog(BaseModel):
    upper_garments: list[str] = Field(
        default=["shirt", "jacket", "sweater", "coat", "vest", "hoodie"])
    lower_garments: list[str] = Field(
        default=["pants", "shorts", "jeans", "skirt"])
    colors: list[str] = Field(default=list(COLOR_ADJECTIVES))
    accessories: list[str] = Field(
        default=["bag", "hat", "backpack", "umbrella", "scarf", "camera",
                 "phone", "book"])
    actions: list[str] = Field(
        default=["walking", "running", "standing", "sitting", "jumping",
                 "waiting"])

    def slot_values(self, slot: str) -> list[str]:
        return {
            "upper_color": self.colors,
            "upper_garment": self.upper_garments,
            "lower_color": self.colors,
            "lower_garment": self.lower_garments,
            "accessory": self.accessories,
            "action": self.actions,
        }[slot]

    @model_validator(mode="after")
    def _known_colors(self):
        unknown = [c for c in self.colors if c not in COLOR_RGB]
        if unknown:
            raise ValueError(f"colors without an RGB mapping: {unknown}")
        return self


class SyntheticSpec(BaseModel):
    n_identities: int = Field(ge=1)
    images_per_identity: int = Field(default=4, ge=1)
    captions_per_image: int = Field(default=2, ge=1)
    catalog: AttributeCatalog = Field(default_factory=AttributeCatalog)
    noise: float = Field(default=0.05, ge=0.0, lt=1.0)
    confuser_rate: float = Field(default=0.2, ge=0.0, lt=1.0)
    # fraction of base identities that are color-swapped twins of another
    # base: same garments/accessory/action with upper and lower colors
    # exchanged, so their captions share one token multiset and only word
    # binding separates them
    swap_twin_rate: float = Field(default=0.0, ge=0.0, lt=1.0)
    seed: int = 0


def _child_rng(seed: int, *tags: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, *tags))))


def sample_identities(spec: SyntheticSpec) -> list[tuple[str, ...]]:
    """Attribute tuples: bases pairwise distinct in >=2 slots, then confusers
    copied from a base with exactly one slot changed."""
    catalog = spec.catalog
    rng = _child_rng(spec.seed, 1)
    n_conf = int(round(spec.confuser_rate * spec.n_identities))
    n_base = spec.n_identities - n_conf
    if n_base < 1:
        raise ValueError("confuser rate leaves no base identities")

    def draw() -> tuple[str, ...]:
        return tuple(
            catalog.slot_values(slot)[rng.integers(len(catalog.slot_values(slot)))]
            for slot in ATTRIBUTE_SLOTS
        )

    def hamming(a, b) -> int:
        return sum(x != y for x, y in zip(a, b))

    n_twin = int(round(spec.swap_twin_rate * n_base))
    n_drawn = n_base - n_twin
    if n_drawn < 1:
        raise ValueError("swap twin rate leaves no drawn base identities")

    bases: list[tuple[str, ...]] = []
    attempts = 0
    while len(bases) < n_drawn:
        attempts += 1
        if attempts > 200 * spec.n_identities + 1000:
            raise ValueError(
                f"attribute catalog too small for {spec.n_identities} identities"
            )
        cand = draw()
        if all(hamming(cand, b) >= 2 for b in bases):
            bases.append(cand)

    def color_swapped(attrs: tuple[str, ...]) -> tuple[str, ...]:
        out = list(attrs)
        out[0], out[2] = out[2], out[0]
        return tuple(out)

    for _ in range(n_twin):
        attempts = 0
        while True:
            attempts += 1
            if attempts > 200 * spec.n_identities + 1000:
                raise ValueError(
                    "attribute catalog too small to place color-swapped twins"
                )
            src = bases[rng.integers(len(bases))]
            cand = color_swapped(src)
            if cand == src:  # equal upper and lower colors cannot swap
                continue
            if all(hamming(cand, b) >= 2 for b in bases):
                bases.append(cand)
                break

    identities = list(bases)
    for _ in range(n_conf):
        attempts = 0
        while True:
            attempts += 1
            if attempts > 1000:
                raise ValueError("attribute catalog too small to place confusers")
            src = bases[rng.integers(len(bases))]
            slot_i = int(rng.integers(len(ATTRIBUTE_SLOTS)))
            values = [v for v in catalog.slot_values(ATTRIBUTE_SLOTS[slot_i])
                      if v != src[slot_i]]
            if not values:
                continue
            cand = list(src)
            cand[slot_i] = values[rng.integers(len(values))]
            cand = tuple(cand)
            if all(hamming(cand, other) >= 1 for other in identities):
                identities.append(cand)
                break
    return identities


def attribute_regions(h: int = 32, w: int = 32) -> dict[str, tuple[slice, slice]]:
    """Disjoint image regions owned by each rendered attribute."""
    return {
        "head": (slice(2, 8), slice(12, 20)),
        "upper": (slice(8, 19), slice(7, 25)),
        "lower": (slice(19, 29), slice(9, 23)),
        "accessory": (slice(10, 16), slice(26, 31)),
        "action": (slice(30, 32), slice(4, 28)),
    }


def render_identity_image(attrs: Sequence[str], catalog: AttributeCatalog,
                          image_index: int = 0, noise: float = 0.0,
                          rng: np.random.Generator | None = None,
                          h: int = 32, w: int = 32) -> np.ndarray:
    """Deterministic attribute rendering; noise blends in seeded uniforms."""
    upper_color, upper_garment, lower_color, lower_garment, accessory, action = attrs
    regions = attribute_regions(h, w)
    img = np.full((h, w, 3), 0.85, dtype=np.float64)

    rs, cs = regions["head"]
    img[rs, cs] = (0.90, 0.78, 0.62)

    rs, cs = regions["upper"]
    img[rs, cs] = COLOR_RGB[upper_color]
    collar = catalog.upper_garments.index(upper_garment)
    img[rs.start:rs.start + 2, cs] *= 0.30 + 0.10 * collar

    rs, cs = regions["lower"]
    img[rs, cs] = COLOR_RGB[lower_color]
    hem = catalog.lower_garments.index(lower_garment)
    img[rs.stop - 2:rs.stop, cs] *= 0.30 + 0.15 * hem

    rs, cs = regions["accessory"]
    img[rs, cs] = PALETTE[catalog.accessories.index(accessory) % len(PALETTE)]

    rs, cs = regions["action"]
    img[rs, cs] = PALETTE[catalog.actions.index(action) % len(PALETTE)]

    img *= 0.90 + 0.03 * min(image_index, 3)
    if noise > 0.0:
        if rng is None:
            raise ValueError("noise > 0 requires a generator")
        img = (1.0 - noise) * img + noise * rng.uniform(0.0, 1.0, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def identity_captions(attrs: Sequence[str], identity_id: int,
                      caption_index: int) -> Caption:
    uc, un, lc, ln, acc, act = attrs
    if caption_index % 2 == 0:
        tokens = ["a", "man", "wearing", "a", uc, un, "and", lc, ln, act,
                  "with", "a", acc]
        tags = ["DET", "NOUN", "VERB", "DET", "ADJ", "NOUN", "CONJ", "ADJ",
                "NOUN", "VERB", "PREP", "DET", "NOUN"]
    else:
        tokens = ["the", "man", act, "in", "a", lc, ln, "and", "a", uc, un,
                  "with", "his", acc]
        tags = ["DET", "NOUN", "VERB", "PREP", "DET", "ADJ", "NOUN", "CONJ",
                "DET", "ADJ", "NOUN", "PREP", "DET", "NOUN"]
    return Caption(tokens, tags, identity_id)


def generate_dataset(spec: SyntheticSpec) -> tuple[list[ImageGrid], list[Caption]]:
    """Images and captions, caption list ordered image-major.

    Caption j belongs to image j // captions_per_image.
    """
    identities = sample_identities(spec)
    images: list[ImageGrid] = []
    captions: list[Caption] = []
    for ident, attrs in enumerate(identities):
        for img_idx in range(spec.images_per_identity):
            rng = _child_rng(spec.seed, 2, ident, img_idx)
            values = render_identity_image(attrs, spec.catalog, img_idx,
                                           spec.noise, rng)
            images.append(ImageGrid(values, identity_id=ident))
            for cap_idx in range(spec.captions_per_image):
                captions.append(identity_captions(attrs, ident, cap_idx))
    return images, captions


def perturbation_lexicon(catalog: AttributeCatalog) -> dict[str, list[str]]:
    """Same-POS alternatives for the substitution tier."""
    return {"ADJ": sorted(set(catalog.colors)),
            "VERB": sorted(set(catalog.actions))}


# -- dataset directory layout ----------------------------------------------------


def save_dataset(out_dir: str | Path, images: list[ImageGrid],
                 captions: list[Caption], spec: SyntheticSpec) -> dict:
    """Write images.npy / image_ids.npy / captions.jsonl / manifest.json."""
    from . import __version__
    from .data import write_captions_jsonl
    from .evalret import config_fingerprint

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stack = np.stack([img.values for img in images])
    np.save(out / "images.npy", stack)
    np.save(out / "image_ids.npy",
            np.array([img.identity_id for img in images], dtype=np.int64))
    write_captions_jsonl(captions, out / "captions.jsonl")
    manifest = {
        "kind": "mefa-dataset",
        "version": __version__,
        "spec": spec.model_dump(mode="json"),
        "fingerprint": config_fingerprint(spec.model_dump(mode="json"), spec.seed),
        "n_images": len(images),
        "n_captions": len(captions),
    }
    (out / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return manifest


def load_dataset(data_dir: str | Path) -> tuple[list[ImageGrid], list[Caption], dict]:
    from .data import read_captions_jsonl

    root = Path(data_dir)
    stack = np.load(root / "images.npy")
    ids = np.load(root / "image_ids.npy")
    images = [ImageGrid(stack[i], identity_id=int(ids[i])) for i in range(len(ids))]
    captions = read_captions_jsonl(root / "captions.jsonl")
    manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
    return images, captions, manifest
