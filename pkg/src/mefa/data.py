"""Domain data types and their file formats.

Covers captions (tagged token sequences), image grids, encoded items
(per-item local embeddings plus one global embedding), embedding banks
with the ``MEFAEMB1`` binary layout, caption JSON-lines files, a
closed-class lexicon tagger for external text, and corpus unigram
statistics used by perturbation and masking.
"""

from __future__ import annotations

import json
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .numerics import Tensor

# Part-of-speech tag set carried on every caption token.
POS_TAGS = ("NOUN", "VERB", "ADJ", "DET", "CONJ", "PREP", "OTHER")
CONTENT_TAGS = ("NOUN", "VERB", "ADJ")

UNK_TOKEN = "<unk>"

BANK_MAGIC = b"MEFAEMB1"
BANK_VERSION = 1
MODALITY_CODES = {"image": 0, "text": 1, "similarity": 2}
MODALITY_NAMES = {v: k for k, v in MODALITY_CODES.items()}


class BankFormatError(ValueError):
    """Embedding bank file is malformed; message carries the byte offset."""


@dataclass
class ImageGrid:
    """H x W x C grid of reals in [0, 1] with an identity label."""

    values: np.ndarray
    identity_id: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 3:
            raise ValueError(f"image grid must be HxWxC, got shape {self.values.shape}")
        if self.values.min() < 0.0 or self.values.max() > 1.0:
            raise ValueError("image grid values must lie in [0, 1]")


@dataclass
class Caption:
    """Tagged token sequence; the unit of text perturbation."""

    tokens: list[str]
    pos_tags: list[str]
    identity_id: int

    def __post_init__(self):
        if len(self.tokens) != len(self.pos_tags) or not self.tokens:
            raise ValueError(
                f"caption needs matching nonempty tokens/tags, got "
                f"{len(self.tokens)} tokens and {len(self.pos_tags)} tags"
            )
        bad = [t for t in self.pos_tags if t not in POS_TAGS]
        if bad:
            raise ValueError(f"unknown POS tags {bad}; expected one of {POS_TAGS}")

    def replaced(self, index: int, token: str) -> "Caption":
        tokens = list(self.tokens)
        tokens[index] = token
        return Caption(tokens, list(self.pos_tags), self.identity_id)

    def swapped(self, i: int, j: int) -> "Caption":
        tokens = list(self.tokens)
        tokens[i], tokens[j] = tokens[j], tokens[i]
        tags = list(self.pos_tags)
        tags[i], tags[j] = tags[j], tags[i]
        return Caption(tokens, tags, self.identity_id)


@dataclass
class EncodedItem:
    """Local embeddings (one row per patch/token) plus a global embedding."""

    locals: Tensor
    global_feat: Tensor
    identity_id: int
    truncated: bool = False

    @property
    def dim(self) -> int:
        return self.locals.shape[-1]


@dataclass
class EmbeddingBank:
    """Homogeneous collection of encoded items for one modality."""

    modality: str
    dim: int
    items: list[EncodedItem] = field(default_factory=list)

    def __post_init__(self):
        if self.modality not in MODALITY_CODES:
            raise ValueError(f"unknown modality {self.modality!r}")
        for item in self.items:
            if item.dim != self.dim or item.global_feat.shape != (self.dim,):
                raise ValueError(
                    f"bank dimension {self.dim} does not match item with "
                    f"locals {item.locals.shape} / global {item.global_feat.shape}"
                )

    def __len__(self) -> int:
        return len(self.items)

    @property
    def id_index(self) -> dict[int, list[int]]:
        index: dict[int, list[int]] = {}
        for pos, item in enumerate(self.items):
            index.setdefault(item.identity_id, []).append(pos)
        return index

    def globals_matrix(self) -> np.ndarray:
        return np.stack([item.global_feat.numpy() for item in self.items])

    def identity_ids(self) -> np.ndarray:
        return np.array([item.identity_id for item in self.items], dtype=np.int64)


# -- bank binary format -------------------------------------------------------
#
# magic "MEFAEMB1" (8 bytes)
# little-endian u32: version=1, modality (0=image, 1=text, 2=similarity),
#                    item_count, D
# per item: u32 identity_id, u32 local_count,
#           f32 global[D], f32 locals[local_count * D]


def save_bank(bank: EmbeddingBank, path: str | Path) -> None:
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(BANK_MAGIC)
        fh.write(struct.pack("<4I", BANK_VERSION, MODALITY_CODES[bank.modality],
                             len(bank.items), bank.dim))
        for item in bank.items:
            locals_arr = np.ascontiguousarray(item.locals.numpy(), dtype="<f4")
            global_arr = np.ascontiguousarray(item.global_feat.numpy(), dtype="<f4")
            fh.write(struct.pack("<2I", item.identity_id, locals_arr.shape[0]))
            fh.write(global_arr.tobytes())
            fh.write(locals_arr.tobytes())


def _read_exact(fh, n: int, offset: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise BankFormatError(
            f"truncated bank file: expected {n} bytes for {what} at offset {offset}, "
            f"got {len(buf)}"
        )
    return buf


def load_bank(path: str | Path) -> EmbeddingBank:
    path = Path(path)
    with open(path, "rb") as fh:
        offset = 0
        magic = _read_exact(fh, 8, offset, "magic")
        if magic != BANK_MAGIC:
            raise BankFormatError(f"bad magic {magic!r} at offset 0")
        offset += 8
        header = _read_exact(fh, 16, offset, "header")
        version, modality_code, item_count, dim = struct.unpack("<4I", header)
        if version != BANK_VERSION:
            raise BankFormatError(f"unsupported version {version} at offset {offset}")
        if modality_code not in MODALITY_NAMES:
            raise BankFormatError(f"unknown modality code {modality_code} at offset {offset + 4}")
        offset += 16

        items: list[EncodedItem] = []
        for i in range(item_count):
            head = _read_exact(fh, 8, offset, f"item {i} header")
            identity_id, local_count = struct.unpack("<2I", head)
            offset += 8
            gbytes = _read_exact(fh, 4 * dim, offset, f"item {i} global")
            offset += 4 * dim
            lbytes = _read_exact(fh, 4 * local_count * dim, offset, f"item {i} locals")
            offset += 4 * local_count * dim
            global_arr = np.frombuffer(gbytes, dtype="<f4").astype(np.float32)
            locals_arr = np.frombuffer(lbytes, dtype="<f4").astype(np.float32)
            items.append(EncodedItem(
                locals=Tensor(locals_arr.reshape(local_count, dim)),
                global_feat=Tensor(global_arr),
                identity_id=int(identity_id),
            ))
        trailing = fh.read(1)
        if trailing:
            raise BankFormatError(f"unexpected trailing bytes at offset {offset}")
    return EmbeddingBank(MODALITY_NAMES[modality_code], dim, items)


# -- caption JSON-lines ---------------------------------------------------------


def read_captions_jsonl(path: str | Path) -> list[Caption]:
    captions = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            try:
                captions.append(Caption(rec["tokens"], rec["pos_tags"], rec["identity_id"]))
            except (KeyError, ValueError) as exc:
                raise ValueError(f"bad caption record on line {lineno + 1}: {exc}") from exc
    return captions


def write_captions_jsonl(captions: Iterable[Caption], path: str | Path,
                         extras: list[dict] | None = None) -> None:
    captions = list(captions)
    if extras is not None and len(extras) != len(captions):
        raise ValueError("extras must align one-to-one with captions")
    with open(path, "w", encoding="utf-8") as fh:
        for i, cap in enumerate(captions):
            rec = {"tokens": cap.tokens, "pos_tags": cap.pos_tags,
                   "identity_id": cap.identity_id}
            if extras is not None:
                rec.update(extras[i])
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


# -- built-in tagger ----------------------------------------------------------------
#
# Coarse closed-class tagging for text that arrives without tags: fixed word
# lists for function words, the color/size lexicon for adjectives, the action
# lexicon for verbs, everything else a noun.

DETERMINERS = frozenset({"a", "an", "the", "this", "that", "these", "those", "his", "her"})
CONJUNCTIONS = frozenset({"and", "or", "but", "while", "nor"})
PREPOSITIONS = frozenset({"with", "in", "on", "of", "at", "to", "by", "over", "under",
                          "near", "behind"})

COLOR_ADJECTIVES = ("red", "blue", "green", "yellow", "black", "white",
                    "purple", "orange", "pink", "brown", "gray", "beige")
SIZE_ADJECTIVES = ("big", "small", "long", "short", "wide", "narrow")
ACTION_VERBS = ("walking", "running", "standing", "sitting", "jumping",
                "waiting", "holding", "carrying", "wearing", "holds", "wears")

DEFAULT_ADJECTIVES = frozenset(COLOR_ADJECTIVES) | frozenset(SIZE_ADJECTIVES)
DEFAULT_VERBS = frozenset(ACTION_VERBS)


def tag_tokens(tokens: list[str],
               adjectives: frozenset[str] = DEFAULT_ADJECTIVES,
               verbs: frozenset[str] = DEFAULT_VERBS) -> list[str]:
    tags = []
    for tok in tokens:
        w = tok.lower()
        if w in DETERMINERS:
            tags.append("DET")
        elif w in CONJUNCTIONS:
            tags.append("CONJ")
        elif w in PREPOSITIONS:
            tags.append("PREP")
        elif w in adjectives:
            tags.append("ADJ")
        elif w in verbs:
            tags.append("VERB")
        else:
            tags.append("NOUN")
    return tags


def caption_from_text(text: str, identity_id: int = -1) -> Caption:
    tokens = text.split()
    if not tokens:
        raise ValueError("cannot build a caption from empty text")
    return Caption(tokens, tag_tokens(tokens), identity_id)


# -- corpus statistics -----------------------------------------------------------


@dataclass
class CorpusStats:
    """Per-POS unigram counts over a caption corpus."""

    pos_word_counts: dict[str, Counter]

    @classmethod
    def from_captions(cls, captions: Iterable[Caption]) -> "CorpusStats":
        counts: dict[str, Counter] = {tag: Counter() for tag in POS_TAGS}
        for cap in captions:
            for tok, tag in zip(cap.tokens, cap.pos_tags):
                if tok != UNK_TOKEN:
                    counts[tag][tok] += 1
        return cls(counts)

    def candidates(self, pos: str, exclude: str) -> tuple[list[str], np.ndarray]:
        """Same-POS words (excluding one) with probabilities proportional to counts."""
        counter = self.pos_word_counts.get(pos, Counter())
        words = sorted(w for w in counter if w != exclude)
        if not words:
            return [], np.zeros(0)
        weights = np.array([counter[w] for w in words], dtype=np.float64)
        return words, weights / weights.sum()

    def top_nouns(self, k: int) -> list[str]:
        """The k most frequent nouns; frequency ties break lexicographically."""
        nouns = self.pos_word_counts.get("NOUN", Counter())
        ranked = sorted(nouns.items(), key=lambda kv: (-kv[1], kv[0]))
        return [w for w, _ in ranked[:k]]

    def vocabulary(self) -> list[str]:
        words = set()
        for counter in self.pos_word_counts.values():
            words.update(counter)
        return sorted(words)
