"""Retrieval execution and evaluation.

Builds query-by-gallery cosine similarity matrices, ranks galleries with
deterministic tie-breaking, and computes Rank-K accuracy and mAP. Reports
serialize to JSON or TSV with a config fingerprint so identical runs
produce identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import BANK_MAGIC, BANK_VERSION, MODALITY_CODES, EmbeddingBank

REPORT_TSV_HEADER = "rank1\trank5\trank10\tmap"


@dataclass
class SimilarityMatrix:
    """Queries (rows) against gallery (columns) with identity labels."""

    values: np.ndarray
    query_ids: np.ndarray
    gallery_ids: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.query_ids = np.asarray(self.query_ids, dtype=np.int64)
        self.gallery_ids = np.asarray(self.gallery_ids, dtype=np.int64)
        q, g = self.values.shape
        if len(self.query_ids) != q or len(self.gallery_ids) != g:
            raise ValueError(
                f"matrix {self.values.shape} does not match labels "
                f"({len(self.query_ids)}, {len(self.gallery_ids)})"
            )


@dataclass
class RetrievalReport:
    rank1: float
    rank5: float
    rank10: float
    map: float
    ranked_ids: list[list[int]]
    fingerprint: str
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (0.0 <= self.rank1 <= self.rank5 <= self.rank10 <= 100.0):
            raise ValueError(
                f"rank metrics must be nested percentages, got "
                f"{self.rank1}/{self.rank5}/{self.rank10}"
            )
        if not 0.0 <= self.map <= 100.0:
            raise ValueError(f"mAP must be a percentage, got {self.map}")

    def to_dict(self) -> dict:
        return {
            "rank1": self.rank1,
            "rank5": self.rank5,
            "rank10": self.rank10,
            "map": self.map,
            "ranked_ids": self.ranked_ids,
            "fingerprint": self.fingerprint,
            "extras": self.extras,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RetrievalReport":
        return cls(rank1=d["rank1"], rank5=d["rank5"], rank10=d["rank10"],
                   map=d["map"], ranked_ids=[list(r) for r in d["ranked_ids"]],
                   fingerprint=d["fingerprint"], extras=d.get("extras", {}))


def similarity_matrix(queries: EmbeddingBank, gallery: EmbeddingBank) -> SimilarityMatrix:
    """Global-embedding cosine similarities between two banks."""
    q = queries.globals_matrix().astype(np.float64)
    g = gallery.globals_matrix().astype(np.float64)
    qn = np.linalg.norm(q, axis=1, keepdims=True)
    gn = np.linalg.norm(g, axis=1, keepdims=True)
    if np.any(qn == 0) or np.any(gn == 0):
        raise ValueError("zero-norm global embedding in similarity matrix")
    return SimilarityMatrix(
        values=(q / qn) @ (g / gn).T,
        query_ids=queries.identity_ids(),
        gallery_ids=gallery.identity_ids(),
    )


def rank_gallery(sim: SimilarityMatrix) -> np.ndarray:
    """Per-query gallery permutation: descending similarity, ties by index."""
    if sim.values.size == 0:
        raise ValueError("cannot rank an empty similarity matrix")
    return np.argsort(-sim.values, axis=1, kind="stable")


def rank_k_accuracy(ranked: np.ndarray, query_ids: np.ndarray,
                    gallery_ids: np.ndarray, k: int) -> float:
    """Percentage of queries with a correct identity inside the top k."""
    if k > ranked.shape[1]:
        raise ValueError(f"k={k} exceeds gallery size {ranked.shape[1]}")
    hits = 0
    for qi in range(ranked.shape[0]):
        top = gallery_ids[ranked[qi, :k]]
        if np.any(top == query_ids[qi]):
            hits += 1
    return 100.0 * hits / ranked.shape[0]


def mean_average_precision(ranked: np.ndarray, query_ids: np.ndarray,
                           gallery_ids: np.ndarray) -> float:
    """Mean over queries of average precision across all relevant positions."""
    aps = []
    for qi in range(ranked.shape[0]):
        relevant = gallery_ids[ranked[qi]] == query_ids[qi]
        total = int(relevant.sum())
        if total == 0:
            raise ValueError(f"query {qi} has no relevant gallery item")
        seen = np.cumsum(relevant)
        positions = np.flatnonzero(relevant) + 1
        precisions = seen[positions - 1] / positions
        aps.append(precisions.mean())
    return 100.0 * float(np.mean(aps))


def config_fingerprint(config: dict, seed: int | None = None) -> str:
    payload = {"config": config}
    if seed is not None:
        payload["seed"] = seed
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def build_report(sim: SimilarityMatrix, fingerprint: str,
                 extras: dict | None = None) -> RetrievalReport:
    ranked = rank_gallery(sim)
    return RetrievalReport(
        rank1=rank_k_accuracy(ranked, sim.query_ids, sim.gallery_ids, 1),
        rank5=rank_k_accuracy(ranked, sim.query_ids, sim.gallery_ids, 5),
        rank10=rank_k_accuracy(ranked, sim.query_ids, sim.gallery_ids, 10),
        map=mean_average_precision(ranked, sim.query_ids, sim.gallery_ids),
        ranked_ids=[[int(sim.gallery_ids[j]) for j in row] for row in ranked],
        fingerprint=fingerprint,
        extras=extras or {},
    )


def emit_report(report: RetrievalReport, path: str | Path, fmt: str = "json") -> None:
    """Write the report deterministically as JSON or TSV."""
    path = Path(path)
    if fmt == "json":
        payload = json.dumps(report.to_dict(), sort_keys=True, indent=2)
        path.write_text(payload + "\n", encoding="utf-8")
    elif fmt == "tsv":
        line = f"{report.rank1}\t{report.rank5}\t{report.rank10}\t{report.map}"
        path.write_text(REPORT_TSV_HEADER + "\n" + line + "\n", encoding="utf-8")
    else:
        raise ValueError(f"unknown report format {fmt!r}")


def load_report(path: str | Path) -> RetrievalReport:
    return RetrievalReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def save_similarity_bank(sim: SimilarityMatrix, path: str | Path) -> None:
    """Export a similarity matrix in the embedding-bank binary layout.

    Header modality code 2; one item per query with the similarity row as
    the global block and the gallery identity labels (as f32) as a single
    local row. D equals the gallery size.
    """
    path = Path(path)
    q, g = sim.values.shape
    with open(path, "wb") as fh:
        fh.write(BANK_MAGIC)
        fh.write(struct.pack("<4I", BANK_VERSION, MODALITY_CODES["similarity"], q, g))
        labels = sim.gallery_ids.astype("<f4")
        for qi in range(q):
            fh.write(struct.pack("<2I", int(sim.query_ids[qi]), 1))
            fh.write(sim.values[qi].astype("<f4").tobytes())
            fh.write(labels.tobytes())
