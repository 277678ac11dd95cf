"""Request/response models for the HTTP service."""

from __future__ import annotations

from pydantic import BaseModel, Field

from ..synth import SyntheticSpec
from ..training import TrainConfig


class HealthResponse(BaseModel):
    status: str
    version: str


class CaptionRecord(BaseModel):
    tokens: list[str]
    pos_tags: list[str]
    identity_id: int


class PerturbRequest(BaseModel):
    captions: list[CaptionRecord]
    tier: int = Field(default=1, ge=1, le=3)
    seed: int = 0
    fallback: bool = True
    # extra substitution words; tagged with the built-in lexicon tagger and
    # merged into the corpus-derived alternatives
    lexicon_words: list[str] = Field(default_factory=list)


class PerturbedCaption(BaseModel):
    tokens: list[str]
    pos_tags: list[str]
    identity_id: int
    tier: int
    seed: int
    source_line: int


class PerturbResponse(BaseModel):
    results: list[PerturbedCaption]
    skipped: int


class GenDataRequest(BaseModel):
    spec: SyntheticSpec
    out_dir: str


class GenDataResponse(BaseModel):
    out_dir: str
    n_images: int
    n_captions: int
    manifest: dict


class TrainRequest(BaseModel):
    config: TrainConfig
    data_dir: str
    out_dir: str


class TrainResponse(BaseModel):
    checkpoint_dir: str
    history: list[dict]
    val_identity_ids: list[int]
    manifest: dict


class MetricsBlock(BaseModel):
    rank1: float
    rank5: float
    rank10: float
    map: float


class EvalRequest(BaseModel):
    ckpt_dir: str
    data_dir: str
    report_path: str | None = None
    fmt: str = Field(default="json", pattern="^(json|tsv)$")
    direction: str = Field(default="t2i", pattern="^(t2i|i2t)$")
    held_out_only: bool = False
    mask_top_nouns: int = Field(default=0, ge=0)
    profile_tsv: str | None = None


class EvalResponse(BaseModel):
    metrics: MetricsBlock
    fingerprint: str
    n_queries: int
    n_gallery: int
    report_path: str | None
    masked_words: list[str] = Field(default_factory=list)


class RetrieveRequest(BaseModel):
    ckpt_dir: str
    gallery_path: str
    query: str
    topk: int = Field(default=10, ge=1)


class RetrieveHit(BaseModel):
    identity_id: int
    gallery_index: int
    score: float


class RetrieveResponse(BaseModel):
    query_tokens: list[str]
    hits: list[RetrieveHit]


class AblationRowSpec(BaseModel):
    name: str
    imr_t: bool
    imr_v: bool
    cmr: bool
    dcc: bool


class AblateRequest(BaseModel):
    data_dir: str
    out_dir: str
    config: TrainConfig = Field(default_factory=TrainConfig)
    rows: list[AblationRowSpec] | None = None
    dcc_band: tuple[float, float] | None = None
    dcc_k: int | None = None


class AblateRow(BaseModel):
    name: str
    imr_t: bool
    imr_v: bool
    cmr: bool
    dcc: bool
    metrics: MetricsBlock


class AblateResponse(BaseModel):
    rows: list[AblateRow]
    tsv_path: str


class BankExportRequest(BaseModel):
    ckpt_dir: str
    data_dir: str
    out_path: str


class BankExportResponse(BaseModel):
    out_path: str
    items: int
    dim: int
