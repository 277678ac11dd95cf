"""FastAPI service wrapping the core package.

Endpoints mirror the CLI one-to-one: dataset generation, training,
evaluation, perturbation, retrieval, and ablation grids. File-producing
operations take filesystem paths (the service owns the filesystem it runs
on; remote callers address the server's paths).
"""

from __future__ import annotations

from pathlib import Path

from fastapi import FastAPI, HTTPException

from .. import __version__
from ..data import Caption, CorpusStats, caption_from_text, load_bank
from ..dcc import write_profile_tsv
from ..evalret import emit_report, rank_gallery, similarity_matrix
from ..imr import (
    perturb_tier1_noun_swap,
    perturb_tier2_substitute,
    perturb_tier3_mask_fill,
    perturb_with_fallback,
)
from ..synth import generate_dataset, load_dataset, save_dataset
from ..training import (
    TrainConfig,
    ablation_tsv,
    aggregate_word_relevance,
    corpus_lexicon,
    encode_banks,
    evaluate,
    load_checkpoint,
    mask_topk_nouns,
    run_ablation,
    save_checkpoint,
    train,
)
from . import schemas


def create_app() -> FastAPI:
    app = FastAPI(title="mefa", version=__version__)

    @app.get("/health", response_model=schemas.HealthResponse)
    def health() -> schemas.HealthResponse:
        return schemas.HealthResponse(status="ok", version=__version__)

    @app.get("/schemas/{name}")
    def config_schema(name: str) -> dict:
        from ..synth import SyntheticSpec

        known = {
            "train-config": TrainConfig,
            "synthetic-spec": SyntheticSpec,
            "ablate-request": schemas.AblateRequest,
        }
        if name not in known:
            raise HTTPException(404, f"unknown schema {name!r}; try {sorted(known)}")
        return known[name].model_json_schema()

    @app.post("/perturb", response_model=schemas.PerturbResponse)
    def perturb(req: schemas.PerturbRequest) -> schemas.PerturbResponse:
        from ..data import tag_tokens

        captions = [Caption(c.tokens, c.pos_tags, c.identity_id) for c in req.captions]
        stats = CorpusStats.from_captions(captions)
        lexicon = corpus_lexicon(stats)
        if req.lexicon_words:
            for word, tag in zip(req.lexicon_words, tag_tokens(req.lexicon_words)):
                if tag in ("ADJ", "VERB") and word not in lexicon[tag]:
                    lexicon[tag] = sorted(lexicon[tag] + [word])
        results: list[schemas.PerturbedCaption] = []
        skipped = 0
        for line, cap in enumerate(captions):
            seed = req.seed + line
            if req.fallback:
                got = perturb_with_fallback(cap, lexicon, stats, seed,
                                            start_tier=req.tier)
            else:
                fn = {1: lambda: perturb_tier1_noun_swap(cap, seed),
                      2: lambda: perturb_tier2_substitute(cap, lexicon, seed),
                      3: lambda: perturb_tier3_mask_fill(cap, stats, seed)}[req.tier]
                out = fn()
                got = (out, req.tier) if out is not None else None
            if got is None:
                skipped += 1
                continue
            perturbed, tier = got
            results.append(schemas.PerturbedCaption(
                tokens=perturbed.tokens, pos_tags=perturbed.pos_tags,
                identity_id=perturbed.identity_id, tier=tier, seed=seed,
                source_line=line,
            ))
        return schemas.PerturbResponse(results=results, skipped=skipped)

    @app.post("/datasets", response_model=schemas.GenDataResponse)
    def gen_data(req: schemas.GenDataRequest) -> schemas.GenDataResponse:
        try:
            images, captions = generate_dataset(req.spec)
        except ValueError as exc:
            raise HTTPException(422, str(exc)) from exc
        manifest = save_dataset(req.out_dir, images, captions, req.spec)
        return schemas.GenDataResponse(out_dir=req.out_dir, n_images=len(images),
                                       n_captions=len(captions), manifest=manifest)

    @app.post("/train", response_model=schemas.TrainResponse)
    def train_model(req: schemas.TrainRequest) -> schemas.TrainResponse:
        try:
            images, captions, _ = load_dataset(req.data_dir)
        except FileNotFoundError as exc:
            raise HTTPException(404, f"dataset not found: {exc}") from exc
        result = train(images, captions, req.config)
        save_checkpoint(req.out_dir, result.model, history=result.history,
                        manifest=result.manifest)
        return schemas.TrainResponse(
            checkpoint_dir=req.out_dir, history=result.history,
            val_identity_ids=result.val_identity_ids, manifest=result.manifest,
        )

    @app.post("/evaluate", response_model=schemas.EvalResponse)
    def evaluate_model(req: schemas.EvalRequest) -> schemas.EvalResponse:
        try:
            model, meta = load_checkpoint(req.ckpt_dir)
            images, captions, _ = load_dataset(req.data_dir)
        except FileNotFoundError as exc:
            raise HTTPException(404, str(exc)) from exc
        masked_words: list[str] = []
        extras = {}
        if req.mask_top_nouns:
            captions, masked_words = mask_topk_nouns(captions, k=req.mask_top_nouns)
            extras["masked_words"] = masked_words
        query_ids = None
        if req.held_out_only:
            query_ids = meta.get("manifest", {}).get("val_identity_ids")
            if not query_ids:
                raise HTTPException(422, "checkpoint records no held-out identities")
        report = evaluate(model, images, captions, query_identity_ids=query_ids,
                          direction=req.direction, extras=extras)
        if req.report_path:
            emit_report(report, req.report_path, fmt=req.fmt)
        if req.profile_tsv:
            rows = aggregate_word_relevance(model, images, captions)
            write_profile_tsv(req.profile_tsv, rows)
        return schemas.EvalResponse(
            metrics=schemas.MetricsBlock(rank1=report.rank1, rank5=report.rank5,
                                         rank10=report.rank10, map=report.map),
            fingerprint=report.fingerprint,
            n_queries=report.extras["n_queries"],
            n_gallery=report.extras["n_gallery"],
            report_path=req.report_path,
            masked_words=masked_words,
        )

    @app.post("/retrieve", response_model=schemas.RetrieveResponse)
    def retrieve(req: schemas.RetrieveRequest) -> schemas.RetrieveResponse:
        try:
            model, _ = load_checkpoint(req.ckpt_dir)
            gallery = load_bank(req.gallery_path)
        except FileNotFoundError as exc:
            raise HTTPException(404, str(exc)) from exc
        if gallery.modality != "image":
            raise HTTPException(422, f"gallery must be an image bank, got {gallery.modality}")
        cap = caption_from_text(req.query)
        from ..data import EmbeddingBank
        from ..numerics import no_grad

        with no_grad():
            item = model.encoder.encode_text(cap)
        queries = EmbeddingBank("text", model.config.dim, [item])
        sim = similarity_matrix(queries, gallery)
        order = rank_gallery(sim)[0]
        k = min(req.topk, len(gallery))
        hits = [schemas.RetrieveHit(
                    identity_id=int(sim.gallery_ids[j]),
                    gallery_index=int(j),
                    score=float(sim.values[0, j]))
                for j in order[:k]]
        return schemas.RetrieveResponse(query_tokens=cap.tokens, hits=hits)

    @app.post("/ablate", response_model=schemas.AblateResponse)
    def ablate(req: schemas.AblateRequest) -> schemas.AblateResponse:
        try:
            images, captions, _ = load_dataset(req.data_dir)
        except FileNotFoundError as exc:
            raise HTTPException(404, str(exc)) from exc
        config = req.config
        if req.dcc_band is not None:
            config = config.model_copy(update={"dcc_band": req.dcc_band})
        if req.dcc_k is not None:
            config = config.model_copy(update={"dcc_k": req.dcc_k})
        rows = None
        if req.rows is not None:
            rows = [(r.name, dict(imr_t=r.imr_t, imr_v=r.imr_v, cmr=r.cmr, dcc=r.dcc))
                    for r in req.rows]
        results = run_ablation(images, captions, config, rows=rows)
        out_dir = Path(req.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        tsv_path = out_dir / "ablation.tsv"
        tsv_path.write_text(ablation_tsv(results), encoding="utf-8")
        rows_out = [schemas.AblateRow(
                        name=r.name, metrics=schemas.MetricsBlock(
                            rank1=r.report.rank1, rank5=r.report.rank5,
                            rank10=r.report.rank10, map=r.report.map),
                        **r.toggles)
                    for r in results]
        return schemas.AblateResponse(rows=rows_out, tsv_path=str(tsv_path))

    @app.post("/banks", response_model=schemas.BankExportResponse)
    def export_bank(req: schemas.BankExportRequest) -> schemas.BankExportResponse:
        """Encode a dataset's images into an embedding bank file."""
        try:
            model, _ = load_checkpoint(req.ckpt_dir)
            images, captions, _ = load_dataset(req.data_dir)
        except FileNotFoundError as exc:
            raise HTTPException(404, str(exc)) from exc
        from ..data import save_bank

        image_bank, _ = encode_banks(model, images, captions[:1])
        save_bank(image_bank, req.out_path)
        return schemas.BankExportResponse(out_path=req.out_path,
                                          items=len(image_bank),
                                          dim=image_bank.dim)

    return app


app = create_app()
