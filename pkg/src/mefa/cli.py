"""Thin-client command line interface.

Every subcommand is a small HTTP client of the service layer. By default
the service app is mounted in-process (no network, same filesystem);
``--server URL`` points the same commands at a running ``mefa serve``
instance instead.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import httpx


def _request(server: str | None, method: str, path: str,
             payload: dict | None = None) -> httpx.Response:
    if server:
        with httpx.Client(base_url=server, timeout=None) as client:
            return client.request(method, path, json=payload)

    import asyncio

    from .service.app import create_app

    async def go() -> httpx.Response:
        transport = httpx.ASGITransport(app=create_app())
        async with httpx.AsyncClient(transport=transport,
                                     base_url="http://mefa.local",
                                     timeout=None) as client:
            return await client.request(method, path, json=payload)

    return asyncio.run(go())


def _post(server: str | None, path: str, payload: dict) -> dict:
    resp = _request(server, "POST", path, payload)
    if resp.status_code >= 400:
        try:
            detail = resp.json().get("detail", resp.text)
        except ValueError:
            detail = resp.text
        raise SystemExit(f"error {resp.status_code}: {detail}")
    return resp.json()


def _echo_json(payload: dict) -> None:
    click.echo(json.dumps(payload, sort_keys=True, indent=2))


@click.group()
@click.option("--server", default=None, envvar="MEFA_SERVER",
              help="Base URL of a running service; default runs in-process.")
@click.pass_context
def main(ctx: click.Context, server: str | None) -> None:
    """Desk-scale text-to-image person retrieval lab."""
    ctx.ensure_object(dict)
    ctx.obj["server"] = server


@main.command("gen-data")
@click.option("--spec", "spec_path", required=True, type=click.Path(exists=True),
              help="SyntheticSpec JSON document.")
@click.option("--out", "out_dir", required=True, type=click.Path(),
              help="Dataset output directory.")
@click.pass_context
def gen_data(ctx: click.Context, spec_path: str, out_dir: str) -> None:
    """Generate a synthetic dataset."""
    spec = json.loads(Path(spec_path).read_text(encoding="utf-8"))
    out = _post(ctx.obj["server"], "/datasets", {"spec": spec, "out_dir": out_dir})
    _echo_json(out)


@main.command("train")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True),
              help="TrainConfig JSON document.")
@click.option("--data", "data_dir", required=True, type=click.Path(),
              help="Dataset directory from gen-data.")
@click.option("--out", "out_dir", required=True, type=click.Path(),
              help="Checkpoint output directory.")
@click.pass_context
def train_cmd(ctx: click.Context, config_path: str, data_dir: str, out_dir: str) -> None:
    """Train the dual encoders with the configured pathway losses."""
    config = json.loads(Path(config_path).read_text(encoding="utf-8"))
    out = _post(ctx.obj["server"], "/train",
                {"config": config, "data_dir": data_dir, "out_dir": out_dir})
    _echo_json(out)


@main.command("eval")
@click.option("--ckpt", "ckpt_dir", required=True, type=click.Path())
@click.option("--data", "data_dir", required=True, type=click.Path())
@click.option("--report", "report_path", default=None, type=click.Path(),
              help="Write the full report here.")
@click.option("--format", "fmt", default="json", type=click.Choice(["json", "tsv"]))
@click.option("--direction", default="t2i", type=click.Choice(["t2i", "i2t"]),
              help="t2i ranks images by text queries; i2t is the diagnostic reverse.")
@click.option("--held-out", "held_out", is_flag=True,
              help="Restrict queries to the identities held out during training.")
@click.option("--mask-top-nouns", default=0, type=int,
              help="Mask the K most frequent nouns in the queries first.")
@click.option("--profile-tsv", default=None, type=click.Path(),
              help="Export the aggregated word-image relevance profile.")
@click.pass_context
def eval_cmd(ctx: click.Context, ckpt_dir: str, data_dir: str, report_path: str | None,
             fmt: str, direction: str, held_out: bool, mask_top_nouns: int,
             profile_tsv: str | None) -> None:
    """Evaluate retrieval metrics for a checkpoint on a dataset."""
    out = _post(ctx.obj["server"], "/evaluate", {
        "ckpt_dir": ckpt_dir, "data_dir": data_dir, "report_path": report_path,
        "fmt": fmt, "direction": direction, "held_out_only": held_out,
        "mask_top_nouns": mask_top_nouns, "profile_tsv": profile_tsv,
    })
    _echo_json(out)


@main.command("perturb")
@click.option("--in", "in_path", required=True, type=click.Path(exists=True),
              help="Caption JSONL input.")
@click.option("--tier", required=True, type=click.Choice(["1", "2", "3"]))
@click.option("--seed", required=True, type=int)
@click.option("--out", "out_path", default=None, type=click.Path(),
              help="Perturbed JSONL output (default stdout).")
@click.option("--lexicon", "lexicon_path", default=None,
              type=click.Path(exists=True),
              help="Extra substitution words, plain text, one per line.")
@click.option("--no-fallback", is_flag=True,
              help="Do not fall through to later tiers when one does not apply.")
@click.pass_context
def perturb_cmd(ctx: click.Context, in_path: str, tier: str, seed: int,
                out_path: str | None, lexicon_path: str | None,
                no_fallback: bool) -> None:
    """Emit perturbed captions with added fields {tier, seed, source_line}."""
    records = []
    with open(in_path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    lexicon_words = []
    if lexicon_path:
        lexicon_words = [w.strip() for w in
                         Path(lexicon_path).read_text(encoding="utf-8").splitlines()
                         if w.strip()]
    payload = {
        "captions": [{"tokens": r["tokens"], "pos_tags": r["pos_tags"],
                      "identity_id": r["identity_id"]} for r in records],
        "tier": int(tier), "seed": seed, "fallback": not no_fallback,
        "lexicon_words": lexicon_words,
    }
    out = _post(ctx.obj["server"], "/perturb", payload)
    lines = [json.dumps(rec, sort_keys=True) for rec in out["results"]]
    text = "\n".join(lines) + ("\n" if lines else "")
    if out_path:
        Path(out_path).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    if out["skipped"]:
        click.echo(f"skipped {out['skipped']} caption(s) with no applicable tier",
                   err=True)


@main.command("retrieve")
@click.option("--ckpt", "ckpt_dir", required=True, type=click.Path())
@click.option("--query", required=True, help="Whitespace-separated query tokens.")
@click.option("--gallery", "gallery_path", required=True, type=click.Path(),
              help="Image embedding bank (see export-bank).")
@click.option("--topk", default=10, type=int)
@click.pass_context
def retrieve_cmd(ctx: click.Context, ckpt_dir: str, query: str, gallery_path: str,
                 topk: int) -> None:
    """Rank a gallery bank against a free-text query."""
    out = _post(ctx.obj["server"], "/retrieve", {
        "ckpt_dir": ckpt_dir, "gallery_path": gallery_path,
        "query": query, "topk": topk,
    })
    _echo_json(out)


@main.command("ablate")
@click.option("--grid", "grid_path", required=True, type=click.Path(exists=True),
              help="JSON document: {config: TrainConfig, rows?: [...]}.")
@click.option("--data", "data_dir", required=True, type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--dcc-band", nargs=2, type=float, default=None,
              help="Override the cue-selection percentile band (lo hi).")
@click.option("--dcc-k", type=int, default=None,
              help="Override the number of cue tokens.")
@click.pass_context
def ablate_cmd(ctx: click.Context, grid_path: str, data_dir: str, out_dir: str,
               dcc_band: tuple[float, float] | None, dcc_k: int | None) -> None:
    """Train/evaluate each pathway-toggle combination and emit a TSV table."""
    grid = json.loads(Path(grid_path).read_text(encoding="utf-8"))
    payload = {
        "data_dir": data_dir, "out_dir": out_dir,
        "config": grid.get("config", {}),
        "rows": grid.get("rows"),
    }
    if dcc_band:
        payload["dcc_band"] = list(dcc_band)
    if dcc_k is not None:
        payload["dcc_k"] = dcc_k
    out = _post(ctx.obj["server"], "/ablate", payload)
    _echo_json(out)


@main.command("export-bank")
@click.option("--ckpt", "ckpt_dir", required=True, type=click.Path())
@click.option("--data", "data_dir", required=True, type=click.Path())
@click.option("--out", "out_path", required=True, type=click.Path())
@click.pass_context
def export_bank_cmd(ctx: click.Context, ckpt_dir: str, data_dir: str,
                    out_path: str) -> None:
    """Encode a dataset's images into a gallery embedding bank."""
    out = _post(ctx.obj["server"], "/banks", {
        "ckpt_dir": ckpt_dir, "data_dir": data_dir, "out_path": out_path,
    })
    _echo_json(out)


@main.command("schema")
@click.argument("name", type=click.Choice(["train-config", "synthetic-spec",
                                           "ablate-request"]))
@click.pass_context
def schema_cmd(ctx: click.Context, name: str) -> None:
    """Print the published JSON schema of a config document."""
    resp = _request(ctx.obj["server"], "GET", f"/schemas/{name}")
    if resp.status_code >= 400:
        raise SystemExit(f"error {resp.status_code}: {resp.text}")
    _echo_json(resp.json())


@main.command("serve")
@click.option("--host", default="127.0.0.1")
@click.option("--port", default=8000, type=int)
def serve_cmd(host: str, port: int) -> None:
    """Run the HTTP service."""
    import uvicorn

    uvicorn.run("mefa.service.app:app", host=host, port=port)


if __name__ == "__main__":
    main()
