"""Command-line interface.

Exit codes: 0 success, 1 degraded run under ``--strict``, 2 usage or
validation error, 3 I/O or corrupt input. Every command reads defaults from
the JSON file given to ``--config``; explicit flags win. Top-level keys in
that file apply to every command, nested objects (``{"index": {"build":
{...}}}``) to one command.
"""

from __future__ import annotations

import functools
import json
import logging
import sys
import time

import click
import numpy as np

from .backends import API_KEY_ENV, RemoteSearchBackend, load_corpus
from .embedding import read_embedding_file
from .errors import CorruptFileError, FormatError, ParseError, VlragError
from .evaluation import evaluate, load_eval_records
from .index import HnswIndex, HnswParams, build_index
from .pipeline import MultimodalQuery, RetrievalConfig, RetrievalPipeline, write_snippets
from .refine import (
    DEFAULT_M,
    format_mask_pbm,
    format_mask_text,
    refine_query_tokens,
    refine_retrieved_tokens,
    selection_mask,
)
from .store import load_store
from .training import AnnotatedQuery, audit_dataset, build_dataset

logger = logging.getLogger("vlrag")

EXIT_DEGRADED = 1
EXIT_USAGE = 2
EXIT_IO = 3


class CommandFailed(click.ClickException):
    def __init__(self, message: str, exit_code: int):
        super().__init__(message)
        self.exit_code = exit_code


def handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (FormatError, CorruptFileError, ParseError, OSError) as exc:
            raise CommandFailed(str(exc), EXIT_IO) from exc
        except (VlragError, ValueError) as exc:
            raise CommandFailed(str(exc), EXIT_USAGE) from exc

    return wrapper


def _default_map(command: click.Command, config: dict, shared: dict) -> dict:
    out = {k: v for k, v in shared.items()}
    out.update({k: v for k, v in config.items() if not isinstance(v, dict)})
    if isinstance(command, click.Group):
        for name, sub in command.commands.items():
            section = config.get(name, {})
            out[name] = _default_map(sub, section if isinstance(section, dict) else {}, shared)
    return out


def _load_config(ctx: click.Context, _param, path):
    if path is None:
        return None
    try:
        with open(path, encoding="utf-8") as fh:
            config = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise click.BadParameter(f"cannot read config {path}: {exc}")
    if not isinstance(config, dict):
        raise click.BadParameter("config must be a JSON object")
    shared = {k: v for k, v in config.items() if not isinstance(v, dict)}
    ctx.default_map = _default_map(ctx.command, config, shared)
    return path


@click.group()
@click.option("--config", type=click.Path(exists=True, dir_okay=False), callback=_load_config,
              is_eager=True, expose_value=False, help="JSON file with default option values.")
@click.option("-v", "--verbose", count=True, help="Increase log verbosity.")
def main(verbose):
    """Two-stage multimodal retrieval, token refinement, training data and evaluation."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def hnsw_options(fn):
    defaults = HnswParams()
    for opt in reversed([
        click.option("--max-degree", type=click.IntRange(min=2), default=defaults.max_degree, show_default=True),
        click.option("--ef-construction", type=click.IntRange(min=1), default=defaults.ef_construction, show_default=True),
        click.option("--ef-search", type=click.IntRange(min=1), default=defaults.ef_search, show_default=True),
        click.option("--seed", type=click.IntRange(min=0, max=2**64 - 1), default=0, show_default=True,
                     help="Level-assignment RNG seed."),
    ]):
        fn = opt(fn)
    return fn


def retrieval_options(fn):
    defaults = RetrievalConfig()
    for opt in reversed([
        click.option("--index", "index_path", type=click.Path(exists=True, dir_okay=False), required=True),
        click.option("--store", "store_path", type=click.Path(exists=True, dir_okay=False), required=True),
        click.option("--corpus", type=click.Path(exists=True, dir_okay=False),
                     help="JSON-lines passage corpus for the offline lexical backend."),
        click.option("--endpoint", help=f"Remote search URL (API key from ${API_KEY_ENV})."),
        click.option("--k", type=click.IntRange(min=1), default=defaults.k, show_default=True),
        click.option("--l", type=click.IntRange(min=1), default=defaults.l, show_default=True),
        click.option("--truncation", type=click.IntRange(min=1), default=defaults.truncation_limit,
                     show_default=True, help="Passage token limit."),
        click.option("--max-in-flight", type=click.IntRange(min=1), default=defaults.max_in_flight,
                     show_default=True, help="Concurrent stage-2 requests."),
        click.option("--timeout", type=float, default=10.0, show_default=True, help="Remote request timeout (s)."),
    ]):
        fn = opt(fn)
    return fn


def _pipeline(index_path, store_path, corpus, endpoint, k, l, truncation, max_in_flight, timeout):
    if bool(corpus) == bool(endpoint):
        raise click.UsageError("give exactly one of --corpus or --endpoint")
    backend = load_corpus(corpus) if corpus else RemoteSearchBackend(endpoint, timeout=timeout)
    config = RetrievalConfig(k=k, l=l, truncation_limit=truncation, max_in_flight=max_in_flight)
    return RetrievalPipeline(HnswIndex.load(index_path), load_store(store_path), backend, config)


def _embedding_row(path, row: int) -> np.ndarray:
    _, vectors = read_embedding_file(path)
    if not 0 <= row < vectors.shape[0]:
        raise click.UsageError(f"{path} has {vectors.shape[0]} rows, no row {row}")
    return vectors[row]


@main.group()
def index():
    """Build or query the vector index."""


@index.command("build")
@click.argument("embeddings", type=click.Path(exists=True, dir_okay=False))
@click.argument("store_file", type=click.Path(exists=True, dir_okay=False))
@click.argument("out", type=click.Path(dir_okay=False))
@hnsw_options
@handle_errors
def index_build(embeddings, store_file, out, max_degree, ef_construction, ef_search, seed):
    """Index EMBEDDINGS (RVE1), row i carrying the id of record i in STORE_FILE."""
    dim, vectors = read_embedding_file(embeddings)
    store = load_store(store_file)
    if vectors.shape[0] != len(store):
        raise CommandFailed(
            f"embedding count {vectors.shape[0]} does not match store record count {len(store)}", EXIT_USAGE
        )
    params = HnswParams(max_degree, ef_construction, ef_search, rng_seed=seed)
    start = time.perf_counter()
    idx = build_index(store.ids, vectors, params)
    elapsed = time.perf_counter() - start
    idx.save(out)
    click.echo(json.dumps({"count": len(idx), "dim": dim, "build_seconds": round(elapsed, 3), "out": out}))


@index.command("query")
@click.argument("index_path", type=click.Path(exists=True, dir_okay=False))
@click.argument("query_embeddings", type=click.Path(exists=True, dir_okay=False))
@click.option("--row", type=click.IntRange(min=0), default=0, show_default=True)
@click.option("--k", type=click.IntRange(min=1), default=10, show_default=True)
@click.option("--ef-search", type=click.IntRange(min=1), default=None)
@click.option("--exact", is_flag=True, help="Linear scan instead of graph search.")
@handle_errors
def index_query(index_path, query_embeddings, row, k, ef_search, exact):
    idx = HnswIndex.load(index_path)
    query = _embedding_row(query_embeddings, row)
    hits = idx.exact_search(query, k) if exact else idx.search(query, k, ef_search)
    for hit in hits:
        click.echo(json.dumps({"id": hit.id, "score": hit.score}))


@main.command()
@retrieval_options
@click.option("--query-embedding", type=click.Path(exists=True, dir_okay=False), required=True,
              help="RVE1 file holding the query image embedding.")
@click.option("--row", type=click.IntRange(min=0), default=0, show_default=True)
@click.option("--text", required=True, help="Text question.")
@click.option("--out", type=click.File("w", encoding="utf-8"), default="-")
@click.option("--strict", is_flag=True, help="Exit 1 if any stage-2 call failed.")
@handle_errors
def retrieve(index_path, store_path, corpus, endpoint, k, l, truncation, max_in_flight, timeout,
             query_embedding, row, text, out, strict):
    """Print the knowledge snippets for one query as JSON lines."""
    pipeline = _pipeline(index_path, store_path, corpus, endpoint, k, l, truncation, max_in_flight, timeout)
    query = MultimodalQuery(text=text, image_embedding=_embedding_row(query_embedding, row))
    snippets = pipeline.retrieve(query)
    write_snippets(snippets, out)
    failed = [s for s in snippets if s.backend_error]
    if failed:
        click.echo(f"warning: stage-2 retrieval failed for {len(failed)} of {len(snippets)} snippets", err=True)
        if strict:
            raise CommandFailed("degraded retrieval under --strict", EXIT_DEGRADED)


@main.command()
@click.argument("patches", type=click.Path(exists=True, dir_okay=False))
@click.argument("text_embedding", type=click.Path(exists=True, dir_okay=False))
@click.option("--m", type=click.IntRange(min=1), default=DEFAULT_M, show_default=True)
@click.option("--retrieved", type=click.Path(exists=True, dir_okay=False),
              help="Patch embeddings of a retrieved image to refine against the query selection.")
@click.option("--grid-width", type=click.IntRange(min=1), help="Patch grid width for the mask.")
@click.option("--mask-out", type=click.Path(dir_okay=False),
              help="Mask file (.pbm for a portable bitmap, otherwise text).")
@handle_errors
def refine(patches, text_embedding, m, retrieved, grid_width, mask_out):
    """Select the M query-image patches most similar to the text embedding."""
    _, patch_vecs = read_embedding_file(patches)
    _, text_vecs = read_embedding_file(text_embedding)
    if text_vecs.shape[0] != 1:
        raise CommandFailed(f"text embedding file must hold one vector, found {text_vecs.shape[0]}", EXIT_USAGE)
    selection = refine_query_tokens(patch_vecs, text_vecs[0], m)
    result = {"query_indices": selection.indices.tolist()}
    chosen, n = selection, patch_vecs.shape[0]
    if retrieved:
        _, ret_vecs = read_embedding_file(retrieved)
        chosen = refine_retrieved_tokens(ret_vecs, selection, m)
        n = ret_vecs.shape[0]
        result["retrieved_indices"] = chosen.indices.tolist()
    click.echo(json.dumps(result))
    if grid_width:
        mask = selection_mask(chosen.indices, n, grid_width)
        rendered = format_mask_pbm(mask) if mask_out and mask_out.endswith(".pbm") else format_mask_text(mask)
        if mask_out:
            with open(mask_out, "w", encoding="ascii") as fh:
                fh.write(rendered)
        else:
            click.echo(rendered, nl=False)


def load_annotated_queries(path, embeddings=None) -> list[AnnotatedQuery]:
    """Read query lines: text, gold_entity_name, answer, and either an inline
    ``image_embedding`` or an ``embedding_row`` into ``embeddings``."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                if "image_embedding" in obj:
                    vec = obj["image_embedding"]
                elif embeddings is not None:
                    vec = embeddings[int(obj["embedding_row"])]
                else:
                    raise ValueError("no image_embedding and no --query-embeddings file")
                query = MultimodalQuery(text=obj["text"], image_embedding=vec, image_ref=obj.get("image_ref", ""))
                out.append(AnnotatedQuery(query, obj["gold_entity_name"], obj["answer"],
                                          str(obj.get("query_id", lineno))))
            except (json.JSONDecodeError, KeyError, IndexError, TypeError, ValueError) as exc:
                raise ParseError(f"bad query record: {exc}", line=lineno) from exc
    return out


@main.command("build-training")
@click.argument("queries", type=click.Path(exists=True, dir_okay=False))
@retrieval_options
@click.option("--query-embeddings", type=click.Path(exists=True, dir_okay=False),
              help="RVE1 file addressed by each query's embedding_row.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--shuffle-noise", is_flag=True, help="Place the noise snippet at a random snippet slot.")
@click.option("--workers", type=click.IntRange(min=1), default=1, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@handle_errors
def build_training(queries, index_path, store_path, corpus, endpoint, k, l, truncation, max_in_flight,
                   timeout, query_embeddings, seed, shuffle_noise, workers, out):
    """Write noise-injected training instances, one JSON line per query."""
    pipeline = _pipeline(index_path, store_path, corpus, endpoint, k, l, truncation, max_in_flight, timeout)
    embeddings = read_embedding_file(query_embeddings)[1] if query_embeddings else None
    annotated = load_annotated_queries(queries, embeddings)
    summary = build_dataset(pipeline, annotated, out, seed=seed, shuffle_noise=shuffle_noise, workers=workers)
    report = summary.to_dict()
    report["audit"] = audit_dataset(out)
    click.echo(json.dumps(report))


@main.command("eval")
@click.argument("records_file", type=click.Path(exists=True, dir_okay=False))
@click.option("--tolerance", type=click.FloatRange(min=0), default=0.05, show_default=True,
              help="Relative tolerance for relaxed accuracy.")
@click.option("--bucket-width", type=click.IntRange(min=1), default=50, show_default=True)
@click.option("--json-out", type=click.Path(dir_okay=False), help="Write the structured report here.")
@click.option("--histogram-csv", type=click.Path(dir_okay=False))
@click.option("--strict", is_flag=True, help="Fail when any record is malformed.")
@handle_errors
def eval_cmd(records_file, tolerance, bucket_width, json_out, histogram_csv, strict):
    """Score retrieval and answer records; prints a table."""
    records, malformed = load_eval_records(records_file)
    for line, err in malformed:
        click.echo(f"malformed record at line {line}: {err}", err=True)
    report = evaluate(records, tolerance, bucket_width)
    report.malformed = malformed
    if not report.evaluable:
        raise CommandFailed("no evaluable records", EXIT_USAGE)
    click.echo(report.format_table())
    if json_out:
        with open(json_out, "w", encoding="utf-8") as fh:
            json.dump(report.to_dict(), fh, indent=2)
    if histogram_csv:
        with open(histogram_csv, "w", encoding="utf-8") as fh:
            fh.write(report.histogram.to_csv())
    if malformed and strict:
        raise CommandFailed(f"{len(malformed)} malformed records", EXIT_USAGE)


if __name__ == "__main__":
    main()
