# app/cli.py
"""Command-line surface: train, predict, evaluate, gen-synth, check-gradients, decode-trace.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import click
from pydantic import ValidationError

from app.core.config import DECODE_MODES, PipelineConfig, settings
from app.core.errors import JointIEError, NumericalError, StageError
from app.core.log import configure_logging
from app.services.evaluation_service import evaluate as evaluate_documents
from app.services.extraction_service import ExtractionService, status_frame
from app.services.model_bundle import ModelBundle
from app.services.synthetic_corpus import gen_synth, write_synth
from app.services.training_service import gradient_check, lambda_grid_search, train_pipeline
from app.services.utils.corpus import load_corpus, save_corpus
from app.services.utils.schema import load_schema

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3


@click.group()
@click.option("--log-level", default=settings.LOG_LEVEL, show_default=True, help="Logging level.")
def cli(log_level: str) -> None:
    """Joint event and entity extraction."""
    configure_logging(log_level)


@cli.command()
@click.option("--corpus", required=True, help="Training corpus (JSONL).")
@click.option("--schema", "schema_path", default=settings.SCHEMA_PATH, show_default=True, help="Label schema (JSON).")
@click.option("--config", "config_path", default=None, help="PipelineConfig JSON file.")
@click.option("--out", required=True, help="Where to write the bundle.")
@click.option("--dev", default=None, help="Dev corpus; when given, the within-event L2 is picked on it.")
def train(corpus: str, schema_path: str, config_path: Optional[str], out: str, dev: Optional[str]) -> None:
    """Train every model and write one bundle."""
    schema = load_schema(schema_path)
    cfg = PipelineConfig.from_file(config_path)
    docs = load_corpus(corpus, schema)
    if dev:
        search = lambda_grid_search(docs, load_corpus(dev, schema), schema, cfg)
        click.echo(f"lambda grid (dev argument-role F1): {search.scores}; picked {search.best_l2}")
        bundle = search.bundle
    else:
        bundle = train_pipeline(docs, schema, cfg)
    bundle.save(out)


@cli.command()
@click.option("--bundle", "bundle_path", required=True, help="Trained bundle.")
@click.option("--corpus", required=True, help="Documents to decode (JSONL).")
@click.option("--out", required=True, help="Predicted JSONL; per-document status goes to <out>.status.tsv.")
@click.option("--mode", type=click.Choice(DECODE_MODES), default=None, help="Decoding variant.")
def predict(bundle_path: str, corpus: str, out: str, mode: Optional[str]) -> None:
    """Decode documents with a trained bundle."""
    bundle = ModelBundle.load(bundle_path)
    docs = load_corpus(corpus, bundle.schema)
    results = ExtractionService(bundle).predict(docs, mode)
    save_corpus([r.document for r in results], out)
    status_frame(results).to_csv(f"{out}.status.tsv", sep="\t", index=False)


@cli.command()
@click.option("--gold", required=True, help="Gold corpus (JSONL).")
@click.option("--pred", required=True, help="Predicted corpus (JSONL).")
@click.option("--report", required=True, help="Where to write the JSON report.")
@click.option("--schema", "schema_path", default=settings.SCHEMA_PATH, show_default=True)
def evaluate(gold: str, pred: str, report: str, schema_path: str) -> None:
    """Score predictions against gold annotations."""
    schema = load_schema(schema_path)
    result = evaluate_documents(load_corpus(gold, schema), load_corpus(pred, schema))
    Path(report).write_text(json.dumps(result.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    click.echo(result.summary_frame().to_string(index=False, float_format=lambda x: f"{x:.4f}"))


@cli.command("gen-synth")
@click.option("--seed", default=42, show_default=True, type=int)
@click.option("--sizes", default="529,40,30", show_default=True, help="train,dev,test document counts.")
@click.option("--out-dir", required=True)
@click.option("--schema", "schema_path", default=settings.SCHEMA_PATH, show_default=True)
def gen_synth_command(seed: int, sizes: str, out_dir: str, schema_path: str) -> None:
    """Write a synthetic train/dev/test corpus."""
    try:
        counts = [int(x) for x in sizes.split(",")]
    except ValueError:
        raise click.BadParameter("expected three comma-separated integers", param_hint="--sizes")
    if len(counts) != 3 or any(n < 0 for n in counts):
        raise click.BadParameter("expected three comma-separated non-negative integers", param_hint="--sizes")
    paths = write_synth(out_dir, seed, counts, load_schema(schema_path))
    for name, path in paths.items():
        click.echo(f"{name}: {path}")


@cli.command("check-gradients")
@click.option("--model", type=click.Choice(["crf", "within", "pair"]), required=True)
@click.option("--corpus", default=None, help="Corpus to check on; a small synthetic one by default.")
@click.option("--schema", "schema_path", default=settings.SCHEMA_PATH, show_default=True)
@click.option("--config", "config_path", default=None)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--tolerance", default=1e-4, show_default=True, type=float)
def check_gradients(model: str, corpus: Optional[str], schema_path: str, config_path: Optional[str], seed: int,
                    tolerance: float) -> None:
    """Compare analytic and finite-difference gradients of a training objective."""
    schema = load_schema(schema_path)
    cfg = PipelineConfig.from_file(config_path)
    docs = load_corpus(corpus, schema) if corpus else gen_synth(seed, 6, 0, 0, schema)["train"]
    error = gradient_check(model, docs, schema, cfg, seed=seed)
    click.echo(f"{model}: max relative error {error:.3e}")
    if error > tolerance:
        raise NumericalError(f"{model} gradient error {error:.3e} exceeds {tolerance:.1e}")


@cli.command("decode-trace")
@click.option("--bundle", "bundle_path", required=True)
@click.option("--doc", "doc_path", required=True, help="Corpus file holding the document.")
@click.option("--doc-id", default=None, help="Document to trace; the first one by default.")
@click.option("--mode", type=click.Choice([m for m in DECODE_MODES if m != "within_event"]), default="joint",
              show_default=True)
@click.option("--out", default=None, help="TSV output; standard output by default.")
def decode_trace(bundle_path: str, doc_path: str, doc_id: Optional[str], mode: str, out: Optional[str]) -> None:
    """Write the AD3 iteration trace of one document."""
    bundle = ModelBundle.load(bundle_path)
    docs = load_corpus(doc_path, bundle.schema)
    if not docs:
        raise click.BadParameter("the corpus holds no documents", param_hint="--doc")
    if doc_id is None:
        doc = docs[0]
    else:
        doc = next((d for d in docs if d.doc_id == doc_id), None)
        if doc is None:
            raise click.BadParameter(f"no document {doc_id!r}", param_hint="--doc-id")
    frame = ExtractionService(bundle).trace(doc, mode)
    text = frame.to_csv(sep="\t", index=False)
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        click.echo(text, nl=False)


def cli_main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        result = cli.main(args=list(argv) if argv is not None else None, prog_name="jointie", standalone_mode=False)
    except click.UsageError as e:
        e.show()
        return EXIT_USAGE
    except (click.Abort, click.ClickException) as e:
        click.echo(f"error: {e}", err=True)
        return EXIT_USAGE
    except (NumericalError, StageError) as e:
        click.echo(f"error: {e}", err=True)
        return EXIT_NUMERICAL
    except (JointIEError, ValidationError, ValueError, OSError) as e:
        click.echo(f"error: {e}", err=True)
        return EXIT_DATA
    return result if isinstance(result, int) else EXIT_OK


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
