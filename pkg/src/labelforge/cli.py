"""Command line entry points.

Exit codes: 0 success, 1 runtime failure (bad data, provider trouble),
2 usage error (argparse's convention). Mock-provider runs use a virtual
clock pinned to zero so repeated runs with the same seed produce
byte-identical output, which the tests rely on.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .audit import AuditLog
from .clock import SYSTEM_CLOCK, Clock, ManualClock
from .config import AnnotationConfig, load_config
from .errors import LabelForgeError
from .evaluation import VARIANTS, format_report_table, run_eval
from .knowledge_base import Catalog, ingest_catalog, load_training
from .pipeline import AllAgentsFailed, AnnotationEngine
from .providers import Timeout, make_provider
from .retrieval import build_or_load_index


def _add_common(parser: argparse.ArgumentParser, *, config_required: bool = True) -> None:
    parser.add_argument("--catalog", required=True, help="catalog file (.jsonl or .csv)")
    parser.add_argument("--config", required=config_required, help="annotation config JSON")
    parser.add_argument("--provider", choices=["mock", "http"], default="mock")
    parser.add_argument("--seed", type=int, default=0)


def _clock_for(provider_kind: str) -> Clock:
    # Virtual clock keeps mock output reproducible; http needs real time.
    return ManualClock(0.0) if provider_kind == "mock" else SYSTEM_CLOCK


def _load(args) -> tuple[AnnotationConfig, Catalog]:
    config = load_config(args.config)
    catalog = ingest_catalog(args.catalog, config)
    return config, catalog


def _engine(args, config: AnnotationConfig, catalog: Catalog, clock: Clock) -> AnnotationEngine:
    provider = make_provider(args.provider, seed=args.seed, clock=clock)
    training = load_training(args.training, catalog) if getattr(args, "training", None) else ()
    return AnnotationEngine(
        config, catalog, provider, training=training, clock=clock, seed=args.seed
    )


def _print_json(payload) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True))


def cmd_ingest(args) -> int:
    config, catalog = _load(args)
    payload = {
        "entries": len(catalog),
        "rejected_rows": list(catalog.rejected_rows),
        "source_digest": catalog.source_digest,
        "annotation_type": config.annotation_type,
    }
    if args.json:
        _print_json(payload)
    else:
        print(f"{payload['entries']} entries ({config.annotation_type_plural}), "
              f"{len(catalog.rejected_rows)} rejected rows")
        print(f"digest {catalog.source_digest}")
    return 0


def cmd_index(args) -> int:
    config, catalog = _load(args)
    clock = _clock_for(args.provider)
    provider = make_provider(args.provider, seed=args.seed, clock=clock)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for mode in ("primary_only", "full_context"):
        path = out / f"embeddings-{mode}.npz"
        _index, rebuilt = build_or_load_index(
            catalog, mode, config.embedding_dims, provider, config, path
        )
        print(f"{mode}: {'rebuilt' if rebuilt else 'reused'} -> {path}")
    return 0


def cmd_annotate(args) -> int:
    config, catalog = _load(args)
    clock = _clock_for(args.provider)
    engine = _engine(args, config, catalog, clock)
    try:
        result = engine.annotate(args.utterance)
    except AllAgentsFailed as exc:
        print(f"all agents failed: {exc.statuses}", file=sys.stderr)
        return 1
    finally:
        engine.close()
    if args.json:
        _print_json(
            {
                "utterance": result.utterance,
                "expanded_query": result.plan.expanded_query,
                "top": result.top(),
                "band": result.routing.band,
                "action": result.routing.action,
                "consensus_strength": result.judge.consensus_strength,
                "source": result.judge.source,
                "degraded": result.degraded,
            }
        )
        return 0
    print(f"utterance: {result.utterance}")
    if result.plan.needs_expansion:
        print(f"expanded:  {result.plan.expanded_query}")
    for i, candidate in enumerate(result.top(), start=1):
        entry = catalog.by_id.get(candidate["annotation_id"])
        title = entry.primary_text if entry else candidate["annotation_id"]
        print(f"{i}. [{candidate['annotation_id']}] {title} "
              f"(score {candidate['final_score']}, support {candidate['support']})")
    print(f"band {result.routing.band} -> {result.routing.action}"
          + (" [degraded]" if result.degraded else ""))
    return 0


def cmd_batch(args) -> int:
    config, catalog = _load(args)
    clock = _clock_for(args.provider)
    engine = _engine(args, config, catalog, clock)
    try:
        # start=False keeps processing on this thread so output is deterministic
        job = engine.submit_batch(args.input, args.out, start=False)
        engine.process_batch(job.job_id)
        job = engine.poll_batch(job.job_id)
    finally:
        engine.close()
    print(f"job {job.job_id}: {job.status}, "
          f"{job.completed_items}/{job.total_items} items")
    print(f"output: {job.output_path}")
    return 0 if job.status == "complete" else 1


def cmd_evaluate(args) -> int:
    config, catalog = _load(args)
    clock = _clock_for(args.provider)
    variant_names = [v.strip() for v in args.variants.split(",") if v.strip()]

    def provider_factory():
        return make_provider(args.provider, seed=args.seed, clock=clock)

    training = load_training(args.training, catalog) if args.training else ()
    result = run_eval(
        args.dataset,
        variant_names,
        config,
        catalog,
        provider_factory,
        training=training,
        seed=args.seed,
        clock=clock,
        out_dir=args.out,
    )
    if args.json:
        _print_json(result.to_dict())
    else:
        print(format_report_table(result))
        if args.out:
            print(f"reports written to {args.out}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    config, catalog = _load(args)
    engine = _engine(args, config, catalog, SYSTEM_CLOCK)
    audit_log = AuditLog(args.audit) if args.audit else None
    app = create_app(engine, audit_log=audit_log, token=args.token,
                     batch_dir=args.batch_dir)
    uvicorn.run(app, host=args.host, port=args.port)
    return 0


def cmd_purge_audit(args) -> int:
    log = AuditLog(args.audit)
    dropped = log.purge(retention_days=args.retention_days, archive=args.archive)
    print(f"dropped {dropped} records"
          + (f" (archived to {args.audit}.cold)" if args.archive and dropped else ""))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="labelforge",
                                     description="multi-agent annotation engine")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate and summarize a catalog file")
    _add_common(p)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("index", help="build or refresh persisted embedding indexes")
    _add_common(p)
    p.add_argument("--out", required=True, help="directory for .npz index files")
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("annotate", help="annotate a single utterance")
    _add_common(p)
    p.add_argument("--utterance", required=True)
    p.add_argument("--training", help="training examples JSONL for few-shot prompts")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_annotate)

    p = sub.add_parser("batch", help="run a batch input file to completion")
    _add_common(p)
    p.add_argument("--input", required=True, help="JSONL with id and utterance fields")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--training")
    p.set_defaults(func=cmd_batch)

    p = sub.add_parser("evaluate", help="score pipeline variants on a labeled dataset")
    _add_common(p)
    p.add_argument("--dataset", required=True, help="JSONL with utterance and gold_id")
    p.add_argument("--variants", default="full",
                   help=f"comma list of {', '.join(sorted(VARIANTS))}")
    p.add_argument("--training")
    p.add_argument("--out", help="directory for report.json/report.txt/significance.json")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("serve", help="start the HTTP service")
    _add_common(p)
    p.add_argument("--training")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--audit", help="audit log JSONL path")
    p.add_argument("--token", help="static bearer token for /v1 endpoints")
    p.add_argument("--batch-dir", default="batches")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("purge-audit", help="drop audit records past retention")
    p.add_argument("--audit", required=True)
    p.add_argument("--retention-days", type=int, default=90)
    p.add_argument("--archive", action="store_true",
                   help="append dropped records to a .cold file first")
    p.set_defaults(func=cmd_purge_audit)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (LabelForgeError, Timeout) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
