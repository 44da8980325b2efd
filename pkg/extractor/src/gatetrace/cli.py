"""gatetrace command line: `extract` writes trace files, `embed` writes
vector files, both in the primary pipeline's formats."""

from __future__ import annotations

import argparse
import sys
from typing import Optional, Sequence

from raggate.errors import RaggateError

from .encode import embed_corpus
from .extract import extract_traces
from .jobs import EmbedJob, JobError, load_embed_job, load_extraction_job, write_provenance


def _quiet_transformers() -> None:
    import transformers

    transformers.logging.set_verbosity_error()
    try:
        transformers.logging.disable_progress_bar()
    except AttributeError:
        pass


def cmd_extract(args: argparse.Namespace) -> int:
    job = load_extraction_job(args.job)
    records = extract_traces(job)
    print(f"wrote {len(records)} trace records to {job.output_path}")
    return 0


def cmd_embed(args: argparse.Namespace) -> int:
    if args.job:
        job = load_embed_job(args.job)
    else:
        missing = [name for name in ("encoder", "passages", "out") if getattr(args, name) is None]
        if missing:
            raise JobError(f"pass --job or all of --encoder/--passages/--out (missing {missing})")
        job = EmbedJob(encoder=args.encoder, passages_path=args.passages, output_path=args.out)
    index = embed_corpus(job)
    write_provenance(job, job.output_path + ".job.json")
    print(f"wrote {index.n} vectors (dim {index.dim}) to {job.output_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gatetrace",
        description="Extract replay traces and dense embeddings from real models.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="run an extraction job")
    p.add_argument("--job", required=True, help="extraction job JSON")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("embed", help="embed a passage file")
    p.add_argument("--job", help="embed job JSON (or use the flags below)")
    p.add_argument("--encoder")
    p.add_argument("--passages")
    p.add_argument("--out")
    p.set_defaults(func=cmd_embed)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    _quiet_transformers()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except JobError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (RaggateError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
