"""Job descriptions for trace extraction and corpus embedding.

Both jobs are declarative JSON files (unknown fields rejected) so a run
can be reproduced from its provenance copy alone.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

DEFAULT_PROMPT_TEMPLATE = (
    "Answer the question in as few words as possible.\nQuestion: {question}\nAnswer:"
)

QUERY_PREFIX = "query: "
PASSAGE_PREFIX = "passage: "


class JobError(ValueError):
    """A job file or job field is invalid."""


@dataclass
class ExtractionJob:
    """One trace-extraction run: which model, which data, which knobs."""

    model: str
    encoder: str
    dataset_path: str
    index_path: str
    passages_path: str
    output_path: str
    k: int = 20
    n_samples: int = 3
    temperature: float = 0.7
    top_m: Optional[int] = None
    topk: int = 5
    ctx_budget: int = 256
    max_answer_tokens: int = 32
    seed: int = 0
    prompt_template: str = DEFAULT_PROMPT_TEMPLATE
    query_prefix: str = QUERY_PREFIX

    def __post_init__(self) -> None:
        if self.k < 1:
            raise JobError(f"k must be >= 1, got {self.k}")
        if self.n_samples < 2:
            raise JobError(f"n_samples must be >= 2, got {self.n_samples}")
        if not self.temperature > 0:
            raise JobError(f"temperature must be > 0, got {self.temperature}")
        if self.top_m is not None and self.top_m < 1:
            raise JobError(f"top_m must be >= 1 when set, got {self.top_m}")
        if self.topk < 1 or self.ctx_budget < 0 or self.max_answer_tokens < 1:
            raise JobError("topk, ctx_budget, and max_answer_tokens are out of range")
        if "{question}" not in self.prompt_template:
            raise JobError("prompt_template must contain a {question} placeholder")


@dataclass
class EmbedJob:
    """One corpus-embedding run over a primary passage file."""

    encoder: str
    passages_path: str
    output_path: str
    batch_size: int = 16
    passage_prefix: str = PASSAGE_PREFIX

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise JobError(f"batch_size must be >= 1, got {self.batch_size}")


def _load(job_cls, path: str | Path):
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise JobError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise JobError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise JobError(f"{path}: job file must hold a JSON object")
    known = {f.name for f in job_cls.__dataclass_fields__.values()}
    unknown = set(obj) - known
    if unknown:
        raise JobError(f"{path}: unknown job fields {sorted(unknown)}")
    try:
        return job_cls(**obj)
    except TypeError as exc:
        raise JobError(f"{path}: {exc}") from exc


def load_extraction_job(path: str | Path) -> ExtractionJob:
    return _load(ExtractionJob, path)


def load_embed_job(path: str | Path) -> EmbedJob:
    return _load(EmbedJob, path)


def write_provenance(job, path: str | Path) -> None:
    Path(path).write_text(json.dumps(asdict(job), indent=2, sort_keys=True) + "\n", encoding="utf-8")
