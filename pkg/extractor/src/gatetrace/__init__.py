"""Model-side extraction for the raggate pipeline: replay traces from a
causal LM and unit-normalized embeddings from a dense encoder, emitted in
the primary package's file formats."""

from .encode import TextEncoder, embed_corpus
from .extract import TraceExtractor, extract_traces, sidecar_path
from .jobs import EmbedJob, ExtractionJob, JobError, load_embed_job, load_extraction_job

__version__ = "0.1.0"
