"""Session fixtures: tiny randomly-initialized models saved to disk, so the
extractor exercises the exact load/generate/encode paths it uses for real
checkpoints without needing any network access."""

import json

import pytest
import torch
from tokenizers import Tokenizer, models, pre_tokenizers
from transformers import GPT2Config, GPT2LMHeadModel, PreTrainedTokenizerFast

WORDS = (
    ["what", "is", "item", "who", "wrote", "the", "a", "answer", "question", "facts", "about", "topic"]
    + [f"w{i}" for i in range(48)]
    + ["?", ".", ":", ","]
)


def _build_tokenizer() -> PreTrainedTokenizerFast:
    vocab = {"<pad>": 0, "<eos>": 1, "<unk>": 2}
    for word in WORDS:
        vocab.setdefault(word, len(vocab))
    tok = Tokenizer(models.WordLevel(vocab, unk_token="<unk>"))
    tok.pre_tokenizer = pre_tokenizers.Whitespace()
    return PreTrainedTokenizerFast(
        tokenizer_object=tok, unk_token="<unk>", pad_token="<pad>", eos_token="<eos>"
    )


def _save_tiny_causal_lm(path, seed: int, n_embd: int = 32, n_layer: int = 2) -> None:
    torch.manual_seed(seed)
    config = GPT2Config(
        vocab_size=len(_build_tokenizer().get_vocab()),
        n_positions=512,
        n_embd=n_embd,
        n_layer=n_layer,
        n_head=2,
        bos_token_id=1,
        eos_token_id=1,
        pad_token_id=0,
    )
    model = GPT2LMHeadModel(config)
    model.eval()
    model.save_pretrained(path)
    _build_tokenizer().save_pretrained(path)


@pytest.fixture(scope="session")
def tiny_model_dir(tmp_path_factory):
    path = tmp_path_factory.mktemp("tiny-lm")
    _save_tiny_causal_lm(path, seed=1234)
    return str(path)


@pytest.fixture(scope="session")
def tiny_encoder_dir(tmp_path_factory):
    path = tmp_path_factory.mktemp("tiny-encoder")
    _save_tiny_causal_lm(path, seed=4321, n_embd=24, n_layer=1)
    return str(path)


@pytest.fixture(scope="session")
def corpus_files(tmp_path_factory, tiny_encoder_dir):
    """Passages + embeddings + index + dataset, all in primary formats."""
    from gatetrace.encode import embed_corpus
    from gatetrace.jobs import EmbedJob

    root = tmp_path_factory.mktemp("corpus")
    passages_path = root / "passages.jsonl"
    with open(passages_path, "w") as fh:
        for j in range(6):
            fh.write(json.dumps({"id": j, "title": f"topic {j}", "body": f"facts about topic {j} w{j} w{j + 1}"}) + "\n")
    embeddings_path = root / "embeddings.bin"
    embed_corpus(
        EmbedJob(encoder=tiny_encoder_dir, passages_path=str(passages_path), output_path=str(embeddings_path))
    )
    dataset_path = root / "dataset.jsonl"
    with open(dataset_path, "w") as fh:
        for i in range(4):
            fh.write(
                json.dumps(
                    {"query_id": f"q{i}", "question": f"what is item w{i} ?", "gold_answers": [f"w{i}"]}
                )
                + "\n"
            )
    return {
        "passages": str(passages_path),
        "embeddings": str(embeddings_path),
        "dataset": str(dataset_path),
    }


@pytest.fixture()
def extraction_job_kwargs(tiny_model_dir, tiny_encoder_dir, corpus_files):
    return dict(
        model=tiny_model_dir,
        encoder=tiny_encoder_dir,
        dataset_path=corpus_files["dataset"],
        index_path=corpus_files["embeddings"],
        passages_path=corpus_files["passages"],
        k=6,
        n_samples=3,
        temperature=0.7,
        top_m=8,
        topk=2,
        ctx_budget=24,
        max_answer_tokens=8,
        seed=7,
    )
