"""Answer scoring: SQuAD-style normalization, exact match, and token F1.

Normalization lowercases, strips punctuation, removes the articles
"a"/"an"/"the" as whole words, and collapses whitespace.  F1 is the
harmonic mean of multiset token precision/recall, maximized over gold
aliases.  Under these rules EM = 1 forces F1 = 1, so mean EM <= mean F1.
"""

from __future__ import annotations

import re
import string
from collections import Counter
from typing import Iterable

_PUNCT_TABLE = str.maketrans("", "", string.punctuation)
_ARTICLE_RE = re.compile(r"\b(a|an|the)\b")


def normalize_answer(text: str) -> str:
    """Lowercase, drop punctuation and articles, collapse whitespace."""
    text = text.lower().translate(_PUNCT_TABLE)
    text = _ARTICLE_RE.sub(" ", text)
    return " ".join(text.split())


def exact_match(prediction: str, golds: Iterable[str]) -> int:
    """1 iff the normalized prediction equals any normalized gold."""
    pred = normalize_answer(prediction)
    return int(any(pred == normalize_answer(g) for g in golds))


def _f1_single(pred_tokens: list[str], gold_tokens: list[str]) -> float:
    if not pred_tokens and not gold_tokens:
        return 1.0
    if not pred_tokens or not gold_tokens:
        return 0.0
    common = Counter(pred_tokens) & Counter(gold_tokens)
    num_same = sum(common.values())
    if num_same == 0:
        return 0.0
    precision = num_same / len(pred_tokens)
    recall = num_same / len(gold_tokens)
    return 2 * precision * recall / (precision + recall)


def f1(prediction: str, golds: Iterable[str]) -> float:
    """Token-level F1 in [0, 1], maximized over gold aliases."""
    pred_tokens = normalize_answer(prediction).split()
    best = 0.0
    for gold in golds:
        best = max(best, _f1_single(pred_tokens, normalize_answer(gold).split()))
    return best
