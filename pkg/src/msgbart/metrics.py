"""Corpus BLEU-1..4, ROUGE-L and exact-match answer accuracy."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

from .data import QUESTION_KINDS, DialogueInstance

BLEU_EPSILON = 1e-9
ROUGE_BETA = 1.2


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _check(candidates, references):
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates vs {len(references)} references")
    if not candidates:
        raise ValueError("empty corpus")


def bleu(candidates: Sequence[str], references: Sequence[str], n: int = 4) -> float:
    """Corpus BLEU with uniform weights over orders 1..n and a brevity penalty.

    Orders with no matching n-grams contribute ``1e-9`` instead of zero.
    Orders for which the candidates have no n-grams at all (every candidate
    shorter than the order) are left out of the geometric mean.  A corpus
    with no unigram overlap scores exactly 0.
    """
    _check(candidates, references)
    if not 1 <= n <= 4:
        raise ValueError("n must be in 1..4")
    cand_toks = [c.split() for c in candidates]
    ref_toks = [r.split() for r in references]
    log_total, used = 0.0, 0
    for order in range(1, n + 1):
        matched = total = 0
        for c, r in zip(cand_toks, ref_toks):
            cg, rg = _ngrams(c, order), _ngrams(r, order)
            matched += sum(min(k, rg[g]) for g, k in cg.items())
            total += sum(cg.values())
        if order == 1 and matched == 0:
            return 0.0
        if total == 0:
            continue
        log_total += math.log(max(matched, BLEU_EPSILON) / total)
        used += 1
    c_len = sum(len(c) for c in cand_toks)
    r_len = sum(len(r) for r in ref_toks)
    bp = 1.0 if c_len >= r_len else math.exp(1.0 - r_len / c_len)
    return bp * math.exp(log_total / used)


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l_pair(candidate: str, reference: str, beta: float = ROUGE_BETA) -> float:
    c, r = candidate.split(), reference.split()
    lcs = lcs_length(c, r)
    if lcs == 0:
        return 0.0
    p, rec = lcs / len(c), lcs / len(r)
    return (1 + beta**2) * p * rec / (rec + beta**2 * p)


def rouge_l(candidates: Sequence[str], references: Sequence[str]) -> float:
    _check(candidates, references)
    return sum(rouge_l_pair(c, r) for c, r in zip(candidates, references)) / len(candidates)


def normalize(text: str) -> str:
    return " ".join(text.split())


def answer_accuracy(predictions: Sequence[str], instances: Sequence[DialogueInstance]) -> Dict[str, float]:
    """Exact match per question kind plus ``overall``; kinds with no instances are omitted."""
    if len(predictions) != len(instances):
        raise ValueError(f"{len(predictions)} predictions for {len(instances)} instances")
    hits: Dict[str, List[int]] = {}
    for pred, inst in zip(predictions, instances):
        ok = int(normalize(pred) == normalize(inst.answer))
        hits.setdefault(inst.kind, []).append(ok)
        hits.setdefault("overall", []).append(ok)
    return {k: sum(v) / len(v) for k, v in hits.items()}


@dataclass
class EvalReport:
    bleu_1: float
    bleu_2: float
    bleu_3: float
    bleu_4: float
    rouge_l: float
    answer_accuracy: float
    per_kind_accuracy: Dict[str, float] = field(default_factory=dict)
    count: int = 0
    bleu_smoothing: str = f"add-epsilon {BLEU_EPSILON:g} on zero n-gram matches"

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


def evaluate_predictions(predictions: Sequence[str], instances: Sequence[DialogueInstance]) -> EvalReport:
    refs = [i.answer for i in instances]
    acc = answer_accuracy(predictions, instances)
    overall = acc.pop("overall", 0.0)
    return EvalReport(
        bleu_1=bleu(predictions, refs, 1),
        bleu_2=bleu(predictions, refs, 2),
        bleu_3=bleu(predictions, refs, 3),
        bleu_4=bleu(predictions, refs, 4),
        rouge_l=rouge_l(predictions, refs),
        answer_accuracy=overall,
        per_kind_accuracy={k: acc[k] for k in QUESTION_KINDS if k in acc},
        count=len(instances),
    )
