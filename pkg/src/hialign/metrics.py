"""Corpus-level BLEU-1..4 and ROUGE-L F1.

Single reference per hypothesis, clipped n-gram counts, geometric mean,
no smoothing: any zero precision kills the score outright.  ROUGE-L is
sentence-level LCS F1, aggregated as an unweighted mean over the corpus.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, asdict

from .exceptions import ContractError


@dataclass
class EvalReport:
    bleu1: float
    bleu2: float
    bleu3: float
    bleu4: float
    rouge_l: float
    bp: float
    n: list
    count: int

    def to_dict(self):
        return asdict(self)


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(hypotheses, references, max_n=4):
    """Corpus BLEU on the 0-100 scale, plus per-order precisions and BP.

    Returns (scores list of length max_n, precisions, bp).  score_k uses the
    geometric mean of p_1..p_k, so BLEU-1..4 come out of one pass.
    """
    if len(hypotheses) != len(references):
        raise ContractError(f"bleu: {len(hypotheses)} hypotheses vs {len(references)} references")
    if not hypotheses:
        raise ContractError("bleu: empty corpus")
    match = [0] * max_n
    total = [0] * max_n
    hyp_len = 0
    ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp = list(hyp)
        ref = list(ref)
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            hc = _ngrams(hyp, n)
            rc = _ngrams(ref, n)
            total[n - 1] += max(len(hyp) - n + 1, 0)
            match[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
    precisions = [m / t if t > 0 else 0.0 for m, t in zip(match, total)]
    if hyp_len == 0:
        bp = 0.0
    elif hyp_len < ref_len:
        bp = math.exp(1.0 - ref_len / hyp_len)
    else:
        bp = 1.0
    scores = []
    for k in range(1, max_n + 1):
        ps = precisions[:k]
        if min(ps) <= 0.0:
            scores.append(0.0)
        else:
            scores.append(100.0 * bp * math.exp(sum(math.log(p) for p in ps) / k))
    return scores, precisions, bp


def lcs_length(a, b):
    """Longest-common-subsequence length by the usual two-row DP."""
    a = list(a)
    b = list(b)
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, y in enumerate(b, 1):
            if x == y:
                cur[j] = prev[j - 1] + 1
            else:
                cur[j] = max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def rouge_l(hypothesis, reference):
    """Sentence LCS F1: P = LCS/|hyp|, R = LCS/|ref|; 0 whenever LCS is 0."""
    l = lcs_length(hypothesis, reference)
    if l == 0:
        return 0.0
    p = l / len(list(hypothesis))
    r = l / len(list(reference))
    return 2.0 * p * r / (p + r)


def evaluate_corpus(hypotheses, references):
    """Full report over a parallel corpus (token-list lists)."""
    scores, precisions, bp = bleu(hypotheses, references, max_n=4)
    rl = sum(rouge_l(h, r) for h, r in zip(hypotheses, references)) / len(hypotheses)
    return EvalReport(
        bleu1=scores[0],
        bleu2=scores[1],
        bleu3=scores[2],
        bleu4=scores[3],
        rouge_l=rl,
        bp=bp,
        n=precisions,
        count=len(hypotheses),
    )
