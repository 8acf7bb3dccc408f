"""Question-similarity metrics (BLEU-1/2, ROUGE-1/2/L) and span metrics.

All functions take token lists. BLEU is aggregated at corpus level; ROUGE
scores are per-pair F1 values averaged over the corpus.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass, field

TOKENIZATION_NOTE = "scores computed on lowercased whitespace+punctuation tokens"


def ngrams(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _check_corpus(candidates, references) -> None:
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates vs {len(references)} references")
    if not candidates:
        raise ValueError("empty corpus")


def bleu(candidates, references, max_n: int = 2) -> float:
    """Corpus BLEU with uniform weights over n = 1..max_n.

    Clipped n-gram matches and candidate n-gram totals are summed over the
    corpus. For n >= 2 both counts get +1 (add-one smoothing). The geometric
    mean is scaled by the brevity penalty ``exp(1 - r/c)`` when ``c < r``.
    """
    _check_corpus(candidates, references)
    if max_n < 1:
        raise ValueError("max_n must be >= 1")
    matches = [0] * max_n
    totals = [0] * max_n
    c_len = r_len = 0
    for cand, ref in zip(candidates, references):
        c_len += len(cand)
        r_len += len(ref)
        for n in range(1, max_n + 1):
            c_ng = ngrams(cand, n)
            r_ng = ngrams(ref, n)
            matches[n - 1] += sum(min(c, r_ng[g]) for g, c in c_ng.items())
            totals[n - 1] += sum(c_ng.values())
    if c_len == 0:
        return 0.0
    log_p = 0.0
    for n in range(1, max_n + 1):
        m, t = matches[n - 1], totals[n - 1]
        if n >= 2:
            m, t = m + 1, t + 1
        if m == 0 or t == 0:
            return 0.0
        log_p += math.log(m / t)
    bp = 1.0 if c_len >= r_len else math.exp(1.0 - r_len / c_len)
    return bp * math.exp(log_p / max_n)


def _f1(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def _pair_scores(candidates, references, score_fn) -> tuple[float, int, int]:
    _check_corpus(candidates, references)
    vals, skipped = [], 0
    for cand, ref in zip(candidates, references):
        v = score_fn(cand, ref)
        if v is None:
            skipped += 1
        else:
            vals.append(v)
    mean = sum(vals) / len(vals) if vals else 0.0
    return mean, len(vals), skipped


def _rouge_n_pair(cand, ref, n: int):
    r_ng = ngrams(ref, n)
    if not r_ng:
        return None
    c_ng = ngrams(cand, n)
    if not c_ng:
        return 0.0
    hit = sum(min(c, r_ng[g]) for g, c in c_ng.items())
    return _f1(hit / sum(c_ng.values()), hit / sum(r_ng.values()))


def lcs_length(a, b) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def _rouge_l_pair(cand, ref):
    if not ref:
        return None
    if not cand:
        return 0.0
    lcs = lcs_length(cand, ref)
    return _f1(lcs / len(cand), lcs / len(ref))


def rouge_n_detail(candidates, references, n: int) -> tuple[float, int, int]:
    """``(score, pairs evaluated, pairs skipped)``; pairs whose reference has no n-gram are skipped."""
    return _pair_scores(candidates, references, lambda c, r: _rouge_n_pair(c, r, n))


def rouge_n(candidates, references, n: int = 1) -> float:
    return rouge_n_detail(candidates, references, n)[0]


def rouge_l_detail(candidates, references) -> tuple[float, int, int]:
    return _pair_scores(candidates, references, _rouge_l_pair)


def rouge_l(candidates, references) -> float:
    """LCS F1 (beta = 1) per pair, averaged over the corpus."""
    return rouge_l_detail(candidates, references)[0]


def span_scores(predicted, gold) -> tuple[float, float]:
    """Exact-match rate and mean token-overlap F1 of inclusive ``(start, end)`` spans."""
    if len(predicted) != len(gold):
        raise ValueError("span lists differ in length")
    if not predicted:
        return 0.0, 0.0
    em = f1 = 0.0
    for (ps, pe), (gs, ge) in zip(predicted, gold):
        em += (ps, pe) == (gs, ge)
        overlap = max(0, min(pe, ge) - max(ps, gs) + 1)
        if overlap:
            f1 += _f1(overlap / (pe - ps + 1), overlap / (ge - gs + 1))
    return em / len(predicted), f1 / len(predicted)


@dataclass
class MetricReport:
    bleu1: float = 0.0
    bleu2: float = 0.0
    rouge1: float = 0.0
    rouge2: float = 0.0
    rougeL: float = 0.0
    span_em: float | None = None
    span_f1: float | None = None
    pairs: int = 0
    span_pairs: int = 0
    skipped: dict = field(default_factory=dict)
    note: str = TOKENIZATION_NOTE

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(cand_questions, ref_questions, pred_spans=None, gold_spans=None) -> MetricReport:
    r1, _, s1 = rouge_n_detail(cand_questions, ref_questions, 1)
    r2, _, s2 = rouge_n_detail(cand_questions, ref_questions, 2)
    rl, _, sl = rouge_l_detail(cand_questions, ref_questions)
    report = MetricReport(
        bleu1=bleu(cand_questions, ref_questions, 1),
        bleu2=bleu(cand_questions, ref_questions, 2),
        rouge1=r1, rouge2=r2, rougeL=rl,
        pairs=len(cand_questions),
        skipped={"rouge1": s1, "rouge2": s2, "rougeL": sl},
    )
    if pred_spans is not None and gold_spans is not None:
        report.span_em, report.span_f1 = span_scores(pred_spans, gold_spans)
        report.span_pairs = len(pred_spans)
    return report
