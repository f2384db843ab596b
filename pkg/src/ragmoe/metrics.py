"""Self-contained corpus-level NLG metrics: BLEU-1..4, METEOR, ROUGE-L.

Pinned variants so golden files stay stable:
- BLEU: corpus-level clipped modified n-gram precision, geometric mean,
  brevity penalty min(1, e^(1 - r/c)); any zero precision gives 0 (no
  smoothing); single reference per candidate.
- ROUGE-L: LCS-based F1 (beta = 1); corpus value is the per-case mean.
- METEOR: exact unigram matches; alignment chosen greedily by repeatedly
  taking the longest contiguous common run of unmatched tokens (leftmost
  first in candidate, then reference); F_mean = 10PR / (R + 9P), chunk
  penalty 0.5 * (chunks/m)^3; corpus value is the per-case mean.
"""

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

from .errors import InputError

TokenList = list[str]


@dataclass
class MetricsReport:
    bleu1: float
    bleu2: float
    bleu3: float
    bleu4: float
    meteor: float
    rouge_l: float
    per_case: list[dict] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "bleu1": self.bleu1,
            "bleu2": self.bleu2,
            "bleu3": self.bleu3,
            "bleu4": self.bleu4,
            "meteor": self.meteor,
            "rouge_l": self.rouge_l,
            "per_case": self.per_case,
        }

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.as_dict(), indent=2, sort_keys=True) + "\n")
        return path


def _ngram_counts(tokens: TokenList, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu_n(candidates: list[TokenList], references: list[TokenList], n: int) -> float:
    """Corpus-level BLEU at order ``n`` (1..4), no smoothing."""
    if not 1 <= n <= 4:
        raise InputError(f"BLEU order must be in 1..4, got {n}")
    if not candidates:
        raise InputError("BLEU needs a non-empty corpus")
    if len(candidates) != len(references):
        raise InputError(
            f"candidate/reference count mismatch: {len(candidates)} vs {len(references)}"
        )
    log_precisions = []
    for order in range(1, n + 1):
        matched = 0
        total = 0
        for cand, ref in zip(candidates, references):
            cand_counts = _ngram_counts(cand, order)
            ref_counts = _ngram_counts(ref, order)
            matched += sum(min(c, ref_counts[g]) for g, c in cand_counts.items())
            total += max(len(cand) - order + 1, 0)
        if matched == 0 or total == 0:
            return 0.0
        log_precisions.append(math.log(matched / total))
    cand_len = sum(len(c) for c in candidates)
    ref_len = sum(len(r) for r in references)
    if cand_len == 0:
        return 0.0
    bp = min(1.0, math.exp(1.0 - ref_len / cand_len))
    return bp * math.exp(sum(log_precisions) / n)


def _lcs_length(a: TokenList, b: TokenList) -> int:
    prev = [0] * (len(b) + 1)
    for i in range(1, len(a) + 1):
        cur = [0] * (len(b) + 1)
        for j in range(1, len(b) + 1):
            if a[i - 1] == b[j - 1]:
                cur[j] = prev[j - 1] + 1
            else:
                cur[j] = max(prev[j], cur[j - 1])
        prev = cur
    return prev[len(b)]


def rouge_l(candidate: TokenList, reference: TokenList, beta: float = 1.0) -> float:
    """LCS F-measure for one case; 0 when the sequences share nothing.

    ``beta`` weights recall (the default 1.0 is the plain harmonic F1 used
    for all reported numbers; other values exist for sensitivity runs only).
    """
    if not candidate or not reference:
        raise InputError("ROUGE-L needs non-empty token lists")
    if beta <= 0:
        raise InputError(f"beta must be > 0, got {beta}")
    lcs = _lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    precision = lcs / len(candidate)
    recall = lcs / len(reference)
    b2 = beta * beta
    return (1.0 + b2) * precision * recall / (recall + b2 * precision)


def _greedy_alignment(candidate: TokenList, reference: TokenList) -> tuple[int, int]:
    """(matches, chunks): repeatedly claim the longest unmatched common run.

    Ties go to the smallest candidate start, then smallest reference start.
    Total matches always equal sum_t min(count_cand(t), count_ref(t)).
    """
    cand_free = [True] * len(candidate)
    ref_free = [True] * len(reference)
    matches = 0
    chunks = 0
    while True:
        best_len, best = 0, None
        for i in range(len(candidate)):
            if not cand_free[i]:
                continue
            for j in range(len(reference)):
                if not ref_free[j] or candidate[i] != reference[j]:
                    continue
                run = 0
                while (
                    i + run < len(candidate)
                    and j + run < len(reference)
                    and cand_free[i + run]
                    and ref_free[j + run]
                    and candidate[i + run] == reference[j + run]
                ):
                    run += 1
                if run > best_len:
                    best_len, best = run, (i, j)
        if best is None:
            return matches, chunks
        i, j = best
        for t in range(best_len):
            cand_free[i + t] = False
            ref_free[j + t] = False
        matches += best_len
        chunks += 1


def meteor(candidate: TokenList, reference: TokenList) -> float:
    """Exact-match METEOR for one case (no stemming or synonyms)."""
    if not candidate or not reference:
        raise InputError("METEOR needs non-empty token lists")
    matches, chunks = _greedy_alignment(candidate, reference)
    if matches == 0:
        return 0.0
    precision = matches / len(candidate)
    recall = matches / len(reference)
    f_mean = 10.0 * precision * recall / (recall + 9.0 * precision)
    penalty = 0.5 * (chunks / matches) ** 3
    return f_mean * (1.0 - penalty)


def evaluate_corpus(
    candidates: list[TokenList],
    references: list[TokenList],
    report_path: str | Path | None = None,
) -> MetricsReport:
    """All six metrics over an aligned corpus; optionally writes the report file."""
    if len(candidates) != len(references):
        raise InputError(
            f"candidate/reference count mismatch: {len(candidates)} vs {len(references)}"
        )
    if not candidates:
        raise InputError("cannot evaluate an empty corpus")
    per_case = []
    for idx, (cand, ref) in enumerate(zip(candidates, references)):
        per_case.append(
            {
                "case": idx,
                "bleu1": bleu_n([cand], [ref], 1) if cand else 0.0,
                "bleu4": bleu_n([cand], [ref], 4) if cand else 0.0,
                "meteor": meteor(cand, ref) if cand else 0.0,
                "rouge_l": rouge_l(cand, ref) if cand else 0.0,
                "cand_len": len(cand),
                "ref_len": len(ref),
            }
        )
    report = MetricsReport(
        bleu1=bleu_n(candidates, references, 1),
        bleu2=bleu_n(candidates, references, 2),
        bleu3=bleu_n(candidates, references, 3),
        bleu4=bleu_n(candidates, references, 4),
        meteor=sum(row["meteor"] for row in per_case) / len(per_case),
        rouge_l=sum(row["rouge_l"] for row in per_case) / len(per_case),
        per_case=per_case,
    )
    if report_path is not None:
        report.write(report_path)
    return report
