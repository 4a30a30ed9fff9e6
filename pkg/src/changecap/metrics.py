"""Caption and VQA evaluation metrics.

BLEU-1, ROUGE-L (F with beta=1.2), CIDEr-D (tf-idf n-gram cosine, n=1..4,
length gaussian, x10) and a simplified METEOR without synonym/paraphrase
resources — reported as "meteorS" everywhere because its scores are not
comparable to full METEOR. One shared tokenizer: lowercase, punctuation to
spaces, whitespace split.
"""

from __future__ import annotations

import logging
import math
import re
import string
from collections import Counter, defaultdict
from dataclasses import dataclass

log = logging.getLogger(__name__)

_PUNCT = re.compile("[" + re.escape(string.punctuation) + "]")


def tokenize(text: str) -> list[str]:
    return _PUNCT.sub(" ", text.lower()).split()


@dataclass
class EvalRecord:
    sample_id: str
    candidate: list[str]
    references: list[list[str]]
    qtype: str | None = None

    def __post_init__(self):
        if not self.references:
            raise ValueError(f"record {self.sample_id!r} has no references")

    @classmethod
    def from_strings(cls, sample_id, candidate: str, references, qtype=None) -> "EvalRecord":
        return cls(sample_id, tokenize(candidate), [tokenize(r) for r in references], qtype)


# ---------------------------------------------------------------------------
# BLEU-1

def bleu1(candidate: list[str], references: list[list[str]]) -> float:
    """Clipped unigram precision times the brevity penalty exp(1 - r/c) for c < r,
    with r the reference length closest to c (ties toward the shorter)."""
    c = len(candidate)
    if c == 0:
        log.warning("bleu1: empty candidate scored as 0.0")
        return 0.0
    counts = Counter(candidate)
    max_ref: Counter = Counter()
    for ref in references:
        for tok, n in Counter(ref).items():
            if n > max_ref[tok]:
                max_ref[tok] = n
    clipped = sum(min(n, max_ref[tok]) for tok, n in counts.items())
    precision = clipped / c
    r = min((len(ref) for ref in references), key=lambda L: (abs(L - c), L))
    bp = 1.0 if c >= r else math.exp(1.0 - r / c)
    return precision * bp


# ---------------------------------------------------------------------------
# ROUGE-L

def _lcs_len(a: list[str], b: list[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, y in enumerate(b, start=1):
            cur[j] = prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def rouge_l(candidate: list[str], references: list[list[str]], beta: float = 1.2) -> float:
    """Best-over-references LCS F-measure: (1+b^2)PR / (R + b^2 P)."""
    if not candidate:
        return 0.0
    best = 0.0
    b2 = beta * beta
    for ref in references:
        lcs = _lcs_len(candidate, ref)
        if lcs == 0 or not ref:
            continue
        p = lcs / len(candidate)
        r = lcs / len(ref)
        f = (1 + b2) * p * r / (r + b2 * p)
        best = max(best, f)
    return best


# ---------------------------------------------------------------------------
# simplified METEOR

_STEM_SUFFIXES = ("ing", "ed", "es", "s")


def stem(token: str) -> str:
    """Tiny suffix stripper: removes the first of ing/ed/es/s that leaves
    at least 3 characters. Documented stand-in for a real stemmer."""
    for suf in _STEM_SUFFIXES:
        if token.endswith(suf) and len(token) - len(suf) >= 3:
            return token[: -len(suf)]
    return token


def _align(candidate: list[str], ref: list[str]) -> list[tuple[int, int]]:
    """Exact matches first, then stem matches, each greedy left-to-right."""
    pairs: list[tuple[int, int]] = []
    used_c = [False] * len(candidate)
    used_r = [False] * len(ref)
    for exact in (True, False):
        for i, ct in enumerate(candidate):
            if used_c[i]:
                continue
            for j, rt in enumerate(ref):
                if used_r[j]:
                    continue
                if (ct == rt) if exact else (stem(ct) == stem(rt)):
                    pairs.append((i, j))
                    used_c[i] = True
                    used_r[j] = True
                    break
    return sorted(pairs)


def meteor_simplified(candidate: list[str], references: list[list[str]]) -> float:
    """Alignment F_mean = 10PR/(R+9P) damped by 0.5*(chunks/matches)^3; max over refs."""
    if not candidate:
        return 0.0
    best = 0.0
    for ref in references:
        pairs = _align(candidate, ref)
        m = len(pairs)
        if m == 0 or not ref:
            continue
        p = m / len(candidate)
        r = m / len(ref)
        f_mean = 10 * p * r / (r + 9 * p)
        chunks = 1
        for (ci, rj), (pi, pj) in zip(pairs[1:], pairs[:-1]):
            if ci != pi + 1 or rj != pj + 1:
                chunks += 1
        penalty = 0.5 * (chunks / m) ** 3
        best = max(best, f_mean * (1.0 - penalty))
    return best


# ---------------------------------------------------------------------------
# CIDEr-D

def _ngrams(tokens: list[str], n_max: int) -> Counter:
    counts: Counter = Counter()
    for n in range(1, n_max + 1):
        for i in range(len(tokens) - n + 1):
            counts[tuple(tokens[i : i + n])] += 1
    return counts


def cider_d(records: list[EvalRecord], n_max: int = 4, sigma: float = 6.0) -> tuple[list[float], float]:
    """Per-sample CIDEr-D scores and their corpus mean.

    Document frequencies come from the references of this evaluation run:
    an n-gram's df is the number of samples whose reference set contains it.
    Vectors are tf * (log N - log max(df, 1)); per-n similarity is the
    clipped cosine sum(min(h, r) * r) / (|h| |r|), damped by
    exp(-(len_c - len_r)^2 / (2 sigma^2)), averaged over n and references,
    times 10.
    """
    if not records:
        raise ValueError("cider_d needs at least one record")
    df: Counter = Counter()
    for rec in records:
        seen: set = set()
        for ref in rec.references:
            seen.update(_ngrams(ref, n_max).keys())
        for g in seen:
            df[g] += 1
    log_n = math.log(len(records))

    def vectors(tokens: list[str]):
        counts = _ngrams(tokens, n_max)
        vecs = [defaultdict(float) for _ in range(n_max)]
        norms = [0.0] * n_max
        for g, tf in counts.items():
            w = tf * (log_n - math.log(max(df[g], 1.0)))
            vecs[len(g) - 1][g] = w
            norms[len(g) - 1] += w * w
        return vecs, [math.sqrt(x) for x in norms]

    scores = []
    for rec in records:
        h_vecs, h_norms = vectors(rec.candidate)
        total = 0.0
        for ref in rec.references:
            r_vecs, r_norms = vectors(ref)
            penalty = math.exp(-((len(rec.candidate) - len(ref)) ** 2) / (2.0 * sigma**2))
            sim_sum = 0.0
            for n in range(n_max):
                if h_norms[n] == 0.0 or r_norms[n] == 0.0:
                    continue
                dot = 0.0
                for g, hw in h_vecs[n].items():
                    rw = r_vecs[n].get(g)
                    if rw is not None:
                        dot += min(hw, rw) * rw
                sim_sum += dot / (h_norms[n] * r_norms[n]) * penalty
            total += sim_sum / n_max
        scores.append(10.0 * total / len(rec.references))
    return scores, sum(scores) / len(scores)


# ---------------------------------------------------------------------------
# VQA accuracy

def vqa_accuracy(records: list[EvalRecord]) -> dict:
    """Exact-match accuracy per question type plus their unweighted mean (percent)."""
    if not records:
        raise ValueError("vqa_accuracy needs at least one record")
    per_type: dict[str, list[int]] = defaultdict(list)
    for rec in records:
        if not rec.qtype:
            raise ValueError(f"record {rec.sample_id!r} has no question-type tag")
        hit = any(rec.candidate == ref for ref in rec.references)
        per_type[rec.qtype].append(1 if hit else 0)
    accs = {qtype: 100.0 * sum(v) / len(v) for qtype, v in sorted(per_type.items())}
    return {"perType": accs, "average": sum(accs.values()) / len(accs)}


# ---------------------------------------------------------------------------
# reports

def evaluate(records: list[EvalRecord]) -> dict:
    """Corpus report: mean per-sample BLEU-1 / ROUGE-L / meteorS, corpus CIDEr-D,
    plus VQA accuracies when every record carries a question type. Four decimals."""
    if not records:
        raise ValueError("evaluate needs at least one record")
    n = len(records)
    _, cider_mean = cider_d(records)
    report = {
        "bleu1": round(sum(bleu1(r.candidate, r.references) for r in records) / n, 4),
        "rougeL": round(sum(rouge_l(r.candidate, r.references) for r in records) / n, 4),
        "ciderD": round(cider_mean, 4),
        "meteorS": round(sum(meteor_simplified(r.candidate, r.references) for r in records) / n, 4),
    }
    if all(r.qtype for r in records):
        vqa = vqa_accuracy(records)
        report["perType"] = {k: round(v, 4) for k, v in vqa["perType"].items()}
        report["vqaAvg"] = round(vqa["average"], 4)
    return report
