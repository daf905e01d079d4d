"""Report-generation metrics: corpus BLEU, ROUGE-L, a simplified METEOR,
dictionary-based entity F1, and Her-2 status classification scores.

METEOR and the entity score are simplifications (no synonym table, no learned
NER) and are reported under ``*_simplified`` keys so they are never mistaken
for the original metrics.
"""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Sequence

_TOKEN_RE = re.compile(r"[a-z0-9]+(?:[-/.][a-z0-9]+)*")


def tokenize(text: str) -> list[str]:
    """Lowercase word tokens; punctuation dropped, codes like ``m-8500/3`` kept whole."""
    return _TOKEN_RE.findall(text.lower())


def _check(candidates: Sequence[str], references: Sequence[str]) -> None:
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates vs {len(references)} references")
    if not candidates:
        raise ValueError("empty corpus")


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidates: Sequence[str], references: Sequence[str], n: int = 4) -> float:
    """Corpus BLEU-n with brevity penalty.

    Orders >= 2 with zero corpus-level matches are add-one smoothed
    (``1 / (total + 1)``); a zero unigram precision gives 0.
    """
    _check(candidates, references)
    matches = [0] * n
    totals = [0] * n
    c_len = r_len = 0
    for cand, ref in zip(candidates, references):
        ct, rt = tokenize(cand), tokenize(ref)
        c_len += len(ct)
        r_len += len(rt)
        for k in range(1, n + 1):
            cg, rg = _ngrams(ct, k), _ngrams(rt, k)
            matches[k - 1] += sum(min(c, rg[g]) for g, c in cg.items())
            totals[k - 1] += sum(cg.values())
    if c_len == 0 or matches[0] == 0:
        return 0.0
    log_p = 0.0
    for k in range(n):
        m, t = matches[k], totals[k]
        if k > 0 and m == 0:
            m, t = 1, t + 1
        log_p += math.log(m / t)
    bp = 1.0 if c_len > r_len else math.exp(1 - r_len / c_len)
    return bp * math.exp(log_p / n)


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidates: Sequence[str], references: Sequence[str], beta: float = 1.2) -> float:
    _check(candidates, references)
    scores = []
    for cand, ref in zip(candidates, references):
        ct, rt = tokenize(cand), tokenize(ref)
        if not ct and not rt:
            scores.append(1.0)
            continue
        lcs = lcs_length(ct, rt)
        if lcs == 0:
            scores.append(0.0)
            continue
        p, r = lcs / len(ct), lcs / len(rt)
        scores.append((1 + beta**2) * p * r / (r + beta**2 * p))
    return sum(scores) / len(scores)


_SUFFIXES = ("ing", "ed", "es", "ly", "s")


def stem(word: str) -> str:
    for suf in _SUFFIXES:
        if word.endswith(suf) and len(word) - len(suf) >= 3:
            return word[: -len(suf)]
    return word


def _align(ct: list[str], rt: list[str]) -> list[tuple[int, int]]:
    """Exact matches first, then stem matches; each candidate token takes the first
    free reference position after the previous alignment, else the first free one."""
    used_c: set[int] = set()
    used_r: set[int] = set()
    pairs: list[tuple[int, int]] = []
    for key in (lambda w: w, stem):
        rkeys = [key(w) for w in rt]
        last = -1
        for i, w in enumerate(ct):
            if i in used_c:
                continue
            kw = key(w)
            free = [j for j, rk in enumerate(rkeys) if rk == kw and j not in used_r]
            if not free:
                continue
            after = [j for j in free if j > last]
            j = after[0] if after else free[0]
            used_c.add(i)
            used_r.add(j)
            pairs.append((i, j))
            last = j
    return sorted(pairs)


def meteor_simplified(candidates: Sequence[str], references: Sequence[str],
                      alpha: float = 0.9, beta: float = 3.0, gamma: float = 0.5) -> float:
    """Unigram F-mean with fragmentation penalty ``gamma * ((chunks-1)/(matches-1))**beta``.

    The ``-1`` offsets make a perfect, single-chunk alignment score exactly 1.
    """
    _check(candidates, references)
    scores = []
    for cand, ref in zip(candidates, references):
        ct, rt = tokenize(cand), tokenize(ref)
        if not ct and not rt:
            scores.append(1.0)
            continue
        pairs = _align(ct, rt)
        m = len(pairs)
        if m == 0:
            scores.append(0.0)
            continue
        p, r = m / len(ct), m / len(rt)
        fmean = p * r / (alpha * p + (1 - alpha) * r)
        chunks = 1
        for (i0, j0), (i1, j1) in zip(pairs, pairs[1:]):
            if not (i1 == i0 + 1 and j1 == j0 + 1):
                chunks += 1
        frag = (chunks - 1) / (m - 1) if m > 1 else 0.0
        scores.append(fmean * (1 - gamma * frag**beta))
    return sum(scores) / len(scores)


def extract_entities(text: str, dictionary: Sequence[str]) -> Counter:
    """Longest-match dictionary scan over metric tokens."""
    terms = sorted({tuple(tokenize(t)) for t in dictionary if tokenize(t)}, key=len, reverse=True)
    toks = tokenize(text)
    found: Counter = Counter()
    i = 0
    while i < len(toks):
        for term in terms:
            if tuple(toks[i:i + len(term)]) == term:
                found[" ".join(term)] += 1
                i += len(term)
                break
        else:
            i += 1
    return found


def fact_ent(candidates: Sequence[str], references: Sequence[str], dictionary: Sequence[str]) -> float:
    """Micro-averaged F1 between candidate and reference entity multisets."""
    _check(candidates, references)
    if not dictionary:
        raise ValueError("entity dictionary is empty")
    tp = n_c = n_r = 0
    for cand, ref in zip(candidates, references):
        ce, re_ = extract_entities(cand, dictionary), extract_entities(ref, dictionary)
        tp += sum((ce & re_).values())
        n_c += sum(ce.values())
        n_r += sum(re_.values())
    if n_c == 0 and n_r == 0:
        return 1.0
    if tp == 0:
        return 0.0
    p, r = tp / n_c, tp / n_r
    return 2 * p * r / (p + r)


def her2_status(text: str) -> str | None:
    """'positive' / 'negative' from the first sentence naming her-2, else None."""
    for sentence in re.split(r"(?<=[.;])\s+|\n", text.lower()):
        toks = tokenize(sentence)
        if "her-2" in toks:
            for t in toks[toks.index("her-2") + 1:]:
                if t in ("positive", "negative"):
                    return t
    return None


def her2_confusion(candidates: Sequence[str], references: Sequence[str]) -> dict[str, int]:
    _check(candidates, references)
    counts = {"tp": 0, "fp": 0, "fn": 0, "tn": 0}
    for i, (cand, ref) in enumerate(zip(candidates, references)):
        truth = her2_status(ref)
        if truth is None:
            raise ValueError(f"reference {i} has no parseable her-2 status")
        pred = her2_status(cand) == "positive"
        gold = truth == "positive"
        counts[("t" if pred == gold else "f") + ("p" if pred else "n")] += 1
    return counts


def her2_metrics(candidates: Sequence[str], references: Sequence[str]) -> tuple[float, float, float]:
    """Binary precision/recall/F1 with positive status as the positive class.

    A ratio with an empty denominator is 1.0 (no positive predictions means no
    false positives; no positive references means nothing was missed).
    """
    c = her2_confusion(candidates, references)
    precision = c["tp"] / (c["tp"] + c["fp"]) if c["tp"] + c["fp"] else 1.0
    recall = c["tp"] / (c["tp"] + c["fn"]) if c["tp"] + c["fn"] else 1.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


@dataclass
class MetricReport:
    bleu1: float
    bleu2: float
    bleu3: float
    bleu4: float
    meteor_simplified: float
    rouge_l: float
    fact_ent_simplified: float
    her2_precision: float
    her2_recall: float
    her2_f1: float

    NLP_KEYS = ("bleu1", "bleu2", "bleu3", "bleu4", "meteor_simplified", "rouge_l", "fact_ent_simplified")

    def as_dict(self) -> dict[str, float]:
        return asdict(self)

    def to_kv(self) -> str:
        return "".join(f"{k}={v:.6f}\n" for k, v in self.as_dict().items())

    def to_table(self) -> str:
        rows = [f"{k:<22}{v:>8.4f}" for k, v in self.as_dict().items()]
        return "\n".join([f"{'metric':<22}{'value':>8}", "-" * 30, *rows])


def evaluate(candidates: Sequence[str], references: Sequence[str], dictionary: Sequence[str]) -> MetricReport:
    p, r, f = her2_metrics(candidates, references)
    return MetricReport(
        bleu1=bleu(candidates, references, 1), bleu2=bleu(candidates, references, 2),
        bleu3=bleu(candidates, references, 3), bleu4=bleu(candidates, references, 4),
        meteor_simplified=meteor_simplified(candidates, references), rouge_l=rouge_l(candidates, references),
        fact_ent_simplified=fact_ent(candidates, references, dictionary),
        her2_precision=p, her2_recall=r, her2_f1=f,
    )
