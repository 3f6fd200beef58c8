"""
Evaluation metrics for generated explanations.

Text metrics (BLEU-4, ROUGE-L, CIDEr, slot-level SPICE) score candidate
explanations against a single reference each; top-k accuracy scores the
attention map generator's significance ranking.

All texts come from the closed template grammar, so tokenization is
lowercase + whitespace split and SPICE reduces to matching the three
template propositions.
"""

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from exceptions import DatasetFormatError
from models import EvalRecord
from scene_data import parse_explanation
from vocabulary import SLOT_NAMES

MAX_ORDER = 4
ROUGE_BETA = 1.2
CIDER_SCALE = 10.0

VARIANT_NOTES = {
    "bleu4": "corpus-level BLEU-4, uniform weights over the orders the candidates contain, "
             "standard brevity penalty, no smoothing",
    "bleu4_sentence": "per-record diagnostic, add-one smoothing at every order",
    "rouge_l": f"ROUGE-L LCS F-measure, beta={ROUGE_BETA}, mean over records",
    "cider": "plain CIDEr (no CIDEr-D length penalty or count clipping), document frequencies "
             "from the reference corpus, x10",
    "spice_slot": "slot-level F1 over the (object, action, position) template propositions; "
                  "stands in for scene-graph SPICE on closed-grammar text",
}


def tokenize(text: str) -> List[str]:
    return text.lower().split()


def ngram_counts(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _require(records: Sequence[EvalRecord], name: str, minimum: int = 1):
    if len(records) < minimum:
        raise ValueError(f"{name} needs at least {minimum} record(s), got {len(records)}")


def bleu4(records: Sequence[EvalRecord]) -> float:
    """
    Corpus BLEU-4 with clipped n-gram counts and brevity penalty.

    Orders at which the candidates hold no n-grams at all are left out of the
    geometric mean; a zero precision at any remaining order gives 0.
    """
    _require(records, "bleu4")
    matches = [0] * MAX_ORDER
    totals = [0] * MAX_ORDER
    cand_len = ref_len = 0

    for record in records:
        cand, ref = tokenize(record.candidate), tokenize(record.reference)
        cand_len += len(cand)
        ref_len += len(ref)
        for n in range(1, MAX_ORDER + 1):
            cand_ngrams = ngram_counts(cand, n)
            ref_ngrams = ngram_counts(ref, n)
            matches[n - 1] += sum(min(count, ref_ngrams[g]) for g, count in cand_ngrams.items())
            totals[n - 1] += sum(cand_ngrams.values())

    orders = [n for n in range(MAX_ORDER) if totals[n] > 0]
    if not orders or any(matches[n] == 0 for n in orders):
        return 0.0

    log_precision = sum(math.log(matches[n] / totals[n]) for n in orders) / len(orders)
    brevity = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return brevity * math.exp(log_precision)


def sentence_bleu_smoothed(candidate: str, reference: str) -> float:
    """Add-one smoothed sentence BLEU-4"""
    cand, ref = tokenize(candidate), tokenize(reference)
    if not cand:
        return 0.0
    log_precision = 0.0
    for n in range(1, MAX_ORDER + 1):
        cand_ngrams = ngram_counts(cand, n)
        ref_ngrams = ngram_counts(ref, n)
        matched = sum(min(count, ref_ngrams[g]) for g, count in cand_ngrams.items())
        log_precision += math.log((matched + 1) / (sum(cand_ngrams.values()) + 1))
    brevity = 1.0 if len(cand) > len(ref) else math.exp(1.0 - len(ref) / len(cand))
    return brevity * math.exp(log_precision / MAX_ORDER)


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    table = np.zeros((len(a) + 1, len(b) + 1), dtype=np.int64)
    for i, x in enumerate(a, 1):
        for j, y in enumerate(b, 1):
            table[i, j] = table[i - 1, j - 1] + 1 if x == y else max(table[i - 1, j], table[i, j - 1])
    return int(table[len(a), len(b)])


def rouge_l_pair(candidate: str, reference: str, beta: float = ROUGE_BETA) -> float:
    cand, ref = tokenize(candidate), tokenize(reference)
    lcs = lcs_length(cand, ref)
    if lcs == 0:
        return 0.0
    precision = lcs / len(cand)
    recall = lcs / len(ref)
    return (1 + beta ** 2) * precision * recall / (recall + beta ** 2 * precision)


def rouge_l(records: Sequence[EvalRecord]) -> float:
    _require(records, "rouge_l")
    return float(np.mean([rouge_l_pair(r.candidate, r.reference) for r in records]))


def _tfidf(counts: Counter, doc_freq: Counter, log_n: float) -> Dict[Tuple[str, ...], float]:
    total = sum(counts.values())
    return {g: (c / total) * (log_n - math.log(max(1, doc_freq[g]))) for g, c in counts.items()}


def _cosine(u: Dict[Tuple[str, ...], float], v: Dict[Tuple[str, ...], float]) -> float:
    norm_u = math.sqrt(sum(x * x for x in u.values()))
    norm_v = math.sqrt(sum(x * x for x in v.values()))
    if norm_u == 0.0 or norm_v == 0.0:
        return 0.0
    return sum(x * v.get(g, 0.0) for g, x in u.items()) / (norm_u * norm_v)


def cider_scores(records: Sequence[EvalRecord]) -> List[float]:
    """Per-record CIDEr, each in [0, 10]"""
    _require(records, "cider", minimum=2)
    tokens = [(tokenize(r.candidate), tokenize(r.reference)) for r in records]
    log_n = math.log(len(records))

    doc_freq = {n: Counter() for n in range(1, MAX_ORDER + 1)}
    for _, ref in tokens:
        for n in range(1, MAX_ORDER + 1):
            doc_freq[n].update(ngram_counts(ref, n).keys())

    scores = []
    for cand, ref in tokens:
        similarities = []
        for n in range(1, MAX_ORDER + 1):
            cand_ngrams, ref_ngrams = ngram_counts(cand, n), ngram_counts(ref, n)
            if not cand_ngrams and not ref_ngrams:
                continue
            if not cand_ngrams or not ref_ngrams:
                similarities.append(0.0)
                continue
            similarities.append(_cosine(_tfidf(cand_ngrams, doc_freq[n], log_n),
                                        _tfidf(ref_ngrams, doc_freq[n], log_n)))
        scores.append(CIDER_SCALE * float(np.mean(similarities)) if similarities else 0.0)
    return scores


def cider(records: Sequence[EvalRecord]) -> float:
    return float(np.mean(cider_scores(records)))


def _reference_slots(record: EvalRecord) -> Tuple[str, str, str]:
    slots = parse_explanation(record.reference)
    if slots is None:
        raise DatasetFormatError(f"reference '{record.reference}' does not parse", clip_id=record.clip_id,
                                 field="reference")
    return slots


def spice_slot_pair(record: EvalRecord) -> float:
    reference = _reference_slots(record)
    candidate = parse_explanation(record.candidate)
    if candidate is None:
        return 0.0
    matched = sum((Counter(zip(SLOT_NAMES, candidate)) & Counter(zip(SLOT_NAMES, reference))).values())
    if matched == 0:
        return 0.0
    precision = matched / len(candidate)
    recall = matched / len(reference)
    return 2 * precision * recall / (precision + recall)


def spice_slot(records: Sequence[EvalRecord]) -> float:
    _require(records, "spice_slot")
    return float(np.mean([spice_slot_pair(r) for r in records]))


def topk_accuracy(cases: Sequence[Tuple[Sequence[float], int]], k: int) -> float:
    """
    Fraction of cases whose ground-truth index is among the k highest scores.

    Args:
        cases: (A_sig, gt_index) pairs
        k: Cut-off, ties ranked toward the lower index

    Returns:
        Accuracy in [0, 1], 0 for no cases
    """
    if not cases:
        return 0.0
    hits = 0
    for scores, gt_index in cases:
        scores = np.asarray(scores, dtype=np.float64)
        if not 0 <= gt_index < scores.size:
            raise ValueError(f"gt index {gt_index} outside {scores.size} scores")
        ranked = sorted(range(scores.size), key=lambda i: (-scores[i], i))
        hits += gt_index in ranked[:k]
    return hits / len(cases)


@dataclass
class MetricReport:
    bleu4: float
    rouge_l: float
    cider: float
    spice_slot: float
    num_records: int
    attention_source: str = "none"
    ce_loss: Optional[float] = None
    top1: Optional[float] = None
    top3: Optional[float] = None
    parse_rate: float = 0.0
    records: List[Dict[str, Any]] = field(default_factory=list)

    def scores(self) -> Dict[str, Optional[float]]:
        return {
            "ce_loss": self.ce_loss,
            "bleu4": self.bleu4,
            "rouge_l": self.rouge_l,
            "cider": self.cider,
            "spice_slot": self.spice_slot,
            "top1": self.top1,
            "top3": self.top3,
        }

    def to_dict(self) -> Dict[str, Any]:
        return {
            "attention_source": self.attention_source,
            "num_records": self.num_records,
            "scores": self.scores(),
            "parse_rate": self.parse_rate,
            "variants": dict(VARIANT_NOTES),
            "records": self.records,
        }


def evaluate_records(records: Sequence[EvalRecord], cases: Optional[Sequence[Tuple[Sequence[float], int]]] = None,
                     ce_loss: Optional[float] = None, attention_source: str = "none") -> MetricReport:
    """
    Score a generation corpus.

    Args:
        records: Candidate/reference pairs
        cases: (A_sig, gt_index) pairs for top-k accuracy, when a generator was used
        ce_loss: Validation language-modelling loss of the explainer
        attention_source: Variant the candidates came from

    Returns:
        MetricReport with per-record diagnostics filled in
    """
    _require(records, "evaluation")
    per_record_cider = cider_scores(records) if len(records) >= 2 else [0.0] * len(records)
    parsed = 0
    diagnostics = []
    for record, cider_value in zip(records, per_record_cider):
        record.reference_slots = _reference_slots(record)
        record.candidate_slots = parse_explanation(record.candidate)
        parsed += record.candidate_slots is not None
        record.diagnostics = {
            "bleu4_sentence": sentence_bleu_smoothed(record.candidate, record.reference),
            "rouge_l": rouge_l_pair(record.candidate, record.reference),
            "cider": cider_value,
            "spice_slot": spice_slot_pair(record),
        }
        diagnostics.append({**record.to_dict(), **record.diagnostics})

    return MetricReport(
        bleu4=bleu4(records),
        rouge_l=rouge_l(records),
        cider=float(np.mean(per_record_cider)),
        spice_slot=spice_slot(records),
        num_records=len(records),
        attention_source=attention_source,
        ce_loss=ce_loss,
        top1=topk_accuracy(cases, 1) if cases else None,
        top3=topk_accuracy(cases, 3) if cases else None,
        parse_rate=parsed / len(records),
        records=diagnostics,
    )


def records_from_rows(rows: Sequence[Dict[str, Any]]) -> List[EvalRecord]:
    """EvalRecords from generation JSON lines"""
    records = []
    for row in rows:
        clip_id = row.get("clip_id")
        for key in ("clip_id", "generated", "reference"):
            if key not in row:
                raise DatasetFormatError("missing field in generation line", clip_id=clip_id, field=key)
        records.append(EvalRecord(
            clip_id=row["clip_id"],
            candidate=row["generated"],
            reference=row["reference"],
            attention_source=row.get("attention_source", "none"),
        ))
    return records
