"""Place-recognition metrics: Hits@N and F1max under the revisit protocol."""

from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from placeid.dataset import SequenceDataset, Split, revisit_mask

POS_RADIUS = 3.0
NEG_RADIUS = 20.0
REVISIT_DT = 30.0


class ScoreKind(str, enum.Enum):
    LOG_PROB = "LOG_PROB"
    COSINE = "COSINE"
    NEG_HAMMING = "NEG_HAMMING"


@dataclass
class RetrievalRecord:
    """Ranked candidates for one query; higher score is better for every kind."""

    query_index: int
    candidates: list[tuple[int, float]]
    score_kind: ScoreKind = ScoreKind.LOG_PROB

    @property
    def top1(self) -> tuple[int, float] | None:
        return self.candidates[0] if self.candidates else None

    def to_json(self) -> str:
        return json.dumps({
            "query_index": int(self.query_index),
            "score_kind": ScoreKind(self.score_kind).value,
            "candidates": [[int(s), float(v)] for s, v in self.candidates],
        })

    @classmethod
    def from_json(cls, line: str) -> "RetrievalRecord":
        d = json.loads(line)
        return cls(int(d["query_index"]), [(int(s), float(v)) for s, v in d["candidates"]],
                   ScoreKind(d["score_kind"]))


def write_records(path, records) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def read_records(path) -> list[RetrievalRecord]:
    with open(path) as fh:
        return [RetrievalRecord.from_json(line) for line in fh if line.strip()]


def temporal_neighbours(dataset: SequenceDataset, q: int, refs: np.ndarray, dt: float = REVISIT_DT) -> set[int]:
    """Reference scenes closer than ``dt`` seconds to the query, which retrieval must skip."""
    refs = np.asarray(refs)
    return set(refs[np.abs(dataset.t[refs] - dataset.t[q]) < dt].tolist())


def ground_truth_build(dataset: SequenceDataset, radius: float = POS_RADIUS, dt: float = REVISIT_DT,
                       queries=None, references=None) -> dict[int, set[int]]:
    """Correct references per query: within ``radius`` metres and at least ``dt`` seconds apart.

    Defaults to EVAL queries against the TRAIN reference database.
    """
    queries = dataset.indices(Split.EVAL) if queries is None else np.asarray(queries, dtype=np.int64)
    references = dataset.indices(Split.TRAIN) if references is None else np.asarray(references, dtype=np.int64)
    out = {int(q): set() for q in queries}
    if len(references) == 0 or len(queries) == 0:
        return out
    tree = cKDTree(dataset.xy[references])
    t = dataset.t
    for q, hits in zip(queries, tree.query_ball_point(dataset.xy[queries], radius)):
        cand = references[hits]
        out[int(q)] = set(cand[np.abs(t[cand] - t[q]) >= dt].tolist())
    return out


def hits_at_n(records, ground_truth: dict, n: int = 1) -> float | None:
    """Fraction of queries with a correct scene in their top ``n``; None if no query is eligible."""
    hit = total = 0
    for r in records:
        gt = ground_truth.get(r.query_index)
        if not gt:
            continue
        total += 1
        if any(s in gt for s, _ in r.candidates[:n]):
            hit += 1
    return hit / total if total else None


@dataclass
class Confusion:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0
    discarded: int = 0

    @property
    def f1(self) -> float:
        den = 2 * self.tp + self.fp + self.fn
        return 2 * self.tp / den if den else 0.0

    @property
    def counted(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def _top1_arrays(records, dataset, revisit):
    """Per record: top-1 score (-inf when empty), planar error of top-1 (nan when empty), revisit flag."""
    scores = np.full(len(records), -np.inf)
    err = np.full(len(records), np.nan)
    rev = np.zeros(len(records), dtype=bool)
    for i, r in enumerate(records):
        rev[i] = revisit[r.query_index]
        if r.candidates:
            s, v = r.candidates[0]
            scores[i] = v
            err[i] = float(np.linalg.norm(dataset.xy[s] - dataset.xy[r.query_index]))
    return scores, err, rev


def confusion_at_threshold(records, dataset: SequenceDataset, threshold: float, pos_radius: float = POS_RADIUS,
                           neg_radius: float = NEG_RADIUS, dt: float = REVISIT_DT, revisit=None) -> Confusion:
    """Accept a query when its top-1 score is at least ``threshold``.

    Accepted: TP within ``pos_radius``, FP beyond ``neg_radius``, otherwise
    discarded. Rejected (or empty): FN for revisits, TN for the rest.
    """
    if revisit is None:
        revisit = revisit_mask(dataset, pos_radius, dt)
    scores, err, rev = _top1_arrays(records, dataset, revisit)
    return _confusion(scores, err, rev, threshold, pos_radius, neg_radius)


def _confusion(scores, err, rev, threshold, pos_radius, neg_radius) -> Confusion:
    has = np.isfinite(err)
    acc = has & (scores >= threshold)
    tp = acc & (err <= pos_radius)
    fp = acc & (err > neg_radius)
    rej = ~acc
    return Confusion(int(tp.sum()), int(fp.sum()), int((rej & ~rev).sum()), int((rej & rev).sum()),
                     int((acc & ~tp & ~fp).sum()))


def f1_max(records, dataset: SequenceDataset, pos_radius: float = POS_RADIUS, neg_radius: float = NEG_RADIUS,
           dt: float = REVISIT_DT, revisit=None) -> tuple[float, float, Confusion]:
    """Best F1 over thresholds at the observed top-1 scores and the two infinities.

    Returns ``(f1, threshold, confusion)``; ties resolve to the lowest threshold.
    """
    if revisit is None:
        revisit = revisit_mask(dataset, pos_radius, dt)
    scores, err, rev = _top1_arrays(records, dataset, revisit)
    thresholds = [-math.inf] + sorted(set(scores[np.isfinite(scores)].tolist())) + [math.inf]
    best = (-1.0, None, None)
    for th in thresholds:
        c = _confusion(scores, err, rev, th, pos_radius, neg_radius)
        if c.f1 > best[0]:
            best = (c.f1, th, c)
    return best


@dataclass
class EvalReport:
    method: str
    hits_at_1: float | None
    f1_max: float
    best_threshold: float
    confusion: Confusion
    hits: dict = field(default_factory=dict)
    n_queries: int = 0
    n_eligible: int = 0
    records: list = field(default_factory=list, repr=False)

    def summary(self) -> dict:
        d = {
            "method": self.method,
            "hits_at_1": self.hits_at_1,
            "f1_max": self.f1_max,
            "best_threshold": _json_float(self.best_threshold),
            "confusion": asdict(self.confusion),
            "hits": {str(k): v for k, v in self.hits.items()},
            "n_queries": self.n_queries,
            "n_eligible": self.n_eligible,
        }
        return d

    def to_json(self, with_records: bool = True) -> str:
        d = self.summary()
        if with_records:
            d["records"] = [json.loads(r.to_json()) for r in self.records]
        return json.dumps(d, indent=2)

    def csv_rows(self) -> list[list]:
        rows = [[self.method, "hits_at_1", self.hits_at_1], [self.method, "f1_max", self.f1_max],
                [self.method, "best_threshold", _json_float(self.best_threshold)]]
        rows += [[self.method, f"hits_at_{k}", v] for k, v in self.hits.items() if k != 1]
        rows += [[self.method, k, v] for k, v in asdict(self.confusion).items()]
        return rows


def _json_float(v):
    if v is None:
        return None
    return v if math.isfinite(v) else ("inf" if v > 0 else "-inf")


def write_reports_csv(path, reports) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "metric", "value"])
        for rep in reports:
            w.writerows(rep.csv_rows())


def evaluate(records, dataset: SequenceDataset, method: str = "generative", hits_n=(1,),
             pos_radius: float = POS_RADIUS, neg_radius: float = NEG_RADIUS, dt: float = REVISIT_DT,
             references=None) -> EvalReport:
    queries = [r.query_index for r in records]
    gt = ground_truth_build(dataset, pos_radius, dt, queries=queries, references=references)
    hits = {n: hits_at_n(records, gt, n) for n in sorted(set(hits_n) | {1})}
    f1, th, conf = f1_max(records, dataset, pos_radius, neg_radius, dt)
    return EvalReport(method, hits[1], f1, th, conf, hits, len(records),
                      sum(1 for q in queries if gt[q]), list(records))
