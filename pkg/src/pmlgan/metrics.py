"""Multi-label evaluation metrics and the paired t-test used for win/tie/loss tables.

Tie conventions (fixed so results are reproducible):

* ranking loss counts a relevant/irrelevant pair with equal scores as misordered;
* one error takes the lowest label index among tied top scores;
* average precision ranks by descending score, ties broken by ascending index.

Instances whose relevant (or, for ranking loss, irrelevant) set is empty are
skipped by the metric that needs it.
"""
from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field

import numpy as np

THRESHOLD = 0.5

# two-sided 0.05 critical values of Student's t, df = 1..30
T_CRITICAL_05 = (
    12.706, 4.303, 3.182, 2.776, 2.571, 2.447, 2.365, 2.306, 2.262, 2.228,
    2.201, 2.179, 2.160, 2.145, 2.131, 2.120, 2.110, 2.101, 2.093, 2.086,
    2.080, 2.074, 2.069, 2.064, 2.060, 2.056, 2.052, 2.048, 2.045, 2.042,
)
T_CRITICAL_INF = 1.960

# True when a smaller value is better
LOWER_IS_BETTER = {
    "hamming_loss": True,
    "ranking_loss": True,
    "one_error": True,
    "average_precision": False,
}


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def hamming_loss(pred, truth) -> float:
    pred, truth = _pair(pred, truth)
    return float((pred != truth).mean())


def ranking_loss(scores, truth) -> float:
    scores, truth = _pair(scores, truth)
    rel = truth > 0
    n_rel = rel.sum(axis=1)
    n_irr = rel.shape[1] - n_rel
    ok = (n_rel > 0) & (n_irr > 0)
    if not ok.any():
        raise ValueError("ranking loss: no instance has both relevant and irrelevant labels")
    s, r = scores[ok], rel[ok]
    # bad[i, a, b] = a relevant, b irrelevant, score_a <= score_b
    bad = (s[:, :, None] <= s[:, None, :]) & r[:, :, None] & ~r[:, None, :]
    per = bad.sum(axis=(1, 2)) / (n_rel[ok] * n_irr[ok])
    return float(per.mean())


def one_error(scores, truth) -> float:
    scores, truth = _pair(scores, truth)
    ok = truth.sum(axis=1) > 0
    if not ok.any():
        return 0.0
    top = np.argmax(scores[ok], axis=1)
    return float((truth[ok][np.arange(top.size), top] <= 0).mean())


def _ranks(scores):
    """1-based ranks, descending score, ties by ascending index."""
    order = np.argsort(-scores, axis=1, kind="stable")
    ranks = np.empty_like(order)
    rows = np.arange(scores.shape[0])[:, None]
    ranks[rows, order] = np.arange(1, scores.shape[1] + 1)
    return ranks


def average_precision(scores, truth) -> float:
    scores, truth = _pair(scores, truth)
    ok = truth.sum(axis=1) > 0
    if not ok.any():
        raise ValueError("average precision: no instance has a relevant label")
    s, rel = scores[ok], truth[ok] > 0
    ranks = _ranks(s)
    # for a relevant a: relevant labels ranked at or above a
    above = (ranks[:, None, :] <= ranks[:, :, None]) & rel[:, None, :]
    prec = above.sum(axis=2) / ranks
    per = (prec * rel).sum(axis=1) / rel.sum(axis=1)
    return float(per.mean())


@dataclass
class EvalReport:
    hamming_loss: float
    ranking_loss: float
    one_error: float
    average_precision: float
    n_instances: int
    metadata: dict = field(default_factory=dict)

    def as_row(self) -> dict:
        row = dict(self.metadata)
        row.update({k: v for k, v in asdict(self).items() if k != "metadata"})
        return row

    def to_csv_row(self) -> str:
        row = self.as_row()
        buf = io.StringIO()
        csv.DictWriter(buf, fieldnames=list(row), lineterminator="\n").writerow(row)
        return buf.getvalue()


def evaluate(scores, truth, threshold: float = THRESHOLD, **metadata) -> EvalReport:
    scores, truth = _pair(scores, truth)
    return EvalReport(
        hamming_loss=hamming_loss((scores >= threshold).astype(np.float64), truth),
        ranking_loss=ranking_loss(scores, truth),
        one_error=one_error(scores, truth),
        average_precision=average_precision(scores, truth),
        n_instances=int(scores.shape[0]),
        metadata=metadata,
    )


def t_critical(df: int) -> float:
    if df < 1:
        raise ValueError("need at least two paired runs")
    return T_CRITICAL_05[df - 1] if df <= len(T_CRITICAL_05) else T_CRITICAL_INF


def paired_t_statistic(a, b) -> float:
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0:
        return 0.0 if mean == 0 else float(np.copysign(np.inf, mean))
    return float(mean / (sd / np.sqrt(d.size)))


def paired_t_test(a, b, lower_is_better: bool = False) -> str:
    """'win' / 'tie' / 'loss' for ``a`` against ``b`` at two-sided p < 0.05."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired t-test needs two equal-length vectors")
    if a.size < 2:
        raise ValueError("paired t-test needs at least two runs")
    t = paired_t_statistic(a, b)
    if abs(t) <= t_critical(a.size - 1):
        return "tie"
    a_higher = t > 0
    return "win" if a_higher != lower_is_better else "loss"
