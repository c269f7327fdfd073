"""Minority-class F1, macro F1 and PR-AUC (average precision)."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ContractError, UndefinedMetricError


def _binary_inputs(labels, preds):
    y = np.asarray(labels).astype(np.int64).reshape(-1)
    p = np.asarray(preds).astype(np.int64).reshape(-1)
    if y.size == 0:
        raise ContractError("no samples to evaluate")
    if y.shape != p.shape:
        raise ContractError(f"{y.size} labels vs {p.size} predictions")
    return y, p


def confusion(labels, preds, positive: int = 1) -> tuple[int, int, int, int]:
    """(TP, FP, TN, FN) with ``positive`` as the positive class."""
    y, p = _binary_inputs(labels, preds)
    yt, pt = y == positive, p == positive
    return (int(np.sum(yt & pt)), int(np.sum(~yt & pt)), int(np.sum(~yt & ~pt)), int(np.sum(yt & ~pt)))


def _f1(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 0.0 if tp == 0 else 2 * tp / denom


def f1_min(labels, preds, minority: int = 1) -> float:
    """F1 of the minority (illicit) class; 0 when precision + recall is 0."""
    y, p = _binary_inputs(labels, preds)
    if not (y == minority).any():
        raise UndefinedMetricError(f"no samples of minority class {minority}")
    tp, fp, _, fn = confusion(y, p, minority)
    return _f1(tp, fp, fn)


def macro_f1(labels, preds, minority: int = 1) -> float:
    """Unweighted mean of the per-class F1 scores."""
    y, p = _binary_inputs(labels, preds)
    if not (y == minority).any():
        raise UndefinedMetricError(f"no samples of minority class {minority}")
    n_classes = max(2, int(max(y.max(), p.max())) + 1)
    scores = []
    for c in range(n_classes):
        tp, fp, _, fn = confusion(y, p, c)
        scores.append(_f1(tp, fp, fn))
    return float(np.mean(scores))


def pr_auc(labels, scores, minority: int = 1) -> float:
    """Average precision: sum over score thresholds of (R_k - R_{k-1}) * P_k.

    Items sharing a score enter the ranking together as one block.
    """
    y = np.asarray(labels).astype(np.int64).reshape(-1) == minority
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    if y.size == 0:
        raise ContractError("no samples to evaluate")
    if y.shape != s.shape:
        raise ContractError(f"{y.size} labels vs {s.size} scores")
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError("PR-AUC undefined without positives")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    block_end = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = np.cumsum(y)[block_end]
    pp = block_end + 1
    recall = tp / n_pos
    precision = tp / pp
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


@dataclass(frozen=True)
class EvalReport:
    tp: int
    fp: int
    tn: int
    fn: int
    f1_min: float
    macro_f1: float
    pr_auc: float
    threshold: str = "argmax"

    FIELDS = ("tp", "fp", "tn", "fn", "f1_min", "macro_f1", "pr_auc", "threshold")

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def csv_header(cls) -> str:
        return ",".join(cls.FIELDS)

    def csv_row(self) -> str:
        d = self.to_dict()
        return ",".join(repr(d[k]) if isinstance(d[k], float) else str(d[k]) for k in self.FIELDS)


def evaluate(logits, labels, minority: int = 1) -> EvalReport:
    """All metrics from raw logits; hard labels by argmax, ranking by the minority-class probability."""
    logits = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels).astype(np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] == 0:
        raise ContractError(f"expected non-empty (n, C) logits, got shape {logits.shape}")
    if logits.shape[0] != y.size:
        raise ContractError(f"{logits.shape[0]} predictions for {y.size} labels")
    preds = logits.argmax(axis=1)
    probs = softmax_np(logits)[:, minority]
    tp, fp, tn, fn = confusion(y, preds, minority)
    return EvalReport(tp, fp, tn, fn, f1_min(y, preds, minority), macro_f1(y, preds, minority),
                      pr_auc(y, probs, minority))
