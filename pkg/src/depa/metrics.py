"""Macro precision/recall/F1 over the two classes, plus MAE and RMSE."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Sequence, Tuple


@dataclass(frozen=True)
class ClassificationReport:
    precision: Tuple[float, float]  # indexed by class
    recall: Tuple[float, float]
    f1: Tuple[float, float]
    macro_precision: float
    macro_recall: float
    macro_f1: float

    def as_dict(self) -> Dict[str, float]:
        d = {}
        for c in (0, 1):
            d[f"precision_{c}"] = self.precision[c]
            d[f"recall_{c}"] = self.recall[c]
            d[f"f1_{c}"] = self.f1[c]
        d.update(macro_precision=self.macro_precision, macro_recall=self.macro_recall, macro_f1=self.macro_f1)
        return d


@dataclass(frozen=True)
class RegressionReport:
    mae: float
    rmse: float

    def as_dict(self) -> Dict[str, float]:
        return {"mae": self.mae, "rmse": self.rmse}


def _check(pred: Sequence, truth: Sequence) -> None:
    if len(pred) != len(truth):
        raise ValueError(f"length mismatch: {len(pred)} predictions vs {len(truth)} labels")
    if len(pred) == 0:
        raise ValueError("empty input")


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


def classification_report(pred: Sequence[int], truth: Sequence[int]) -> ClassificationReport:
    _check(pred, truth)
    prec, rec, f1 = [], [], []
    for c in (0, 1):
        tp = sum(1 for p, t in zip(pred, truth) if p == c and t == c)
        fp = sum(1 for p, t in zip(pred, truth) if p == c and t != c)
        fn = sum(1 for p, t in zip(pred, truth) if p != c and t == c)
        pc, rc = _ratio(tp, tp + fp), _ratio(tp, tp + fn)
        prec.append(pc)
        rec.append(rc)
        f1.append(2 * pc * rc / (pc + rc) if pc + rc > 0 else 0.0)
    return ClassificationReport(
        tuple(prec), tuple(rec), tuple(f1),
        sum(prec) / 2, sum(rec) / 2, sum(f1) / 2,
    )


def regression_report(pred: Sequence[float], truth: Sequence[float]) -> RegressionReport:
    _check(pred, truth)
    d = [float(p) - float(t) for p, t in zip(pred, truth)]
    mae = sum(abs(x) for x in d) / len(d)
    rmse = math.sqrt(sum(x * x for x in d) / len(d))
    return RegressionReport(mae, max(rmse, mae))  # guard float rounding when all |d| are equal


def format_text(*reports) -> str:
    lines = []
    for r in reports:
        lines += [f"{k}={v:.6f}" for k, v in r.as_dict().items()]
    return "\n".join(lines) + "\n"


def format_csv(*reports) -> str:
    rows = ["metric,value"]
    for r in reports:
        rows += [f"{k},{v:.6f}" for k, v in r.as_dict().items()]
    return "\n".join(rows) + "\n"
