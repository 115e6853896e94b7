"""Correlation and error statistics, plus the training-set rank-fit diagnostic."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

NA = "N/A"


def _pair(x, y, min_len: int):
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < min_len:
        raise ValueError(f"need >= {min_len} values, got {x.size}")
    return x, y


def pearson(x, y) -> float:
    """Product-moment correlation; NaN when either input has zero variance."""
    x, y = _pair(x, y, 2)
    xc = x - x.mean()
    yc = y - y.mean()
    sxx = float(xc @ xc)
    syy = float(yc @ yc)
    if sxx == 0.0 or syy == 0.0:
        return math.nan
    r = float(xc @ yc) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def spearman(x, y) -> float:
    """Pearson correlation of average ranks."""
    x, y = _pair(x, y, 2)
    return pearson(rankdata(x), rankdata(y))


def rmse(pred, y) -> float:
    pred, y = _pair(pred, y, 1)
    return math.sqrt(float(np.mean((pred - y) ** 2)))


@dataclass(frozen=True)
class EvalReport:
    pearson: float
    spearman: float
    rmse: float | None  # None renders as N/A
    n: int

    def to_json(self) -> dict:
        def num(v):
            return None if v is None or math.isnan(v) else round(float(v), 12)

        return {
            "pearson": num(self.pearson),
            "spearman": num(self.spearman),
            "rmse": NA if self.rmse is None else num(self.rmse),
            "n": self.n,
        }


def evaluate(pred, y, with_rmse: bool = True) -> EvalReport:
    pred, y = _pair(pred, y, 2)
    return EvalReport(pearson(pred, y), spearman(pred, y), rmse(pred, y) if with_rmse else None, int(y.size))


@dataclass(frozen=True)
class RankFit:
    ids: tuple[str, ...]
    true_rank: np.ndarray
    pred_rank: np.ndarray
    spearman: float

    def rows(self):
        return zip(self.ids, self.true_rank, self.pred_rank)


def rank_fit_values(ids, pred, y) -> RankFit:
    pred, y = _pair(pred, y, 2)
    tr = rankdata(y)
    pr = rankdata(pred)
    return RankFit(tuple(ids), tr, pr, pearson(tr, pr))


def rank_fit(model, complexes, sign: float = 1.0) -> RankFit:
    """Rank labels against model predictions on labeled complexes.

    ``sign`` converts model energies into affinity predictions.
    """
    missing = [c.id for c in complexes if c.affinity is None]
    if missing:
        raise ValueError(f"rank_fit needs labels; unlabeled: {', '.join(missing[:5])}")
    pred = sign * model.predict(list(complexes))
    return rank_fit_values([c.id for c in complexes], pred, [c.affinity for c in complexes])


def write_rankfit_csv(fit: RankFit, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "true_rank", "pred_rank"])
        for cid, t, p in fit.rows():
            w.writerow([cid, f"{t:g}", f"{p:g}"])


def write_eval_json(report: EvalReport, path, extra: dict | None = None) -> None:
    payload = {**report.to_json(), **(extra or {})}
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")
