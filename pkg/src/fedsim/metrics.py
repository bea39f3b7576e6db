"""Classification metrics and the three federated evaluation views:

  global           - server model on the concatenation of every client's
                     test set;
  personalization  - each client's current model on its own test set;
  generalization   - each client's best-personalization snapshot on the
                     global test set.

Means and spreads across clients use the population standard deviation.
Macro (unweighted) F1 is the headline score; weighted F1 rides along in the
bundles for comparison.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import nn
from .arch import ModelArch
from .data import WindowSet
from .fabric import ModelWeights

CSV_COLUMNS = ["round", "algorithm", "global_f1", "pers_mean", "pers_std",
               "gen_mean", "gen_std", "params", "bytes_up", "bytes_down",
               "units_added"]


@dataclass(frozen=True)
class ConfusionMatrix:
    """counts[i, j] = examples with truth i predicted as j."""

    counts: np.ndarray

    def __post_init__(self) -> None:
        c = self.counts
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ValueError("confusion matrix must be square")
        if (c < 0).any():
            raise ValueError("confusion counts must be non-negative")

    @property
    def classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion(truth, predictions, classes: int) -> ConfusionMatrix:
    truth = np.asarray(truth, dtype=np.intp)
    predictions = np.asarray(predictions, dtype=np.intp)
    if truth.shape != predictions.shape:
        raise ValueError(
            f"{len(truth)} truth labels vs {len(predictions)} predictions"
        )
    if len(truth) and (truth.max() >= classes or predictions.max() >= classes):
        raise ValueError("labels exceed the class count")
    counts = np.zeros((classes, classes), dtype=np.int64)
    np.add.at(counts, (truth, predictions), 1)
    return ConfusionMatrix(counts)


def _per_class(cm: ConfusionMatrix):
    tp = np.diag(cm.counts).astype(np.float64)
    support = cm.counts.sum(axis=1).astype(np.float64)
    predicted = cm.counts.sum(axis=0).astype(np.float64)
    # Classes absent from both truth and predictions carry no information.
    included = (support > 0) | (predicted > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(predicted > 0, tp / predicted, 0.0)
        recall = np.where(support > 0, tp / support, 0.0)
        pr = precision + recall
        f1 = np.where(pr > 0, 2 * precision * recall / pr, 0.0)
    return included, precision, recall, f1, support


def macro_f1(cm: ConfusionMatrix) -> float:
    """Unweighted mean per-class F1.  Classes with zero support and zero
    predictions are excluded; a 0/0 inside a class yields per-class F1 = 0."""
    if cm.total == 0:
        raise ValueError("empty confusion matrix")
    included, _, _, f1, _ = _per_class(cm)
    return float(f1[included].mean())


def weighted_f1(cm: ConfusionMatrix) -> float:
    """Support-weighted mean per-class F1."""
    if cm.total == 0:
        raise ValueError("empty confusion matrix")
    _, _, _, f1, support = _per_class(cm)
    return float((f1 * support).sum() / support.sum())


def accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise ValueError("empty confusion matrix")
    return float(np.diag(cm.counts).sum() / cm.total)


@dataclass(frozen=True)
class ScoreBundle:
    accuracy: float
    precision: float
    recall: float
    macro_f1: float
    weighted_f1: float


def score_bundle(cm: ConfusionMatrix) -> ScoreBundle:
    included, precision, recall, f1, _ = _per_class(cm)
    return ScoreBundle(
        accuracy=accuracy(cm),
        precision=float(precision[included].mean()),
        recall=float(recall[included].mean()),
        macro_f1=float(f1[included].mean()),
        weighted_f1=weighted_f1(cm),
    )


def score_model(model: ModelWeights, arch: ModelArch, ws: WindowSet) -> ScoreBundle:
    if len(ws) == 0:
        raise ValueError("empty test set")
    preds = nn.evaluate(model, arch, ws.windows)
    return score_bundle(confusion(ws.labels, preds, arch.classes))


def evaluate_global(server: ModelWeights, arch: ModelArch,
                    global_test: WindowSet) -> ScoreBundle:
    """Server model scored on the pooled test set of all clients."""
    return score_model(server, arch, global_test)


def _spread(scores: list[float]) -> tuple[float, float]:
    arr = np.asarray(scores, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def evaluate_personalization(entries, arch: ModelArch):
    """Each (model, own test set) pair scored by macro F1.

    Returns (mean, population std, per-entry scores).
    """
    scores = [score_model(model, arch, test).macro_f1 for model, test in entries]
    if not scores:
        raise ValueError("no clients to evaluate")
    mean, std = _spread(scores)
    return mean, std, scores


def evaluate_generalization(best_models, arch: ModelArch,
                            global_test: WindowSet):
    """Best-personalization snapshots scored on the global test set.

    None entries (clients never evaluated) are excluded with a warning.
    Returns (mean, population std, per-entry scores aligned with the input,
    None where excluded).
    """
    scores: list[float | None] = []
    for model in best_models:
        if model is None:
            warnings.warn("client never evaluated; excluded from generalization")
            scores.append(None)
        else:
            scores.append(score_model(model, arch, global_test).macro_f1)
    present = [s for s in scores if s is not None]
    if not present:
        raise ValueError("no evaluated clients")
    mean, std = _spread(present)
    return mean, std, scores


@dataclass(frozen=True)
class RoundReport:
    """One evaluated communication round, flattened for the CSV stream."""

    round: int
    algorithm: str
    global_f1: float | None
    pers_mean: float | None
    pers_std: float | None
    gen_mean: float | None
    gen_std: float | None
    params: int
    bytes_up: int
    bytes_down: int
    units_added: int
    shape_signature: tuple[int, ...] = ()
    global_scores: ScoreBundle | None = None
    per_client_personalization: dict[int, float] | None = None
    per_client_generalization: dict[int, float] | None = None
    sub_rounds: int = 0

    def csv_row(self) -> list[str]:
        def fmt(v) -> str:
            if v is None:
                return ""
            if isinstance(v, float):
                return repr(v)
            return str(v)

        return [fmt(getattr(self, col)) for col in CSV_COLUMNS]

    def record(self) -> dict:
        """Structured per-round record for the JSONL stream."""
        rec = {
            "round": self.round,
            "algorithm": self.algorithm,
            "global_f1": self.global_f1,
            "pers_mean": self.pers_mean,
            "pers_std": self.pers_std,
            "gen_mean": self.gen_mean,
            "gen_std": self.gen_std,
            "params": self.params,
            "bytes_up": self.bytes_up,
            "bytes_down": self.bytes_down,
            "units_added": self.units_added,
            "sub_rounds": self.sub_rounds,
            "shape_signature": list(self.shape_signature),
            "per_client_personalization": _str_keys(self.per_client_personalization),
            "per_client_generalization": _str_keys(self.per_client_generalization),
        }
        if self.global_scores is not None:
            rec["global_scores"] = {
                "accuracy": self.global_scores.accuracy,
                "precision": self.global_scores.precision,
                "recall": self.global_scores.recall,
                "macro_f1": self.global_scores.macro_f1,
                "weighted_f1": self.global_scores.weighted_f1,
            }
        return rec


def _str_keys(d: dict | None) -> dict | None:
    if d is None:
        return None
    return {str(k): v for k, v in d.items()}


def csv_header_line() -> str:
    return ",".join(CSV_COLUMNS)


def report_csv_line(report: RoundReport) -> str:
    return ",".join(report.csv_row())
