"""Threshold calibration and precision/recall/F1 reporting.

A pair is predicted similar (the positive class) when its cosine score is at
or above the threshold. Per-attack rows use that attack's similar pairs as
positives and the full dissimilar set as negatives.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from dfacon.data import AttackType, PairRecord
from dfacon.embedder import ProbePoint
from dfacon.errors import ConfigurationError, ValidationError

logger = logging.getLogger(__name__)

NEGATIVE_ALLOCATION_NOTE = (
    "per-attack rows: positives = similar pairs of that attack; negatives = all dissimilar pairs"
)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        # count form of 2PR/(P+R); avoids rounding differences between equal-F1 thresholds
        denom = 2 * self.tp + self.fp + self.fn
        return 2 * self.tp / denom if denom else 0.0

    def to_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn}


def f1_from_pr(precision: float, recall: float) -> float:
    s = precision + recall
    return 2.0 * precision * recall / s if s > 0 else 0.0


def confusion(scores, labels, threshold: float) -> ConfusionCounts:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    pred = scores >= threshold
    return ConfusionCounts(
        tp=int(np.sum(pred & labels)),
        fp=int(np.sum(pred & ~labels)),
        tn=int(np.sum(~pred & ~labels)),
        fn=int(np.sum(~pred & labels)),
    )


@dataclass(frozen=True)
class MetricsRow:
    precision: float
    recall: float
    f1: float
    counts: ConfusionCounts

    @classmethod
    def from_counts(cls, c: ConfusionCounts) -> "MetricsRow":
        return cls(c.precision, c.recall, c.f1, c)

    def to_dict(self) -> dict:
        return {"precision": self.precision, "recall": self.recall, "f1": self.f1, **self.counts.to_dict()}


@dataclass
class MetricsReport:
    precision: float
    recall: float
    f1: float
    counts: ConfusionCounts
    per_attack: dict[AttackType, MetricsRow]
    threshold: float
    probe: ProbePoint
    dim: int | None = None
    scores: np.ndarray | None = field(default=None, repr=False)
    labels: np.ndarray | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "probe": ProbePoint(self.probe).value,
            "dim": self.dim,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            **self.counts.to_dict(),
            "per_attack": {a.value: row.to_dict() for a, row in self.per_attack.items()},
            "negative_allocation": NEGATIVE_ALLOCATION_NOTE,
        }


# -- calibration -----------------------------------------------------------------

def candidate_thresholds(scores) -> np.ndarray:
    """Lowest score, midpoints of consecutive distinct scores, and just above the highest."""
    u = np.unique(np.asarray(scores, dtype=np.float64))
    if u.size == 0:
        raise ValidationError("no scores to calibrate on")
    mids = (u[:-1] + u[1:]) / 2.0
    return np.concatenate([[u[0]], mids, [np.nextafter(u[-1], np.inf)]])


def calibrate_from_scores(scores, labels) -> float:
    """Threshold maximizing F1; the smallest maximizer wins ties."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if labels.all() or not labels.any():
        raise ValidationError("calibration needs both similar and dissimilar pairs")
    cands = candidate_thresholds(scores)
    # counts of positives/negatives with score >= c, via sorted search
    pos = np.sort(scores[labels])
    neg = np.sort(scores[~labels])
    tp = pos.size - np.searchsorted(pos, cands, side="left")
    fp = neg.size - np.searchsorted(neg, cands, side="left")
    fn = pos.size - tp
    denom = 2 * tp + fp + fn
    f1 = np.where(denom > 0, 2 * tp / np.maximum(denom, 1), 0.0)
    return float(cands[int(np.argmax(f1))])


# -- scoring pairs through a model ------------------------------------------------

def score_pairs(pairs: Sequence[PairRecord], model, probe=ProbePoint.ENCODER_OUTPUT,
                batch_size: int = 64) -> np.ndarray:
    """Cosine score of every pair; each distinct image is embedded once."""
    if isinstance(model, str):
        from dfacon.trainer import load_checkpoint

        model = load_checkpoint(model)
    paths = sorted({p for r in pairs for p in (r.original_path, r.candidate_path)})
    pos = {p: i for i, p in enumerate(paths)}
    emb = model.embed_paths(paths, probe, batch_size=batch_size)
    a = emb[[pos[r.original_path] for r in pairs]]
    b = emb[[pos[r.candidate_path] for r in pairs]]
    return np.clip(np.sum(a * b, axis=1), -1.0, 1.0)


def calibrate_threshold(val_pairs: Sequence[PairRecord], model, probe=ProbePoint.ENCODER_OUTPUT) -> float:
    labels = np.array([r.is_similar for r in val_pairs], dtype=bool)
    if labels.size == 0 or labels.all() or not labels.any():
        raise ValidationError("validation set must contain both similar and dissimilar pairs")
    return calibrate_from_scores(score_pairs(val_pairs, model, probe), labels)


def metrics_from_scores(scores, pairs: Sequence[PairRecord], threshold: float,
                        probe=ProbePoint.ENCODER_OUTPUT, dim: int | None = None) -> MetricsReport:
    if len(pairs) == 0:
        raise ValidationError("empty test set")
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.array([r.is_similar for r in pairs], dtype=bool)
    attacks = np.array([r.attack.value for r in pairs])
    overall = confusion(scores, labels, threshold)
    per_attack = {}
    for a in AttackType.forgeries():
        sel = attacks == a.value
        if not sel.any():
            continue
        rows = sel | ~labels
        per_attack[a] = MetricsRow.from_counts(confusion(scores[rows], labels[rows], threshold))
    return MetricsReport(overall.precision, overall.recall, overall.f1, overall, per_attack,
                         float(threshold), ProbePoint(probe), dim, scores, labels)


def evaluate(test_pairs: Sequence[PairRecord], model, probe=ProbePoint.ENCODER_OUTPUT,
             threshold: float | None = None) -> MetricsReport:
    if threshold is None:
        raise ConfigurationError("evaluate needs a threshold; calibrate one on validation pairs first")
    if len(test_pairs) == 0:
        raise ValidationError("empty test set")
    scores = score_pairs(test_pairs, model, probe)
    return metrics_from_scores(scores, test_pairs, threshold, probe, dim=model.dim(probe))


@dataclass
class AblationReport:
    reports: dict[ProbePoint, MetricsReport]
    deltas: dict[str, float]

    def to_dict(self) -> dict:
        return {
            "probes": {p.value: r.to_dict() for p, r in self.reports.items()},
            "delta_encoder_minus_projection": self.deltas,
        }


def ablate_probe(test_pairs: Sequence[PairRecord], model, val_pairs: Sequence[PairRecord] | None = None,
                 probes: Sequence[ProbePoint] = tuple(ProbePoint)) -> AblationReport:
    """Calibrate and evaluate at each probe point on identical pair sets.

    Thresholds are calibrated on ``val_pairs`` when given, otherwise on the
    test pairs themselves.
    """
    calib = val_pairs if val_pairs is not None else test_pairs
    reports = {}
    for probe in map(ProbePoint, probes):
        thr = calibrate_threshold(calib, model, probe)
        reports[probe] = evaluate(test_pairs, model, probe, thr)
        logger.info("probe %s: dim=%d threshold=%.4f f1=%.4f", probe.value, reports[probe].dim, thr,
                    reports[probe].f1)
    deltas = {}
    enc, proj = ProbePoint.ENCODER_OUTPUT, ProbePoint.PROJECTION_OUTPUT
    if enc in reports and proj in reports:
        for key in ("precision", "recall", "f1"):
            deltas[key] = getattr(reports[enc], key) - getattr(reports[proj], key)
    return AblationReport(reports, deltas)


# -- rendering ----------------------------------------------------------------

def format_table(rows: dict[str, MetricsReport | MetricsRow], title: str = "") -> str:
    """Aligned P/R/F table; a ``MetricsReport`` expands into overall plus per-attack lines."""
    lines = []
    if title:
        lines.append(title)
    lines.append(f"{'Attack':<16}{'Model':<24}{'P':>8}{'R':>8}{'F':>8}")
    lines.append("-" * 64)
    for name, rep in rows.items():
        lines.append(f"{'overall':<16}{name:<24}{rep.precision:>8.4f}{rep.recall:>8.4f}{rep.f1:>8.4f}")
        for attack, row in getattr(rep, "per_attack", {}).items():
            lines.append(f"{attack.value:<16}{'':<24}{row.precision:>8.4f}{row.recall:>8.4f}{row.f1:>8.4f}")
    lines.append(f"({NEGATIVE_ALLOCATION_NOTE})")
    return "\n".join(lines)


def report_records(report: MetricsReport, label: str = "") -> list[str]:
    """Line-delimited JSON records: one overall row, one per attack."""
    out = [json.dumps({"row": "overall", "model": label, "threshold": report.threshold,
                       "probe": ProbePoint(report.probe).value, "dim": report.dim,
                       "precision": report.precision, "recall": report.recall, "f1": report.f1,
                       **report.counts.to_dict(), "negative_allocation": NEGATIVE_ALLOCATION_NOTE})]
    for attack, row in report.per_attack.items():
        out.append(json.dumps({"row": attack.value, "model": label, **row.to_dict()}))
    return out
