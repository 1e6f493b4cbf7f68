"""Per-case evaluation rows, study reports and model comparison blocks."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from . import lesion, metrics
from .errors import ConfigError, InvariantViolation
from .stats import wilcoxon_rank_sum
from .volgrid import BinaryMask, ProbabilityVolume

REPORT_METRICS = ("auc", "dice", "recall", "precision", "fp_no_limit", "fp_10mm3")


@dataclass
class CaseMetrics:
    case_id: str
    auc: float
    threshold: float
    dice: float
    precision: float
    recall: float
    tp: int
    fp: int
    fn: int
    tn: int
    fp_no_limit: int
    fp_10mm3: int
    lesions: list = field(default_factory=list)

    def __post_init__(self):
        for name in ("dice", "precision", "recall", "auc"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InvariantViolation(f"{self.case_id}: {name}={v} outside [0, 1]")
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise InvariantViolation(f"{self.case_id}: negative confusion count")


def evaluate_case(case_id: str, prob: ProbabilityVolume, gt: BinaryMask, threshold: float,
                  size_limit_mm3: float = lesion.DEFAULT_SIZE_LIMIT_MM3):
    """Metrics for one case at a fixed threshold; returns ``(CaseMetrics, RocCurve)``."""
    curve = metrics.roc_curve(prob, gt)
    tp, fp, fn, tn = metrics.confusion(prob, gt, threshold)
    if tp + fp + fn + tn != gt.voxels.size:
        raise InvariantViolation(f"{case_id}: confusion counts do not cover the volume")
    pred = BinaryMask((prob.voxels >= threshold).astype(np.uint8), prob.spacing_mm)
    row = CaseMetrics(
        case_id=case_id,
        auc=metrics.auc(curve),
        threshold=float(threshold),
        dice=metrics.dice(tp, fp, fn),
        precision=metrics.precision(tp, fp),
        recall=metrics.recall(tp, fn),
        tp=tp, fp=fp, fn=fn, tn=tn,
        fp_no_limit=lesion.count_false_positives(pred, gt),
        fp_10mm3=lesion.count_false_positives(pred, gt, min_volume_mm3=size_limit_mm3),
        lesions=lesion.lesion_rows(pred, gt, size_limit_mm3),
    )
    return row, curve


def aggregate_rows(rows: Sequence[Mapping]) -> dict:
    out = {}
    for m in REPORT_METRICS:
        vals = [float(r[m]) for r in rows]
        if not vals:
            out[m] = {"mean": None, "std": None, "n": 0}
        elif len(vals) == 1:
            out[m] = {"mean": vals[0], "std": None, "n": 1}
        else:
            mean, std = metrics.aggregate(vals)
            out[m] = {"mean": mean, "std": std, "n": len(vals)}
    return out


def build_report(model: Mapping, threshold: float, threshold_source: Mapping,
                 rows: Sequence[CaseMetrics], skipped: Sequence[Mapping] = ()) -> dict:
    cases = [asdict(r) for r in sorted(rows, key=lambda r: r.case_id)]
    report = {
        "model": dict(model),
        "threshold": float(threshold),
        "threshold_source": dict(threshold_source),
        "cases": cases,
        "aggregate": aggregate_rows(cases),
    }
    if skipped:
        report["skipped"] = list(skipped)
    check_report(report)
    return report


def check_report(report: Mapping) -> None:
    """Aggregates must recompute exactly from the per-case rows."""
    if aggregate_rows(report["cases"]) != report["aggregate"]:
        raise InvariantViolation("report aggregates do not match per-case rows")


def compare_reports(a: Mapping, b: Mapping, metrics_: Sequence[str] = REPORT_METRICS,
                    mode: str = "auto") -> dict:
    """Rank-sum test per metric between two reports over the same cases."""
    ids_a = sorted(c["case_id"] for c in a["cases"])
    ids_b = sorted(c["case_id"] for c in b["cases"])
    if ids_a != ids_b:
        only = sorted(set(ids_a) ^ set(ids_b))
        raise ConfigError(f"reports cover different cases (e.g. {', '.join(only[:5])})")
    by_a = {c["case_id"]: c for c in a["cases"]}
    by_b = {c["case_id"]: c for c in b["cases"]}
    block = {"against": b.get("model", {}), "metrics": {}}
    for m in metrics_:
        for label, rows in (("first", by_a), ("second", by_b)):
            if any(m not in r for r in rows.values()):
                raise ConfigError(f"metric {m!r} missing from the {label} report")
        va = [float(by_a[c][m]) for c in ids_a]
        vb = [float(by_b[c][m]) for c in ids_a]
        res = wilcoxon_rank_sum(va, vb, mode=mode)
        block["metrics"][m] = {
            "u": res.u_statistic,
            "p": res.p_two_sided,
            "mode": res.mode,
            "n1": res.n1,
            "n2": res.n2,
            "z": res.z_score,
            "significant": res.significant,
        }
    return block


def metric_values(report: Mapping, metric: str) -> list[float]:
    return [float(c[metric]) for c in sorted(report["cases"], key=lambda c: c["case_id"])]


def threshold_record(source: str, value: float, detail: Optional[Mapping] = None) -> dict:
    rec = {"source": source, "value": float(value)}
    if detail:
        rec.update(detail)
    return rec
