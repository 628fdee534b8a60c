"""Per-video frame metrics, mean/std aggregation over videos, and segment counts.

Per-class precision/recall/Jaccard are macro-averaged over the classes present
in ``gt`` or ``pred`` of that video. A zero denominator yields 0 (a gt class
that is never predicted has precision 0; a predicted class absent from gt has
recall 0). Ratios and macro means are formed in exact rational arithmetic and
rounded once, so every reported value is the correctly rounded float.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np

from .errors import LabelError, SequenceLengthError, ShapeError

METRIC_NAMES = ("accuracy", "precision", "recall", "f1", "jaccard")


@dataclass(frozen=True)
class VideoMetrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    jaccard: float
    pred_segments: int
    gt_segments: int
    video_id: int = -1


def _validate(pred, gt, C):
    pred = np.asarray(pred, dtype=np.int64)
    gt = np.asarray(gt, dtype=np.int64)
    if pred.shape != gt.shape or pred.ndim != 1:
        raise ShapeError(f"pred {pred.shape} and gt {gt.shape} must be equal-length 1-D")
    if pred.size == 0:
        raise SequenceLengthError("empty label sequence")
    for arr in (pred, gt):
        if arr.min() < 0 or arr.max() >= C:
            raise LabelError(f"labels must lie in [0, {C})")
    return pred, gt


def _ratio(num: int, den: int) -> Fraction:
    return Fraction(num, den) if den else Fraction(0)


def _per_class(tp, fp, fn):
    p = _ratio(tp, tp + fp)
    r = _ratio(tp, tp + fn)
    f1 = 2 * p * r / (p + r) if p + r else Fraction(0)
    return p, r, f1, _ratio(tp, tp + fp + fn)


def _macro(values: list[Fraction]) -> float:
    return float(sum(values) / len(values))


def segment_count(labels) -> int:
    labels = np.asarray(labels)
    if labels.size == 0:
        raise SequenceLengthError("segment_count of an empty sequence")
    return int(np.count_nonzero(labels[1:] != labels[:-1])) + 1


def frame_metrics(pred, gt, C: int, video_id: int = -1) -> VideoMetrics:
    pred, gt = _validate(pred, gt, C)
    conf = np.bincount(gt * C + pred, minlength=C * C).reshape(C, C)
    tp = np.diag(conf)
    fp = conf.sum(axis=0) - tp
    fn = conf.sum(axis=1) - tp
    present = np.flatnonzero(conf.sum(axis=0) + conf.sum(axis=1))
    rows = [_per_class(int(tp[c]), int(fp[c]), int(fn[c])) for c in present]
    return VideoMetrics(
        accuracy=float(Fraction(int(tp.sum()), pred.size)),
        precision=_macro([r[0] for r in rows]),
        recall=_macro([r[1] for r in rows]),
        f1=_macro([r[2] for r in rows]),
        jaccard=_macro([r[3] for r in rows]),
        pred_segments=segment_count(pred),
        gt_segments=segment_count(gt),
        video_id=video_id,
    )


def oracle_metrics(pred, gt, C: int) -> VideoMetrics:
    """Naive O(L*C) enumeration of per-class counts; shares no code with ``frame_metrics``."""
    pred, gt = _validate(pred, gt, C)
    pred, gt = pred.tolist(), gt.tolist()
    L = len(pred)
    correct = 0
    for i in range(L):
        if pred[i] == gt[i]:
            correct += 1
    ps, rs, fs, js = [], [], [], []
    for c in range(C):
        tp = fp = fn = 0
        for i in range(L):
            if pred[i] == c and gt[i] == c:
                tp += 1
            elif pred[i] == c:
                fp += 1
            elif gt[i] == c:
                fn += 1
        if tp + fp + fn == 0:
            continue
        p = Fraction(tp, tp + fp) if tp + fp > 0 else Fraction(0)
        r = Fraction(tp, tp + fn) if tp + fn > 0 else Fraction(0)
        ps.append(p)
        rs.append(r)
        fs.append(2 * p * r / (p + r) if p + r > 0 else Fraction(0))
        js.append(Fraction(tp, tp + fp + fn))
    runs_p = 1 + sum(1 for i in range(1, L) if pred[i] != pred[i - 1])
    runs_g = 1 + sum(1 for i in range(1, L) if gt[i] != gt[i - 1])
    n = len(ps)
    return VideoMetrics(float(Fraction(correct, L)), float(sum(ps) / n), float(sum(rs) / n), float(sum(fs) / n),
                        float(sum(js) / n), runs_p, runs_g)


def oracle_check(pred, gt, C: int) -> bool:
    a = frame_metrics(pred, gt, C)
    b = oracle_metrics(pred, gt, C)
    return all(getattr(a, f) == getattr(b, f) for f in (*METRIC_NAMES, "pred_segments", "gt_segments"))


@dataclass
class MetricsReport:
    per_video: list[VideoMetrics]
    mean: dict[str, float] = field(default_factory=dict)
    std: dict[str, float] = field(default_factory=dict)
    label: str = ""

    def row(self, pct: bool = True) -> dict[str, str]:
        scale = 100.0 if pct else 1.0
        out = {m: f"{self.mean[m] * scale:.2f}±{self.std[m] * scale:.2f}" for m in METRIC_NAMES}
        for m in ("pred_segments", "gt_segments"):
            out[m] = f"{self.mean[m]:.2f}±{self.std[m]:.2f}"
        return out


_AGG_KEYS = (*METRIC_NAMES, "pred_segments", "gt_segments")


def aggregate(records: list[VideoMetrics], label: str = "") -> MetricsReport:
    """Population mean and std over videos."""
    if not records:
        raise SequenceLengthError("aggregate needs at least one video")
    mean, std = {}, {}
    for key in _AGG_KEYS:
        vals = np.array([getattr(r, key) for r in records], dtype=np.float64)
        mean[key] = float(vals.mean())
        std[key] = float(vals.std())
    return MetricsReport(list(records), mean, std, label)


def evaluate_predictions(preds: dict[int, np.ndarray], gts: dict[int, np.ndarray], C: int,
                         label: str = "") -> MetricsReport:
    missing = sorted(set(gts) - set(preds))
    if missing:
        raise ShapeError(f"no predictions for videos {missing}")
    return aggregate([frame_metrics(preds[v], gts[v], C, v) for v in sorted(gts)], label)


def format_report(report: MetricsReport) -> str:
    """Fixed-schema text: per-video table, aggregate row, then a ``key=value`` block.

    Frame metrics are printed in percent with two decimals; segment counts are raw.
    """
    cols = ["video", *METRIC_NAMES, "pred_segments", "gt_segments"]
    lines = [f"# report {report.label}".rstrip(), "\t".join(cols)]
    for r in report.per_video:
        vals = [f"{getattr(r, m) * 100:.2f}" for m in METRIC_NAMES]
        lines.append("\t".join([str(r.video_id), *vals, str(r.pred_segments), str(r.gt_segments)]))
    row = report.row()
    lines.append("\t".join(["mean±std", *(row[c] for c in cols[1:])]))
    lines.append("[values]")
    lines.append(f"n_videos={len(report.per_video)}")
    for key in _AGG_KEYS:
        lines.append(f"{key}.mean={report.mean[key]!r}")
        lines.append(f"{key}.std={report.std[key]!r}")
    return "\n".join(lines) + "\n"


def parse_report_values(text: str) -> dict[str, float]:
    """Read back the machine-readable block of ``format_report`` output."""
    out: dict[str, float] = {}
    in_block = False
    for line in text.splitlines():
        if line.strip() == "[values]":
            in_block = True
            continue
        if in_block and "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = float(v)
    return out


def report_to_dict(report: MetricsReport) -> dict:
    return {
        "label": report.label,
        "mean": dict(report.mean),
        "std": dict(report.std),
        "per_video": [asdict(r) for r in report.per_video],
    }
