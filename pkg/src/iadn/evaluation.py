"""Detection matching with ignore regions and log-average miss rate.

The protocol follows the usual pedestrian benchmark convention:
detections are matched greedily by score at IoU >= 0.5, boxes matched to
ignore regions count neither as true nor as false positives, and the
summary is the geometric mean of miss rates sampled at nine FPPI values
spaced evenly in log space over [1e-2, 1e0].
"""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .boxes import Detection, iou, iou_matrix, nms, sort_by_score  # noqa: F401  (re-exported)
from .errors import DataError, EvaluationError

MATCH_IOU = 0.5
FPPI_POINTS = 10.0 ** (-2.0 + 0.25 * np.arange(9))
MR_FLOOR = 1e-4
REFERENCE_HEIGHT = 512.0
REASONABLE_HEIGHT = 55.0

TP, FP, IGNORED = "TP", "FP", "ignored"
MATCHED, MISSED = "matched", "missed"


@dataclass(frozen=True)
class Setting:
    """Annotations below ``min_height`` px or ``min_visibility`` become ignore regions."""

    min_height: float = REASONABLE_HEIGHT
    min_visibility: float = 0.5

    @classmethod
    def reasonable(cls, image_height: float) -> "Setting":
        """The reasonable filter rescaled from 512-pixel-high frames."""
        return cls(REASONABLE_HEIGHT * image_height / REFERENCE_HEIGHT, 0.5)

    def ignores(self, annotation) -> bool:
        return (
            annotation.ignore
            or annotation.box[3] < self.min_height
            or annotation.visibility < self.min_visibility
        )


@dataclass
class FrameMatch:
    scores: list[float]  # detections in descending score order
    outcomes: list[str]  # TP / FP / ignored, aligned with scores
    gt_outcomes: list[str]  # matched / missed / ignored, in annotation order

    @property
    def n_gt(self) -> int:
        return sum(o != IGNORED for o in self.gt_outcomes)

    def count(self, outcome: str) -> int:
        return sum(o == outcome for o in self.outcomes)


def match_frame(dets: Sequence[Detection], annotations, setting: Setting) -> FrameMatch:
    ordered = sort_by_score(dets)
    ignore = np.array([setting.ignores(a) for a in annotations], dtype=bool)
    gt_boxes = [a.box for a in annotations]
    ious = iou_matrix([d.box for d in ordered], gt_boxes) if ordered and annotations else None
    matched = np.zeros(len(annotations), dtype=bool)
    outcomes = []
    for k in range(len(ordered)):
        outcome = FP
        if ious is not None:
            row = ious[k]
            open_gt = np.flatnonzero(~ignore & ~matched)
            if open_gt.size:
                best = open_gt[np.argmax(row[open_gt])]
                if row[best] >= MATCH_IOU:
                    matched[best] = True
                    outcome = TP
            if outcome == FP and ignore.any() and row[ignore].max() >= MATCH_IOU:
                outcome = IGNORED
        outcomes.append(outcome)
    gt_outcomes = [IGNORED if ig else (MATCHED if m else MISSED) for ig, m in zip(ignore, matched)]
    return FrameMatch([d.score for d in ordered], outcomes, gt_outcomes)


@dataclass
class EvalCurve:
    fppi_points: np.ndarray
    miss_rates: np.ndarray
    log_avg_mr: float
    tp: np.ndarray  # counts at the operating point chosen for each reference FPPI
    fp: np.ndarray
    fn: np.ndarray
    n_frames: int
    n_gt: int


def log_average(miss_rates) -> float:
    """Geometric mean of miss rates floored at 1e-4; exactly 0 for a flawless curve."""
    mr = np.asarray(miss_rates, dtype=np.float64)
    if np.all(mr == 0.0):
        return 0.0
    return float(np.exp(np.mean(np.log(np.maximum(mr, MR_FLOOR)))))


def operating_points(matches: Sequence[FrameMatch]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Cumulative (thresholds, TP, FP) after every distinct score, plus the empty point.

    Index 0 is the "no detections" point with threshold +inf.
    """
    scores, tps, fps = [], [], []
    for m in matches:
        for s, o in zip(m.scores, m.outcomes):
            if o == IGNORED:
                continue
            scores.append(s)
            tps.append(o == TP)
            fps.append(o == FP)
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    scores = scores[order]
    ctp = np.cumsum(np.asarray(tps, dtype=np.int64)[order])
    cfp = np.cumsum(np.asarray(fps, dtype=np.int64)[order])
    # last index of each run of equal scores
    ends = np.flatnonzero(np.append(scores[1:] != scores[:-1], True)) if scores.size else np.empty(0, int)
    thresholds = np.concatenate([[np.inf], scores[ends]])
    return thresholds, np.concatenate([[0], ctp[ends]]), np.concatenate([[0], cfp[ends]])


def mr_curve(matches: Sequence[FrameMatch]) -> EvalCurve:
    n_frames = len(matches)
    if n_frames == 0:
        raise EvaluationError("miss-rate curve needs at least one frame")
    n_gt = sum(m.n_gt for m in matches)
    if n_gt == 0:
        raise EvaluationError("miss-rate curve needs at least one non-ignored ground truth")
    _, tp, fp = operating_points(matches)
    fppi = fp / n_frames
    mr = 1.0 - tp / n_gt
    miss, ctp, cfp = [], [], []
    for ref in FPPI_POINTS:
        # fppi is non-decreasing, so the last admissible point has the lowest miss rate
        k = int(np.searchsorted(fppi, ref, side="right")) - 1
        miss.append(mr[k])
        ctp.append(tp[k])
        cfp.append(fp[k])
    miss = np.asarray(miss)
    ctp = np.asarray(ctp)
    return EvalCurve(
        fppi_points=FPPI_POINTS.copy(),
        miss_rates=miss,
        log_avg_mr=log_average(miss),
        tp=ctp,
        fp=np.asarray(cfp),
        fn=n_gt - ctp,
        n_frames=n_frames,
        n_gt=n_gt,
    )


SUBSETS = ("all", "day", "night")


@dataclass
class EvalReport:
    curves: dict[str, EvalCurve]
    frame_counts: dict[str, int] = field(default_factory=dict)

    def summary(self) -> dict[str, float]:
        return {k: c.log_avg_mr for k, c in self.curves.items()}


def evaluate_detections(detections: dict[str, list[Detection]], dataset, setting: Setting | None = None) -> EvalReport:
    """Score precomputed detections (keyed by frame id) against a dataset."""
    if not dataset:
        raise EvaluationError("evaluation needs at least one frame")
    setting = setting or Setting.reasonable(dataset[0].size[0])
    groups: dict[str, list[FrameMatch]] = defaultdict(list)
    for frame in dataset:
        m = match_frame(detections.get(frame.id, []), frame.annotations, setting)
        groups["all"].append(m)
        groups[frame.illumination].append(m)
    curves = {name: mr_curve(groups[name]) for name in SUBSETS if groups[name]}
    counts = {name: len(groups[name]) for name in SUBSETS}
    return EvalReport(curves, counts)


@dataclass(frozen=True)
class DetectConfig:
    score_threshold: float = 0.01
    # neighbouring anchors fire on the same pedestrian with mutual IoU ~0.3-0.5
    nms_iou: float = 0.3
    max_detections: int = 100


def detect(net, dataset, det_config: DetectConfig | None = None) -> dict[str, list[Detection]]:
    from .netgraph import decode_detections, forward
    from .training import anchors_for

    det_config = det_config or DetectConfig()
    out = {}
    anchors, anchors_size = None, None
    for frame in dataset:
        if anchors_size != frame.size:
            anchors, anchors_size = anchors_for(net, frame.size), frame.size
        raw = forward(net, frame)
        dets = decode_detections(raw, anchors, det_config.score_threshold, det_config.nms_iou)
        out[frame.id] = dets[: det_config.max_detections]
    return out


def evaluate_model(net, dataset, det_config: DetectConfig | None = None, setting: Setting | None = None) -> EvalReport:
    """Run the detector on every frame and build all-day/day/night curves."""
    if not any(f.is_day for f in dataset) or all(f.is_day for f in dataset):
        raise EvaluationError("evaluate_model needs both day and night frames")
    return evaluate_detections(detect(net, dataset, det_config), dataset, setting)


# ---------------------------------------------------------------------------
# detections interchange file
# ---------------------------------------------------------------------------

DETECTION_FIELDS = ("frame_id", "x", "y", "w", "h", "score")


def write_detections(detections: dict[str, list[Detection]], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DETECTION_FIELDS)
        for fid in sorted(detections):
            for d in detections[fid]:
                w.writerow([fid, *(repr(float(v)) for v in d.box), repr(float(d.score))])


def read_detections(path) -> dict[str, list[Detection]]:
    path = Path(path)
    out: dict[str, list[Detection]] = defaultdict(list)
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataError(f"{path}: cannot read detections ({exc})") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != DETECTION_FIELDS:
            raise DataError(f"{path}: expected header {','.join(DETECTION_FIELDS)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                fid, x, y, w, h, s = row
                out[fid].append(Detection((float(x), float(y), float(w), float(h)), float(s)))
            except (ValueError, DataError) as exc:
                raise DataError(f"{path}:{lineno}: bad detection record ({exc})") from exc
    return dict(out)
