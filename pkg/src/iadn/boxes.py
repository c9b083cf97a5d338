"""Box geometry shared by training, decoding and evaluation.

Boxes are ``(x, y, w, h)`` in pixels with a top-left origin. The regression
parameterisation works in centre/size form.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import _kernels
from .errors import DataError

# exp() guard for decoded log-scale deltas, ln(1000/16)
MAX_LOG_SCALE = float(np.log(1000.0 / 16.0))


@dataclass(frozen=True)
class Detection:
    box: tuple[float, float, float, float]
    score: float

    def __post_init__(self):
        if not (self.box[2] > 0 and self.box[3] > 0):
            raise DataError(f"detection box needs positive extent, got {self.box}")


def as_boxes(boxes: Iterable[Sequence[float]]) -> np.ndarray:
    arr = np.asarray(list(boxes) if not isinstance(boxes, np.ndarray) else boxes, dtype=np.float64)
    return arr.reshape(-1, 4)


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    """Intersection over union of two boxes."""
    return float(_kernels.iou_matrix(as_boxes([a]), as_boxes([b]))[0, 0])


def iou_matrix(a, b) -> np.ndarray:
    a, b = as_boxes(a), as_boxes(b)
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    return _kernels.iou_matrix(np.ascontiguousarray(a), np.ascontiguousarray(b))


def sort_by_score(dets: Sequence[Detection]) -> list[Detection]:
    """Descending score; equal scores keep their list order."""
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    return [dets[i] for i in order]


def nms(dets: Sequence[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy non-maximum suppression.

    Keeps the best remaining detection and drops every other one whose IoU
    with it exceeds ``iou_threshold``. Output is sorted by descending score.
    """
    if not 0.0 <= iou_threshold <= 1.0:
        raise DataError(f"nms threshold must lie in [0, 1], got {iou_threshold}")
    ordered = sort_by_score(dets)
    if len(ordered) <= 1:
        return ordered
    keep = _kernels.nms_keep(as_boxes([d.box for d in ordered]), float(iou_threshold))
    return [d for d, k in zip(ordered, keep) if k]


def to_center(boxes: np.ndarray) -> np.ndarray:
    b = as_boxes(boxes)
    return np.stack([b[:, 0] + 0.5 * b[:, 2], b[:, 1] + 0.5 * b[:, 3], b[:, 2], b[:, 3]], axis=1)


def from_center(boxes: np.ndarray) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return np.stack([b[:, 0] - 0.5 * b[:, 2], b[:, 1] - 0.5 * b[:, 3], b[:, 2], b[:, 3]], axis=1)


def encode(anchors: np.ndarray, gts: np.ndarray) -> np.ndarray:
    """Regression targets (tx, ty, tw, th) mapping each anchor onto its box."""
    a, g = as_boxes(anchors), as_boxes(gts)
    if np.any(a[:, 2:] <= 0) or np.any(g[:, 2:] <= 0):
        raise DataError("box encoding needs positive widths and heights")
    ac, gc = to_center(a), to_center(g)
    return np.stack(
        [
            (gc[:, 0] - ac[:, 0]) / ac[:, 2],
            (gc[:, 1] - ac[:, 1]) / ac[:, 3],
            np.log(gc[:, 2] / ac[:, 2]),
            np.log(gc[:, 3] / ac[:, 3]),
        ],
        axis=1,
    )


def decode(anchors: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    """Inverse of :func:`encode`; log-scale deltas are clipped to avoid overflow."""
    ac = to_center(anchors)
    d = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    tw = np.minimum(d[:, 2], MAX_LOG_SCALE)
    th = np.minimum(d[:, 3], MAX_LOG_SCALE)
    centers = np.stack(
        [
            ac[:, 0] + d[:, 0] * ac[:, 2],
            ac[:, 1] + d[:, 1] * ac[:, 3],
            ac[:, 2] * np.exp(tw),
            ac[:, 3] * np.exp(th),
        ],
        axis=1,
    )
    return from_center(centers)
