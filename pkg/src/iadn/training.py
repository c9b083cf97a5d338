"""Anchors, sampling, the multi-task loss and the SGD training loop."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from . import boxes as boxlib
from .dataio import EXCLUDED, MultispectralFrame, SegTargets, rasterize_seg_targets
from .errors import ConfigError, DataError, NumericDomainError, ShapeError, UsageError
from .netgraph import IlluminationWeights, Network, RawOutputs, forward, save_checkpoint
from .numerics import PROB_EPS, Tape, backprop

log = logging.getLogger(__name__)

POSITIVE_IOU = 0.5


# ---------------------------------------------------------------------------
# anchors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AnchorGrid:
    stride: int
    grid: tuple[int, int, int]  # (Hf, Wf, A)
    boxes: np.ndarray  # (Hf*Wf*A, 4) as (x, y, w, h), cell-major then template

    def __len__(self):
        return len(self.boxes)


def generate_anchors(image_h: int, image_w: int, stride: int, anchor_set) -> AnchorGrid:
    if stride < 1 or image_h % stride or image_w % stride:
        raise ShapeError(f"stride {stride} does not divide image size {image_h}x{image_w}")
    hf, wf = image_h // stride, image_w // stride
    templates = np.array([(ratio * h, h) for h, ratio in anchor_set], dtype=np.float64)
    cy, cx = np.meshgrid((np.arange(hf) + 0.5) * stride, (np.arange(wf) + 0.5) * stride, indexing="ij")
    centers = np.stack([cx, cy], axis=-1)[:, :, None, :]  # (Hf, Wf, 1, 2)
    sizes = np.broadcast_to(templates, (hf, wf, len(templates), 2))
    centers = np.broadcast_to(centers, sizes.shape)
    c = np.concatenate([centers, sizes], axis=-1).reshape(-1, 4)
    return AnchorGrid(stride, (hf, wf, len(templates)), boxlib.from_center(c))


@dataclass(frozen=True)
class AnchorAssignment:
    labels: np.ndarray  # (N,) int8: 1 positive, 0 negative, -1 excluded
    matched: np.ndarray  # (N,) index into the annotation list, -1 if none
    targets: np.ndarray  # (N, 4) encoded deltas, zero for non-positives

    @property
    def positives(self):
        return np.flatnonzero(self.labels == 1)

    @property
    def negatives(self):
        return np.flatnonzero(self.labels == 0)


def assign_anchor_labels(grid: AnchorGrid, annotations) -> AnchorAssignment:
    """Positive iff IoU > 0.5 with a kept box; excluded if only near ignore boxes."""
    for a in annotations:
        if not (a.box[2] > 0 and a.box[3] > 0):
            raise DataError(f"degenerate annotation box {a.box}")
    n = len(grid.boxes)
    keep_idx = [i for i, a in enumerate(annotations) if not a.ignore]
    ign_idx = [i for i, a in enumerate(annotations) if a.ignore]
    labels = np.zeros(n, dtype=np.int8)
    matched = np.full(n, -1, dtype=np.int64)
    targets = np.zeros((n, 4))
    pos = np.zeros(n, dtype=bool)
    if keep_idx:
        ious = boxlib.iou_matrix(grid.boxes, [annotations[i].box for i in keep_idx])
        best = ious.argmax(axis=1)
        pos = ious[np.arange(n), best] > POSITIVE_IOU
        matched[pos] = np.asarray(keep_idx)[best[pos]]
        labels[pos] = 1
        if pos.any():
            gts = np.array([annotations[i].box for i in matched[pos]])
            targets[pos] = boxlib.encode(grid.boxes[pos], gts)
    if ign_idx:
        ious = boxlib.iou_matrix(grid.boxes, [annotations[i].box for i in ign_idx])
        labels[(ious.max(axis=1) > POSITIVE_IOU) & ~pos] = EXCLUDED
    return AnchorAssignment(labels, matched, targets)


@dataclass(frozen=True)
class Sample:
    indices: np.ndarray  # flat anchor indices, positives first
    labels: np.ndarray  # 1 / 0 per index
    targets: np.ndarray  # (len(indices), 4); meaningful for positives only

    def __len__(self):
        return len(self.indices)


def sample_minibatch(assignment: AnchorAssignment, n: int, rng: np.random.Generator) -> Sample:
    """Uniform draw without replacement, positives capped at half the batch."""
    if n < 1:
        raise ConfigError("minibatch size must be >= 1")
    pos, neg = assignment.positives, assignment.negatives
    if len(pos) + len(neg) == 0:
        raise DataError("no usable anchors: every anchor is excluded")
    n_pos = min(len(pos), n // 2)
    n_neg = min(len(neg), n - n_pos)
    pick_pos = rng.choice(pos, size=n_pos, replace=False) if n_pos else np.empty(0, dtype=np.int64)
    pick_neg = rng.choice(neg, size=n_neg, replace=False) if n_neg else np.empty(0, dtype=np.int64)
    idx = np.concatenate([pick_pos, pick_neg]).astype(np.int64)
    labels = np.concatenate([np.ones(n_pos), np.zeros(n_neg)])
    return Sample(idx, labels, assignment.targets[idx])


def encode_boxes(anchor, gt) -> tuple[float, float, float, float]:
    """(tx, ty, tw, th) for one anchor/box pair, both ``(x, y, w, h)``."""
    return tuple(float(v) for v in boxlib.encode([anchor], [gt])[0])


def decode_boxes(anchor, deltas) -> tuple[float, float, float, float]:
    return tuple(float(v) for v in boxlib.decode([anchor], [deltas])[0])


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def smooth_l1(x):
    ax = np.abs(x)
    return np.where(ax < 1.0, 0.5 * x * x, ax - 0.5)


def smooth_l1_grad(x):
    return np.where(np.abs(x) < 1.0, x, np.sign(x))


def _bce(p, target):
    """Clamped binary cross-entropy and its derivative w.r.t. ``p``."""
    pc = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    value = -target * np.log(pc) - (1.0 - target) * np.log(1.0 - pc)
    inside = (p > PROB_EPS) & (p < 1.0 - PROB_EPS)
    grad = np.where(inside, -target / pc + (1.0 - target) / (1.0 - pc), 0.0)
    return value, grad


def _scalar(value, inputs, grads, tape):
    out = np.array(value, dtype=np.float64)
    if tape is not None:

        def vjp(g):
            return tuple((g * gx).astype(x.dtype) for x, gx in zip(inputs, grads))

        tape.record(inputs, out, vjp)
    return out


def loss_illumination(weights: IlluminationWeights, label_day: float, tape: Tape | None = None) -> np.ndarray:
    """Two-class cross-entropy of the illumination weights (0-d array)."""
    p = weights.probs.astype(np.float64)
    target = np.array([label_day, 1.0 - label_day])
    pc = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    value = -np.sum(target * np.log(pc))
    grad = np.where((p > PROB_EPS) & (p < 1.0 - PROB_EPS), -target / pc, 0.0)
    return _scalar(value, (weights.probs,), (grad,), tape)


def loss_detection(
    raw: RawOutputs,
    sample: Sample,
    lambda_bb: float = 5.0,
    normalization: str = "mean",
    tape: Tape | None = None,
) -> np.ndarray:
    """Classification BCE over the sample plus weighted smooth-L1 on positives."""
    if len(sample) == 0:
        raise DataError("detection loss needs a non-empty sample")
    scores = raw.cls_fused.reshape(-1).astype(np.float64)
    deltas = raw.bbox_fused.reshape(-1, 4).astype(np.float64)
    if sample.indices.max() >= scores.shape[0]:
        raise ShapeError("sample indices exceed the anchor grid of these outputs")
    cls_val, cls_grad = _bce(scores[sample.indices], sample.labels)
    pos = sample.labels == 1
    pidx = sample.indices[pos]
    resid = deltas[pidx] - sample.targets[pos]
    if normalization == "mean":
        cls_norm = 1.0 / len(sample)
        box_norm = 1.0 / len(pidx) if len(pidx) else 0.0
    elif normalization == "sums":
        cls_norm = box_norm = 1.0
    else:
        raise ConfigError(f"unknown normalization {normalization!r}")
    value = cls_norm * cls_val.sum() + lambda_bb * box_norm * smooth_l1(resid).sum()

    g_scores = np.zeros(scores.shape[0])
    g_scores[sample.indices] = cls_norm * cls_grad
    g_deltas = np.zeros_like(deltas)
    g_deltas[pidx] = lambda_bb * box_norm * smooth_l1_grad(resid)
    return _scalar(
        value,
        (raw.cls_fused, raw.bbox_fused),
        (g_scores.reshape(raw.cls_fused.shape), g_deltas.reshape(raw.bbox_fused.shape)),
        tape,
    )


def loss_segmentation(
    raw: RawOutputs,
    targets: SegTargets,
    normalization: str = "mean",
    tape: Tape | None = None,
) -> np.ndarray:
    """Per-stream BCE over non-excluded cells, summed over streams."""
    if not raw.seg_fused:
        return np.array(0.0)
    valid = targets.labels != EXCLUDED
    t = (targets.labels == 1).astype(np.float64)
    count = int(valid.sum())
    if normalization == "mean":
        norm = 1.0 / count if count else 0.0
    elif normalization == "sums":
        norm = 1.0
    else:
        raise ConfigError(f"unknown normalization {normalization!r}")
    total, grads = 0.0, []
    for s in raw.seg_fused:
        if s.shape[:2] != targets.shape:
            raise ShapeError(f"segmentation map {s.shape[:2]} != target grid {targets.shape}")
        v, g = _bce(s[:, :, 0].astype(np.float64), t)
        total += norm * v[valid].sum()
        grads.append((norm * np.where(valid, g, 0.0))[:, :, None])
    return _scalar(total, tuple(raw.seg_fused), tuple(grads), tape)


@dataclass(frozen=True)
class LossBreakdown:
    L_I: float
    L_D: float
    L_S: float
    total: float


def loss_total(L_D, L_I, L_S, config: "TrainConfig", tape: Tape | None = None) -> tuple[np.ndarray, LossBreakdown]:
    """``L_D + lambda_ia * L_I + lambda_sm * L_S`` and its breakdown."""
    d, i, s = float(L_D), float(L_I), float(L_S)
    if not all(np.isfinite(v) for v in (d, i, s)):
        raise NumericDomainError(f"non-finite loss term (L_D={d}, L_I={i}, L_S={s})")
    total = d + config.lambda_ia * i + config.lambda_sm * s
    parts = [x if isinstance(x, np.ndarray) else None for x in (L_D, L_I, L_S)]
    out = np.array(total)
    if tape is not None:
        coeffs = (1.0, config.lambda_ia, config.lambda_sm)

        def vjp(g):
            return tuple(None if p is None else g * c for p, c in zip(parts, coeffs))

        tape.record(tuple(parts), out, vjp)
    return out, LossBreakdown(L_I=i, L_D=d, L_S=s, total=total)


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    lambda_bb: float = 5.0
    lambda_ia: float = 1.0
    lambda_sm: float = 1.0
    anchors_per_image: int = 120
    lr: float = 0.001
    lr_step: int = 0  # 0 disables step decay
    lr_gamma: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0005
    clip_norm: float = 10.0
    iterations: int = 2000
    seed: int = 0
    normalization: str = "mean"
    checkpoint_every: int = 0

    def __post_init__(self):
        for name in ("lambda_bb", "lambda_ia", "lambda_sm", "lr", "momentum", "weight_decay", "clip_norm"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.anchors_per_image < 1:
            raise ConfigError("anchors_per_image must be >= 1")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.normalization not in ("mean", "sums"):
            raise ConfigError(f"normalization must be 'mean' or 'sums', got {self.normalization!r}")

    def lr_at(self, it: int) -> float:
        if self.lr_step > 0:
            return self.lr * self.lr_gamma ** (it // self.lr_step)
        return self.lr

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def global_norm(grads: dict[str, np.ndarray]) -> float:
    total = 0.0
    for g in grads.values():
        flat = g.reshape(-1)
        total += float(np.dot(flat, flat))
    return float(np.sqrt(total))


def sgd_step(
    net: Network,
    grads: dict[str, np.ndarray],
    state: dict[str, np.ndarray],
    config: TrainConfig,
    lr: float | None = None,
) -> tuple[Network, dict[str, np.ndarray]]:
    """Clip by global norm, add weight decay, momentum update.

    Per parameter: ``v <- momentum * v - lr * (scale * grad + weight_decay * p)``
    then ``p <- p + v``. Parameters and buffers are updated in place.
    """
    missing = set(net.params) - set(grads)
    if missing:
        raise UsageError(f"missing gradients for {sorted(missing)}")
    lr = config.lr if lr is None else lr
    norm = global_norm(grads)
    scale = config.clip_norm / norm if norm > config.clip_norm else 1.0
    for name, p in net.params.items():
        v = state.get(name)
        if v is None:
            v = state[name] = np.zeros_like(p)
        g = np.asarray(grads[name], dtype=p.dtype)
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        cast = p.dtype.type
        _kernels.sgd_update(p, g, v, cast(config.momentum), cast(lr * scale), cast(lr * config.weight_decay))
    return net, state


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class FrameCache:
    """Per-frame anchor assignment and segmentation targets, computed lazily."""

    anchors: AnchorGrid
    stride: int
    _assign: dict = field(default_factory=dict)
    _seg: dict = field(default_factory=dict)

    def assignment(self, frame: MultispectralFrame) -> AnchorAssignment:
        if frame.id not in self._assign:
            self._assign[frame.id] = assign_anchor_labels(self.anchors, frame.annotations)
        return self._assign[frame.id]

    def seg_targets(self, frame: MultispectralFrame) -> SegTargets:
        if frame.id not in self._seg:
            self._seg[frame.id] = rasterize_seg_targets(frame, self.anchors.grid[:2], self.stride)
        return self._seg[frame.id]


def frame_loss(
    net: Network,
    frame: MultispectralFrame,
    sample: Sample,
    seg_targets: SegTargets | None,
    config: TrainConfig,
    tape: Tape | None = None,
) -> tuple[np.ndarray, LossBreakdown]:
    """Forward one frame and evaluate the full multi-task loss."""
    raw = forward(net, frame, tape)
    l_d = loss_detection(raw, sample, config.lambda_bb, config.normalization, tape)
    if raw.weights is not None:
        l_i = loss_illumination(raw.weights, 1.0 if frame.is_day else 0.0, tape)
    else:
        l_i = np.array(0.0)
    if raw.seg_fused:
        l_s = loss_segmentation(raw, seg_targets, config.normalization, tape)
    else:
        l_s = np.array(0.0)
    return loss_total(l_d, l_i, l_s, config, tape)


def anchors_for(net: Network, image_size: tuple[int, int]) -> AnchorGrid:
    return generate_anchors(image_size[0], image_size[1], net.config.stride, net.config.anchor_set)


def train(
    dataset: list[MultispectralFrame],
    net: Network,
    config: TrainConfig,
    run_dir=None,
) -> tuple[Network, list[LossBreakdown]]:
    """Image-centric SGD: one frame and one anchor sample per iteration.

    Returns a trained copy of ``net`` and one breakdown per iteration. When
    ``run_dir`` is given it receives ``config.json``, ``loss.csv``, periodic
    ``checkpoint_<iter>.iadn`` files and ``final.iadn``.
    """
    if not dataset:
        raise DataError("training needs a non-empty dataset")
    net = net.copy()
    rng = np.random.default_rng(config.seed)
    cache = FrameCache(anchors_for(net, dataset[0].size), net.config.stride)
    state: dict[str, np.ndarray] = {}
    history: list[LossBreakdown] = []
    writer = _RunWriter(run_dir, net, config) if run_dir is not None else None
    for it in range(config.iterations):
        frame = dataset[int(rng.integers(len(dataset)))]
        if frame.size != dataset[0].size:
            raise ShapeError(f"frame {frame.id} size {frame.size} differs from {dataset[0].size}")
        sample = sample_minibatch(cache.assignment(frame), config.anchors_per_image, rng)
        seg = cache.seg_targets(frame) if net.config.seg_variant != "NONE" else None
        tape = Tape()
        total, parts = frame_loss(net, frame, sample, seg, config, tape)
        grads = backprop(tape, total, np.ones_like(total), wrt=list(net.params.values())).by_name(net.params)
        sgd_step(net, grads, state, config, config.lr_at(it))
        history.append(parts)
        if writer is not None:
            writer.log(it, parts, net)
        if (it + 1) % 200 == 0:
            log.info("iter %d total %.4f (L_D %.4f L_I %.4f L_S %.4f)", it + 1, parts.total, parts.L_D, parts.L_I, parts.L_S)
    if writer is not None:
        writer.close(net)
    return net, history


class _RunWriter:
    def __init__(self, run_dir, net, config):
        self.dir = Path(run_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.config = config
        snapshot = {"network": net.config.to_dict(), "train": config.to_dict()}
        (self.dir / "config.json").write_text(json.dumps(snapshot, indent=2, sort_keys=True) + "\n")
        self.fh = open(self.dir / "loss.csv", "w", newline="")
        self.csv = csv.writer(self.fh, lineterminator="\n")
        self.csv.writerow(["iter", "L_I", "L_D", "L_S", "total"])

    def log(self, it, parts, net):
        self.csv.writerow([it, repr(parts.L_I), repr(parts.L_D), repr(parts.L_S), repr(parts.total)])
        every = self.config.checkpoint_every
        if every and (it + 1) % every == 0:
            save_checkpoint(net, self.dir / f"checkpoint_{it + 1:06d}.iadn")

    def close(self, net):
        self.fh.close()
        save_checkpoint(net, self.dir / "final.iadn")


# ---------------------------------------------------------------------------
# gradient check of the full multi-task loss
# ---------------------------------------------------------------------------

GRADCHECK_FRAME = dict(height=48, width=64, pedestrians=(2, 3), min_height=24.0, max_height=44.0, ignore_rate=0.0)


def gradcheck_loss(
    net_config,
    seed: int = 0,
    eps: float = 1e-5,
    max_coords: int = 200,
    config: TrainConfig | None = None,
) -> float:
    """Finite-difference check of the total loss at a float64 random init.

    Uses one small synthetic frame (48x64) so that every parameter tensor,
    including the large IFCNN weight, can be probed in seconds. The 8-bit
    images are dithered by sub-quantum noise: flat regions otherwise put
    exact ties into max-pool windows, where the loss is not differentiable
    and central differences average two one-sided slopes. Returns the
    worst relative error over all sampled coordinates.
    """
    from .dataio import generate_synthetic_dataset
    from .numerics import grad_check

    config = config or TrainConfig()
    net = _gradcheck_network(net_config, seed)
    frame = _DitheredFrame.of(generate_synthetic_dataset(n_frames=2, seed=seed, **GRADCHECK_FRAME)[0], seed)
    cache = FrameCache(anchors_for(net, frame.size), net.config.stride)
    rng = np.random.default_rng(seed)
    sample = sample_minibatch(cache.assignment(frame), config.anchors_per_image, rng)
    seg = cache.seg_targets(frame) if net.config.seg_variant != "NONE" else None

    def total(*_params, tape=None):
        return frame_loss(net, frame, sample, seg, config, tape)[0]

    return grad_check(total, list(net.params.values()), eps=eps, max_coords=max_coords, rng=rng)


@dataclass(frozen=True)
class _DitheredFrame:
    id: str
    visible: np.ndarray
    thermal: np.ndarray
    is_day: bool
    annotations: tuple
    size: tuple

    @classmethod
    def of(cls, frame: MultispectralFrame, seed: int) -> "_DitheredFrame":
        rng = np.random.default_rng([seed, 7])
        half = 0.5 / 255.0

        def dither(img):
            return img.astype(np.float64) + rng.uniform(-half, half, size=img.shape)

        return cls(frame.id, dither(frame.visible), dither(frame.thermal), frame.is_day, frame.annotations, frame.size)


def _gradcheck_network(net_config, seed):
    from .netgraph import build_network

    return build_network(net_config, seed=seed, dtype=np.float64)
