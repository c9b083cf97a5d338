"""Two-stream detector with illumination-gated heads.

Both image streams run the same stack of conv/relu/pool stages with
independent weights. Their final maps are concatenated into the two-stream
feature map (TSFM), which feeds

* the illumination sub-network: bilinear pool to a fixed grid, three
  fully-connected layers, softmax -> (w_day, w_night);
* a shared 3x3 proposal conv followed by 1x1 score and box-delta convs,
  duplicated into day/night copies and blended by the illumination weights
  under ``IATDNN``;
* an optional segmentation branch in one of four layouts.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import boxes as boxlib
from .boxes import Detection
from .errors import ConfigError, DataError, FormatVersionError, ShapeError
from .numerics import LayerSpec, Tape, apply_layer, gated_sum

HEAD_VARIANTS = ("TDNN", "IATDNN")
SEG_VARIANTS = ("NONE", "MSS_F", "MSS", "IAMSS_F", "IAMSS")
GATED_SEG = ("IAMSS_F", "IAMSS")

CHECKPOINT_MAGIC = b"IADN"
CHECKPOINT_VERSION = 1

_RELU = LayerSpec("relu")
_SIGMOID = LayerSpec("sigmoid")
_SOFTMAX = LayerSpec("softmax")
_POOL = LayerSpec("maxpool2d", kernel=2, stride=2)
_FC = LayerSpec("fullyconnected")
_CONV1 = LayerSpec("conv2d", kernel=1)


@dataclass(frozen=True)
class StageSpec:
    kernel: int = 3
    channels: int = 16
    pool: bool = True


def _default_stages():
    return (StageSpec(3, 16, True), StageSpec(3, 32, True), StageSpec(3, 64, True))


def _default_anchors():
    return tuple((float(h), 0.41) for h in (24, 32, 44, 60))


@dataclass(frozen=True)
class NetworkConfig:
    backbone_stages: tuple[StageSpec, ...] = field(default_factory=_default_stages)
    head_variant: str = "IATDNN"
    seg_variant: str = "IAMSS"
    # (height px, width/height ratio)
    anchor_set: tuple[tuple[float, float], ...] = field(default_factory=_default_anchors)
    ifcnn_pool: tuple[int, int] = (7, 7)
    ifcnn_widths: tuple[int, ...] = (512, 64, 2)
    conv_pro_channels: int = 64
    # "he" stands in for the pretrained backbone; "gaussian" uses N(0, 0.01) everywhere
    backbone_init: str = "he"

    def __post_init__(self):
        seg = self.seg_variant.replace("-", "_").upper()
        object.__setattr__(self, "seg_variant", seg)
        object.__setattr__(self, "head_variant", self.head_variant.upper())
        stages = tuple(s if isinstance(s, StageSpec) else StageSpec(**s) for s in self.backbone_stages)
        object.__setattr__(self, "backbone_stages", stages)
        object.__setattr__(self, "anchor_set", tuple((float(h), float(r)) for h, r in self.anchor_set))
        object.__setattr__(self, "ifcnn_pool", tuple(int(v) for v in self.ifcnn_pool))
        object.__setattr__(self, "ifcnn_widths", tuple(int(v) for v in self.ifcnn_widths))
        self.validate()

    def validate(self):
        if self.head_variant not in HEAD_VARIANTS:
            raise ConfigError(f"head_variant must be one of {HEAD_VARIANTS}, got {self.head_variant!r}")
        if self.seg_variant not in SEG_VARIANTS:
            raise ConfigError(f"seg_variant must be one of {SEG_VARIANTS}, got {self.seg_variant!r}")
        if not self.backbone_stages:
            raise ConfigError("backbone needs at least one stage")
        for st in self.backbone_stages:
            if st.kernel < 1 or st.kernel % 2 == 0:
                raise ConfigError(f"backbone conv kernel must be odd and >= 1, got {st.kernel}")
            if st.channels < 1:
                raise ConfigError("backbone stage channels must be >= 1")
        if not self.anchor_set or any(h <= 0 or r <= 0 for h, r in self.anchor_set):
            raise ConfigError("anchor_set needs at least one (height, ratio) with both > 0")
        if len(self.ifcnn_pool) != 2 or min(self.ifcnn_pool) < 1:
            raise ConfigError("ifcnn pool size must be (h, w) with both >= 1")
        if not self.ifcnn_widths or any(w < 1 for w in self.ifcnn_widths):
            raise ConfigError("ifcnn fc widths must be positive")
        if self.ifcnn_widths[-1] != 2:
            raise ConfigError(
                f"last ifcnn fc width must be 2 (day/night), got {self.ifcnn_widths[-1]}"
            )
        if self.conv_pro_channels < 1:
            raise ConfigError("conv_pro_channels must be >= 1")
        if self.backbone_init not in ("he", "gaussian"):
            raise ConfigError(f"backbone_init must be 'he' or 'gaussian', got {self.backbone_init!r}")

    @property
    def stride(self) -> int:
        return 2 ** sum(1 for s in self.backbone_stages if s.pool)

    @property
    def has_ifcnn(self) -> bool:
        return self.head_variant == "IATDNN" or self.seg_variant in GATED_SEG

    @property
    def n_anchors(self) -> int:
        return len(self.anchor_set)

    @property
    def n_seg_streams(self) -> int:
        return {"NONE": 0, "MSS_F": 1, "IAMSS_F": 1, "MSS": 2, "IAMSS": 2}[self.seg_variant]

    @property
    def variant(self) -> str:
        if self.seg_variant == "NONE":
            return self.head_variant
        return f"{self.head_variant}+{self.seg_variant.replace('_', '-')}"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone_stages"] = [asdict(s) for s in self.backbone_stages]
        d["anchor_set"] = [list(a) for a in self.anchor_set]
        d["ifcnn_pool"] = list(self.ifcnn_pool)
        d["ifcnn_widths"] = list(self.ifcnn_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown network config keys: {sorted(unknown)}")
        return cls(**d)


def parse_variant(name: str) -> tuple[str, str]:
    """``"IATDNN+IAMSS-F"`` -> ``("IATDNN", "IAMSS_F")``."""
    parts = [p.strip() for p in name.strip().split("+")]
    if not all(parts) or len(parts) > 2:
        raise ConfigError(f"bad variant string {name!r}")
    head = parts[0].upper()
    seg = parts[1].replace("-", "_").upper() if len(parts) == 2 else "NONE"
    if head not in HEAD_VARIANTS or seg not in SEG_VARIANTS or (len(parts) == 2 and seg == "NONE"):
        raise ConfigError(f"bad variant string {name!r}")
    return head, seg


def _seg_heads(cfg: NetworkConfig) -> list[tuple[str, int]]:
    """(parameter prefix, input channels) for every segmentation conv."""
    c = cfg.backbone_stages[-1].channels
    return {
        "NONE": [],
        "MSS_F": [("seg", 2 * c)],
        "MSS": [("seg_vis", c), ("seg_thr", c)],
        "IAMSS_F": [("seg_day", 2 * c), ("seg_night", 2 * c)],
        "IAMSS": [("seg_vis_day", c), ("seg_vis_night", c), ("seg_thr_day", c), ("seg_thr_night", c)],
    }[cfg.seg_variant]


def param_shapes(cfg: NetworkConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """Ordered (name, shape, init group) for every parameter of ``cfg``."""
    out = []
    for stream, cin0 in (("vis", 3), ("thr", 1)):
        cin = cin0
        for i, st in enumerate(cfg.backbone_stages, 1):
            out.append((f"{stream}.conv{i}.w", (st.kernel, st.kernel, cin, st.channels), "backbone"))
            out.append((f"{stream}.conv{i}.b", (st.channels,), "bias"))
            cin = st.channels
    tsfm = 2 * cfg.backbone_stages[-1].channels
    if cfg.has_ifcnn:
        n_in = cfg.ifcnn_pool[0] * cfg.ifcnn_pool[1] * tsfm
        for i, width in enumerate(cfg.ifcnn_widths, 1):
            out.append((f"ifcnn.fc{i}.w", (n_in, width), "head"))
            out.append((f"ifcnn.fc{i}.b", (width,), "bias"))
            n_in = width
    cp, a = cfg.conv_pro_channels, cfg.n_anchors
    out.append(("pro.w", (3, 3, tsfm, cp), "head"))
    out.append(("pro.b", (cp,), "bias"))
    if cfg.head_variant == "TDNN":
        heads = [("cls", a), ("bbox", 4 * a)]
    else:
        heads = [("cls_day", a), ("cls_night", a), ("bbox_day", 4 * a), ("bbox_night", 4 * a)]
    for name, cout in heads:
        out.append((f"{name}.w", (1, 1, cp, cout), "head"))
        out.append((f"{name}.b", (cout,), "bias"))
    for name, cin in _seg_heads(cfg):
        out.append((f"{name}.w", (1, 1, cin, 1), "head"))
        out.append((f"{name}.b", (1,), "bias"))
    return out


@dataclass
class Network:
    config: NetworkConfig
    params: dict[str, np.ndarray]

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def copy(self) -> "Network":
        return Network(self.config, {k: v.copy() for k, v in self.params.items()})


def build_network(config: NetworkConfig, seed: int = 0, dtype=np.float32) -> Network:
    """Weights ~ N(0, 0.01), biases zero; backbone convs He-normal by default.

    Draws are made in float64 from ``default_rng(seed)`` in parameter order,
    then cast, so float32 and float64 builds agree up to rounding.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape, group in param_shapes(config):
        if group == "bias":
            arr = np.zeros(shape)
        elif group == "backbone" and config.backbone_init == "he":
            fan_in = shape[0] * shape[1] * shape[2]
            arr = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        else:
            arr = rng.normal(0.0, 0.01, size=shape)
        params[name] = arr.astype(dtype)
    return Network(config, params)


@dataclass(frozen=True)
class IlluminationWeights:
    """Softmax output of the illumination sub-network, ``probs = [w_day, w_night]``."""

    probs: np.ndarray

    @property
    def w_day(self) -> float:
        return float(self.probs[0])

    @property
    def w_night(self) -> float:
        return float(self.probs[1])

    @classmethod
    def from_day(cls, w_day: float, dtype=np.float64) -> "IlluminationWeights":
        return cls(np.array([w_day, 1.0 - w_day], dtype=dtype))


@dataclass
class RawOutputs:
    weights: IlluminationWeights | None
    cls_fused: np.ndarray  # (Hf, Wf, A)
    bbox_fused: np.ndarray  # (Hf, Wf, 4A)
    cls_day: np.ndarray | None = None
    cls_night: np.ndarray | None = None
    bbox_day: np.ndarray | None = None
    bbox_night: np.ndarray | None = None
    seg_fused: list[np.ndarray] = field(default_factory=list)  # one (Hf, Wf, 1) map per stream
    seg_day: list[np.ndarray] | None = None
    seg_night: list[np.ndarray] | None = None

    @property
    def seg_mask(self) -> np.ndarray | None:
        """Single reported mask: the stream mean for two-stream layouts."""
        if not self.seg_fused:
            return None
        if len(self.seg_fused) == 1:
            return self.seg_fused[0]
        return 0.5 * (self.seg_fused[0] + self.seg_fused[1])


def gated_mix(weights: IlluminationWeights, day: np.ndarray, night: np.ndarray, tape: Tape | None = None) -> np.ndarray:
    """Elementwise ``w_day * day + w_night * night``."""
    if day.shape != night.shape:
        raise ShapeError(f"gated_mix: day shape {day.shape} != night shape {night.shape}")
    return gated_sum(weights.probs, day, night, tape)


def _conv(net, name, x, kernel, tape):
    spec = _CONV1 if kernel == 1 else LayerSpec("conv2d", kernel=kernel, padding=kernel // 2)
    return apply_layer(spec, [x], [net.params[name + ".w"], net.params[name + ".b"]], tape)


def _stream(net, prefix, x, tape):
    for i, st in enumerate(net.config.backbone_stages, 1):
        x = _conv(net, f"{prefix}.conv{i}", x, st.kernel, tape)
        x = apply_layer(_RELU, [x], tape=tape)
        if st.pool:
            x = apply_layer(_POOL, [x], tape=tape)
    return x


def _inputs(net, frame):
    visible = np.asarray(frame.visible)
    thermal = np.asarray(frame.thermal)
    if thermal.ndim == 2:
        thermal = thermal[:, :, None]
    if visible.ndim != 3 or visible.shape[2] != 3:
        raise ShapeError(f"visible image must be HxWx3, got {visible.shape}")
    if thermal.shape != visible.shape[:2] + (1,):
        raise ShapeError(f"thermal image must be HxWx1 matching visible, got {thermal.shape}")
    h, w = visible.shape[:2]
    s = net.config.stride
    if h % s or w % s:
        raise ShapeError(f"image size {h}x{w} not divisible by backbone stride {s}")
    dt = net.dtype
    return (visible.astype(dt) - dt.type(0.5)), (thermal.astype(dt) - dt.type(0.5))


def _features(net, frame, tape):
    vis, thr = _inputs(net, frame)
    fv = _stream(net, "vis", vis, tape)
    ft = _stream(net, "thr", thr, tape)
    tsfm = apply_layer(LayerSpec("concat_channels"), [fv, ft], tape=tape)
    return fv, ft, tsfm


def _illumination(net, tsfm, tape):
    cfg = net.config
    x = apply_layer(LayerSpec("bilinear_resize", size=cfg.ifcnn_pool), [tsfm], tape=tape)
    n = len(cfg.ifcnn_widths)
    for i in range(1, n + 1):
        x = apply_layer(_FC, [x], [net.params[f"ifcnn.fc{i}.w"], net.params[f"ifcnn.fc{i}.b"]], tape)
        if i < n:
            x = apply_layer(_RELU, [x], tape=tape)
    return IlluminationWeights(apply_layer(_SOFTMAX, [x], tape=tape))


def predict_illumination(net: Network, frame) -> IlluminationWeights:
    """Backbone + illumination sub-network only."""
    if not net.config.has_ifcnn:
        raise ConfigError(f"variant {net.config.variant} has no illumination sub-network")
    _, _, tsfm = _features(net, frame, None)
    return _illumination(net, tsfm, None)


def forward(net: Network, frame, tape: Tape | None = None) -> RawOutputs:
    cfg = net.config
    fv, ft, tsfm = _features(net, frame, tape)
    weights = _illumination(net, tsfm, tape) if cfg.has_ifcnn else None

    pro = apply_layer(_RELU, [_conv(net, "pro", tsfm, 3, tape)], tape=tape)

    def score(name):
        return apply_layer(_SIGMOID, [_conv(net, name, pro, 1, tape)], tape=tape)

    if cfg.head_variant == "TDNN":
        out = RawOutputs(weights, score("cls"), _conv(net, "bbox", pro, 1, tape))
    else:
        cd, cn = score("cls_day"), score("cls_night")
        bd, bn = _conv(net, "bbox_day", pro, 1, tape), _conv(net, "bbox_night", pro, 1, tape)
        out = RawOutputs(
            weights,
            gated_mix(weights, cd, cn, tape),
            gated_mix(weights, bd, bn, tape),
            cls_day=cd,
            cls_night=cn,
            bbox_day=bd,
            bbox_night=bn,
        )

    def mask(name, x):
        return apply_layer(_SIGMOID, [_conv(net, name, x, 1, tape)], tape=tape)

    seg = cfg.seg_variant
    if seg == "MSS_F":
        out.seg_fused = [mask("seg", tsfm)]
    elif seg == "MSS":
        out.seg_fused = [mask("seg_vis", fv), mask("seg_thr", ft)]
    elif seg == "IAMSS_F":
        d, n = mask("seg_day", tsfm), mask("seg_night", tsfm)
        out.seg_day, out.seg_night = [d], [n]
        out.seg_fused = [gated_mix(weights, d, n, tape)]
    elif seg == "IAMSS":
        out.seg_day = [mask("seg_vis_day", fv), mask("seg_thr_day", ft)]
        out.seg_night = [mask("seg_vis_night", fv), mask("seg_thr_night", ft)]
        out.seg_fused = [gated_mix(weights, d, n, tape) for d, n in zip(out.seg_day, out.seg_night)]
    return out


def decode_detections(
    raw: RawOutputs,
    anchors,
    score_threshold: float = 0.05,
    nms_iou: float = 0.5,
) -> list[Detection]:
    """Fused scores and deltas -> boxes, threshold (strictly above), greedy NMS."""
    scores = np.asarray(raw.cls_fused, dtype=np.float64).reshape(-1)
    deltas = np.asarray(raw.bbox_fused, dtype=np.float64).reshape(-1, 4)
    if scores.shape[0] != len(anchors.boxes) or deltas.shape[0] != len(anchors.boxes):
        raise ShapeError(
            f"raw outputs hold {scores.shape[0]} anchors, anchor grid has {len(anchors.boxes)}"
        )
    sel = np.flatnonzero(scores > score_threshold)
    if sel.size == 0:
        return []
    decoded = boxlib.decode(anchors.boxes[sel], deltas[sel])
    # keep the score strictly inside (0, 1) even when float32 sigmoid saturates
    clipped = np.clip(scores[sel], 1e-7, 1.0 - 1e-7)
    dets = [
        Detection(tuple(float(v) for v in b), float(s))
        for b, s in zip(decoded, clipped)
        if b[2] > 0 and b[3] > 0
    ]
    return boxlib.nms(dets, nms_iou)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(net: Network, path) -> None:
    """``IADN`` + version byte + u32 header length + JSON header + f32 LE data."""
    names = sorted(net.params)
    entries, offset, chunks = [], 0, []
    for name in names:
        arr = np.ascontiguousarray(net.params[name], dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"config": net.config.to_dict(), "params": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + bytes([CHECKPOINT_VERSION]))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for c in chunks:
            fh.write(c)


def load_checkpoint(path, dtype=np.float32) -> Network:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DataError(f"{path}: cannot read checkpoint ({exc})") from exc
    if blob[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint (bad magic)")
    if len(blob) < 9:
        raise DataError(f"{path}: truncated checkpoint header")
    if blob[4] != CHECKPOINT_VERSION:
        raise FormatVersionError(f"{path}: unsupported checkpoint version {blob[4]}")
    (hlen,) = struct.unpack("<I", blob[5:9])
    try:
        header = json.loads(blob[9 : 9 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: malformed checkpoint header ({exc})") from exc
    base = 9 + hlen
    config = NetworkConfig.from_dict(header["config"])
    params = {}
    for e in header["params"]:
        start = base + e["offset"]
        if start + e["nbytes"] > len(blob):
            raise DataError(f"{path}: truncated data for parameter {e['name']}")
        arr = np.frombuffer(blob, dtype="<f4", count=e["nbytes"] // 4, offset=start)
        params[e["name"]] = arr.reshape(e["shape"]).astype(dtype)
    expected = {name: shape for name, shape, _ in param_shapes(config)}
    if set(expected) != set(params):
        raise DataError(f"{path}: parameter names do not match the stored config")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise DataError(f"{path}: parameter {name} has shape {params[name].shape}, expected {shape}")
    return Network(config, {name: params[name] for name, _, _ in param_shapes(config)})
