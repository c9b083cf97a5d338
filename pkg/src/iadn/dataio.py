"""Synthetic day/night multispectral scenes and their on-disk format.

A dataset directory holds ``index.jsonl`` (a header line, then one record
per frame) and an ``images/`` folder of 8-bit binary PPM (visible) and PGM
(thermal) files. Pixel data lives in memory as uint8 so a save/load round
trip is bit-exact; the float views are ``u8 / 255``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, FormatVersionError

FORMAT_NAME = "iadn-dataset"
FORMAT_VERSION = "v1"
ILLUMINATIONS = ("day", "night")


@dataclass(frozen=True)
class Annotation:
    box: tuple[float, float, float, float]
    ignore: bool = False
    visibility: float = 1.0

    def __post_init__(self):
        if len(self.box) != 4:
            raise DataError(f"annotation box needs 4 values, got {self.box}")
        if not (self.box[2] > 0 and self.box[3] > 0):
            raise DataError(f"annotation box needs w > 0 and h > 0, got {self.box}")
        if not 0.0 <= self.visibility <= 1.0:
            raise DataError(f"visibility must lie in [0, 1], got {self.visibility}")


@dataclass(eq=False)
class MultispectralFrame:
    id: str
    visible_u8: np.ndarray  # (H, W, 3) uint8
    thermal_u8: np.ndarray  # (H, W, 1) uint8
    illumination: str
    annotations: list[Annotation] = field(default_factory=list)

    def __post_init__(self):
        if self.illumination not in ILLUMINATIONS:
            raise DataError(f"frame {self.id}: illumination must be 'day' or 'night', got {self.illumination!r}")
        if self.thermal_u8.ndim == 2:
            self.thermal_u8 = self.thermal_u8[:, :, None]
        if self.visible_u8.shape[:2] != self.thermal_u8.shape[:2]:
            raise DataError(f"frame {self.id}: visible and thermal sizes differ")

    @property
    def visible(self) -> np.ndarray:
        return self.visible_u8.astype(np.float32) / np.float32(255.0)

    @property
    def thermal(self) -> np.ndarray:
        return self.thermal_u8.astype(np.float32) / np.float32(255.0)

    @property
    def size(self) -> tuple[int, int]:
        return self.visible_u8.shape[0], self.visible_u8.shape[1]

    @property
    def is_day(self) -> bool:
        return self.illumination == "day"

    def __eq__(self, other):
        if not isinstance(other, MultispectralFrame):
            return NotImplemented
        return (
            self.id == other.id
            and self.illumination == other.illumination
            and self.annotations == other.annotations
            and np.array_equal(self.visible_u8, other.visible_u8)
            and np.array_equal(self.thermal_u8, other.thermal_u8)
        )


@dataclass(frozen=True)
class GeneratorParams:
    n_frames: int = 200
    height: int = 128
    width: int = 160
    pedestrians: tuple[int, int] = (1, 4)
    day_fraction: float = 0.5
    ignore_rate: float = 0.05
    min_height: float = 20.0
    max_height: float = 60.0
    ignore_below: float = 24.0
    aspect: float = 0.41
    stride: int = 8

    def validate(self):
        if self.n_frames < 2:
            raise ConfigError("n_frames must be >= 2")
        if self.height < 1 or self.width < 1 or self.height % self.stride or self.width % self.stride:
            raise ConfigError(f"image size {self.height}x{self.width} must be divisible by stride {self.stride}")
        lo, hi = self.pedestrians
        if lo < 0 or hi < lo:
            raise ConfigError(f"bad pedestrians-per-frame range {self.pedestrians}")
        if not 0.0 <= self.day_fraction <= 1.0:
            raise ConfigError("day_fraction must lie in [0, 1]")
        if not 0.0 <= self.ignore_rate <= 1.0:
            raise ConfigError("ignore_rate must lie in [0, 1]")
        if not 0 < self.min_height <= self.max_height:
            raise ConfigError("pedestrian height range must satisfy 0 < min <= max")


def _smooth_noise(rng, h, w, cells):
    """Low-frequency texture: bilinear upsampling of a coarse random grid."""
    coarse = rng.random((cells + 1, cells + 1))
    ys = np.linspace(0, cells, h)
    xs = np.linspace(0, cells, w)
    y0 = np.minimum(ys.astype(int), cells - 1)
    x0 = np.minimum(xs.astype(int), cells - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    c00 = coarse[y0][:, x0]
    c01 = coarse[y0][:, x0 + 1]
    c10 = coarse[y0 + 1][:, x0]
    c11 = coarse[y0 + 1][:, x0 + 1]
    return (c00 * (1 - fx) + c01 * fx) * (1 - fy) + (c10 * (1 - fx) + c11 * fx) * fy


def _silhouette(h, w, x, y, bw, bh):
    """Boolean mask of an upright figure: elliptical head over a body block."""
    yy, xx = np.mgrid[0:h, 0:w]
    xx = xx + 0.5
    yy = yy + 0.5
    head_h = 0.2 * bh
    cx = x + 0.5 * bw
    head = ((xx - cx) / (0.32 * bw)) ** 2 + ((yy - (y + 0.5 * head_h)) / (0.5 * head_h)) ** 2 <= 1.0
    body = (xx >= x + 0.05 * bw) & (xx < x + 0.95 * bw) & (yy >= y + head_h * 0.9) & (yy < y + bh)
    return head | body


def _to_u8(img):
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def _render_frame(rng, index, p: GeneratorParams, is_day):
    h, w = p.height, p.width
    n_peds = int(rng.integers(p.pedestrians[0], p.pedestrians[1] + 1))
    if is_day:
        lum = 0.55 + 0.2 * rng.random()
        tex = _smooth_noise(rng, h, w, 6)
        tint = 1.0 + 0.15 * (rng.random(3) - 0.5)
        vis = (lum + 0.25 * (tex[:, :, None] - 0.5)) * tint + 0.05 * rng.standard_normal((h, w, 3))
        thr = 0.45 + 0.15 * (_smooth_noise(rng, h, w, 5) - 0.5) + 0.04 * rng.standard_normal((h, w))
    else:
        lum = 0.06 + 0.06 * rng.random()
        vis = lum + 0.03 * _smooth_noise(rng, h, w, 6)[:, :, None] + 0.03 * rng.standard_normal((h, w, 3))
        thr = 0.2 + 0.12 * (_smooth_noise(rng, h, w, 5) - 0.5) + 0.04 * rng.standard_normal((h, w))

    annotations = []
    for _ in range(n_peds):
        bh = float(rng.uniform(p.min_height, p.max_height))
        bw = p.aspect * bh
        x = float(rng.uniform(-0.6 * bw, w - 0.4 * bw))
        y = float(rng.uniform(0.05 * h, max(0.05 * h, h - 0.75 * bh)))
        mask = _silhouette(h, w, x, y, bw, bh)
        if is_day:
            shade = 0.12 + 0.18 * rng.random()
            vis[mask] = shade * (1.0 + 0.3 * (rng.random(3) - 0.5))
            thr[mask] += 0.06 + 0.04 * rng.random()
        else:
            vis[mask] += 0.02 * rng.random()
            thr[mask] = 0.7 + 0.2 * rng.random() + 0.03 * rng.standard_normal(int(mask.sum()))
        x0, y0 = max(x, 0.0), max(y, 0.0)
        x1, y1 = min(x + bw, float(w)), min(y + bh, float(h))
        visibility = max(0.0, (x1 - x0) * (y1 - y0) / (bw * bh))
        clip_ignore = rng.random() < p.ignore_rate
        if x1 - x0 <= 0 or y1 - y0 <= 0:
            continue
        ignore = bh < p.ignore_below or visibility < 0.5 or clip_ignore
        annotations.append(
            Annotation((x0, y0, x1 - x0, y1 - y0), ignore=bool(ignore), visibility=float(min(visibility, 1.0)))
        )

    if is_day:
        # sun-warmed clutter: figure-sized hot spots with no visible counterpart
        for _ in range(int(rng.integers(0, 3))):
            bh = float(rng.uniform(p.min_height, p.max_height))
            bw = float(rng.uniform(0.3, 1.2)) * bh
            x = float(rng.uniform(0, w - bw))
            y = float(rng.uniform(0, h - bh))
            yy, xx = np.mgrid[0:h, 0:w]
            blob = (xx >= x) & (xx < x + bw) & (yy >= y) & (yy < y + bh)
            thr[blob] = 0.65 + 0.2 * rng.random()
    else:
        # street lights: small bright spots in the visible band only
        for _ in range(int(rng.integers(0, 3))):
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            r = rng.uniform(2, 5)
            yy, xx = np.mgrid[0:h, 0:w]
            vis[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = 0.9

    return MultispectralFrame(
        id=f"f{index:05d}",
        visible_u8=_to_u8(vis),
        thermal_u8=_to_u8(thr)[:, :, None],
        illumination="day" if is_day else "night",
        annotations=annotations,
    )


def generate_synthetic_dataset(params: GeneratorParams | None = None, seed: int = 0, **overrides) -> list[MultispectralFrame]:
    """Deterministic synthetic scenes; each frame has its own spawned stream."""
    params = params or GeneratorParams()
    if overrides:
        params = GeneratorParams(**{**params.__dict__, **overrides})
    params.validate()
    root = np.random.SeedSequence(seed)
    label_rng = np.random.default_rng(root.spawn(1)[0])
    is_day = label_rng.random(params.n_frames) < params.day_fraction
    frame_seeds = np.random.SeedSequence([seed, 1]).spawn(params.n_frames)
    return [
        _render_frame(np.random.default_rng(fs), i, params, bool(d))
        for i, (fs, d) in enumerate(zip(frame_seeds, is_day))
    ]


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def _write_pnm(path: Path, img: np.ndarray):
    h, w, c = img.shape
    magic = b"P6" if c == 3 else b"P5"
    with open(path, "wb") as fh:
        fh.write(magic + f"\n{w} {h}\n255\n".encode())
        fh.write(np.ascontiguousarray(img, dtype=np.uint8).tobytes())


def _read_pnm(path: Path, frame_id: str, channels: int) -> np.ndarray:
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DataError(f"frame {frame_id}: cannot read {path} ({exc})") from exc
    want = b"P6" if channels == 3 else b"P5"
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"frame {frame_id}: truncated image header in {path}")
        tokens.append(blob[start:pos])
    pos += 1  # single whitespace byte after maxval
    if tokens[0] != want:
        raise DataError(f"frame {frame_id}: {path} is not a {want.decode()} image")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise DataError(f"frame {frame_id}: malformed image header in {path}") from exc
    if maxval != 255:
        raise DataError(f"frame {frame_id}: {path} must be 8-bit (maxval 255), got {maxval}")
    need = w * h * channels
    data = blob[pos : pos + need]
    if len(data) != need:
        raise DataError(f"frame {frame_id}: truncated pixel data in {path} ({len(data)} of {need} bytes)")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, channels).copy()


def save_dataset(frames: list[MultispectralFrame], directory) -> None:
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    lines = [json.dumps({"count": len(frames), "format": FORMAT_NAME, "version": FORMAT_VERSION}, sort_keys=True)]
    for f in frames:
        vis_rel = f"images/{f.id}_vis.ppm"
        thr_rel = f"images/{f.id}_thr.pgm"
        _write_pnm(directory / vis_rel, f.visible_u8)
        _write_pnm(directory / thr_rel, f.thermal_u8)
        record = {
            "id": f.id,
            "illumination": f.illumination,
            "visible": vis_rel,
            "thermal": thr_rel,
            "annotations": [
                {"box": list(a.box), "ignore": a.ignore, "visibility": a.visibility} for a in f.annotations
            ],
        }
        lines.append(json.dumps(record, sort_keys=True))
    (directory / "index.jsonl").write_text("\n".join(lines) + "\n")


def load_dataset(directory) -> list[MultispectralFrame]:
    directory = Path(directory)
    index = directory / "index.jsonl"
    try:
        lines = index.read_text().splitlines()
    except OSError as exc:
        raise DataError(f"{index}: cannot read dataset index ({exc})") from exc
    if not lines:
        raise DataError(f"{index}: empty index")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DataError(f"{index}: malformed header line") from exc
    if header.get("format") != FORMAT_NAME:
        raise DataError(f"{index}: not an {FORMAT_NAME} index")
    if header.get("version") != FORMAT_VERSION:
        raise FormatVersionError(f"{index}: unknown dataset version {header.get('version')!r}")
    frames = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            fid = str(rec["id"])
            illum = rec["illumination"]
            anns = [
                Annotation(tuple(float(v) for v in a["box"]), bool(a["ignore"]), float(a["visibility"]))
                for a in rec["annotations"]
            ]
            vis_path, thr_path = rec["visible"], rec["thermal"]
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{index}:{lineno}: malformed frame record ({exc})") from exc
        if illum not in ILLUMINATIONS:
            raise DataError(f"{index}:{lineno}: frame {fid} has unknown illumination {illum!r}")
        vis = _read_pnm(directory / vis_path, fid, 3)
        thr = _read_pnm(directory / thr_path, fid, 1)
        if vis.shape[:2] != thr.shape[:2]:
            raise DataError(f"frame {fid}: visible and thermal sizes differ")
        frames.append(MultispectralFrame(fid, vis, thr, illum, anns))
    if len(frames) != header.get("count", len(frames)):
        raise DataError(f"{index}: header says {header['count']} frames, found {len(frames)}")
    return frames


# ---------------------------------------------------------------------------
# segmentation targets
# ---------------------------------------------------------------------------

EXCLUDED = -1


@dataclass(frozen=True)
class SegTargets:
    """Per-cell labels 1 / 0 / EXCLUDED (-1); every stream shares them."""

    labels: np.ndarray  # (Hf, Wf) int8

    @property
    def shape(self):
        return self.labels.shape


def rasterize_seg_targets(frame: MultispectralFrame, grid_dims: tuple[int, int], stride: int) -> SegTargets:
    """Cell is 1 if its centre lies in a kept box, excluded if only in ignore boxes."""
    hf, wf = grid_dims
    h, w = frame.size
    if hf * stride != h or wf * stride != w:
        raise DataError(f"grid {hf}x{wf} at stride {stride} does not tile a {h}x{w} image")
    cy = ((np.arange(hf) + 0.5) * stride)[:, None]
    cx = ((np.arange(wf) + 0.5) * stride)[None, :]
    pos = np.zeros((hf, wf), dtype=bool)
    ign = np.zeros((hf, wf), dtype=bool)
    for a in frame.annotations:
        x, y, bw, bh = a.box
        inside = (cx >= x) & (cx < x + bw) & (cy >= y) & (cy < y + bh)
        if a.ignore:
            ign |= inside
        else:
            pos |= inside
    labels = np.where(pos, 1, np.where(ign, EXCLUDED, 0)).astype(np.int8)
    return SegTargets(labels)
