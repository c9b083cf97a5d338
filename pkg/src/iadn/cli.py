"""Command-line entry point: ``iadn <command> [flags]``.

Exit codes: 0 success, 1 usage error (usage text on stderr), 2 runtime or
data error. All randomness comes from ``--seed`` (default 0).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, IADNError, UsageError

log = logging.getLogger("iadn")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
GRADCHECK_TOLERANCE = 1e-4
CONFIG_SECTIONS = ("network", "train", "generator", "detect")


class _UsageFailure(Exception):
    def __init__(self, message, parser):
        super().__init__(message)
        self.parser = parser


class _Parser(argparse.ArgumentParser):
    """ArgumentParser that raises instead of exiting, so exit codes stay ours."""

    def error(self, message):
        raise _UsageFailure(message, self)


# ---------------------------------------------------------------------------
# config handling
# ---------------------------------------------------------------------------


def load_config_file(path) -> dict:
    """JSON object with optional "network", "train", "generator", "detect" sections."""
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path}: top level must be an object")
    unknown = set(data) - set(CONFIG_SECTIONS)
    if unknown:
        raise ConfigError(f"config file {path}: unknown sections {sorted(unknown)}")
    return data


def _section(args, name) -> dict:
    if args.config is None:
        return {}
    return dict(load_config_file(args.config).get(name, {}))


def _override(base: dict, **flags) -> dict:
    out = dict(base)
    out.update({k: v for k, v in flags.items() if v is not None})
    return out


def _dataclass_from(cls, fields: dict, section: str):
    unknown = set(fields) - set(cls.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown {section} config keys: {sorted(unknown)}")
    return cls(**fields)


def _network_config(args):
    from .netgraph import NetworkConfig, parse_variant

    fields = _section(args, "network")
    if args.variant is not None:
        head, seg = parse_variant(args.variant)
        fields.update(head_variant=head, seg_variant=seg)
    return NetworkConfig.from_dict(fields)


# ---------------------------------------------------------------------------
# report emission
# ---------------------------------------------------------------------------

REPORT_NAME = "report.csv"
PLOT_NAME = "mr_fppi.svg"


def _fmt(x) -> str:
    return repr(float(x))


def emit_report(report, out_dir) -> list[Path]:
    """Write the summary CSV, one curve CSV per subset and an SVG plot.

    Output bytes depend only on the report contents.
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IADNError(f"cannot create report directory {out_dir}: {exc}") from exc
    written = []
    path = out_dir / REPORT_NAME
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subset", "fppi", "miss_rate"])
        for name, c in report.curves.items():
            for f, m in zip(c.fppi_points, c.miss_rates):
                w.writerow([name, _fmt(f), _fmt(m)])
        w.writerow([])
        w.writerow(["subset", "log_avg_mr"])
        for name, c in report.curves.items():
            w.writerow([name, _fmt(c.log_avg_mr)])
    written.append(path)
    for name, c in report.curves.items():
        path = out_dir / f"curve_{name}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["fppi", "miss_rate", "tp", "fp", "fn"])
            for row in zip(c.fppi_points, c.miss_rates, c.tp, c.fp, c.fn):
                w.writerow([_fmt(row[0]), _fmt(row[1]), *(int(v) for v in row[2:])])
        written.append(path)
    curves = {name: (c.fppi_points, c.miss_rates, c.log_avg_mr) for name, c in report.curves.items()}
    written.append(plot_curves(curves, out_dir / PLOT_NAME))
    return written


def read_report(path) -> dict[str, tuple[np.ndarray, np.ndarray, float]]:
    """Parse a summary CSV written by :func:`emit_report`."""
    from .errors import DataError

    points: dict[str, list[tuple[float, float]]] = {}
    summary: dict[str, float] = {}
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"cannot read report {path}: {exc}") from exc
    section = None
    try:
        for row in rows:
            if not row:
                continue
            if row == ["subset", "fppi", "miss_rate"]:
                section = "curve"
            elif row == ["subset", "log_avg_mr"]:
                section = "summary"
            elif section == "curve":
                points.setdefault(row[0], []).append((float(row[1]), float(row[2])))
            elif section == "summary":
                summary[row[0]] = float(row[1])
            else:
                raise ValueError(f"unexpected row {row}")
    except (ValueError, IndexError) as exc:
        raise DataError(f"{path}: malformed report ({exc})") from exc
    if not points or set(points) != set(summary):
        raise DataError(f"{path}: report needs matching curve and summary sections")
    return {k: (np.array([p[0] for p in v]), np.array([p[1] for p in v]), summary[k]) for k, v in points.items()}


def plot_curves(curves, path) -> Path:
    """Miss rate vs FPPI on log-log axes, log-average MR in the legend."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(path)
    with matplotlib.rc_context({"svg.hashsalt": "iadn", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(5, 4))
        for name, (fppi, mr, lamr) in curves.items():
            ax.step(fppi, np.maximum(mr, 1e-4), where="post", label=f"{name} ({100 * lamr:.2f}% MR)")
        ax.set_xscale("log")
        ax.set_yscale("log")
        ax.set_xlim(1e-2, 1e0)
        ax.set_ylim(1e-2, 1.05)
        ax.set_xlabel("false positives per image")
        ax.set_ylabel("miss rate")
        ax.grid(True, which="both", alpha=0.3)
        ax.legend(loc="lower left")
        fig.tight_layout()
        try:
            fig.savefig(path, format="svg", metadata={"Date": None})
        except OSError as exc:
            raise IADNError(f"cannot write plot {path}: {exc}") from exc
        finally:
            plt.close(fig)
    return path


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _require_dir(path, what):
    if not Path(path).is_dir():
        raise UsageError(f"{what} directory {path} does not exist")


def _require_file(path, what):
    if not Path(path).is_file():
        raise UsageError(f"{what} file {path} does not exist")


def cmd_gen_data(args) -> int:
    from .dataio import GeneratorParams, generate_synthetic_dataset, save_dataset

    fields = _override(
        _section(args, "generator"),
        n_frames=args.frames,
        day_fraction=args.day_fraction,
        height=args.height,
        width=args.width,
    )
    params = _dataclass_from(GeneratorParams, fields, "generator")
    params.validate()
    frames = generate_synthetic_dataset(params, seed=args.seed)
    save_dataset(frames, args.out)
    n_day = sum(f.is_day for f in frames)
    print(f"wrote {len(frames)} frames ({n_day} day, {len(frames) - n_day} night) to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .dataio import load_dataset
    from .netgraph import build_network
    from .training import TrainConfig, train

    net_cfg = _network_config(args)
    fields = _override(
        _section(args, "train"),
        iterations=args.iterations,
        lr=args.lr,
        normalization=args.normalization,
        checkpoint_every=args.checkpoint_every,
    )
    fields["seed"] = args.seed
    train_cfg = TrainConfig.from_dict(fields)
    _require_dir(args.data, "dataset")

    dataset = load_dataset(args.data)
    net = build_network(net_cfg, seed=args.seed)
    net, history = train(dataset, net, train_cfg, run_dir=args.out)
    last = history[-1] if history else None
    if last is not None:
        print(f"trained {net_cfg.variant} for {len(history)} iterations; final loss {last.total:.4f}")
    print(f"run directory: {args.out}")
    return EXIT_OK


def _detect_config(args):
    from .evaluation import DetectConfig

    fields = _override(
        _section(args, "detect"),
        score_threshold=args.score_threshold,
        nms_iou=args.nms_iou,
        max_detections=args.max_detections,
    )
    cfg = _dataclass_from(DetectConfig, fields, "detect")
    if not 0.0 <= cfg.nms_iou <= 1.0:
        raise ConfigError("nms_iou must lie in [0, 1]")
    if cfg.max_detections < 1:
        raise ConfigError("max_detections must be >= 1")
    return cfg


def cmd_detect(args) -> int:
    from .dataio import load_dataset
    from .evaluation import detect, write_detections
    from .netgraph import load_checkpoint

    det_cfg = _detect_config(args)
    _require_dir(args.data, "dataset")
    _require_file(args.checkpoint, "checkpoint")
    net = load_checkpoint(args.checkpoint)
    dets = detect(net, load_dataset(args.data), det_cfg)
    write_detections(dets, args.out)
    print(f"wrote {sum(len(v) for v in dets.values())} detections for {len(dets)} frames to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .dataio import load_dataset
    from .evaluation import Setting, detect, evaluate_detections, read_detections
    from .netgraph import load_checkpoint

    if (args.checkpoint is None) == (args.detections is None):
        raise UsageError("eval needs exactly one of --checkpoint or --detections")
    det_cfg = _detect_config(args)
    _require_dir(args.data, "dataset")
    _require_file(args.checkpoint or args.detections, "checkpoint" if args.checkpoint else "detections")

    dataset = load_dataset(args.data)
    if args.checkpoint:
        dets = detect(load_checkpoint(args.checkpoint), dataset, det_cfg)
    else:
        dets = read_detections(args.detections)
    setting = Setting.reasonable(dataset[0].size[0]) if dataset else None
    report = evaluate_detections(dets, dataset, setting)
    emit_report(report, args.out)
    for name, value in report.summary().items():
        print(f"{name:>5}: log-average miss rate {100 * value:6.2f}%  ({report.frame_counts[name]} frames)")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .training import TrainConfig, gradcheck_loss

    net_cfg = _network_config(args)
    if args.eps <= 0:
        raise UsageError("--eps must be positive")
    if args.max_coords < 1:
        raise UsageError("--max-coords must be >= 1")
    train_cfg = TrainConfig.from_dict(_section(args, "train"))
    err = gradcheck_loss(net_cfg, seed=args.seed, eps=args.eps, max_coords=args.max_coords, config=train_cfg)
    ok = err < GRADCHECK_TOLERANCE
    print(f"{net_cfg.variant}: max relative error {err:.3e} ({'ok' if ok else 'FAILED'}, tolerance {GRADCHECK_TOLERANCE:g})")
    return EXIT_OK if ok else EXIT_RUNTIME


def cmd_plot(args) -> int:
    _require_file(args.report, "report")
    plot_curves(read_report(args.report), args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="iadn", description="Illumination-aware multispectral pedestrian detection toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def common(p, variant=False):
        p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
        p.add_argument("--config", type=Path, help="JSON config file; flags override its values")
        if variant:
            p.add_argument("--variant", help="architecture, e.g. TDNN, IATDNN, IATDNN+IAMSS-F")

    def detect_flags(p):
        p.add_argument("--score-threshold", type=float)
        p.add_argument("--nms-iou", type=float)
        p.add_argument("--max-detections", type=int)

    p = sub.add_parser("gen-data", help="generate a synthetic multispectral dataset")
    common(p)
    p.add_argument("--out", type=Path, required=True, help="output dataset directory")
    p.add_argument("--frames", type=int)
    p.add_argument("--day-fraction", type=float)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a detector")
    common(p, variant=True)
    p.add_argument("--data", type=Path, required=True, help="dataset directory")
    p.add_argument("--out", type=Path, required=True, help="run directory")
    p.add_argument("--iterations", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--normalization", choices=("mean", "sums"))
    p.add_argument("--checkpoint-every", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", help="run a checkpoint over a dataset and write detections")
    common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="detections CSV")
    detect_flags(p)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval", help="evaluate a checkpoint or a detections file")
    common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--detections", type=Path)
    p.add_argument("--out", type=Path, required=True, help="report directory")
    detect_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full training loss")
    common(p, variant=True)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--max-coords", type=int, default=200)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("plot", help="redraw the miss-rate plot from a report CSV")
    common(p)
    p.add_argument("--report", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="output SVG")
    p.set_defaults(func=cmd_plot)
    return parser


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise _UsageFailure("a command is required", parser)
    except _UsageFailure as exc:
        exc.parser.print_usage(sys.stderr)
        print(f"{exc.parser.prog}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        parser.print_usage(sys.stderr)
        print(f"iadn {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (IADNError, OSError) as exc:
        print(f"iadn {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(dispatch())
