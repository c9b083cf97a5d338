"""Dense layer algebra with a reverse-mode tape.

Tensors are plain numpy arrays. Feature maps use HWC layout (height, width,
channels) for a single image; there is no batch axis. Convolution weights
are stored as ``(kh, kw, c_in, c_out)`` and fully-connected weights as
``(n_in, n_out)`` so that ``y = x @ W + b``.

Differentiation works by recording a vector-Jacobian product for every
operation on a :class:`Tape`; :func:`backprop` replays them in reverse.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import _kernels
from .errors import NumericDomainError, ShapeError, UsageError

LAYER_KINDS = (
    "conv2d",
    "maxpool2d",
    "fullyconnected",
    "relu",
    "sigmoid",
    "softmax",
    "concat_channels",
    "bilinear_resize",
)

# probability clamp applied before every logarithm in the losses
PROB_EPS = 1e-7


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    out_channels: int | None = None
    size: tuple[int, int] | None = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ShapeError(f"unknown layer kind {self.kind!r}")
        if self.kernel < 1 or self.stride < 1:
            raise ShapeError(f"{self.kind}: kernel and stride must be >= 1")
        if self.padding < 0:
            raise ShapeError(f"{self.kind}: padding must be >= 0")
        if self.kind == "bilinear_resize":
            if self.size is None or len(self.size) != 2 or min(self.size) < 1:
                raise ShapeError("bilinear_resize needs a target size (h, w) with both >= 1")


class _Entry(NamedTuple):
    inputs: tuple
    output: np.ndarray
    vjp: Callable


class Tape:
    """Ordered record of executed operations for one forward/backward pass.

    Not thread-safe: a tape belongs to a single in-flight pass.
    """

    def __init__(self):
        self.entries: list[_Entry] = []
        self._produced: set[int] = set()

    def record(self, inputs: Sequence[np.ndarray | None], output: np.ndarray, vjp: Callable) -> np.ndarray:
        """Register ``output = op(*inputs)`` with its vector-Jacobian product.

        ``vjp(g)`` must return one gradient (or None) per input, each shaped
        like that input.
        """
        self.entries.append(_Entry(tuple(inputs), output, vjp))
        self._produced.add(id(output))
        return output

    def produced(self, array: np.ndarray) -> bool:
        return id(array) in self._produced

    def __len__(self):
        return len(self.entries)


class Gradients:
    """Gradients keyed by array identity.

    Look up with the very array object that entered the graph
    (``grads[param]``), or collect a whole named store with :meth:`by_name`.
    """

    def __init__(self, grads: dict[int, np.ndarray], arrays: dict[int, np.ndarray]):
        self._grads = grads
        self._arrays = arrays

    def __getitem__(self, array: np.ndarray) -> np.ndarray:
        try:
            return self._grads[id(array)]
        except KeyError:
            raise KeyError("array was not reached by this tape") from None

    def __contains__(self, array) -> bool:
        return id(array) in self._grads

    def __len__(self):
        return len(self._grads)

    def by_name(self, named: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        return {
            name: self._grads.get(id(arr), np.zeros_like(arr)) for name, arr in named.items()
        }


def backprop(
    tape: Tape,
    output: np.ndarray,
    seed_gradient: np.ndarray,
    wrt: Sequence[np.ndarray] = (),
) -> Gradients:
    """Gradient of ``sum(seed_gradient * output)`` w.r.t. every leaf of the tape.

    Leaves are arrays that entered some recorded operation without being
    produced by the tape (parameters and graph inputs). Leaves the gradient
    never reaches, and any extra arrays passed in ``wrt``, map to zeros.
    """
    if not tape.produced(output):
        raise UsageError("output was not produced on this tape")
    seed = np.asarray(seed_gradient, dtype=output.dtype)
    if seed.shape != output.shape:
        raise ShapeError(f"seed gradient shape {seed.shape} != output shape {output.shape}")

    adj: dict[int, np.ndarray] = {id(output): seed}
    leaves: dict[int, np.ndarray] = {}
    for entry in reversed(tape.entries):
        for x in entry.inputs:
            if x is not None and not tape.produced(x):
                leaves.setdefault(id(x), x)
        g = adj.pop(id(entry.output), None)
        if g is None:
            continue
        for x, gx in zip(entry.inputs, entry.vjp(g)):
            if x is None or gx is None:
                continue
            key = id(x)
            if key in adj:
                adj[key] = adj[key] + gx
            else:
                adj[key] = gx
    for x in wrt:
        leaves.setdefault(id(x), x)
    grads = {k: adj.get(k, np.zeros_like(arr)) for k, arr in leaves.items()}
    return Gradients(grads, leaves)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


def _check_finite(kind, arrays):
    for a in arrays:
        if not np.isfinite(a).all():
            raise NumericDomainError(f"{kind}: non-finite value in input")


def _expect_ndim(kind, x, ndim):
    if x.ndim != ndim:
        raise ShapeError(f"{kind}: expected a {ndim}-d tensor, got shape {x.shape}")


def _conv2d(spec, x, w, b, tape):
    _expect_ndim("conv2d", x, 3)
    kh, kw, cin, cout = w.shape
    if kh != spec.kernel or kw != spec.kernel:
        raise ShapeError(f"conv2d: weight kernel {kh}x{kw} != spec kernel {spec.kernel}")
    if x.shape[2] != cin:
        raise ShapeError(f"conv2d: input has {x.shape[2]} channels, kernel expects {cin}")
    if spec.out_channels is not None and spec.out_channels != cout:
        raise ShapeError(f"conv2d: weight has {cout} output channels, spec says {spec.out_channels}")
    if b.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {b.shape} != ({cout},)")
    p, s = spec.padding, spec.stride
    xp = np.pad(x, ((p, p), (p, p), (0, 0))) if p else x
    hp, wp = xp.shape[:2]
    if hp < kh or wp < kw:
        raise ShapeError(f"conv2d: padded input {hp}x{wp} smaller than kernel {kh}x{kw}")
    ho, wo = (hp - kh) // s + 1, (wp - kw) // s + 1
    cols = _kernels.im2col(np.ascontiguousarray(xp), kh, kw, s, ho, wo)
    wmat = w.reshape(kh * kw * cin, cout)
    y = (cols @ wmat + b).reshape(ho, wo, cout)
    if tape is not None:

        def vjp(g):
            g2 = g.reshape(ho * wo, cout)
            dw = (cols.T @ g2).reshape(w.shape)
            db = g2.sum(axis=0)
            dxp = _kernels.col2im(np.ascontiguousarray(g2 @ wmat.T), hp, wp, cin, kh, kw, s, ho, wo)
            dx = dxp[p : hp - p, p : wp - p] if p else dxp
            return dx, dw, db

        tape.record((x, w, b), y, vjp)
    return y


def _maxpool2d(spec, x, tape):
    _expect_ndim("maxpool2d", x, 3)
    k, s, p = spec.kernel, spec.stride, spec.padding
    xp = np.pad(x, ((p, p), (p, p), (0, 0)), constant_values=-np.inf) if p else x
    hp, wp = xp.shape[:2]
    if hp < k or wp < k:
        raise ShapeError(f"maxpool2d: input {hp}x{wp} smaller than window {k}")
    ho, wo = (hp - k) // s + 1, (wp - k) // s + 1
    y, arg = _kernels.maxpool_forward(np.ascontiguousarray(xp), k, s, ho, wo)
    if tape is not None:

        def vjp(g):
            dxp = _kernels.maxpool_backward(np.ascontiguousarray(g), arg, hp, wp, k, s)
            return (dxp[p : hp - p, p : wp - p] if p else dxp,)

        tape.record((x,), y, vjp)
    return y


def _fullyconnected(spec, x, w, b, tape):
    flat = x.reshape(-1)
    if w.ndim != 2 or flat.shape[0] != w.shape[0]:
        raise ShapeError(f"fullyconnected: flattened input size {flat.shape[0]} != weight rows {w.shape[0]}")
    if spec.out_channels is not None and spec.out_channels != w.shape[1]:
        raise ShapeError(f"fullyconnected: weight has {w.shape[1]} outputs, spec says {spec.out_channels}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"fullyconnected: bias shape {b.shape} != ({w.shape[1]},)")
    y = flat @ w + b
    if tape is not None:

        def vjp(g):
            return (w @ g).reshape(x.shape), np.outer(flat, g), g

        tape.record((x, w, b), y, vjp)
    return y


def _relu(x, tape):
    mask = x > 0
    y = np.where(mask, x, 0).astype(x.dtype, copy=False)
    if tape is not None:
        tape.record((x,), y, lambda g: (g * mask,))
    return y


def sigmoid_values(x):
    """Numerically stable logistic function (no tape)."""
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _sigmoid(x, tape):
    y = sigmoid_values(x)
    if tape is not None:
        tape.record((x,), y, lambda g: (g * y * (1 - y),))
    return y


def _softmax(x, tape):
    _expect_ndim("softmax", x, 1)
    z = np.exp(x - x.max())
    y = z / z.sum()
    if tape is not None:
        tape.record((x,), y, lambda g: (y * (g - np.dot(g, y)),))
    return y


def _concat_channels(xs, tape):
    if len(xs) < 2:
        raise ShapeError("concat_channels needs at least two inputs")
    for x in xs:
        _expect_ndim("concat_channels", x, 3)
    hw = xs[0].shape[:2]
    if any(x.shape[:2] != hw for x in xs):
        raise ShapeError(f"concat_channels: spatial dims differ: {[x.shape for x in xs]}")
    y = np.concatenate(xs, axis=2)
    if tape is not None:
        bounds = np.cumsum([0] + [x.shape[2] for x in xs])

        def vjp(g):
            return tuple(g[:, :, bounds[i] : bounds[i + 1]] for i in range(len(xs)))

        tape.record(tuple(xs), y, vjp)
    return y


def resize_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Corner-aligned linear interpolation matrix of shape (n_out, n_in).

    Output sample i sits at input coordinate ``i * (n_in - 1) / (n_out - 1)``
    so both grid endpoints map onto each other.
    """
    m = np.zeros((n_out, n_in), dtype=dtype)
    if n_in == 1 or n_out == 1:
        m[:, 0] = 1.0
        return m
    pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    rows = np.arange(n_out)
    m[rows, lo] = 1.0 - frac
    m[rows, lo + 1] += frac
    return m


def _bilinear_resize(spec, x, tape):
    _expect_ndim("bilinear_resize", x, 3)
    h, w, _ = x.shape
    oh, ow = spec.size
    ry = resize_matrix(h, oh, x.dtype)
    rx = resize_matrix(w, ow, x.dtype)
    y = np.einsum("ah,hwc,bw->abc", ry, x, rx, optimize=True)
    if tape is not None:
        tape.record((x,), y, lambda g: (np.einsum("ah,abc,bw->hwc", ry, g, rx, optimize=True),))
    return y


def apply_layer(
    spec: LayerSpec,
    inputs: Sequence[np.ndarray],
    params: Sequence[np.ndarray] = (),
    tape: Tape | None = None,
) -> np.ndarray:
    """Run one layer; record it on ``tape`` when given."""
    inputs = list(inputs)
    params = list(params)
    _check_finite(spec.kind, inputs)
    kind = spec.kind
    if kind == "concat_channels":
        return _concat_channels(inputs, tape)
    if len(inputs) != 1:
        raise ShapeError(f"{kind}: expected one input, got {len(inputs)}")
    x = inputs[0]
    if kind in ("conv2d", "fullyconnected"):
        if len(params) != 2:
            raise ShapeError(f"{kind}: expected [weight, bias] params, got {len(params)}")
        if kind == "conv2d":
            return _conv2d(spec, x, params[0], params[1], tape)
        return _fullyconnected(spec, x, params[0], params[1], tape)
    if kind == "maxpool2d":
        return _maxpool2d(spec, x, tape)
    if kind == "relu":
        return _relu(x, tape)
    if kind == "sigmoid":
        return _sigmoid(x, tape)
    if kind == "softmax":
        return _softmax(x, tape)
    return _bilinear_resize(spec, x, tape)


# ---------------------------------------------------------------------------
# elementwise graph helpers used by the network and the losses
# ---------------------------------------------------------------------------


def gated_sum(gate: np.ndarray, a: np.ndarray, b: np.ndarray, tape: Tape | None = None) -> np.ndarray:
    """``gate[0] * a + gate[1] * b`` with ``gate`` a length-2 weight vector."""
    if a.shape != b.shape:
        raise ShapeError(f"gated sum: shapes differ {a.shape} vs {b.shape}")
    y = gate[0] * a + gate[1] * b
    if tape is not None:

        def vjp(g):
            dgate = np.array([np.sum(g * a), np.sum(g * b)], dtype=gate.dtype)
            return dgate, gate[0] * g, gate[1] * g

        tape.record((gate, a, b), y, vjp)
    return y


def average(a: np.ndarray, b: np.ndarray, tape: Tape | None = None) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeError(f"average: shapes differ {a.shape} vs {b.shape}")
    y = 0.5 * (a + b)
    if tape is not None:
        tape.record((a, b), y, lambda g: (0.5 * g, 0.5 * g))
    return y


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def grad_check(
    fn: Callable[..., np.ndarray],
    point: Sequence[np.ndarray],
    eps: float = 1e-5,
    max_coords: int = 200,
    rng: np.random.Generator | None = None,
) -> float:
    """Worst relative error between tape gradients and central differences.

    ``fn(*point, tape=...)`` must return a scalar (0-d or size-1 array)
    and record itself on the tape when one is passed. Arrays in ``point``
    are perturbed in place and restored afterwards. Tensors larger than
    ``max_coords`` are checked on a random subset of that many coordinates.
    """
    if eps <= 0:
        raise UsageError("eps must be positive")
    rng = rng if rng is not None else np.random.default_rng(0)
    tape = Tape()
    out = fn(*point, tape=tape)
    if np.size(out) != 1:
        raise UsageError(f"grad_check needs a scalar function, got shape {np.shape(out)}")
    grads = backprop(tape, out, np.ones_like(out), wrt=point)

    worst = 0.0
    for x in point:
        g = grads[x].reshape(-1)
        if not x.flags.c_contiguous:
            raise UsageError("grad_check needs C-contiguous point tensors")
        flat = x.reshape(-1)
        if x.size > max_coords:
            coords = rng.choice(x.size, size=max_coords, replace=False)
        else:
            coords = np.arange(x.size)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            fp = float(np.sum(fn(*point)))
            flat[c] = orig - eps
            fm = float(np.sum(fn(*point)))
            flat[c] = orig
            worst = max(worst, relative_error(float(g[c]), (fp - fm) / (2 * eps)))
    return worst
