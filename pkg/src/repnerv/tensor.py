"""Dense tensor values and a taped reverse-mode differentiation engine.

Feature maps are rank-4 arrays laid out (batch N, channels C, height H,
width W). Values are float32 by default; gradient-check tests run the same
ops in float64 by constructing float64 tensors. Tensors are immutable; a
training step builds a fresh Tape, binds parameters to it, runs forward ops
(which record themselves), and calls backward() for the gradient map.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import special

TENSOR_MAGIC = b"RNVT"

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    """Immutable dense array value, optionally tracked on a Tape."""

    __slots__ = ("data", "node")

    def __init__(self, data, dtype=None, _owned=False):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if arr.flags.writeable:
            # Freeze our own storage, never the caller's array.
            if not _owned or arr.base is not None:
                arr = arr.copy()
            arr.flags.writeable = False
        self.data = arr
        self.node: Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of size {self.data.size}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        tracked = "" if self.node is None else ", tracked"
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{tracked})"

    # Arithmetic sugar; same-shape tensors or python scalars only (no
    # broadcasting by design).
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor_like(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)


@dataclass
class ConvWeight:
    """A convolution's (kernel, bias) pair.

    kernel: (out_channels O, in_channels I, Kh, Kw); bias: (O,). Every
    convolution in this project carries a bias (the fusion algebra assumes
    one). Rep blocks additionally restrict Kh, Kw to {1, 3}; that check
    lives in the blocks layer since other consumers (the SSIM window) use
    larger kernels.
    """

    kernel: Tensor
    bias: Tensor

    def __post_init__(self):
        if self.kernel.ndim != 4:
            raise ValueError(f"kernel must be rank-4, got shape {self.kernel.shape}")
        if self.bias.ndim != 1 or self.bias.shape[0] != self.kernel.shape[0]:
            raise ValueError(
                f"bias shape {self.bias.shape} does not match out_channels "
                f"{self.kernel.shape[0]}"
            )

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[0]

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[1]


class Node:
    """One recorded operation: forward replay closure + vector-Jacobian product."""

    __slots__ = ("op", "inputs", "output", "vjp", "replay", "index", "tape")

    def __init__(self, op, inputs, output, vjp, replay):
        self.op: str = op
        self.inputs: tuple[Tensor, ...] = inputs
        self.output: Tensor = output
        self.vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = vjp
        self.replay: Callable[..., np.ndarray] | None = replay
        self.index: int = -1
        self.tape: "Tape | None" = None


class Tape:
    """Ordered record of executed operations for one training step.

    Confined to a single thread; parameters are registered with unique
    names via param() and receive gradients (possibly zero) from backward().
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.params: dict[str, Tensor] = {}

    def _append(self, node: Node) -> None:
        node.index = len(self.nodes)
        self.nodes.append(node)

    def param(self, value, name: str) -> Tensor:
        """Register a leaf parameter; returns the tracked tensor."""
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        if t.node is not None:
            raise ValueError("cannot register an op output as a parameter")
        tracked = Tensor(t.data)
        node = Node("param", (), tracked, None, None)
        tracked.node = node
        node.tape = self
        self._append(node)
        self.params[name] = tracked
        return tracked

    def op_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for n in self.nodes:
            counts[n.op] = counts.get(n.op, 0) + 1
        return counts

    def replay(self) -> bool:
        """Recompute every recorded op from its inputs; True iff all outputs
        reproduce exactly (bitwise)."""
        recomputed: dict[int, np.ndarray] = {}
        for node in self.nodes:
            if node.replay is None:  # leaf
                recomputed[node.index] = node.output.data
                continue
            args = []
            for t in node.inputs:
                if t.node is not None and t.node.index in recomputed:
                    args.append(recomputed[t.node.index])
                else:
                    args.append(t.data)
            out = node.replay(*args)
            if not np.array_equal(out, node.output.data):
                return False
            recomputed[node.index] = out
        return True


def _tape_of(*tensors: Tensor) -> Tape | None:
    tape = None
    for t in tensors:
        if t.node is not None:
            if tape is None:
                tape = t.node.tape
            elif t.node.tape is not tape:
                raise ValueError("operands belong to different tapes")
    return tape


def _record(op, out_data, inputs, vjp, replay) -> Tensor:
    out = Tensor(out_data, _owned=True)
    tape = _tape_of(*inputs)
    if tape is not None:
        node = Node(op, tuple(inputs), out, vjp, replay)
        out.node = node
        node.tape = tape
        tape._append(node)
    return out


def _as_tensor_like(x, ref: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=ref.dtype))


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# Elementwise and reduction ops


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return _record(
            "add_scalar", a.data + np.asarray(c, a.dtype), (a,),
            lambda g: (g,), lambda ad: ad + np.asarray(c, ad.dtype),
        )
    _check_same_shape(a, b, "add")
    return _record(
        "add", a.data + b.data, (a, b),
        lambda g: (g, g), lambda ad, bd: ad + bd,
    )


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    _check_same_shape(a, b, "sub")
    return _record(
        "sub", a.data - b.data, (a, b),
        lambda g: (g, -g), lambda ad, bd: ad - bd,
    )


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return _record(
            "mul_scalar", a.data * np.asarray(c, a.dtype), (a,),
            lambda g: (g * np.asarray(c, g.dtype),),
            lambda ad: ad * np.asarray(c, ad.dtype),
        )
    _check_same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _record(
        "mul", ad * bd, (a, b),
        lambda g: (g * bd, g * ad), lambda x, y: x * y,
    )


def div(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return mul(a, 1.0 / float(b))
    _check_same_shape(a, b, "div")
    ad, bd = a.data, b.data
    return _record(
        "div", ad / bd, (a, b),
        lambda g: (g / bd, -g * ad / (bd * bd)), lambda x, y: x / y,
    )


def abs_(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return _record("abs", np.abs(a.data), (a,), lambda g: (g * sign,), np.abs)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes where lo <= x <= hi (inclusive)."""
    inside = ((a.data >= lo) & (a.data <= hi)).astype(a.dtype)
    return _record(
        "clamp", np.clip(a.data, lo, hi), (a,),
        lambda g: (g * inside,), lambda ad: np.clip(ad, lo, hi),
    )


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _record(
        "sum", a.data.sum(), (a,),
        lambda g: (np.broadcast_to(g, shape).astype(a.dtype),),
        lambda ad: ad.sum(),
    )


def mean_all(a: Tensor) -> Tensor:
    n = a.size
    shape = a.shape
    return _record(
        "mean", a.data.mean(), (a,),
        lambda g: ((np.broadcast_to(g, shape) / n).astype(a.dtype),),
        lambda ad: ad.mean(),
    )


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _record(
        "reshape", a.data.reshape(shape), (a,),
        lambda g: (g.reshape(old),), lambda ad: ad.reshape(shape),
    )


# ---------------------------------------------------------------------------
# Network ops


def _pad_pair(pad) -> tuple[int, int]:
    if isinstance(pad, tuple):
        ph, pw = pad
    else:
        ph = pw = int(pad)
    if ph < 0 or pw < 0:
        raise ValueError(f"negative padding {pad!r}")
    return int(ph), int(pw)


def conv2d(x: Tensor, w: ConvWeight, pad) -> Tensor:
    """Cross-correlation with zero padding plus per-output-channel bias.

    x: (N, C, H, W); w.kernel: (O, I, Kh, Kw) with C == I; pad is an int or
    an (pad_h, pad_w) pair. No kernel flip (deep-learning convention).
    Output is (N, O, H + 2*pad_h - Kh + 1, W + 2*pad_w - Kw + 1).
    """
    kernel, bias = w.kernel, w.bias
    if x.ndim != 4:
        raise ValueError(f"conv2d input must be rank-4, got {x.shape}")
    n, c, h, ww_ = x.shape
    o, i, kh, kw = kernel.shape
    if c != i:
        raise ValueError(f"conv2d: input has {c} channels, kernel expects {i}")
    ph, pw = _pad_pair(pad)
    ho = h + 2 * ph - kh + 1
    wo = ww_ + 2 * pw - kw + 1
    if ho < 1 or wo < 1:
        raise ValueError(
            f"conv2d: kernel {kh}x{kw} larger than padded input "
            f"{h + 2 * ph}x{ww_ + 2 * pw}"
        )

    def forward(xd, kd, bd):
        xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
        cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
            n, ho * wo, c * kh * kw
        )
        y = cols @ kd.reshape(o, -1).T + bd
        return cols, y.transpose(0, 2, 1).reshape(n, o, ho, wo)

    cols, out = forward(x.data, kernel.data, bias.data)
    kd = kernel.data

    def vjp(g):
        gm = g.transpose(0, 2, 3, 1).reshape(n, ho * wo, o)
        db = g.sum(axis=(0, 2, 3))
        dk = (gm.reshape(-1, o).T @ cols.reshape(-1, c * kh * kw)).reshape(kd.shape)
        dcols = gm @ kd.reshape(o, -1)
        dc = dcols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
        dxp = np.zeros((n, c, h + 2 * ph, ww_ + 2 * pw), dtype=g.dtype)
        for a in range(kh):
            for b in range(kw):
                dxp[:, :, a : a + ho, b : b + wo] += dc[:, :, a, b]
        dx = dxp[:, :, ph : ph + h, pw : pw + ww_]
        return dx, dk, db

    return _record(
        "conv2d", out, (x, kernel, bias), vjp,
        lambda xd, kd_, bd: forward(xd, kd_, bd)[1],
    )


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """y = W @ x + b for a flat input vector."""
    if x.ndim != 1:
        raise ValueError(f"linear input must be flat, got {x.shape}")
    d_out, d_in = weight.shape
    if x.shape[0] != d_in:
        raise ValueError(f"linear: input length {x.shape[0]} != {d_in}")
    if bias.shape != (d_out,):
        raise ValueError(f"linear: bias shape {bias.shape} != ({d_out},)")
    xd, wd = x.data, weight.data

    def vjp(g):
        return wd.T @ g, np.outer(g, xd), g

    return _record(
        "linear", wd @ xd + bias.data, (x, weight, bias), vjp,
        lambda xd_, wd_, bd_: wd_ @ xd_ + bd_,
    )


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """Rearrange (N, C, H, W) -> (N, C/r^2, H*r, W*r).

    out[n][c][h*r + i][w*r + j] = x[n][c*r*r + i*r + j][h][w].
    """
    if r < 1:
        raise ValueError(f"pixel_shuffle factor must be positive, got {r}")
    n, c, h, w = x.shape
    if c % (r * r) != 0:
        raise ValueError(f"pixel_shuffle: {c} channels not divisible by {r}^2")
    c2 = c // (r * r)

    def forward(xd):
        return (
            xd.reshape(n, c2, r, r, h, w)
            .transpose(0, 1, 4, 2, 5, 3)
            .reshape(n, c2, h * r, w * r)
        )

    def vjp(g):
        return (
            g.reshape(n, c2, h, r, w, r)
            .transpose(0, 1, 3, 5, 2, 4)
            .reshape(n, c, h, w),
        )

    return _record("pixel_shuffle", forward(x.data), (x,), vjp, forward)


def gelu(x: Tensor) -> Tensor:
    """Exact-CDF GELU: x * Phi(x) with Phi the standard normal CDF.

    Uses erf rather than the tanh approximation.
    """
    xd = x.data
    phi = 0.5 * (1.0 + special.erf(xd * _INV_SQRT2))

    def vjp(g):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT2PI
        return (g * (phi + xd * pdf).astype(g.dtype),)

    def replay(xd_):
        return xd_ * (0.5 * (1.0 + special.erf(xd_ * _INV_SQRT2))).astype(xd_.dtype)

    return _record("gelu", xd * phi.astype(xd.dtype), (x,), vjp, replay)


# ---------------------------------------------------------------------------
# Backward


def backward(tape: Tape, loss: Tensor) -> dict[str, Tensor]:
    """Reverse-accumulate d(loss)/d(param) for every registered parameter.

    Unused parameters receive zero gradients. The loss must be a scalar
    produced on this tape.
    """
    if loss.node is None or loss.node.tape is not tape:
        raise ValueError("loss was not produced by this tape")
    if loss.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")

    grads: dict[int, np.ndarray] = {
        loss.node.index: np.ones((), dtype=loss.dtype).reshape(loss.shape)
    }
    for node in reversed(tape.nodes[: loss.node.index + 1]):
        if node.vjp is None:
            continue  # leaves keep their accumulated gradient
        g = grads.pop(node.index, None)
        if g is None:
            continue
        input_grads = node.vjp(g)
        for t, ig in zip(node.inputs, input_grads):
            if ig is None or t.node is None:
                continue
            idx = t.node.index
            if idx in grads:
                grads[idx] = grads[idx] + ig
            else:
                grads[idx] = ig

    out: dict[str, Tensor] = {}
    for name, p in tape.params.items():
        g = grads.get(p.node.index)
        out[name] = Tensor(g) if g is not None else Tensor(np.zeros_like(p.data))
    return out


# ---------------------------------------------------------------------------
# Tensor file format: "RNVT", four u64 LE extents, float32 LE payload


def save_tensor(path, t: Tensor) -> None:
    shape = t.shape
    if len(shape) > 4:
        raise ValueError(f"tensor file format is rank-4, got {t.shape}")
    extents = (1,) * (4 - len(shape)) + tuple(int(s) for s in shape)
    with open(path, "wb") as f:
        f.write(TENSOR_MAGIC)
        f.write(struct.pack("<4Q", *extents))
        f.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def load_tensor(path) -> Tensor:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != TENSOR_MAGIC:
            raise ValueError(f"bad tensor magic {magic!r}")
        extents = struct.unpack("<4Q", f.read(32))
        count = int(np.prod(extents))
        data = np.frombuffer(f.read(count * 4), dtype="<f4", count=count)
    return Tensor(data.reshape(extents).astype(np.float32))
