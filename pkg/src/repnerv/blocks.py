"""Multi-branch reparameterization blocks and the ablation branch library.

A block is a parallel sum of branches, each of which is (in exact
arithmetic) a linear map expressible as one 3x3 convolution. Branch kinds:

  vanilla3x3        plain 3x3 conv
  asym1x3 / asym3x1 asymmetric convs reinforcing the 3x3's central cross
  point1x1          1x1 conv
  seq_1x1_3x3       1x1 then 3x3, run in sequence
  seq_1x1_3x3_1x1   1x1 then 3x3 then 1x1
  avgpool3x3        3x3 mean pool, same padding (parameter-free, O == I)
  scaled_fixed      fixed edge filter (Sobel/Laplacian) with one learnable
                    scale per channel (depthwise, O == I)

Padding convention for the sequential kinds: the input plane is zero-padded
once, the 1x1 stage acts pointwise on the padded extent (its bias fills the
ring), and the 3x3 stage consumes the ring with no further padding. This is
the convention under which the block's fused 3x3 equivalent matches the
explicit computation at every pixel, borders included.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ConvWeight, Tensor, _record, conv2d

VANILLA = "vanilla3x3"
ASYM_1X3 = "asym1x3"
ASYM_3X1 = "asym3x1"
POINT = "point1x1"
SEQ_PAIR = "seq_1x1_3x3"
SEQ_TRIPLE = "seq_1x1_3x3_1x1"
AVGPOOL = "avgpool3x3"
SCALED_FIXED = "scaled_fixed"

BRANCH_KINDS = (
    VANILLA, ASYM_1X3, ASYM_3X1, POINT, SEQ_PAIR, SEQ_TRIPLE, AVGPOOL, SCALED_FIXED,
)

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.copy()
LAPLACIAN = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])

FIXED_FILTERS = {"sobel_x": SOBEL_X, "sobel_y": SOBEL_Y, "laplacian": LAPLACIAN}

_KERNEL_SIZES = {
    VANILLA: (3, 3),
    ASYM_1X3: (1, 3),
    ASYM_3X1: (3, 1),
    POINT: (1, 1),
}


@dataclass
class BranchSpec:
    """One branch: its kind plus its learnable tensors.

    params keys by kind: conv-like kinds hold kernel/bias; sequential kinds
    hold k1,b1,k2,b2[,k3,b3]; scaled_fixed holds scale; avgpool3x3 is empty.
    """

    kind: str
    in_channels: int
    out_channels: int
    params: dict[str, Tensor] = field(default_factory=dict)
    fixed_filter: str | None = None
    mid_channels: int | None = None

    def __post_init__(self):
        if self.kind not in BRANCH_KINDS:
            raise ValueError(f"unknown branch kind {self.kind!r}")
        if self.kind in (AVGPOOL, SCALED_FIXED) and self.in_channels != self.out_channels:
            raise ValueError(f"{self.kind} branch requires in_channels == out_channels")
        if self.kind == SCALED_FIXED and self.fixed_filter not in FIXED_FILTERS:
            raise ValueError(f"scaled_fixed needs a filter from {sorted(FIXED_FILTERS)}")
        for key, t in self.params.items():
            if key.startswith("k") or key == "kernel":
                kh, kw = t.shape[-2:]
                if kh not in (1, 3) or kw not in (1, 3):
                    raise ValueError(f"branch kernels must be 1- or 3-sized, got {t.shape}")


@dataclass
class BlockConfig:
    in_channels: int
    out_channels: int
    branches: list[BranchSpec]

    def __post_init__(self):
        if not self.branches:
            raise ValueError("a block needs at least one branch")
        for b in self.branches:
            if b.in_channels != self.in_channels or b.out_channels != self.out_channels:
                raise ValueError("branch channel counts must match the block's")


# ---------------------------------------------------------------------------
# Initialization


def _fan_in_uniform(rng, shape, dtype):
    fan_in = int(np.prod(shape[1:]))
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype))


def _near_identity_mix(rng, out_ch, in_ch, dtype):
    # 1x1 channel mix close to a (wrapped) identity, per the init policy
    # that early block output tracks the vanilla branch.
    k = np.zeros((out_ch, in_ch, 1, 1), dtype=dtype)
    for o in range(out_ch):
        k[o, o % in_ch, 0, 0] = 1.0
    k += rng.uniform(-0.01, 0.01, size=k.shape).astype(dtype)
    return Tensor(k)


def init_branch(
    kind: str,
    in_channels: int,
    out_channels: int,
    rng: np.random.Generator,
    mid_channels: int | None = None,
    fixed_filter: str | None = None,
    dtype=np.float32,
) -> BranchSpec:
    """Create a branch with freshly initialized parameters."""
    zeros = lambda n: Tensor(np.zeros(n, dtype=dtype))
    params: dict[str, Tensor] = {}
    if kind in _KERNEL_SIZES:
        kh, kw = _KERNEL_SIZES[kind]
        params["kernel"] = _fan_in_uniform(rng, (out_channels, in_channels, kh, kw), dtype)
        params["bias"] = zeros(out_channels)
    elif kind in (SEQ_PAIR, SEQ_TRIPLE):
        mid = mid_channels if mid_channels is not None else out_channels
        params["k1"] = _near_identity_mix(rng, mid, in_channels, dtype)
        params["b1"] = zeros(mid)
        params["k2"] = _fan_in_uniform(rng, (
            mid if kind == SEQ_TRIPLE else out_channels, mid, 3, 3), dtype)
        params["b2"] = zeros(mid if kind == SEQ_TRIPLE else out_channels)
        if kind == SEQ_TRIPLE:
            params["k3"] = _near_identity_mix(rng, out_channels, mid, dtype)
            params["b3"] = zeros(out_channels)
        return BranchSpec(kind, in_channels, out_channels, params, None, mid)
    elif kind == SCALED_FIXED:
        params["scale"] = zeros(out_channels)
    elif kind == AVGPOOL:
        pass
    else:
        raise ValueError(f"unknown branch kind {kind!r}")
    return BranchSpec(kind, in_channels, out_channels, params, fixed_filter)


# ---------------------------------------------------------------------------
# Branch-specific tape primitives


def avg_pool3x3_same(x: Tensor) -> Tensor:
    """Per-channel 3x3 mean over the zero-padded window."""
    n, c, h, w = x.shape

    def forward(xd):
        xp = np.pad(xd, ((0, 0), (0, 0), (1, 1), (1, 1)))
        win = sliding_window_view(xp, (3, 3), axis=(2, 3))
        return win.mean(axis=(4, 5)).astype(xd.dtype)

    def vjp(g):
        gp = np.zeros((n, c, h + 2, w + 2), dtype=g.dtype)
        g9 = g / 9.0
        for i in range(3):
            for j in range(3):
                gp[:, :, i : i + h, j : j + w] += g9
        return (gp[:, :, 1 : 1 + h, 1 : 1 + w],)

    return _record("avg_pool3x3", forward(x.data), (x,), vjp, forward)


def depthwise_fixed_conv(x: Tensor, filt: np.ndarray) -> Tensor:
    """Correlate every channel with one fixed 3x3 filter (same padding)."""
    n, c, h, w = x.shape
    f = filt

    def forward(xd):
        fc = f.astype(xd.dtype)
        xp = np.pad(xd, ((0, 0), (0, 0), (1, 1), (1, 1)))
        win = sliding_window_view(xp, (3, 3), axis=(2, 3))
        return np.einsum("nchwij,ij->nchw", win, fc).astype(xd.dtype)

    def vjp(g):
        gp = np.zeros((n, c, h + 2, w + 2), dtype=g.dtype)
        for i in range(3):
            for j in range(3):
                gp[:, :, i : i + h, j : j + w] += f[i, j] * g
        return (gp[:, :, 1 : 1 + h, 1 : 1 + w],)

    return _record("depthwise_fixed_conv", forward(x.data), (x,), vjp, forward)


def scale_channels(x: Tensor, scale: Tensor) -> Tensor:
    """Multiply channel c of a feature map by scale[c]."""
    if scale.ndim != 1 or scale.shape[0] != x.shape[1]:
        raise ValueError(f"scale shape {scale.shape} != channels {x.shape[1]}")
    xd, sd = x.data, scale.data

    def vjp(g):
        return g * sd[None, :, None, None], np.einsum("nchw,nchw->c", g, xd)

    return _record(
        "scale_channels", xd * sd[None, :, None, None], (x, scale), vjp,
        lambda xd_, sd_: xd_ * sd_[None, :, None, None],
    )


# ---------------------------------------------------------------------------
# Forward paths (explicit, no fusion)


def branch_forward(spec: BranchSpec, x: Tensor) -> Tensor:
    """Run the branch's defining computation literally."""
    if x.shape[1] != spec.in_channels:
        raise ValueError(f"input has {x.shape[1]} channels, branch expects {spec.in_channels}")
    p = spec.params
    kind = spec.kind
    if kind == VANILLA:
        return conv2d(x, ConvWeight(p["kernel"], p["bias"]), pad=1)
    if kind == ASYM_1X3:
        return conv2d(x, ConvWeight(p["kernel"], p["bias"]), pad=(0, 1))
    if kind == ASYM_3X1:
        return conv2d(x, ConvWeight(p["kernel"], p["bias"]), pad=(1, 0))
    if kind == POINT:
        return conv2d(x, ConvWeight(p["kernel"], p["bias"]), pad=0)
    if kind in (SEQ_PAIR, SEQ_TRIPLE):
        # Zero-pad once for the 3x3 stage; the pointwise stages run on the
        # padded extent so the first bias fills the ring.
        u = conv2d(x, ConvWeight(p["k1"], p["b1"]), pad=1)
        v = conv2d(u, ConvWeight(p["k2"], p["b2"]), pad=0)
        if kind == SEQ_PAIR:
            return v
        return conv2d(v, ConvWeight(p["k3"], p["b3"]), pad=0)
    if kind == AVGPOOL:
        return avg_pool3x3_same(x)
    if kind == SCALED_FIXED:
        y = depthwise_fixed_conv(x, FIXED_FILTERS[spec.fixed_filter])
        return scale_channels(y, p["scale"])
    raise ValueError(f"unknown branch kind {kind!r}")


def block_forward_explicit(cfg: BlockConfig, x: Tensor) -> Tensor:
    """Elementwise sum of all branch outputs, left to right."""
    out = branch_forward(cfg.branches[0], x)
    for spec in cfg.branches[1:]:
        out = out + branch_forward(spec, x)
    return out


# ---------------------------------------------------------------------------
# Table-3 row library


# Row flags, in the ablation table's column order. "sobel" expands to the
# x/y pair; "sobel&laplacian" to all three fixed filters.
TABLE3_ROWS: tuple[tuple[str, ...], ...] = (
    ("3x3",),
    ("3x3", "1x3&3x1"),
    ("3x3", "1x1"),
    ("3x3", "1x3&3x1", "1x1"),
    ("3x3", "1x1-3x3"),
    ("3x3", "1x3&3x1", "1x1-3x3"),
    ("3x3", "1x1", "1x1-3x3"),
    ("3x3", "1x3&3x1", "1x1", "1x1-3x3"),
    ("3x3", "1x3&3x1", "1x1-3x3", "avgpool"),
    ("3x3", "1x3&3x1", "1x1-3x3", "sobel&laplacian"),
    ("3x3", "1x3&3x1", "1x1-3x3", "laplacian"),
    ("3x3", "1x3&3x1", "1x1-3x3", "sobel"),
    ("3x3", "1x3&3x1", "sobel", "1x1-3x3-1x1"),
    ("3x3", "1x3&3x1", "1x1-3x3-1x1"),
)

ERB_FLAGS: tuple[str, ...] = TABLE3_ROWS[-1]

_FLAG_EXPANSION: dict[str, tuple[tuple[str, str | None], ...]] = {
    "3x3": ((VANILLA, None),),
    "1x3&3x1": ((ASYM_1X3, None), (ASYM_3X1, None)),
    "1x1": ((POINT, None),),
    "1x1-3x3": ((SEQ_PAIR, None),),
    "avgpool": ((AVGPOOL, None),),
    "sobel": ((SCALED_FIXED, "sobel_x"), (SCALED_FIXED, "sobel_y")),
    "laplacian": ((SCALED_FIXED, "laplacian"),),
    "sobel&laplacian": (
        (SCALED_FIXED, "sobel_x"), (SCALED_FIXED, "sobel_y"), (SCALED_FIXED, "laplacian"),
    ),
    "1x1-3x3-1x1": ((SEQ_TRIPLE, None),),
}


def expand_flags(flags) -> list[tuple[str, str | None]]:
    """Row flags -> ordered (branch kind, fixed filter) list."""
    flags = tuple(flags)
    if not flags:
        raise ValueError("empty branch selection")
    unknown = [f for f in flags if f not in _FLAG_EXPANSION]
    if unknown:
        raise ValueError(f"unknown branch flags {unknown}; valid: {sorted(_FLAG_EXPANSION)}")
    out: list[tuple[str, str | None]] = []
    for flag in flags:
        out.extend(_FLAG_EXPANSION[flag])
    return out


def make_table3_config(
    in_channels: int,
    out_channels: int,
    flags,
    rng: np.random.Generator,
    mid_channels: int | None = None,
    dtype=np.float32,
) -> BlockConfig:
    """Build the block for one ablation row given its branch flags."""
    branches = [
        init_branch(kind, in_channels, out_channels, rng,
                    mid_channels=mid_channels, fixed_filter=filt, dtype=dtype)
        for kind, filt in expand_flags(flags)
    ]
    return BlockConfig(in_channels, out_channels, branches)


def erb_config(
    in_channels: int,
    out_channels: int,
    rng: np.random.Generator,
    mid_channels: int | None = None,
    dtype=np.float32,
) -> BlockConfig:
    """The four-branch block: 3x3 + 1x3 + 3x1 + 1x1-3x3-1x1."""
    return make_table3_config(in_channels, out_channels, ERB_FLAGS, rng,
                              mid_channels=mid_channels, dtype=dtype)


# ---------------------------------------------------------------------------
# Parameter traversal (binding to tapes, optimizer updates)


def named_block_params(cfg: BlockConfig, prefix: str) -> Iterator[tuple[str, Tensor]]:
    for i, spec in enumerate(cfg.branches):
        for key in sorted(spec.params):
            yield f"{prefix}.branch{i}.{key}", spec.params[key]


def map_block_params(cfg: BlockConfig, prefix: str,
                     fn: Callable[[str, Tensor], Tensor]) -> BlockConfig:
    """Copy of cfg with every parameter tensor replaced by fn(name, tensor)."""
    branches = []
    for i, spec in enumerate(cfg.branches):
        new_params = {
            key: fn(f"{prefix}.branch{i}.{key}", spec.params[key])
            for key in sorted(spec.params)
        }
        branches.append(replace(spec, params=new_params))
    return BlockConfig(cfg.in_channels, cfg.out_channels, branches)
