"""Closed-form fusion of a multi-branch block into one 3x3 convolution.

All fusion arithmetic runs through tape-recordable tensor ops, so the same
code serves two callers: the online path (fusing on the tape every training
forward so gradients reach the branch parameters) and the structural path
(fusing plain tensors once after training).

With K as (O, I, Kh, Kw) kernels and B as (O,) biases:

  asymmetric pair   K' = pad(K_a) + pad(K_b),          B' = B_a + B_b
  1x1 then 3x3      K_tmp[o,i] = sum_m K1[m,i] K2[o,m]
                    B_tmp[o]   = B2[o] + sum_m B1[m] * sum_hw K2[o,m,h,w]
  then 1x1          K'[o,i]    = sum_m K3[o,m] K_tmp[m,i]
                    B'[o]      = B3[o] + sum_m B_tmp[m] K3[o,m]
  block             K' = sum of branch kernels, B' = sum of branch biases

The bias rule is the observation that a constant plane through a zero-padded
conv contributes (bias x kernel sum) everywhere only if the padding ring
also carries the bias; the explicit sequential branch is computed under
exactly that convention (see blocks.py), which makes these formulas exact at
every pixel, borders included.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .blocks import (
    AVGPOOL,
    ASYM_1X3,
    ASYM_3X1,
    FIXED_FILTERS,
    POINT,
    SCALED_FIXED,
    SEQ_PAIR,
    SEQ_TRIPLE,
    VANILLA,
    BlockConfig,
    BranchSpec,
)
from .tensor import ConvWeight, Tensor, _record


@dataclass
class FusedConv:
    """The single 3x3 convolution equivalent to a whole block."""

    weight: ConvWeight

    def __post_init__(self):
        if self.weight.kernel.shape[-2:] != (3, 3):
            raise ValueError(f"fused kernel must be 3x3, got {self.weight.kernel.shape}")


# ---------------------------------------------------------------------------
# Tape primitives


def pad_to_3x3(k: Tensor) -> Tensor:
    """Center-align a {1,3}x{1,3} kernel inside a zero 3x3 kernel."""
    if k.ndim != 4:
        raise ValueError(f"kernel must be rank-4, got {k.shape}")
    o, i, kh, kw = k.shape
    if kh not in (1, 3) or kw not in (1, 3):
        raise ValueError(f"unsupported kernel size {kh}x{kw}")
    if (kh, kw) == (3, 3):
        return k
    r0 = (3 - kh) // 2
    c0 = (3 - kw) // 2

    def forward(kd):
        out = np.zeros((o, i, 3, 3), dtype=kd.dtype)
        out[:, :, r0 : r0 + kh, c0 : c0 + kw] = kd
        return out

    def vjp(g):
        return (g[:, :, r0 : r0 + kh, c0 : c0 + kw],)

    return _record("pad_to_3x3", forward(k.data), (k,), vjp, forward)


def mix_kernels(a: Tensor, b: Tensor) -> Tensor:
    """Contract the shared middle channel: out[o,i] = sum_m a[o,m] * b[m,i].

    Exactly one operand must be spatially 1x1; the result takes the other's
    spatial extent. This realizes both the "transpose then convolve" and the
    "expand then multiply" steps of sequential-branch fusion.
    """
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"middle channels disagree: {a.shape} vs {b.shape}")
    a_point = a.shape[-2:] == (1, 1)
    b_point = b.shape[-2:] == (1, 1)
    if a_point == b_point:
        raise ValueError("exactly one operand must be a 1x1 kernel")
    ad, bd = a.data, b.data
    # All contractions run as 2-D matmuls (BLAS); the kernels are small but
    # this path executes on every online forward pass.
    if b_point:
        o, m, h, w = ad.shape
        i = bd.shape[1]

        def fwd(x, y):
            xv = x.transpose(0, 2, 3, 1).reshape(o * h * w, m)
            return (xv @ y[:, :, 0, 0]).reshape(o, h, w, i).transpose(0, 3, 1, 2)

        def vjp(g):
            gv = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(o * h * w, i)
            da = (gv @ bd[:, :, 0, 0].T).reshape(o, h, w, m).transpose(0, 3, 1, 2)
            av = ad.transpose(0, 2, 3, 1).reshape(o * h * w, m)
            db = (av.T @ gv)[:, :, None, None]
            return da, db

    else:
        o, m = ad.shape[:2]
        _, i, h, w = bd.shape

        def fwd(x, y):
            return (x[:, :, 0, 0] @ y.reshape(m, i * h * w)).reshape(o, i, h, w)

        def vjp(g):
            gv = g.reshape(o, i * h * w)
            da = (gv @ bd.reshape(m, i * h * w).T)[:, :, None, None]
            db = (ad[:, :, 0, 0].T @ gv).reshape(m, i, h, w)
            return da, db

    return _record("mix_kernels", fwd(ad, bd), (a, b), vjp, fwd)


def bias_through_kernel(bias: Tensor, kernel: Tensor) -> Tensor:
    """out[o] = sum_m bias[m] * sum_hw kernel[o,m,h,w].

    The contribution of a constant input plane (the upstream bias) pushed
    through a convolution.
    """
    if bias.ndim != 1 or kernel.ndim != 4 or kernel.shape[1] != bias.shape[0]:
        raise ValueError(f"shapes disagree: bias {bias.shape}, kernel {kernel.shape}")
    bd, kd = bias.data, kernel.data
    ksum = kd.sum(axis=(2, 3))

    def vjp(g):
        dbias = g @ ksum
        dkernel = np.broadcast_to(
            (g[:, None] * bd[None, :])[:, :, None, None], kd.shape
        )
        return dbias, dkernel

    return _record(
        "bias_through_kernel", ksum @ bd, (bias, kernel), vjp,
        lambda b, k: k.sum(axis=(2, 3)) @ b,
    )


def scale_depthwise_kernel(scale: Tensor, filt: np.ndarray) -> Tensor:
    """Dense (C, C, 3, 3) kernel with scale[c] * filt on the diagonal."""
    c = scale.shape[0]
    f = filt

    def forward(sd):
        fc = f.astype(sd.dtype)
        out = np.zeros((c, c, 3, 3), dtype=sd.dtype)
        idx = np.arange(c)
        out[idx, idx] = sd[:, None, None] * fc
        return out

    def vjp(g):
        idx = np.arange(c)
        return (np.einsum("chw,hw->c", g[idx, idx], f.astype(g.dtype)),)

    return _record("scale_depthwise_kernel", forward(scale.data), (scale,), vjp, forward)


# ---------------------------------------------------------------------------
# Fusion rules


def fuse_asymmetric(k13: Tensor, b13: Tensor, k31: Tensor, b31: Tensor):
    """Merge the 1x3 and 3x1 pair into one 3x3 (kernel sum overlaps only at
    the center)."""
    if k13.shape[:2] != k31.shape[:2]:
        raise ValueError(f"channel shapes disagree: {k13.shape} vs {k31.shape}")
    return pad_to_3x3(k13) + pad_to_3x3(k31), b13 + b31


def fuse_sequential_pair(k1: Tensor, b1: Tensor, k2: Tensor, b2: Tensor):
    """Absorb a pointwise pre-mix into the 3x3 that follows it."""
    if k1.shape[-2:] != (1, 1):
        raise ValueError(f"first kernel must be 1x1, got {k1.shape}")
    if k1.shape[0] != k2.shape[1]:
        raise ValueError(f"inner channels disagree: {k1.shape} vs {k2.shape}")
    k_tmp = mix_kernels(k2, k1)
    b_tmp = b2 + bias_through_kernel(b1, k2)
    return k_tmp, b_tmp


def fuse_post_pointwise(k_tmp: Tensor, b_tmp: Tensor, k3: Tensor, b3: Tensor):
    """Absorb a pointwise post-mix into an already-fused 3x3."""
    if k3.shape[-2:] != (1, 1):
        raise ValueError(f"post kernel must be 1x1, got {k3.shape}")
    if k3.shape[1] != k_tmp.shape[0]:
        raise ValueError(f"channels disagree: {k3.shape} vs {k_tmp.shape}")
    k_out = mix_kernels(k3, k_tmp)
    b_out = b3 + bias_through_kernel(b_tmp, k3)
    return k_out, b_out


def _avgpool_kernel(channels: int, dtype) -> Tensor:
    k = np.zeros((channels, channels, 3, 3), dtype=dtype)
    idx = np.arange(channels)
    k[idx, idx] = 1.0 / 9.0
    return Tensor(k)


def fuse_branch(spec: BranchSpec, dtype=None) -> tuple[Tensor, Tensor]:
    """The branch's 3x3 (kernel, bias) equivalent."""
    p = spec.params
    if dtype is None:
        dtype = next(iter(p.values())).dtype if p else np.float32
    kind = spec.kind
    if kind == VANILLA:
        return p["kernel"], p["bias"]
    if kind in (ASYM_1X3, ASYM_3X1, POINT):
        return pad_to_3x3(p["kernel"]), p["bias"]
    if kind == SEQ_PAIR:
        return fuse_sequential_pair(p["k1"], p["b1"], p["k2"], p["b2"])
    if kind == SEQ_TRIPLE:
        k_tmp, b_tmp = fuse_sequential_pair(p["k1"], p["b1"], p["k2"], p["b2"])
        return fuse_post_pointwise(k_tmp, b_tmp, p["k3"], p["b3"])
    if kind == AVGPOOL:
        return (
            _avgpool_kernel(spec.out_channels, dtype),
            Tensor(np.zeros(spec.out_channels, dtype=dtype)),
        )
    if kind == SCALED_FIXED:
        return (
            scale_depthwise_kernel(p["scale"], FIXED_FILTERS[spec.fixed_filter]),
            Tensor(np.zeros(spec.out_channels, dtype=dtype)),
        )
    raise ValueError(f"unknown branch kind {kind!r}")


def _block_dtype(cfg: BlockConfig):
    for spec in cfg.branches:
        for t in spec.params.values():
            return t.dtype
    return np.float32


def fuse_block(cfg: BlockConfig) -> FusedConv:
    """Sum every branch's fused (kernel, bias), left to right."""
    dtype = _block_dtype(cfg)
    kernel, bias = fuse_branch(cfg.branches[0], dtype)
    for spec in cfg.branches[1:]:
        k, b = fuse_branch(spec, dtype)
        kernel = kernel + k
        bias = bias + b
    return FusedConv(ConvWeight(kernel, bias))
