"""Reparameterization layers: online-fused training, explicit training, and
the deployed single-conv form.

Online mode fuses the branch parameters on the tape at every forward pass
and runs exactly one spatial convolution; gradients flow back through the
fusion arithmetic to each branch's own parameters. Fused kernels are
recomputed each step (parameters change between steps); within one step
`prefuse()` lets a trainer reuse the fused kernel across the frames of a
batch. Deployment destroys the branch structure by design.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace
from enum import Enum
from statistics import median
from typing import Callable, Iterator, Mapping

from .blocks import BlockConfig, block_forward_explicit, map_block_params, named_block_params
from .fusion import FusedConv, fuse_block
from .tensor import ConvWeight, Tape, Tensor, backward, conv2d, sum_all


class Mode(str, Enum):
    ONLINE_TRAIN = "online"
    EXPLICIT_TRAIN = "explicit"
    DEPLOYED = "deployed"


@dataclass
class RepLayer:
    mode: Mode
    cfg: BlockConfig | None = None
    fused: FusedConv | None = None
    step_fused: FusedConv | None = None  # per-step cache set by prefuse()

    def __post_init__(self):
        if self.mode is Mode.DEPLOYED:
            if self.fused is None or self.cfg is not None:
                raise ValueError("deployed layer holds exactly one fused conv, no branches")
        else:
            if self.cfg is None or self.fused is not None:
                raise ValueError("training layer holds branch parameters, not a fused conv")

    @property
    def in_channels(self) -> int:
        return self.cfg.in_channels if self.cfg else self.fused.weight.in_channels

    @property
    def out_channels(self) -> int:
        return self.cfg.out_channels if self.cfg else self.fused.weight.out_channels

    def forward(self, x: Tensor) -> Tensor:
        if self.mode is Mode.ONLINE_TRAIN:
            return online_forward(self, x)
        if self.mode is Mode.EXPLICIT_TRAIN:
            return block_forward_explicit(self.cfg, x)
        return conv2d(x, self.fused.weight, pad=1)

    def prefuse(self) -> "RepLayer":
        """Fuse once so a multi-frame step reuses the kernel (online mode)."""
        if self.mode is not Mode.ONLINE_TRAIN:
            return self
        return replace(self, step_fused=fuse_block(self.cfg))

    def param_count(self) -> int:
        if self.mode is Mode.DEPLOYED:
            w = self.fused.weight
            return w.kernel.size + w.bias.size
        return sum(t.size for _, t in named_block_params(self.cfg, "p"))

    def named_params(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        if self.mode is Mode.DEPLOYED:
            yield f"{prefix}.kernel", self.fused.weight.kernel
            yield f"{prefix}.bias", self.fused.weight.bias
        else:
            yield from named_block_params(self.cfg, prefix)

    def map_params(self, prefix: str, fn: Callable[[str, Tensor], Tensor]) -> "RepLayer":
        if self.mode is Mode.DEPLOYED:
            w = self.fused.weight
            new = ConvWeight(fn(f"{prefix}.kernel", w.kernel), fn(f"{prefix}.bias", w.bias))
            return RepLayer(Mode.DEPLOYED, fused=FusedConv(new))
        return RepLayer(self.mode, cfg=map_block_params(self.cfg, prefix, fn))


def online_forward(layer: RepLayer, x: Tensor) -> Tensor:
    """Fuse on the tape, then run the one spatial convolution."""
    if layer.mode is not Mode.ONLINE_TRAIN:
        raise RuntimeError(f"online_forward requires online mode, layer is {layer.mode.value}")
    fused = layer.step_fused if layer.step_fused is not None else fuse_block(layer.cfg)
    return conv2d(x, fused.weight, pad=1)


def structural_fuse(layer: RepLayer) -> RepLayer:
    """Collapse a training-form layer into its deployed single conv."""
    if layer.mode is Mode.DEPLOYED:
        raise RuntimeError("layer is already deployed")
    return RepLayer(Mode.DEPLOYED, fused=fuse_block(layer.cfg))


# ---------------------------------------------------------------------------
# Timing


def step_time_probe(
    step_fns: Mapping[str, Callable[[], object]],
    repetitions: int,
    warmup: int = 5,
    groups: int = 5,
) -> dict[str, float]:
    """Median-of-means wall-clock seconds per call for each named closure.

    Runs `warmup` unmeasured calls, then `groups` groups of
    ceil(repetitions/groups) measured calls on a monotonic clock; reports
    the median of the group means. Ratios between entries are meaningful;
    absolute values are machine-dependent.
    """
    if repetitions < 10:
        raise ValueError("need at least 10 repetitions after warmup")
    per_group = max(1, (repetitions + groups - 1) // groups)
    out: dict[str, float] = {}
    for name, fn in step_fns.items():
        for _ in range(warmup):
            fn()
        means = []
        for _ in range(groups):
            t0 = time.perf_counter()
            for _ in range(per_group):
                fn()
            means.append((time.perf_counter() - t0) / per_group)
        out[name] = median(means)
    return out


def layer_step_time_probe(
    cfg: BlockConfig,
    x: Tensor,
    repetitions: int = 30,
    modes: tuple[str, ...] = ("plain", "online", "explicit"),
) -> dict[str, float]:
    """Forward+backward time of one block under each mode.

    "plain" runs a single conv with the block's fused weight, i.e. the
    baseline the block replaces.
    """
    plain_weight = fuse_block(cfg).weight

    def make_fn(mode: str) -> Callable[[], object]:
        def run():
            tape = Tape()
            if mode == "plain":
                k = tape.param(plain_weight.kernel.data, "kernel")
                b = tape.param(plain_weight.bias.data, "bias")
                y = conv2d(x, ConvWeight(k, b), pad=1)
            else:
                bound = map_block_params(cfg, "block", lambda n, t: tape.param(t, n))
                layer = RepLayer(Mode(mode), cfg=bound)
                y = layer.forward(x)
            return backward(tape, sum_all(y))

        return run

    return step_time_probe({m: make_fn(m) for m in modes}, repetitions)
