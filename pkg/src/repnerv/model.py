"""Frame-index-to-frame decoder: positional encoding, MLP, rep-block stages.

A frame index t in [0,1] is encoded into sin/cos features, lifted by a small
MLP to a (1, C0, h0, w0) feature map, then upsampled by a stack of stages,
each one rep-conv -> pixel_shuffle -> activation, and finished by a plain
3x3 head conv into RGB clamped to [0,1].
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace
from typing import Callable, Iterator

import numpy as np

from . import blocks as bk
from .blocks import BlockConfig, make_table3_config
from .fusion import FusedConv
from .layers import Mode, RepLayer, structural_fuse
from .tensor import ConvWeight, Tape, Tensor, clamp, conv2d, gelu, linear, pixel_shuffle, reshape

CHECKPOINT_MAGIC = b"RNVC"

Preset = str | tuple[str, ...]


@dataclass
class ModelConfig:
    frame_h: int
    frame_w: int
    factors: tuple[int, ...]
    h0: int
    w0: int
    channels: tuple[int, ...]  # (C0, after stage 1, ..., after stage S)
    mlp_hidden: tuple[int, ...] = (64,)
    pe_base: float = 1.25
    pe_levels: int = 40
    presets: tuple[Preset, ...] = ()  # per stage: "erb", "plain", or branch flags
    activation: str = "gelu"
    seq_mid: int | None = None  # mid width of sequential branches (None: out_channels)

    def __post_init__(self):
        self.factors = tuple(int(f) for f in self.factors)
        self.channels = tuple(int(c) for c in self.channels)
        self.mlp_hidden = tuple(int(d) for d in self.mlp_hidden)
        if not self.presets:
            self.presets = ("erb",) * len(self.factors)
        self.presets = tuple(
            p if isinstance(p, str) else tuple(p) for p in self.presets
        )
        if any(f < 1 for f in self.factors):
            raise ValueError("upsample factors must be positive")
        prod = int(np.prod(self.factors)) if self.factors else 1
        if self.h0 * prod != self.frame_h or self.w0 * prod != self.frame_w:
            raise ValueError(
                f"base {self.h0}x{self.w0} times factors {self.factors} "
                f"!= frame {self.frame_h}x{self.frame_w}"
            )
        if len(self.channels) != len(self.factors) + 1:
            raise ValueError("channel schedule needs one entry per stage plus the base")
        if any(c < 1 for c in self.channels):
            raise ValueError("channels must be positive")
        if len(self.presets) != len(self.factors):
            raise ValueError("one block preset per stage")
        if self.activation not in ("gelu", "identity"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.pe_levels < 1:
            raise ValueError("pe_levels must be >= 1")

    @property
    def num_stages(self) -> int:
        return len(self.factors)

    def stage_conv_channels(self, k: int) -> tuple[int, int]:
        """(in, out) channels of stage k's convolution (before pixel shuffle)."""
        return self.channels[k], self.channels[k + 1] * self.factors[k] ** 2

    def stage_input_size(self, k: int) -> tuple[int, int]:
        h, w = self.h0, self.w0
        for f in self.factors[:k]:
            h, w = h * f, w * f
        return h, w

    def to_dict(self) -> dict:
        return {
            "frame_h": self.frame_h,
            "frame_w": self.frame_w,
            "factors": list(self.factors),
            "h0": self.h0,
            "w0": self.w0,
            "channels": list(self.channels),
            "mlp_hidden": list(self.mlp_hidden),
            "pe_base": self.pe_base,
            "pe_levels": self.pe_levels,
            "presets": [p if isinstance(p, str) else list(p) for p in self.presets],
            "activation": self.activation,
            "seq_mid": self.seq_mid,
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        d = dict(d)
        d["factors"] = tuple(d["factors"])
        d["channels"] = tuple(d["channels"])
        d["mlp_hidden"] = tuple(d["mlp_hidden"])
        d["presets"] = tuple(
            p if isinstance(p, str) else tuple(p) for p in d["presets"]
        )
        return ModelConfig(**d)


def default_channels(factors, c0: int = 32, floor: int = 8) -> tuple[int, ...]:
    """Halve channels per stage, never below the floor."""
    channels = [c0]
    for _ in factors:
        channels.append(max(floor, channels[-1] // 2))
    return tuple(channels)


def desk_config(preset: Preset = "erb", **overrides) -> ModelConfig:
    """The 32x64 two-stage configuration used by desk experiments."""
    base = dict(
        frame_h=32, frame_w=64, factors=(2, 2), h0=8, w0=16,
        channels=(32, 16, 8), presets=(preset, preset),
    )
    base.update(overrides)
    return ModelConfig(**base)


def positional_encode(t: float, b: float, levels: int, dtype=np.float32) -> np.ndarray:
    """(sin(b^0 pi t), cos(b^0 pi t), ..., sin(b^{L-1} pi t), cos(b^{L-1} pi t))."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"frame index {t} outside [0, 1]")
    freqs = b ** np.arange(levels) * np.pi * t
    out = np.empty(2 * levels, dtype=dtype)
    out[0::2] = np.sin(freqs)
    out[1::2] = np.cos(freqs)
    return out


def _preset_block(preset: Preset, cin: int, cout: int, rng, mid, dtype) -> BlockConfig:
    if preset == "erb":
        flags: tuple[str, ...] = bk.ERB_FLAGS
    elif preset == "plain":
        flags = ("3x3",)
    else:
        flags = tuple(preset)
    return make_table3_config(cin, cout, flags, rng, mid_channels=mid, dtype=dtype)


@dataclass
class Model:
    config: ModelConfig
    mlp: list[tuple[Tensor, Tensor]]  # (weight, bias) per linear layer
    stages: list[RepLayer]
    head: ConvWeight

    # -- construction -------------------------------------------------------

    @staticmethod
    def init(config: ModelConfig, seed: int, mode: Mode = Mode.ONLINE_TRAIN,
             dtype=np.float32) -> "Model":
        rng = np.random.default_rng(seed)
        dims = [2 * config.pe_levels, *config.mlp_hidden,
                config.channels[0] * config.h0 * config.w0]
        mlp = []
        for d_in, d_out in zip(dims[:-1], dims[1:]):
            bound = 1.0 / np.sqrt(d_in)
            w = Tensor(rng.uniform(-bound, bound, size=(d_out, d_in)).astype(dtype))
            mlp.append((w, Tensor(np.zeros(d_out, dtype))))
        stages = []
        for k in range(config.num_stages):
            cin, cout = config.stage_conv_channels(k)
            cfg = _preset_block(config.presets[k], cin, cout, rng, config.seq_mid, dtype)
            stages.append(RepLayer(mode, cfg=cfg))
        cin = config.channels[-1]
        bound = 1.0 / np.sqrt(cin * 9)
        head = ConvWeight(
            Tensor(rng.uniform(-bound, bound, size=(3, cin, 3, 3)).astype(dtype)),
            # mid-gray start so the output clamp passes gradients immediately
            Tensor(np.full(3, 0.5, dtype)),
        )
        return Model(config, mlp, stages, head)

    # -- parameter plumbing --------------------------------------------------

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for i, (w, b) in enumerate(self.mlp):
            yield f"mlp.{i}.weight", w
            yield f"mlp.{i}.bias", b
        for k, stage in enumerate(self.stages):
            yield from stage.named_params(f"stage{k}")
        yield "head.kernel", self.head.kernel
        yield "head.bias", self.head.bias

    def map_parameters(self, fn: Callable[[str, Tensor], Tensor]) -> "Model":
        mlp = [
            (fn(f"mlp.{i}.weight", w), fn(f"mlp.{i}.bias", b))
            for i, (w, b) in enumerate(self.mlp)
        ]
        stages = [s.map_params(f"stage{k}", fn) for k, s in enumerate(self.stages)]
        head = ConvWeight(fn("head.kernel", self.head.kernel), fn("head.bias", self.head.bias))
        return Model(self.config, mlp, stages, head)

    def bind(self, tape: Tape) -> "Model":
        return self.map_parameters(lambda name, t: tape.param(t, name))

    def load_parameters(self, values: dict[str, Tensor]) -> "Model":
        return self.map_parameters(lambda name, t: values[name])

    def prefuse(self) -> "Model":
        """Fuse each online stage once for reuse across a step's frames."""
        return replace(self, stages=[s.prefuse() for s in self.stages])

    def with_mode(self, mode: Mode) -> "Model":
        stages = []
        for s in self.stages:
            if s.mode is Mode.DEPLOYED:
                stages.append(s)
            else:
                stages.append(RepLayer(mode, cfg=s.cfg))
        return replace(self, stages=stages)

    @property
    def deployed(self) -> bool:
        return all(s.mode is Mode.DEPLOYED for s in self.stages)

    # -- forward -------------------------------------------------------------

    def forward(self, t: float) -> Tensor:
        cfg = self.config
        act = gelu if cfg.activation == "gelu" else (lambda x: x)
        h = Tensor(positional_encode(t, cfg.pe_base, cfg.pe_levels,
                                     dtype=self.head.kernel.dtype))
        for i, (w, b) in enumerate(self.mlp):
            h = linear(h, w, b)
            if i < len(self.mlp) - 1:
                h = act(h)
        x = reshape(h, (1, cfg.channels[0], cfg.h0, cfg.w0))
        for stage, factor in zip(self.stages, cfg.factors):
            x = stage.forward(x)
            x = pixel_shuffle(x, factor)
            x = act(x)
        x = conv2d(x, self.head, pad=1)
        return clamp(x, 0.0, 1.0)


def model_forward(model: Model, t: float) -> Tensor:
    """Decode the frame at normalized index t; shape (1, 3, H_out, W_out)."""
    return model.forward(t)


def structural_fuse_model(model: Model) -> Model:
    """Deploy-form model: every rep stage collapsed to its single conv."""
    if model.deployed:
        raise RuntimeError("model is already in deploy form")
    return replace(model, stages=[
        s if s.mode is Mode.DEPLOYED else structural_fuse(s) for s in model.stages
    ])


# ---------------------------------------------------------------------------
# Complexity accounting


def conv_cost(cin: int, cout: int, kh: int, kw: int, h: int, w: int) -> tuple[int, int]:
    """(parameter count, multiply-accumulates) of one biased conv at h x w output."""
    return cout * cin * kh * kw + cout, cout * cin * kh * kw * h * w


def _branch_cost(spec_kind: str, cin: int, cout: int, mid: int,
                 h: int, w: int) -> tuple[int, int]:
    """Train-form (params, explicit-forward MACs) for one branch."""
    if spec_kind == bk.VANILLA:
        return conv_cost(cin, cout, 3, 3, h, w)
    if spec_kind == bk.ASYM_1X3:
        return conv_cost(cin, cout, 1, 3, h, w)
    if spec_kind == bk.ASYM_3X1:
        return conv_cost(cin, cout, 3, 1, h, w)
    if spec_kind == bk.POINT:
        return conv_cost(cin, cout, 1, 1, h, w)
    if spec_kind == bk.SEQ_PAIR:
        p1, m1 = conv_cost(cin, mid, 1, 1, h + 2, w + 2)  # pointwise on padded extent
        p2, m2 = conv_cost(mid, cout, 3, 3, h, w)
        return p1 + p2, m1 + m2
    if spec_kind == bk.SEQ_TRIPLE:
        p1, m1 = conv_cost(cin, mid, 1, 1, h + 2, w + 2)
        p2, m2 = conv_cost(mid, mid, 3, 3, h, w)
        p3, m3 = conv_cost(mid, cout, 1, 1, h, w)
        return p1 + p2 + p3, m1 + m2 + m3
    if spec_kind == bk.AVGPOOL:
        return 0, cout * 9 * h * w
    if spec_kind == bk.SCALED_FIXED:
        return cout, cout * 9 * h * w + cout * h * w
    raise ValueError(spec_kind)


def _fusion_macs(spec_kind: str, cin: int, cout: int, mid: int) -> int:
    """Multiplies spent building the fused kernel for one branch (online mode)."""
    if spec_kind == bk.SEQ_PAIR:
        return cout * mid * cin * 9 + cout * mid
    if spec_kind == bk.SEQ_TRIPLE:
        return mid * mid * cin * 9 + mid * mid + cout * mid * cin * 9 + cout * mid
    if spec_kind == bk.SCALED_FIXED:
        return cout * 9
    return 0  # padding and summation introduce no multiplies


def _stage_branch_kinds(preset: Preset) -> list[str]:
    if preset == "erb":
        flags: tuple[str, ...] = bk.ERB_FLAGS
    elif preset == "plain":
        flags = ("3x3",)
    else:
        flags = tuple(preset)
    return [kind for kind, _ in bk.expand_flags(flags)]


def count_params_and_flops(config: ModelConfig, mode: str) -> tuple[int, int]:
    """Analytic (parameters, multiply-accumulates per decoded frame).

    mode: "explicit" (train-form, all branches executed), "online"
    (train-form parameters, fused kernel built each forward), or "deploy"
    (single conv per stage). Deploy counts do not depend on the branch
    structure.
    """
    if mode not in ("explicit", "online", "deploy"):
        raise ValueError(f"unknown mode {mode!r}")
    params = 0
    macs = 0
    dims = [2 * config.pe_levels, *config.mlp_hidden,
            config.channels[0] * config.h0 * config.w0]
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        params += d_out * d_in + d_out
        macs += d_out * d_in
    for k in range(config.num_stages):
        cin, cout = config.stage_conv_channels(k)
        h, w = config.stage_input_size(k)
        mid = config.seq_mid if config.seq_mid is not None else cout
        fused_params, fused_macs = conv_cost(cin, cout, 3, 3, h, w)
        if mode == "deploy":
            params += fused_params
            macs += fused_macs
            continue
        for kind in _stage_branch_kinds(config.presets[k]):
            p, m = _branch_cost(kind, cin, cout, mid, h, w)
            params += p
            if mode == "explicit":
                macs += m
            else:
                macs += _fusion_macs(kind, cin, cout, mid)
        if mode == "online":
            macs += fused_macs
    hp, hm = conv_cost(config.channels[-1], 3, 3, 3, config.frame_h, config.frame_w)
    params += hp
    macs += hm
    return params, macs


# ---------------------------------------------------------------------------
# Checkpoints: "RNVC", u64 manifest length, JSON manifest, float32 LE blobs


def save_checkpoint(path, model: Model, step: int = 0) -> None:
    entries = []
    blobs = []
    offset = 0
    for name, t in model.named_parameters():
        data = np.ascontiguousarray(t.data, dtype="<f4")
        entries.append({"name": name, "shape": list(t.shape), "offset": offset})
        blobs.append(data.tobytes())
        offset += data.nbytes
    manifest = {
        "config": model.config.to_dict(),
        "layers": [
            {"name": f"stage{k}", "mode": s.mode.value} for k, s in enumerate(model.stages)
        ],
        "params": entries,
        "step": int(step),
    }
    payload = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(payload)))
        f.write(payload)
        for b in blobs:
            f.write(b)


def model_from_values(config: ModelConfig, layer_modes: list[Mode],
                      values: dict[str, Tensor]) -> Model:
    """Rebuild a model from its config, per-stage modes, and named tensors."""
    skeleton = Model.init(config, seed=0)
    mlp = [
        (values[f"mlp.{i}.weight"], values[f"mlp.{i}.bias"])
        for i in range(len(skeleton.mlp))
    ]
    stages = []
    for k, (proto, mode) in enumerate(zip(skeleton.stages, layer_modes)):
        if mode is Mode.DEPLOYED:
            stages.append(RepLayer(Mode.DEPLOYED, fused=FusedConv(ConvWeight(
                values[f"stage{k}.kernel"], values[f"stage{k}.bias"]))))
        else:
            bound = proto.map_params(f"stage{k}", lambda name, t: values[name])
            stages.append(RepLayer(mode, cfg=bound.cfg))
    head = ConvWeight(values["head.kernel"], values["head.bias"])
    return Model(config, mlp, stages, head)


def load_checkpoint(path) -> tuple[Model, int]:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}")
        (mlen,) = struct.unpack("<Q", f.read(8))
        manifest = json.loads(f.read(mlen).decode())
        blob = f.read()
    config = ModelConfig.from_dict(manifest["config"])
    values: dict[str, Tensor] = {}
    for e in manifest["params"]:
        shape = tuple(e["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=e["offset"])
        values[e["name"]] = Tensor(arr.reshape(shape).astype(np.float32))
    modes = [Mode(l["mode"]) for l in manifest["layers"]]
    return model_from_values(config, modes, values), int(manifest["step"])
