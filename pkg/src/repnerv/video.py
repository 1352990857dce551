"""Frame ingestion and synthetic desk-scale videos.

Frames are binary PPM (P6, maxval 255) named frame_%05d.ppm; in memory a
frame is a (1, 3, H, W) float32 tensor on [0, 1]. Synthetic generators are
deterministic under their seed and temporally coherent (small adjacent-frame
difference) so overfitting them is nontrivial but feasible.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor

FRAME_NAME = "frame_%05d.ppm"
SYNTH_KINDS = ("moving_gradient", "bouncing_square", "color_noise_smooth")


@dataclass
class Video:
    frames: list[Tensor]  # each (1, 3, H, W) on [0, 1]
    fps: float = 30.0

    def __post_init__(self):
        if not self.frames:
            raise ValueError("a video needs at least one frame")
        h, w = self.frames[0].shape[2:]
        for f in self.frames:
            if f.shape != (1, 3, h, w):
                raise ValueError(f"mixed frame shapes: {f.shape} vs (1, 3, {h}, {w})")

    @property
    def size(self) -> tuple[int, int]:
        return self.frames[0].shape[2], self.frames[0].shape[3]

    def __len__(self) -> int:
        return len(self.frames)


# ---------------------------------------------------------------------------
# PPM (P6) files


def _read_ppm_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    """First `count` whitespace-separated header tokens, skipping # comments;
    returns (tokens, offset just past the single whitespace after the last)."""
    tokens: list[bytes] = []
    i = 0
    while len(tokens) < count:
        if i >= len(data):
            raise ValueError("truncated PPM header")
        ch = data[i : i + 1]
        if ch.isspace():
            i += 1
        elif ch == b"#":
            while i < len(data) and data[i : i + 1] != b"\n":
                i += 1
        else:
            j = i
            while j < len(data) and not data[j : j + 1].isspace():
                j += 1
            tokens.append(data[i:j])
            i = j
    return tokens, i + 1  # exactly one whitespace byte separates header and raster


def read_ppm(path) -> np.ndarray:
    """P6 file -> (H, W, 3) uint8 array."""
    with open(path, "rb") as f:
        data = f.read()
    tokens, offset = _read_ppm_tokens(data, 4)
    if tokens[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM (magic {tokens[0]!r})")
    width, height, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: expected maxval 255, got {maxval}")
    need = width * height * 3
    raster = data[offset : offset + need]
    if len(raster) != need:
        raise ValueError(f"{path}: raster holds {len(raster)} bytes, needs {need}")
    return np.frombuffer(raster, dtype=np.uint8).reshape(height, width, 3)


def write_frame(frame: Tensor, path) -> None:
    """Write a [0,1] frame as P6; byte = floor(x*255 + 0.5) (round half up)."""
    if frame.ndim != 4 or frame.shape[0] != 1 or frame.shape[1] != 3:
        raise ValueError(f"frame must be (1, 3, H, W), got {frame.shape}")
    data = frame.data
    if data.min() < 0.0 or data.max() > 1.0:
        raise ValueError("frame values must lie in [0, 1]")
    h, w = data.shape[2:]
    raster = np.floor(data[0].transpose(1, 2, 0) * 255.0 + 0.5).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(raster.tobytes())


def read_frames(directory) -> Video:
    """All PPM frames in a directory, lexicographic order, normalized by /255."""
    names = sorted(n for n in os.listdir(directory) if n.endswith(".ppm"))
    if not names:
        raise ValueError(f"no .ppm frames in {directory}")
    frames = []
    size = None
    for name in names:
        arr = read_ppm(os.path.join(directory, name))
        if size is None:
            size = arr.shape[:2]
        elif arr.shape[:2] != size:
            raise ValueError(f"{name}: size {arr.shape[:2]} differs from {size}")
        frames.append(Tensor((arr.astype(np.float32) / 255.0).transpose(2, 0, 1)[None]))
    return Video(frames)


def write_frames(video: Video, directory) -> list[str]:
    os.makedirs(directory, exist_ok=True)
    paths = []
    for i, frame in enumerate(video.frames):
        p = os.path.join(directory, FRAME_NAME % i)
        write_frame(frame, p)
        paths.append(p)
    return paths


# ---------------------------------------------------------------------------
# Synthetic videos


def _moving_gradient(t_count, h, w, rng):
    yy, xx = np.meshgrid(
        np.linspace(0.0, 1.0, h), np.linspace(0.0, 1.0, w), indexing="ij"
    )
    phase0 = rng.uniform(0, 1, size=3)
    speed = rng.uniform(0.01, 0.03, size=3)
    frames = []
    for t in range(t_count):
        r = 0.5 + 0.5 * np.sin(2 * np.pi * (xx + phase0[0] + speed[0] * t))
        g = 0.5 + 0.5 * np.sin(2 * np.pi * (yy + phase0[1] + speed[1] * t))
        b = 0.5 + 0.5 * np.sin(2 * np.pi * (xx + yy + phase0[2] + speed[2] * t))
        frames.append(np.stack([r, g, b]))
    return frames


def _bouncing_square(t_count, h, w, rng):
    side = max(2, min(h, w) // 4)
    bg = rng.uniform(0.1, 0.4, size=3)
    color = rng.uniform(0.6, 0.95, size=3)
    y, x = rng.integers(0, h - side), rng.integers(0, w - side)
    dy, dx = 1, 1
    frames = []
    for _ in range(t_count):
        frame = np.tile(bg[:, None, None], (1, h, w))
        frame[:, y : y + side, x : x + side] = color[:, None, None]
        frames.append(frame)
        if y + dy < 0 or y + dy + side > h:
            dy = -dy
        if x + dx < 0 or x + dx + side > w:
            dx = -dx
        y += dy
        x += dx
    return frames


def _smooth2d(a, passes=3):
    for _ in range(passes):
        a = (
            a
            + np.roll(a, 1, axis=-1) + np.roll(a, -1, axis=-1)
            + np.roll(a, 1, axis=-2) + np.roll(a, -1, axis=-2)
        ) / 5.0
    return a


def _color_noise_smooth(t_count, h, w, rng):
    state = _smooth2d(rng.uniform(0, 1, size=(3, h, w)), passes=6)
    frames = []
    for _ in range(t_count):
        frames.append(state.copy())
        fresh = _smooth2d(rng.uniform(0, 1, size=(3, h, w)), passes=6)
        state = 0.9 * state + 0.1 * fresh  # temporally coherent drift
    lo = min(f.min() for f in frames)
    hi = max(f.max() for f in frames)
    return [(f - lo) / (hi - lo + 1e-9) for f in frames]


def synth_video(kind: str, t_count: int, h: int, w: int, seed: int) -> Video:
    """Deterministic synthetic video of one of the stock kinds."""
    if kind not in SYNTH_KINDS:
        raise ValueError(f"unknown kind {kind!r}; choose from {SYNTH_KINDS}")
    if t_count < 1 or h < 1 or w < 1:
        raise ValueError("t_count, h, w must be positive")
    rng = np.random.default_rng([seed, hash_kind(kind)])
    maker = {
        "moving_gradient": _moving_gradient,
        "bouncing_square": _bouncing_square,
        "color_noise_smooth": _color_noise_smooth,
    }[kind]
    frames = maker(t_count, h, w, rng)
    return Video([Tensor(np.clip(f, 0.0, 1.0)[None].astype(np.float32)) for f in frames])


def hash_kind(kind: str) -> int:
    """Stable small integer per kind (keeps seeds distinct across kinds)."""
    return SYNTH_KINDS.index(kind)


def adjacent_frame_mad(video: Video) -> float:
    """Largest mean absolute difference between consecutive frames."""
    if len(video) < 2:
        return 0.0
    return max(
        float(np.mean(np.abs(a.data - b.data)))
        for a, b in zip(video.frames, video.frames[1:])
    )
