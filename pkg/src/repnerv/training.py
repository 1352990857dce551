"""Overfitting loop and quality metrics.

The objective mixes mean absolute error with structural similarity:
alpha * L1 + (1 - alpha) * (1 - SSIM), averaged over the frames of a step.
SSIM here is the training implementation and the evaluation implementation;
MS-SSIM is evaluation-only. Optimization is bias-corrected Adam under a
cosine-annealed learning rate.

Budgets are steps or wall-clock seconds. The seconds clock counts
optimization time only; per-epoch metric evaluation runs off the clock so
matched-time comparisons measure training compute.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .model import Model, model_forward
from .tensor import Tape, Tensor, _record, abs_, backward, mean_all, mul, sub

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
PSNR_CAP_DB = 100.0


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """1-D Gaussian taps normalized to sum 1 (the 2-D window is separable)."""
    half = (size - 1) / 2.0
    x = np.arange(size) - half
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    return g / g.sum()


def _blur_axis(xd: np.ndarray, g: np.ndarray, axis: int) -> np.ndarray:
    win = sliding_window_view(xd, g.size, axis=axis)
    return win @ g


def gaussian_blur_valid(x: Tensor, g: np.ndarray) -> Tensor:
    """Separable per-channel Gaussian filtering, valid positions only."""
    n, c, h, w = x.shape
    k = g.size
    if h < k or w < k:
        raise ValueError(f"frame {h}x{w} smaller than the {k}x{k} window")

    def forward(xd):
        gg = g.astype(xd.dtype)
        return _blur_axis(_blur_axis(xd, gg, 2), gg, 3)

    def vjp(grad):
        # Adjoint of valid correlation is full correlation; the window is
        # symmetric so no flip is needed.
        gg = g.astype(grad.dtype)
        gp = np.pad(grad, ((0, 0), (0, 0), (k - 1, k - 1), (k - 1, k - 1)))
        return (_blur_axis(_blur_axis(gp, gg, 2), gg, 3),)

    return _record("gaussian_blur", forward(x.data), (x,), vjp, forward)


def _ssim_terms(x: Tensor, y: Tensor) -> tuple[Tensor, Tensor]:
    """Per-window (luminance, contrast-structure) maps on unit dynamic range."""
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    g = gaussian_window()
    mu_x = gaussian_blur_valid(x, g)
    mu_y = gaussian_blur_valid(y, g)
    mu_xx = mul(mu_x, mu_x)
    mu_yy = mul(mu_y, mu_y)
    mu_xy = mul(mu_x, mu_y)
    var_x = sub(gaussian_blur_valid(mul(x, x), g), mu_xx)
    var_y = sub(gaussian_blur_valid(mul(y, y), g), mu_yy)
    cov = sub(gaussian_blur_valid(mul(x, y), g), mu_xy)
    lum = (mu_xy * 2.0 + SSIM_C1) / (mu_xx + mu_yy + SSIM_C1)
    cs = (cov * 2.0 + SSIM_C2) / (var_x + var_y + SSIM_C2)
    return lum, cs


def ssim(x: Tensor, y: Tensor) -> Tensor:
    """Mean SSIM over valid 11x11 Gaussian windows, channels averaged.

    Differentiable (used inside the loss); pass plain tensors for
    evaluation. Inputs are (N, C, H, W) on unit dynamic range.
    """
    lum, cs = _ssim_terms(x, y)
    return mean_all(mul(lum, cs))


def _avg_pool2(xd: np.ndarray) -> np.ndarray:
    n, c, h, w = xd.shape
    h2, w2 = h // 2, w // 2
    v = xd[:, :, : h2 * 2, : w2 * 2].reshape(n, c, h2, 2, w2, 2)
    return v.mean(axis=(3, 5))


def ms_ssim(x: Tensor, y: Tensor, scales: int | None = None) -> float:
    """Multi-scale SSIM with 2x average-pool downsampling between scales.

    Uses the standard five weights, truncated and renormalized when the
    frame only supports fewer scales (desk-size frames support two); with a
    single scale of weight 1 this is exactly ssim(). Negative terms are
    clamped at zero before the weighted geometric mean.
    """
    h, w = x.shape[2], x.shape[3]
    max_scales = 0
    m = min(h, w)
    while m >= SSIM_WINDOW and max_scales < len(MS_SSIM_WEIGHTS):
        max_scales += 1
        m //= 2
    if max_scales == 0:
        raise ValueError(f"frame {h}x{w} smaller than the SSIM window")
    if scales is None:
        scales = max_scales
    if scales > max_scales:
        raise ValueError(f"frame {h}x{w} supports {max_scales} scales, not {scales}")
    weights = np.asarray(MS_SSIM_WEIGHTS[:scales])
    weights = weights / weights.sum()

    xd, yd = x.data.astype(np.float64), y.data.astype(np.float64)
    terms = []
    for j in range(scales):
        lum, cs = _ssim_terms(Tensor(xd), Tensor(yd))
        if j < scales - 1:
            terms.append(float(cs.data.mean()))
            xd, yd = _avg_pool2(xd), _avg_pool2(yd)
        else:
            terms.append(float((lum.data * cs.data).mean()))
    if scales == 1:
        return terms[0]  # exact definition collapse, sign preserved
    score = 1.0
    for term, weight in zip(terms, weights):
        score *= max(term, 0.0) ** weight
    return float(score)


def psnr(x, y) -> float:
    """10*log10(1/MSE) for unit-range inputs, capped at 100 dB."""
    xd = x.data if isinstance(x, Tensor) else np.asarray(x)
    yd = y.data if isinstance(y, Tensor) else np.asarray(y)
    mse = float(np.mean((xd.astype(np.float64) - yd.astype(np.float64)) ** 2))
    if mse < 1e-10:
        return PSNR_CAP_DB
    return 10.0 * np.log10(1.0 / mse)


def loss(pred: Tensor, gt: Tensor, alpha: float) -> Tensor:
    """alpha * mean|pred-gt| + (1-alpha) * (1 - SSIM), frames averaged.

    Batched inputs average both terms over the batch (equal-size frames, so
    this equals the mean of per-frame losses).
    """
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha {alpha} outside [0, 1]")
    l1 = mean_all(abs_(sub(pred, gt)))
    if alpha == 1.0:
        return l1
    ssim_term = sub(ssim(pred, gt), 1.0) * -1.0
    return l1 * alpha + ssim_term * (1.0 - alpha)


# ---------------------------------------------------------------------------
# Optimizer and schedule


@dataclass
class TrainConfig:
    alpha: float = 0.7
    lr0: float = 5e-4
    betas: tuple[float, float] = (0.5, 0.999)
    eps: float = 1e-8
    total_steps: int = 1000
    seed: int = 0
    batch: int = 1

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha {self.alpha} outside [0, 1]")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        b1, b2 = self.betas
        if not (0.0 <= b1 < 1.0 and 0.0 <= b2 < 1.0):
            raise ValueError(f"betas {self.betas} outside [0, 1)")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")


@dataclass
class AdamState:
    betas: tuple[float, float] = (0.5, 0.999)
    eps: float = 1e-8
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    steps: dict[str, int] = field(default_factory=dict)


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, Tensor],
    state: AdamState,
    lr: float,
) -> dict[str, Tensor]:
    """One bias-corrected Adam update; returns the new parameter values.

    A parameter whose gradient is exactly all-zero (or missing) is left
    untouched, moments included, so zero-gradient steps are the identity.
    """
    b1, b2 = state.betas
    out: dict[str, Tensor] = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None or not np.any(g.data):
            out[name] = p
            continue
        gd = g.data
        if gd.shape != p.shape:
            raise ValueError(f"gradient shape {gd.shape} != param shape {p.shape} ({name})")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
            state.steps[name] = 0
        v = state.v[name]
        t = state.steps[name] + 1
        m = b1 * m + (1.0 - b1) * gd
        v = b2 * v + (1.0 - b2) * gd * gd
        state.m[name], state.v[name], state.steps[name] = m, v, t
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        out[name] = Tensor(p.data - lr * m_hat / (np.sqrt(v_hat) + state.eps))
    return out


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    """lr0 * 0.5 * (1 + cos(pi * step / total_steps)); reaches 0 at the end."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr0 * 0.5 * (1.0 + float(np.cos(np.pi * step / total_steps)))


# ---------------------------------------------------------------------------
# Training loop


@dataclass
class Budget:
    kind: str  # "steps" | "seconds"
    amount: float

    def __post_init__(self):
        if self.kind not in ("steps", "seconds"):
            raise ValueError(f"budget kind must be steps or seconds, got {self.kind!r}")
        if self.kind == "steps" and (self.amount < 0 or self.amount != int(self.amount)):
            raise ValueError(f"steps budget must be a non-negative integer, got {self.amount}")
        if self.kind == "seconds" and self.amount <= 0:
            raise ValueError("seconds budget must be positive")

    @staticmethod
    def parse(text: str) -> "Budget":
        kind, _, amount = text.partition(":")
        if not amount:
            raise ValueError(f"budget must look like steps:N or seconds:S, got {text!r}")
        return Budget(kind, float(amount))


def frame_indices(count: int) -> list[float]:
    """Normalized frame times: k / (T-1), with the single-frame video at 0."""
    if count == 1:
        return [0.0]
    return [k / (count - 1) for k in range(count)]


def evaluate(model: Model, frames: Sequence[Tensor]) -> dict:
    """Mean and per-frame PSNR / MS-SSIM of the model against the frames."""
    times = frame_indices(len(frames))
    psnrs = []
    msssims = []
    for t, gt in zip(times, frames):
        pred = model_forward(model, t)
        psnrs.append(psnr(pred, gt))
        msssims.append(ms_ssim(pred, gt))
    return {
        "psnr": float(np.mean(psnrs)),
        "ms_ssim": float(np.mean(msssims)),
        "per_frame_psnr": psnrs,
        "per_frame_ms_ssim": msssims,
    }


@dataclass
class TrainResult:
    model: Model
    log: list[dict]
    steps: int
    opt_seconds: float


def train(model: Model, frames: Sequence[Tensor], cfg: TrainConfig,
          budget: Budget, masks: dict[str, np.ndarray] | None = None) -> TrainResult:
    """Overfit the model to the frames under a steps or seconds budget.

    Frames are visited in a seeded per-epoch shuffle; each step runs
    forward/backward on `cfg.batch` frames and one Adam update at the
    cosine-annealed rate. One log row is appended per epoch (and at the
    final partial epoch), carrying full-video PSNR / MS-SSIM evaluated off
    the budget clock. Raises on a non-finite loss.

    `masks` (name -> keep bitmap) pins pruned positions: the mask is
    re-applied after every update, so masked entries stay exactly zero.
    """
    n_frames = len(frames)
    if n_frames == 0:
        raise ValueError("empty video")
    times = frame_indices(n_frames)
    rng = np.random.default_rng([cfg.seed, 1])  # distinct stream from init
    state = AdamState(betas=cfg.betas, eps=cfg.eps)
    log: list[dict] = []
    step = 0
    epoch = 0
    opt_seconds = 0.0
    last_loss = float("nan")
    last_lr = cosine_lr(0, cfg.total_steps, cfg.lr0)

    def budget_reached() -> bool:
        if budget.kind == "steps":
            return step >= budget.amount
        return opt_seconds >= budget.amount

    def log_row():
        metrics = evaluate(model, frames)  # off the budget clock
        log.append({
            "step": step,
            "epoch": epoch,
            "wall_clock_s": opt_seconds,
            "lr": last_lr,
            "loss": last_loss,
            "psnr": metrics["psnr"],
            "ms_ssim": metrics["ms_ssim"],
        })

    while not budget_reached():
        order = rng.permutation(n_frames)
        stopped_mid_epoch = False
        for start in range(0, n_frames, cfg.batch):
            chunk = order[start : start + cfg.batch]
            t0 = time.perf_counter()
            last_lr = cosine_lr(min(step, cfg.total_steps), cfg.total_steps, cfg.lr0)
            tape = Tape()
            bound = model.bind(tape).prefuse()
            total = None
            for idx in chunk:
                pred = model_forward(bound, times[idx])
                frame_loss = loss(pred, frames[idx], cfg.alpha)
                total = frame_loss if total is None else total + frame_loss
            if len(chunk) > 1:
                total = total * (1.0 / len(chunk))
            last_loss = total.item()
            if not np.isfinite(last_loss):
                raise RuntimeError(
                    f"non-finite loss {last_loss} at step {step} (epoch {epoch})"
                )
            grads = backward(tape, total)
            params = dict(model.named_parameters())
            updated = adam_step(params, grads, state, last_lr)
            if masks:
                for name, keep in masks.items():
                    updated[name] = Tensor(updated[name].data * keep)
            model = model.load_parameters(updated)
            opt_seconds += time.perf_counter() - t0
            step += 1
            if budget_reached():
                stopped_mid_epoch = start + cfg.batch < n_frames
                break
        epoch += 1
        log_row()
        if stopped_mid_epoch:
            break

    return TrainResult(model=model, log=log, steps=step, opt_seconds=opt_seconds)


METRIC_COLUMNS = ("step", "epoch", "wall_clock_s", "lr", "loss", "psnr", "ms_ssim")


def write_metric_log(path, rows: list[dict]) -> None:
    """CSV metric log; floats via repr so identical runs serialize identically."""
    with open(path, "w") as f:
        f.write(",".join(METRIC_COLUMNS) + "\n")
        for row in rows:
            f.write(",".join(_fmt(row[c]) for c in METRIC_COLUMNS) + "\n")


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)
