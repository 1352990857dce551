"""Command-line entry point wiring the library into the experiment workflows.

Subcommands: synth, train, fuse, eval, compress, ablate. Runs are configured
by a flat key=value file ('#' comments) plus key=value overrides on the
command line; unknown keys are rejected and every run writes its fully
resolved configuration next to its outputs. Exit codes: 0 success, 1 usage
error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import compression as cz
from .blocks import TABLE3_ROWS
from .layers import Mode
from .model import (
    Model,
    ModelConfig,
    load_checkpoint,
    model_forward,
    save_checkpoint,
    structural_fuse_model,
)
from .training import Budget, TrainConfig, evaluate, frame_indices, train, write_metric_log
from .video import SYNTH_KINDS, read_frames, synth_video, write_frames


class UsageError(Exception):
    pass


CONFIG_DEFAULTS: dict[str, str] = {
    "factors": "2,2",
    "channels": "32,16,8",
    "mlp_hidden": "64",
    "pe_base": "1.25",
    "pe_levels": "40",
    "preset": "erb",
    "activation": "gelu",
    "seq_mid": "",
    "alpha": "0.7",
    "lr0": "5e-4",
    "beta1": "0.5",
    "beta2": "0.999",
    "eps": "1e-8",
    "total_steps": "3000",
    "seed": "0",
    "batch": "1",
    "sparsity": "0.1",
    "bits": "8",
    "finetune_steps": "0",
}


def parse_config_file(path) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value, got {raw.rstrip()!r}")
            key, _, value = line.partition("=")
            key = key.strip()
            if key not in CONFIG_DEFAULTS:
                raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
            out[key] = value.strip()
    return out


def apply_overrides(cfg: dict[str, str], overrides: list[str]) -> None:
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"override {item!r} is not key=value")
        key, _, value = item.partition("=")
        if key not in CONFIG_DEFAULTS:
            raise UsageError(f"unknown config key {key!r}")
        cfg[key] = value


def load_run_config(config_path, overrides, seed_override) -> dict[str, str]:
    cfg = dict(CONFIG_DEFAULTS)
    if config_path:
        cfg.update(parse_config_file(config_path))
    apply_overrides(cfg, overrides or [])
    if seed_override is not None:
        cfg["seed"] = str(seed_override)
    return cfg


def write_resolved_config(cfg: dict[str, str], path, extra: dict | None = None) -> None:
    with open(path, "w") as f:
        f.write("# resolved configuration\n")
        for key in sorted(cfg):
            f.write(f"{key}={cfg[key]}\n")
        for key in sorted(extra or {}):
            f.write(f"# {key}={extra[key]}\n")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(",") if x.strip())


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.split(",") if x.strip())


def _preset(text: str):
    if text in ("erb", "plain"):
        return text
    return tuple(text.split("+"))


def build_model_config(cfg: dict[str, str], frame_h: int, frame_w: int) -> ModelConfig:
    factors = _ints(cfg["factors"])
    prod = int(np.prod(factors)) if factors else 1
    if frame_h % prod or frame_w % prod:
        raise UsageError(
            f"frame {frame_h}x{frame_w} not divisible by factor product {prod}"
        )
    preset = _preset(cfg["preset"])
    return ModelConfig(
        frame_h=frame_h,
        frame_w=frame_w,
        factors=factors,
        h0=frame_h // prod,
        w0=frame_w // prod,
        channels=_ints(cfg["channels"]),
        mlp_hidden=_ints(cfg["mlp_hidden"]),
        pe_base=float(cfg["pe_base"]),
        pe_levels=int(cfg["pe_levels"]),
        presets=(preset,) * len(factors),
        activation=cfg["activation"],
        seq_mid=int(cfg["seq_mid"]) if cfg["seq_mid"] else None,
    )


def build_train_config(cfg: dict[str, str]) -> TrainConfig:
    return TrainConfig(
        alpha=float(cfg["alpha"]),
        lr0=float(cfg["lr0"]),
        betas=(float(cfg["beta1"]), float(cfg["beta2"])),
        eps=float(cfg["eps"]),
        total_steps=int(cfg["total_steps"]),
        seed=int(cfg["seed"]),
        batch=int(cfg["batch"]),
    )


# ---------------------------------------------------------------------------
# Commands


def cmd_synth(args) -> int:
    video = synth_video(args.kind, args.frames, args.height, args.width, args.seed)
    write_frames(video, args.out)
    cfg = {"seed": str(args.seed)}
    write_resolved_config(cfg, os.path.join(args.out, "synth.config.txt"), extra={
        "kind": args.kind, "frames": args.frames,
        "height": args.height, "width": args.width,
    })
    print(f"wrote {len(video)} frames to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, args.override, args.seed)
    video = read_frames(args.frames)
    h, w = video.size
    if args.mode == "plain":
        cfg["preset"] = "plain"
    model_cfg = build_model_config(cfg, h, w)
    train_cfg = build_train_config(cfg)
    mode = Mode.EXPLICIT_TRAIN if args.mode == "explicit" else Mode.ONLINE_TRAIN
    model = Model.init(model_cfg, seed=train_cfg.seed, mode=mode)
    budget = Budget.parse(args.budget)
    result = train(model, video.frames, train_cfg, budget)
    save_checkpoint(args.out, result.model, step=result.steps)
    write_metric_log(args.out + ".metrics.csv", result.log)
    write_resolved_config(cfg, args.out + ".config.txt", extra={
        "mode": args.mode, "budget": args.budget, "frames_dir": args.frames,
    })
    final = result.log[-1] if result.log else {"psnr": float("nan"), "ms_ssim": float("nan")}
    print(
        f"trained {result.steps} steps ({result.opt_seconds:.2f}s optimization): "
        f"psnr {final['psnr']:.3f} dB, ms_ssim {final['ms_ssim']:.5f}"
    )
    return 0


def cmd_fuse(args) -> int:
    model, step = load_checkpoint(args.input)
    fused = structural_fuse_model(model)
    save_checkpoint(args.out, fused, step=step)
    write_resolved_config({}, args.out + ".config.txt", extra={"source": args.input})
    before = sum(t.size for _, t in model.named_parameters())
    after = sum(t.size for _, t in fused.named_parameters())
    print(f"fused: {before} params -> {after} params")
    return 0


def cmd_eval(args) -> int:
    model, _ = load_checkpoint(args.ckpt)
    video = read_frames(args.frames)
    metrics = evaluate(model, video.frames)
    times = frame_indices(len(video))
    t0 = time.perf_counter()
    for t in times:
        model_forward(model, t)
    decode_seconds = time.perf_counter() - t0
    report = {
        "frames": len(video),
        "mean_psnr": metrics["psnr"],
        "mean_ms_ssim": metrics["ms_ssim"],
        "per_frame_psnr": metrics["per_frame_psnr"],
        "per_frame_ms_ssim": metrics["per_frame_ms_ssim"],
        "decode_fps": len(video) / decode_seconds,
    }
    with open(args.out, "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    write_resolved_config({}, args.out + ".config.txt", extra={
        "ckpt": args.ckpt, "frames_dir": args.frames,
    })
    print(f"psnr {report['mean_psnr']:.3f} dB, ms_ssim {report['mean_ms_ssim']:.5f}, "
          f"decode {report['decode_fps']:.1f} fps")
    return 0


def cmd_compress(args) -> int:
    cfg = load_run_config(args.config, args.override, args.seed)
    if args.sparsity is not None:
        cfg["sparsity"] = args.sparsity
    if args.bits is not None:
        cfg["bits"] = args.bits
    if args.finetune_steps is not None:
        cfg["finetune_steps"] = str(args.finetune_steps)
    sparsities = _floats(cfg["sparsity"])
    bits_list = _ints(cfg["bits"])
    if any(not 0.0 <= s < 1.0 for s in sparsities):
        raise UsageError(f"sparsity values must lie in [0, 1), got {sparsities}")
    if any(not 2 <= b <= 16 for b in bits_list):
        raise UsageError(f"bit widths must lie in [2, 16], got {bits_list}")
    finetune_steps = int(cfg["finetune_steps"])

    model, step = load_checkpoint(args.ckpt)
    if not model.deployed:
        model = structural_fuse_model(model)
    video = read_frames(args.frames)
    train_cfg = build_train_config(cfg)
    rows = cz.rd_sweep(model, video.frames, sparsities, bits_list,
                       finetune_steps=finetune_steps, train_cfg=train_cfg)
    cz.write_rd_csv(args.out + ".rd.csv", rows)
    # the serialized model uses the first operating point
    cm = cz.compress_model(model, sparsity=sparsities[0], bits=bits_list[0],
                           frames=video.frames, finetune_steps=finetune_steps,
                           train_cfg=train_cfg, step=step)
    cz.save_compressed(args.out, cm)
    write_resolved_config(cfg, args.out + ".config.txt", extra={
        "ckpt": args.ckpt, "frames_dir": args.frames,
    })
    h, w = video.size
    rate = cz.bpp(cm.total_bits, len(video), h, w)
    print(f"compressed to {cm.total_bits} bits ({rate:.4f} bpp) at "
          f"sparsity {sparsities[0]}, {bits_list[0]} bits")
    return 0


def _ablation_model_config(cfg: dict[str, str], h: int, w: int, preset) -> ModelConfig:
    # One stage with equal in/out conv channels so depthwise branch kinds
    # (avgpool, fixed filters) are expressible in every row.
    if h % 2 or w % 2:
        raise UsageError(f"ablation needs even frame dimensions, got {h}x{w}")
    c0 = 32
    return ModelConfig(
        frame_h=h, frame_w=w, factors=(2,), h0=h // 2, w0=w // 2,
        channels=(c0, c0 // 4), mlp_hidden=_ints(cfg["mlp_hidden"]),
        pe_base=float(cfg["pe_base"]), pe_levels=int(cfg["pe_levels"]),
        presets=(preset,), activation=cfg["activation"],
        seq_mid=int(cfg["seq_mid"]) if cfg["seq_mid"] else None,
    )


def cmd_ablate(args) -> int:
    cfg = load_run_config(args.config, args.override, args.seed)
    video = read_frames(args.frames)
    h, w = video.size
    budget = Budget.parse(args.budget)
    train_cfg = build_train_config(cfg)
    rows_spec: list[tuple[str, object]] = [("+".join(r), r) for r in TABLE3_ROWS]
    if args.rows == "all":
        rows_spec.append(("plain", "plain"))
    results = []
    for name, preset in rows_spec:
        model_cfg = _ablation_model_config(cfg, h, w, preset)
        model = Model.init(model_cfg, seed=train_cfg.seed, mode=Mode.ONLINE_TRAIN)
        result = train(model, video.frames, train_cfg, budget)
        final = result.log[-1] if result.log else {"psnr": float("nan"), "ms_ssim": float("nan")}
        results.append({"branches": name, "psnr": final["psnr"], "ms_ssim": final["ms_ssim"]})
        print(f"{name}: psnr {final['psnr']:.3f} dB, ms_ssim {final['ms_ssim']:.5f}")
    with open(args.out, "w") as f:
        f.write("branches,psnr,ms_ssim\n")
        for r in results:
            f.write(f"{r['branches']},{r['psnr']!r},{r['ms_ssim']!r}\n")
    write_resolved_config(cfg, args.out + ".config.txt", extra={
        "rows": args.rows, "budget": args.budget, "frames_dir": args.frames,
    })
    return 0


# ---------------------------------------------------------------------------
# Parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="repnerv", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic PPM frame directory")
    sp.add_argument("--kind", choices=SYNTH_KINDS, required=True)
    sp.add_argument("--frames", type=int, default=16)
    sp.add_argument("--height", type=int, default=32)
    sp.add_argument("--width", type=int, default=64)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_synth)

    tp = sub.add_parser("train", help="overfit a model to a frame directory")
    tp.add_argument("--config")
    tp.add_argument("--frames", required=True)
    tp.add_argument("--out", required=True)
    tp.add_argument("--mode", choices=("online", "explicit", "plain"), default="online")
    tp.add_argument("--budget", required=True, help="steps:N or seconds:S")
    tp.add_argument("--seed", type=int)
    tp.add_argument("--set", dest="override", action="append", default=[],
                    metavar="KEY=VALUE", help="config override (repeatable)")
    tp.set_defaults(fn=cmd_train)

    fp = sub.add_parser("fuse", help="structurally fuse a checkpoint to deploy form")
    fp.add_argument("input")
    fp.add_argument("out")
    fp.set_defaults(fn=cmd_fuse)

    ep = sub.add_parser("eval", help="PSNR / MS-SSIM / decode FPS of a checkpoint")
    ep.add_argument("ckpt")
    ep.add_argument("frames")
    ep.add_argument("--out", required=True)
    ep.set_defaults(fn=cmd_eval)

    cp = sub.add_parser("compress", help="prune, quantize, and entropy-code a checkpoint")
    cp.add_argument("ckpt")
    cp.add_argument("frames")
    cp.add_argument("--config")
    cp.add_argument("--sparsity", help="value or comma list (default 0.1)")
    cp.add_argument("--bits", help="value or comma list (default 8)")
    cp.add_argument("--finetune-steps", type=int, dest="finetune_steps")
    cp.add_argument("--seed", type=int)
    cp.add_argument("--out", required=True)
    cp.add_argument("--set", dest="override", action="append", default=[],
                    metavar="KEY=VALUE")
    cp.set_defaults(fn=cmd_compress)

    ap = sub.add_parser("ablate", help="train every branch-library row and tabulate quality")
    ap.add_argument("--frames", required=True)
    ap.add_argument("--rows", choices=("table3", "all"), default="table3")
    ap.add_argument("--budget", required=True)
    ap.add_argument("--config")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--out", required=True)
    ap.add_argument("--set", dest="override", action="append", default=[],
                    metavar="KEY=VALUE")
    ap.set_defaults(fn=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except SystemExit:
        raise
    except (ValueError, RuntimeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
