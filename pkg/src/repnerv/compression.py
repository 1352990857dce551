"""Deploy-form model compression: magnitude pruning, affine quantization,
canonical Huffman coding, and bits-per-pixel accounting.

The pipeline operates on a deploy-form (structurally fused) model:
prune globally by magnitude (biases exempt), optionally fine-tune with the
mask pinned, quantize each tensor to b bits with stored float32 (min, scale),
then Huffman-code all tensors' integer codes against one global histogram.
Decompression restores the quantized values exactly; only quantization
itself is lossy.
"""

from __future__ import annotations

import heapq
import json
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .model import Mode, Model, ModelConfig, model_from_values
from .tensor import Tensor
from .training import Budget, TrainConfig, evaluate, train

COMPRESSED_MAGIC = b"RNVZ"


# ---------------------------------------------------------------------------
# Pruning


def _prunable(name: str, t: Tensor) -> bool:
    # kernels and weight matrices; 1-D tensors (biases) are exempt
    return t.ndim >= 2


def prune(params: dict[str, Tensor], sparsity: float
          ) -> tuple[dict[str, Tensor], dict[str, np.ndarray]]:
    """Zero the globally smallest-magnitude floor(sparsity*N) prunable weights.

    Ties break by (tensor, index) order, tensors in dict order. Returns the
    pruned parameters and a keep-mask per prunable tensor.
    """
    if not 0.0 <= sparsity < 1.0:
        raise ValueError(f"sparsity {sparsity} outside [0, 1)")
    names = [n for n, t in params.items() if _prunable(n, t)]
    magnitudes = np.concatenate(
        [np.abs(params[n].data.reshape(-1)).astype(np.float64) for n in names]
    ) if names else np.zeros(0)
    kill_count = int(np.floor(sparsity * magnitudes.size))
    keep_flat = np.ones(magnitudes.size, dtype=bool)
    if kill_count:
        order = np.argsort(magnitudes, kind="stable")
        keep_flat[order[:kill_count]] = False

    out = dict(params)
    masks: dict[str, np.ndarray] = {}
    offset = 0
    for n in names:
        t = params[n]
        keep = keep_flat[offset : offset + t.size].reshape(t.shape)
        offset += t.size
        masks[n] = keep
        out[n] = Tensor(t.data * keep)
    return out, masks


def finetune_after_prune(model: Model, masks: dict[str, np.ndarray],
                         frames: Sequence[Tensor], steps: int,
                         cfg: TrainConfig | None = None) -> Model:
    """Brief masked training after pruning; masked positions stay exactly zero."""
    if steps == 0:
        return model
    cfg = cfg if cfg is not None else TrainConfig(total_steps=max(steps, 1))
    result = train(model, frames, cfg, Budget("steps", steps), masks=masks)
    return result.model


# ---------------------------------------------------------------------------
# Quantization


@dataclass
class QuantizedTensor:
    codes: np.ndarray  # integer codes, original shape
    minimum: float  # float32 value
    scale: float  # float32 value
    bits: int


def quantize(t, bits: int) -> QuantizedTensor:
    """Per-tensor affine quantization to `bits` bits.

    scale = (max - min) / (2^bits - 1); codes = round((x - min) / scale),
    clamped. A constant tensor quantizes with scale 0 and all-zero codes.
    """
    if not 2 <= bits <= 16:
        raise ValueError(f"bits {bits} outside [2, 16]")
    data = (t.data if isinstance(t, Tensor) else np.asarray(t)).astype(np.float32)
    lo = np.float32(data.min())
    hi = np.float32(data.max())
    levels = (1 << bits) - 1
    scale = np.float32((hi - lo) / levels)
    if scale == 0.0:
        codes = np.zeros(data.shape, dtype=np.uint16)
    else:
        codes = np.clip(np.rint((data - lo) / scale), 0, levels).astype(np.uint16)
    return QuantizedTensor(codes, float(lo), float(scale), bits)


def dequantize(codes: np.ndarray, minimum: float, scale: float) -> Tensor:
    """x_hat = min + scale * code, in float32."""
    return Tensor(
        np.float32(minimum) + np.float32(scale) * codes.astype(np.float32)
    )


# ---------------------------------------------------------------------------
# Canonical Huffman coding over a single global histogram


def huffman_code_lengths(freqs: dict[int, int]) -> dict[int, int]:
    """Optimal prefix-code bit lengths; a single-symbol alphabet gets 1 bit."""
    if not freqs:
        raise ValueError("empty alphabet")
    if len(freqs) == 1:
        return {next(iter(freqs)): 1}
    heap = [(f, sym, None) for sym, f in sorted(freqs.items())]
    heapq.heapify(heap)
    counter = max(freqs) + 1
    children: dict[int, tuple] = {}
    while len(heap) > 1:
        fa, ida, _ = heapq.heappop(heap)
        fb, idb, _ = heapq.heappop(heap)
        node = counter
        counter += 1
        children[node] = (ida, idb)
        heapq.heappush(heap, (fa + fb, node, True))
    lengths: dict[int, int] = {}
    stack = [(heap[0][1], 0)]
    while stack:
        node, depth = stack.pop()
        if node in children:
            a, b = children[node]
            stack.append((a, depth + 1))
            stack.append((b, depth + 1))
        else:
            lengths[node] = depth
    return lengths


def canonical_codes(lengths: dict[int, int]) -> dict[int, int]:
    """Canonical code values from code lengths (sorted by length, then symbol)."""
    items = sorted(lengths.items(), key=lambda kv: (kv[1], kv[0]))
    codes: dict[int, int] = {}
    code = 0
    prev = items[0][1]
    for sym, ln in items:
        code <<= ln - prev
        codes[sym] = code
        code += 1
        prev = ln
    return codes


def entropy_encode(tensors: Sequence[np.ndarray]) -> tuple[bytes, dict[int, int], int]:
    """Huffman-encode the concatenated integer symbols of all tensors.

    Returns (payload bytes, code-length table, payload bit count). One code
    table serves every tensor (global histogram), minimizing table overhead.
    """
    symbols = (
        np.concatenate([t.reshape(-1).astype(np.int64) for t in tensors])
        if tensors else np.zeros(0, np.int64)
    )
    if symbols.size == 0:
        return b"", {}, 0
    values, counts = np.unique(symbols, return_counts=True)
    lengths = huffman_code_lengths({int(v): int(c) for v, c in zip(values, counts)})
    codes = canonical_codes(lengths)

    len_of = np.zeros(int(values.max()) + 1, dtype=np.int64)
    for sym, ln in lengths.items():
        len_of[sym] = ln
    sym_lengths = len_of[symbols]
    total_bits = int(sym_lengths.sum())
    starts = np.concatenate([[0], np.cumsum(sym_lengths)[:-1]])
    bits = np.zeros(total_bits, dtype=np.uint8)
    for sym in values:
        sym = int(sym)
        ln = lengths[sym]
        pattern = np.array(
            [(codes[sym] >> (ln - 1 - k)) & 1 for k in range(ln)], dtype=np.uint8
        )
        where = np.nonzero(symbols == sym)[0]
        idx = starts[where][:, None] + np.arange(ln)[None, :]
        bits[idx.reshape(-1)] = np.tile(pattern, where.size)
    return np.packbits(bits).tobytes(), lengths, total_bits


def entropy_decode(payload: bytes, lengths: dict[int, int], count: int) -> np.ndarray:
    """Invert entropy_encode: the first `count` symbols of the bitstream."""
    if count == 0:
        return np.zeros(0, dtype=np.int64)
    by_len: dict[int, list[int]] = {}
    for sym, ln in lengths.items():
        by_len.setdefault(ln, []).append(sym)
    first_code: dict[int, int] = {}
    sym_table: dict[int, list[int]] = {}
    code = 0
    prev = None
    for ln in sorted(by_len):
        syms = sorted(by_len[ln])
        code = code << (ln - prev) if prev is not None else 0
        first_code[ln] = code
        sym_table[ln] = syms
        code += len(syms)
        prev = ln
    bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8))
    out = np.empty(count, dtype=np.int64)
    acc = 0
    ln = 0
    pos = 0
    for n in range(count):
        while True:
            if pos >= bits.size:
                raise ValueError("bitstream exhausted before all symbols decoded")
            acc = (acc << 1) | int(bits[pos])
            pos += 1
            ln += 1
            syms = sym_table.get(ln)
            if syms is not None:
                idx = acc - first_code[ln]
                if 0 <= idx < len(syms):
                    out[n] = syms[idx]
                    acc = 0
                    ln = 0
                    break
    return out


# ---------------------------------------------------------------------------
# Whole-model compression


@dataclass
class CompressedModel:
    manifest: dict
    mask_bytes: bytes
    payload: bytes
    code_lengths: dict[int, int]

    @property
    def total_bits(self) -> int:
        return int(self.manifest["total_bits"])


def _serialize_manifest(manifest: dict) -> bytes:
    return json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()


def compress_model(model: Model, sparsity: float = 0.1, bits: int = 8,
                   frames: Sequence[Tensor] | None = None, finetune_steps: int = 0,
                   train_cfg: TrainConfig | None = None, step: int = 0) -> CompressedModel:
    """prune -> (optional fine-tune) -> quantize -> entropy-encode.

    Requires a deploy-form model. total_bits is the exact serialized size,
    decomposed as manifest + mask + payload bits.
    """
    if not model.deployed:
        raise ValueError("compression expects a deploy-form model (run structural fusion)")
    params = dict(model.named_parameters())
    pruned, masks = prune(params, sparsity)
    if finetune_steps:
        if frames is None:
            raise ValueError("fine-tuning after pruning needs the training frames")
        model = finetune_after_prune(
            model.load_parameters(pruned), masks, frames, finetune_steps, train_cfg)
        pruned = dict(model.named_parameters())

    tensors = []
    entries = []
    for name, t in pruned.items():
        q = quantize(t, bits)
        tensors.append(q.codes)
        entries.append({
            "name": name,
            "shape": list(t.shape),
            "bits": bits,
            "min": q.minimum,
            "scale": q.scale,
            "pruned": name in masks,
        })
    payload, lengths, payload_bits = entropy_encode(tensors)
    mask_bits_arr = (
        np.concatenate([masks[e["name"]].reshape(-1) for e in entries if e["pruned"]])
        if masks else np.zeros(0, dtype=bool)
    )
    mask_bytes = np.packbits(mask_bits_arr).tobytes()

    manifest = {
        "config": model.config.to_dict(),
        "layer_modes": [s.mode.value for s in model.stages],
        "tensors": entries,
        "code_lengths": {str(k): v for k, v in sorted(lengths.items())},
        "payload_bits": payload_bits,
        "step": int(step),
        "sparsity": sparsity,
        "finetune_steps": int(finetune_steps),
    }
    # total_bits = exact serialized size; the manifest stores its own total,
    # so fix it by accounting for the digits of the total field itself.
    manifest["total_bits"] = 0
    base = len(_serialize_manifest(manifest))
    overhead = 4 + 8 + len(mask_bytes) + len(payload)
    total = 8 * (base + overhead)
    while True:
        manifest["total_bits"] = total
        candidate = 8 * (len(_serialize_manifest(manifest)) + overhead)
        if candidate == total:
            break
        total = candidate
    return CompressedModel(manifest, mask_bytes, payload, lengths)


def save_compressed(path, cm: CompressedModel) -> None:
    payload = _serialize_manifest(cm.manifest)
    with open(path, "wb") as f:
        f.write(COMPRESSED_MAGIC)
        f.write(struct.pack("<Q", len(payload)))
        f.write(payload)
        f.write(cm.mask_bytes)
        f.write(cm.payload)


def load_compressed(path) -> CompressedModel:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != COMPRESSED_MAGIC:
            raise ValueError(f"bad compressed-model magic {magic!r}")
        (mlen,) = struct.unpack("<Q", f.read(8))
        manifest = json.loads(f.read(mlen).decode())
        rest = f.read()
    mask_count = sum(
        int(np.prod(e["shape"])) for e in manifest["tensors"] if e["pruned"]
    )
    mask_len = (mask_count + 7) // 8
    lengths = {int(k): v for k, v in manifest["code_lengths"].items()}
    return CompressedModel(manifest, rest[:mask_len], rest[mask_len:], lengths)


def decompress_model(cm: CompressedModel) -> tuple[Model, int]:
    """Rebuild the deploy-form model carrying the quantized values exactly."""
    manifest = cm.manifest
    entries = manifest["tensors"]
    total_symbols = sum(int(np.prod(e["shape"])) for e in entries)
    symbols = entropy_decode(cm.payload, cm.code_lengths, total_symbols)
    mask_count = sum(int(np.prod(e["shape"])) for e in entries if e["pruned"])
    mask_flat = np.unpackbits(
        np.frombuffer(cm.mask_bytes, dtype=np.uint8), count=mask_count
    ).astype(bool) if mask_count else np.zeros(0, bool)

    values: dict[str, Tensor] = {}
    sym_off = 0
    mask_off = 0
    for e in entries:
        size = int(np.prod(e["shape"]))
        codes = symbols[sym_off : sym_off + size].reshape(e["shape"])
        sym_off += size
        restored = dequantize(codes, e["min"], e["scale"])
        if e["pruned"]:
            keep = mask_flat[mask_off : mask_off + size].reshape(e["shape"])
            mask_off += size
            restored = Tensor(restored.data * keep)
        values[e["name"]] = restored
    config = ModelConfig.from_dict(manifest["config"])
    modes = [Mode(m) for m in manifest["layer_modes"]]
    return model_from_values(config, modes, values), int(manifest["step"])


# ---------------------------------------------------------------------------
# Accounting and sweeps


def bpp(total_bits: int, t_count: int, h: int, w: int) -> float:
    """Bits per pixel across the whole video."""
    if t_count <= 0 or h <= 0 or w <= 0:
        raise ValueError("frame count and dimensions must be positive")
    return total_bits / (t_count * h * w)


def rd_sweep(model: Model, frames: Sequence[Tensor], sparsities: Sequence[float],
             bits_list: Sequence[int], finetune_steps: int = 0,
             train_cfg: TrainConfig | None = None) -> list[dict]:
    """Rate-distortion table over (sparsity, bits) operating points.

    Each point compresses, decodes, and evaluates the decoded model against
    the frames. Rows carry whether fine-tuning ran (finetune_steps).
    """
    rows = []
    t_count = len(frames)
    h, w = frames[0].shape[2], frames[0].shape[3]
    for s in sparsities:
        for b in bits_list:
            cm = compress_model(model, sparsity=s, bits=b, frames=frames,
                                finetune_steps=finetune_steps, train_cfg=train_cfg)
            decoded, _ = decompress_model(cm)
            metrics = evaluate(decoded, frames)
            rows.append({
                "sparsity": s,
                "bits": b,
                "finetune_steps": finetune_steps,
                "total_bits": cm.total_bits,
                "bpp": bpp(cm.total_bits, t_count, h, w),
                "psnr": metrics["psnr"],
                "ms_ssim": metrics["ms_ssim"],
            })
    return rows


RD_COLUMNS = ("sparsity", "bits", "finetune_steps", "total_bits", "bpp", "psnr", "ms_ssim")


def write_rd_csv(path, rows: list[dict]) -> None:
    with open(path, "w") as f:
        f.write(",".join(RD_COLUMNS) + "\n")
        for row in rows:
            f.write(",".join(
                repr(row[c]) if isinstance(row[c], float) else str(row[c])
                for c in RD_COLUMNS
            ) + "\n")
