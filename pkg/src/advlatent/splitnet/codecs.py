"""Latent codecs: uniform quantization (QT), JPEG mosaics (JC) and entropy coding.

The entropy path quantizes and then compresses the code stream with LZMA,
whose back end is a range (arithmetic) coder. Decoding it gives back exactly
the codes, so its reconstruction is bit-identical to the QT path.
"""

from __future__ import annotations

import io
import lzma
import math
import struct
from dataclasses import dataclass

import numpy as np
import torch
from PIL import Image

CODEC_KINDS = ("QT", "JC", "ENTROPY")


class CodecError(ValueError):
    pass


def _check_range(bits: int, value_range) -> tuple[float, float]:
    if not 1 <= int(bits) <= 16:
        raise CodecError(f"bits must be in [1, 16], got {bits}")
    lo, hi = (float(v) for v in value_range)
    if not (math.isfinite(lo) and math.isfinite(hi)) or not lo < hi:
        raise CodecError(f"degenerate value range ({lo}, {hi})")
    return lo, hi


def quantization_step(bits: int, value_range) -> float:
    lo, hi = _check_range(bits, value_range)
    return (hi - lo) / (2 ** int(bits) - 1)


def quantize_latent(t: torch.Tensor, bits: int, value_range) -> torch.Tensor:
    """Uniform codes in [0, 2^bits - 1]; values outside the range are clamped first."""
    lo, hi = _check_range(bits, value_range)
    levels = 2 ** int(bits) - 1
    v = t.detach().to(torch.float64).clamp(lo, hi)
    codes = torch.floor((v - lo) / (hi - lo) * levels + 0.5).clamp(0, levels)
    return codes.to(torch.int32)


def dequantize_latent(codes: torch.Tensor, bits: int, value_range, dtype=torch.float32) -> torch.Tensor:
    lo, hi = _check_range(bits, value_range)
    step = (hi - lo) / (2 ** int(bits) - 1)
    return (lo + codes.to(torch.float64) * step).to(dtype)


def _code_dtype(bits: int) -> np.dtype:
    return np.dtype(np.uint8) if bits <= 8 else np.dtype("<u2")


_ENTROPY_HEADER = struct.Struct("<4sBBdd")


def entropy_code_latent(t: torch.Tensor, bits: int, value_range=None) -> bytes:
    """Quantize and LZMA-compress. Without ``value_range`` the tensor's own span is used."""
    if value_range is None:
        lo, hi = float(t.min()), float(t.max())
        value_range = (lo, hi if hi > lo else lo + 1.0)
    lo, hi = _check_range(bits, value_range)
    codes = quantize_latent(t, bits, (lo, hi)).numpy().astype(_code_dtype(bits))
    head = _ENTROPY_HEADER.pack(b"ADVE", int(bits), t.ndim, lo, hi)
    dims = struct.pack(f"<{t.ndim}I", *t.shape)
    body = lzma.compress(codes.tobytes(), format=lzma.FORMAT_XZ, preset=9 | lzma.PRESET_EXTREME)
    return head + dims + body


def entropy_decode_latent(blob: bytes, dtype=torch.float32) -> torch.Tensor:
    magic, bits, rank, lo, hi = _ENTROPY_HEADER.unpack_from(blob, 0)
    if magic != b"ADVE":
        raise CodecError("not an entropy-coded latent")
    off = _ENTROPY_HEADER.size
    shape = struct.unpack_from(f"<{rank}I", blob, off)
    raw = lzma.decompress(blob[off + 4 * rank :])
    codes = np.frombuffer(raw, dtype=_code_dtype(bits)).reshape(shape)
    return dequantize_latent(torch.from_numpy(codes.astype(np.int32)), bits, (lo, hi), dtype)


def mosaic_grid(channels: int) -> tuple[int, int]:
    cols = math.ceil(math.sqrt(channels))
    return math.ceil(channels / cols), cols


_JPEG_HEADER = struct.Struct("<4sB4Idd")


def jpeg_code_latent(t: torch.Tensor, quality: int) -> bytes:
    """Tile each sample's channels into a grayscale mosaic and JPEG-code it."""
    if t.ndim != 4:
        raise CodecError(f"JPEG coding needs an (N, C, H, W) latent, got rank {t.ndim}")
    if not 1 <= int(quality) <= 100:
        raise CodecError(f"quality must be in [1, 100], got {quality}")
    n, c, h, w = t.shape
    arr = t.detach().to(torch.float64).numpy()
    lo, hi = float(arr.min()), float(arr.max())
    span = hi - lo
    scaled = np.zeros_like(arr) if span == 0 else (arr - lo) / span * 255.0
    pix = np.clip(np.floor(scaled + 0.5), 0, 255).astype(np.uint8)
    rows, cols = mosaic_grid(c)
    out = [_JPEG_HEADER.pack(b"ADVJ", int(quality), n, c, h, w, lo, hi)]
    for i in range(n):
        canvas = np.zeros((rows * h, cols * w), dtype=np.uint8)
        for ch in range(c):
            r, q = divmod(ch, cols)
            canvas[r * h : (r + 1) * h, q * w : (q + 1) * w] = pix[i, ch]
        buf = io.BytesIO()
        Image.fromarray(canvas, mode="L").save(buf, format="JPEG", quality=int(quality))
        data = buf.getvalue()
        out.append(struct.pack("<I", len(data)))
        out.append(data)
    return b"".join(out)


def jpeg_decode_latent(blob: bytes, dtype=torch.float32) -> torch.Tensor:
    magic, _quality, n, c, h, w, lo, hi = _JPEG_HEADER.unpack_from(blob, 0)
    if magic != b"ADVJ":
        raise CodecError("not a JPEG-coded latent")
    off = _JPEG_HEADER.size
    rows, cols = mosaic_grid(c)
    out = np.zeros((n, c, h, w), dtype=np.float64)
    for i in range(n):
        (size,) = struct.unpack_from("<I", blob, off)
        off += 4
        canvas = np.asarray(Image.open(io.BytesIO(blob[off : off + size])).convert("L"), dtype=np.float64)
        off += size
        for ch in range(c):
            r, q = divmod(ch, cols)
            out[i, ch] = canvas[r * h : (r + 1) * h, q * w : (q + 1) * w]
    return torch.from_numpy(lo + out / 255.0 * (hi - lo)).to(dtype)


@dataclass(frozen=True)
class CompressionCodec:
    """A latent codec applied between the mobile and local halves."""

    kind: str
    bits: int = 8
    quality: int = 75
    value_range: tuple[float, float] | None = None

    def __post_init__(self):
        if self.kind not in CODEC_KINDS:
            raise CodecError(f"codec kind must be one of {CODEC_KINDS}, got {self.kind!r}")
        if self.kind == "JC":
            if not 1 <= int(self.quality) <= 100:
                raise CodecError("quality must be in [1, 100]")
        else:
            _check_range(self.bits, self.value_range or (0.0, 1.0))

    def with_range(self, value_range) -> "CompressionCodec":
        return CompressionCodec(self.kind, self.bits, self.quality, (float(value_range[0]), float(value_range[1])))

    def encode(self, t: torch.Tensor) -> bytes:
        if self.kind == "JC":
            return jpeg_code_latent(t, self.quality)
        if self.value_range is None:
            raise CodecError("codec has no calibrated value range")
        if self.kind == "ENTROPY":
            return entropy_code_latent(t, self.bits, self.value_range)
        codes = quantize_latent(t, self.bits, self.value_range).numpy().astype(_code_dtype(self.bits))
        return struct.pack(f"<B{t.ndim}I", t.ndim, *t.shape) + codes.tobytes()

    def decode(self, blob: bytes, dtype=torch.float32) -> torch.Tensor:
        if self.kind == "JC":
            return jpeg_decode_latent(blob, dtype)
        if self.kind == "ENTROPY":
            return entropy_decode_latent(blob, dtype)
        rank = blob[0]
        shape = struct.unpack_from(f"<{rank}I", blob, 1)
        codes = np.frombuffer(blob, dtype=_code_dtype(self.bits), offset=1 + 4 * rank).reshape(shape)
        return dequantize_latent(torch.from_numpy(codes.astype(np.int32)), self.bits, self.value_range, dtype)

    def roundtrip(self, t: torch.Tensor) -> torch.Tensor:
        """Reconstruction as seen by the receiver; QT and ENTROPY share the same arithmetic."""
        if self.kind == "JC":
            return self.decode(self.encode(t), t.dtype)
        return dequantize_latent(quantize_latent(t, self.bits, self.value_range), self.bits, self.value_range, t.dtype)

    def spec(self) -> str:
        return f"jc:{self.quality}" if self.kind == "JC" else f"{self.kind.lower()}:{self.bits}"


def parse_codec(text: str) -> CompressionCodec:
    """Parse ``qt:8``, ``jc:75`` or ``entropy:8`` (range calibrated later)."""
    kind, _, arg = text.partition(":")
    kind = kind.strip().upper()
    if kind == "JC":
        return CompressionCodec("JC", quality=int(arg or 75))
    if kind in ("QT", "ENTROPY"):
        return CompressionCodec(kind, bits=int(arg or 8))
    raise CodecError(f"unknown codec {text!r}; expected qt:B, jc:Q or entropy:B")


class _StraightThrough(torch.autograd.Function):
    @staticmethod
    def forward(ctx, t, codec):
        return codec.roundtrip(t.detach())

    @staticmethod
    def backward(ctx, grad):
        return grad, None


def apply_codec(codec: CompressionCodec, t: torch.Tensor) -> torch.Tensor:
    """Codec round trip in a forward pass; gradients pass straight through."""
    return _StraightThrough.apply(t, codec)


def calibrate_range(latents: torch.Tensor) -> tuple[float, float]:
    lo, hi = float(latents.min()), float(latents.max())
    if hi <= lo:
        hi = lo + 1.0
    return lo, hi
