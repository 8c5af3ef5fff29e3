"""Mobile / local partition of a ModelGraph, with optional bottleneck and codec."""

from __future__ import annotations

import math

import torch
from torch import nn

from .codecs import CompressionCodec, apply_codec
from .models import GraphError, ModelGraph


class SplitError(ValueError):
    pass


class Bottleneck(nn.Module):
    """Channel-reducing encoder (mobile side) and matching decoder (local side).

    Encoder: 3x3 conv to ``channels`` + BN + PReLU. Decoder: 3x3 transposed
    conv back to the native channel count. Both keep the spatial size.
    """

    def __init__(self, native: int, channels: int):
        super().__init__()
        self.native = int(native)
        self.channels = int(channels)
        self.encoder = nn.Sequential(
            nn.Conv2d(native, channels, 3, padding=1),
            nn.BatchNorm2d(channels),
            nn.PReLU(channels),
        )
        self.decoder = nn.Sequential(nn.ConvTranspose2d(channels, native, 3, padding=1))

    @torch.no_grad()
    def identity_init(self) -> None:
        """Make encode/decode an exact identity (requires channels == native)."""
        if self.channels != self.native:
            raise SplitError("identity init needs as many channels as the native latent")
        conv, bn, act = self.encoder
        conv.weight.zero_()
        conv.bias.zero_()
        for c in range(self.channels):
            conv.weight[c, c, 1, 1] = 1.0
        bn.running_mean.zero_()
        bn.running_var.fill_(1.0)
        bn.weight.fill_(math.sqrt(1.0 + bn.eps))
        bn.bias.zero_()
        act.weight.fill_(1.0)
        (deconv,) = self.decoder
        deconv.weight.zero_()
        deconv.bias.zero_()
        for c in range(self.channels):
            deconv.weight[c, c, 1, 1] = 1.0


class SplitModel(nn.Module):
    """g (mobile) and f (local) halves of a classifier.

    ``forward_mobile`` returns the transmitted latent: the encoder output when
    a bottleneck is attached, else the raw block output. ``forward_local``
    applies the codec round trip (if any), the decoder and the local blocks.
    """

    def __init__(self, graph: ModelGraph, split_index: int, bottleneck: Bottleneck | None = None, codec: CompressionCodec | None = None):
        super().__init__()
        n = len(graph)
        if not 0 < int(split_index) < n:
            raise SplitError(f"split_index must be in [1, {n - 1}], got {split_index}")
        self.graph = graph
        self.split_index = int(split_index)
        self.mobile = nn.Sequential(*graph.blocks[: self.split_index])
        self.local = nn.Sequential(*graph.blocks[self.split_index :])
        self.bottleneck = bottleneck
        self.codec = codec
        self.native_shape = graph.output_shape(self.split_index - 1)
        # "mobile" / "local" when loaded from a half package
        self.role = "full"

    @property
    def latent_shape(self) -> tuple[int, ...]:
        if self.bottleneck is None:
            return self.native_shape
        return (self.bottleneck.channels, *self.native_shape[1:])

    @property
    def latent_dim(self) -> int:
        return math.prod(self.latent_shape)

    @property
    def input_shape(self) -> tuple[int, ...]:
        return self.graph.input_shape

    def _check(self, t: torch.Tensor, shape: tuple[int, ...], what: str) -> None:
        if t.ndim != len(shape) + 1 or tuple(t.shape[1:]) != tuple(shape):
            raise SplitError(f"{what} must have shape (N, {', '.join(map(str, shape))}), got {tuple(t.shape)}")

    def forward_mobile(self, x: torch.Tensor) -> torch.Tensor:
        if self.role == "local":
            raise SplitError("this package holds only the local half")
        self._check(x, self.input_shape, "input")
        t = self.mobile(x)
        if self.bottleneck is not None:
            t = self.bottleneck.encoder(t)
        return t

    def forward_local(self, t: torch.Tensor) -> torch.Tensor:
        if self.role == "mobile":
            raise SplitError("this package holds only the mobile half")
        self._check(t, self.latent_shape, "latent")
        if self.codec is not None:
            t = apply_codec(self.codec, t)
        if self.bottleneck is not None:
            t = self.bottleneck.decoder(t)
        return self.local(t)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward_local(self.forward_mobile(x))

    def mobile_modules(self) -> nn.ModuleDict:
        mods = {"mobile": self.mobile}
        if self.bottleneck is not None:
            mods["encoder"] = self.bottleneck.encoder
        return nn.ModuleDict(mods)

    def local_modules(self) -> nn.ModuleDict:
        mods = {"local": self.local}
        if self.bottleneck is not None:
            mods["decoder"] = self.bottleneck.decoder
        return nn.ModuleDict(mods)


def split_model(graph: ModelGraph, split_index: int) -> SplitModel:
    """Cut ``graph`` after block ``split_index - 1``; the halves share weights with it."""
    try:
        return SplitModel(graph, split_index)
    except GraphError as exc:
        raise SplitError(str(exc)) from exc


def attach_bottleneck(split: SplitModel, channels: int, identity: bool = False) -> SplitModel:
    """Insert an encoder/decoder pair at the split; the latent gets ``channels`` channels."""
    native = split.native_shape[0]
    if len(split.native_shape) != 3:
        raise SplitError("bottlenecks need a (C, H, W) latent")
    if not 1 <= int(channels) <= native:
        raise SplitError(f"channels must be in [1, {native}], got {channels}")
    bottleneck = Bottleneck(native, int(channels))
    if identity:
        bottleneck.identity_init()
    return SplitModel(split.graph, split.split_index, bottleneck, split.codec)


def attach_codec(split: SplitModel, codec: CompressionCodec | None) -> SplitModel:
    return SplitModel(split.graph, split.split_index, split.bottleneck, codec)


@torch.no_grad()
def calibrate_codec(split: SplitModel, codec: CompressionCodec, x: torch.Tensor, batch_size: int = 256) -> CompressionCodec:
    """Set the codec's value range to the (min, max) of latents over ``x``."""
    if codec.kind == "JC":
        return codec
    was = split.training
    split.eval()
    lo, hi = math.inf, -math.inf
    for i in range(0, x.shape[0], batch_size):
        t = split.forward_mobile(x[i : i + batch_size])
        lo, hi = min(lo, float(t.min())), max(hi, float(t.max()))
    split.train(was)
    if hi <= lo:
        hi = lo + 1.0
    return codec.with_range((lo, hi))


def forward_mobile(split: SplitModel, x: torch.Tensor) -> torch.Tensor:
    return split.forward_mobile(x)


def forward_local(split: SplitModel, t: torch.Tensor) -> torch.Tensor:
    return split.forward_local(t)
