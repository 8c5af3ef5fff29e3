"""Block-structured classifiers that can be cut at any block boundary.

Every block ends at a convolution output, before normalization and
activation. A cut after block ``i`` therefore transmits the raw feature map
of the ``i``-th convolution, and the next block starts with BN + ReLU.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn


class GraphError(ValueError):
    pass


class ModelGraph(nn.Module):
    """An ordered list of named blocks, applied in sequence."""

    def __init__(self, names: list[str], blocks: list[nn.Module], input_shape: tuple[int, ...], num_classes: int, arch: str = "custom"):
        super().__init__()
        if len(names) != len(blocks) or not blocks:
            raise GraphError("need one name per block and at least one block")
        self.names = list(names)
        self.blocks = nn.ModuleList(blocks)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.num_classes = int(num_classes)
        self.arch = arch
        self.shapes = self._trace()
        if self.shapes[-1] != (self.num_classes,):
            raise GraphError(f"final output shape {self.shapes[-1]} != ({self.num_classes},)")

    def _trace(self) -> list[tuple[int, ...]]:
        was = self.training
        self.eval()
        shapes = []
        with torch.no_grad():
            h = torch.zeros(1, *self.input_shape)
            for name, block in zip(self.names, self.blocks):
                try:
                    h = block(h)
                except RuntimeError as exc:
                    raise GraphError(f"block {name!r} rejects input of shape {tuple(h.shape[1:])}") from exc
                shapes.append(tuple(h.shape[1:]))
        self.train(was)
        return shapes

    def __len__(self) -> int:
        return len(self.blocks)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for block in self.blocks:
            x = block(x)
        return x

    def output_shape(self, index: int) -> tuple[int, ...]:
        """Shape (without batch axis) produced by block ``index``."""
        return self.shapes[index]


def _stem(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(cin, cout, 3, padding=1))


def _block(cprev: int, cout: int, pool: bool = True) -> nn.Sequential:
    layers: list[nn.Module] = [nn.BatchNorm2d(cprev), nn.ReLU()]
    if pool:
        layers.append(nn.MaxPool2d(2))
    layers.append(nn.Conv2d(cprev, cout, 3, padding=1))
    return nn.Sequential(*layers)


def _head(cprev: int, num_classes: int, pool: str) -> nn.Sequential:
    layers: list[nn.Module] = [nn.BatchNorm2d(cprev), nn.ReLU()]
    layers.append(nn.AdaptiveAvgPool2d(1) if pool == "avg" else nn.MaxPool2d(2))
    layers += [nn.Flatten(), nn.Linear(cprev, num_classes)]
    return nn.Sequential(*layers)


def mnist_cnn(num_classes: int = 10) -> ModelGraph:
    """Three conv layers (32, 64, 128 channels) and a linear classifier.

    Blocks: conv1 | conv2 | conv3 | head. Split index 2 transmits the
    64 x 14 x 14 output of the second convolution.
    """
    blocks = [_stem(1, 32), _block(32, 64), _block(64, 128), _head(128, num_classes, "avg")]
    return ModelGraph(["conv1", "conv2", "conv3", "head"], blocks, (1, 28, 28), num_classes, "mnist-cnn")


VGG_CHANNELS = (32, 64, 128, 128, 256)


def _vgg_block(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(cin, cout, 3, padding=1), nn.BatchNorm2d(cout), nn.ReLU(), nn.MaxPool2d(2))


def vgg_cifar(num_classes: int = 10, in_channels: int = 3, size: int = 32, channels=VGG_CHANNELS) -> ModelGraph:
    """Five VGG-style feature blocks and a linear classifier.

    Each block is conv, batch norm, ReLU and 2x2 max pooling; feature ``k``
    is the pooled output of block ``k`` (split index ``k + 1``). The
    spatial size halves per block, so ``size`` must be divisible by 32.
    """
    if size % 32:
        raise GraphError("input size must be a multiple of 32")
    widths = (in_channels, *channels)
    blocks = [_vgg_block(widths[i], widths[i + 1]) for i in range(len(channels))]
    blocks.append(nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Flatten(), nn.Linear(channels[-1], num_classes)))
    names = [f"feature{i}" for i in range(len(channels))] + ["head"]
    return ModelGraph(names, blocks, (in_channels, size, size), num_classes, "vgg-cifar")


@dataclass(frozen=True)
class ArchSpec:
    """How to rebuild a model from its stored description."""

    arch: str
    kwargs: dict = field(default_factory=dict)

    def build(self) -> ModelGraph:
        try:
            return ARCHITECTURES[self.arch](**self.kwargs)
        except KeyError:
            raise GraphError(f"unknown architecture {self.arch!r}; expected one of {sorted(ARCHITECTURES)}") from None


ARCHITECTURES = {"mnist-cnn": mnist_cnn, "vgg-cifar": vgg_cifar}

# the MNIST stand-in for the CIFAR model: one input channel, digits padded to 32 x 32
VGG_MNIST_KWARGS = {"in_channels": 1, "size": 32}


def feature_split_index(feature: int) -> int:
    """Split index that transmits VGG feature ``feature`` (0-based)."""
    return feature + 1
