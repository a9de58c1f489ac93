"""Architecture presets: the toy CNN and CIFAR-sized conv chains.

Downsampling is carried by the stride of the first conv of each stage, so
the stride configuration (``1-2-2-2`` for ResNet18) fully describes the
spatial schedule. Skip connections, batch norm and biases are omitted; they
change neither the receptive field nor the dominant cost.
"""
from __future__ import annotations

from typing import Sequence

from .nn import Activation, ArchSpec, Conv, GlobalPool, Linear, PoolKind

TOY_CHANNELS = (3, 3, 16, 32, 64)

BASELINE_STRIDES = {
    "toycnn": (),
    "alexnet": (2, 2, 2, 2),
    "vgg16": (2, 2, 2, 2, 2),
    "resnet18": (1, 2, 2, 2),
    "preactresnet18": (1, 2, 2, 2),
}


def toy_cnn(channels: Sequence[int] = TOY_CHANNELS, kernel: int = 3, stride: int = 1,
            padding: int = 1, activation: str | None = None, pooling="avg") -> ArchSpec:
    """Randomly-initializable CNN used for the perturbation experiments.

    ``channels`` lists the input channels followed by each conv's output
    channels; the default is four convs producing 3, 16, 32 and 64 maps.
    """
    layers = []
    for cin, cout in zip(channels[:-1], channels[1:]):
        layers.append(Conv(cin, cout, kernel, stride, padding))
        if activation not in (None, "none", "identity"):
            layers.append(Activation(activation))
    layers.append(GlobalPool(pooling))
    return ArchSpec(layers, [])


class _Builder:
    def __init__(self, in_channels: int):
        self.layers = []
        self.markers = []
        self.channels = in_channels

    def conv(self, out_channels, kernel=3, stride=1, padding=None, stage_start=False, preact=False):
        if padding is None:
            padding = kernel // 2
        if preact:
            self.layers.append(Activation("relu"))
        if stage_start:
            self.markers.append(len(self.layers))
        self.layers.append(Conv(self.channels, out_channels, kernel, stride, padding))
        if not preact:
            self.layers.append(Activation("relu"))
        self.channels = out_channels

    def finish(self, pooling, num_classes):
        self.layers.append(GlobalPool(pooling))
        if num_classes:
            self.layers.append(Linear(self.channels, num_classes))
        return ArchSpec(self.layers, self.markers)


def _check(strides, n):
    strides = tuple(int(s) for s in strides)
    if len(strides) != n or min(strides) < 1:
        raise ValueError(f"expected {n} positive stage strides, got {strides}")
    return strides


def resnet18(strides=(1, 2, 2, 2), pooling="avg", num_classes: int | None = None,
             preact: bool = False, in_channels: int = 3) -> ArchSpec:
    """17-conv ResNet18 chain: 3x3 stem then four stages of two 2-conv blocks."""
    strides = _check(strides, 4)
    b = _Builder(in_channels)
    b.conv(64)
    for stage, (width, s) in enumerate(zip((64, 128, 256, 512), strides)):
        for i in range(4):
            b.conv(width, stride=s if i == 0 else 1, stage_start=i == 0, preact=preact)
    if preact:
        b.layers.append(Activation("relu"))
    return b.finish(pooling, num_classes)


def preact_resnet18(strides=(1, 2, 2, 2), pooling="avg", num_classes: int | None = None) -> ArchSpec:
    return resnet18(strides, pooling, num_classes, preact=True)


def alexnet(strides=(2, 2, 2, 2), pooling="avg", num_classes: int | None = None) -> ArchSpec:
    """Five-conv AlexNet body (64-192-384-256-256) split into four stride stages."""
    strides = _check(strides, 4)
    b = _Builder(3)
    b.conv(64, kernel=5, stride=strides[0], stage_start=True)
    b.conv(192, kernel=5, stride=strides[1], stage_start=True)
    b.conv(384, stride=strides[2], stage_start=True)
    b.conv(256)
    b.conv(256, stride=strides[3], stage_start=True)
    return b.finish(pooling, num_classes)


def vgg16(strides=(2, 2, 2, 2, 2), pooling="avg", num_classes: int | None = None) -> ArchSpec:
    """Thirteen-conv VGG16 body; each stage's first conv carries the stage stride."""
    strides = _check(strides, 5)
    b = _Builder(3)
    for (width, depth), s in zip(((64, 2), (128, 2), (256, 3), (512, 3), (512, 3)), strides):
        for i in range(depth):
            b.conv(width, stride=s if i == 0 else 1, stage_start=i == 0)
    return b.finish(pooling, num_classes)


_FACTORIES = {
    "alexnet": alexnet,
    "vgg16": vgg16,
    "resnet18": resnet18,
    "preactresnet18": preact_resnet18,
}


def normalize_name(name: str) -> str:
    return name.lower().replace("-", "").replace("_", "")


def preset(name: str, strides: Sequence[int] | None = None, pooling="avg",
           num_classes: int | None = None) -> ArchSpec:
    key = normalize_name(name)
    if key == "toycnn":
        if strides:
            raise ValueError("toycnn has no stride stages")
        arch = toy_cnn(pooling=pooling)
        if num_classes:
            arch = ArchSpec((*arch.layers, Linear(TOY_CHANNELS[-1], num_classes)), arch.stage_markers)
        return arch
    if key not in _FACTORIES:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(BASELINE_STRIDES)}")
    return _FACTORIES[key](strides or BASELINE_STRIDES[key], pooling=PoolKind.parse(pooling),
                           num_classes=num_classes)
