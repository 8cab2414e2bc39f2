"""The two segmentation networks: the baseline SegUNet and its VGG19-encoder variant."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .archive import WeightArchive
from .errors import MissingWeight, WeightShapeMismatch
from .nn import (
    BatchNorm,
    Conv2d,
    ConvTranspose2x,
    Dropout,
    MaxPool2x2,
    Merge,
    ModelGraph,
    ReLU,
    Sigmoid,
    Tap,
    UpsampleNearest2x,
)

ARCHITECTURES = ("baseline", "vgg19_backbone")

# (block, convs, width) for the VGG19 feature extractor
VGG19_BLOCKS = ((1, 2, 64), (2, 2, 128), (3, 4, 256), (4, 4, 512), (5, 4, 512))
DECODER_WIDTHS = (512, 256, 128, 64)


@dataclass
class ModelConfig:
    seed: int = 42
    bn_momentum: float = 0.99
    bn_eps: float = 1e-5
    dropout_rate: float = 0.3
    in_channels: int = 3

    def __post_init__(self):
        if not 0 <= self.dropout_rate < 1:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if not 0 <= self.bn_momentum < 1:
            raise ValueError(f"bn_momentum must be in [0, 1), got {self.bn_momentum}")


def vgg19_conv_names() -> list[tuple[str, int, int]]:
    """``(name, in_channels, out_channels)`` for the 16 VGG19 convolutions in order."""
    out, cin = [], 3
    for block, n, width in VGG19_BLOCKS:
        for i in range(1, n + 1):
            out.append((f"block{block}_conv{i}", cin, width))
            cin = width
    return out


def _conv_bn_relu(prefix: str, cin: int, cout: int, cfg: ModelConfig, rng) -> list:
    return [
        Conv2d(f"{prefix}_conv", cin, cout, 3, rng),
        BatchNorm(f"{prefix}_bn", cout, cfg.bn_momentum, cfg.bn_eps),
        ReLU(f"{prefix}_relu"),
    ]


def build_baseline(config: ModelConfig | None = None) -> ModelGraph:
    """Custom SegUNet: two 2-conv encoder stages, a 256-wide bottleneck and
    a nearest-upsampling decoder with two skip merges."""
    cfg = config or ModelConfig()
    rng = np.random.default_rng(cfg.seed)
    nodes = [
        *_conv_bn_relu("enc1a", cfg.in_channels, 64, cfg, rng),
        *_conv_bn_relu("enc1b", 64, 64, cfg, rng),
        Tap("s1"),
        MaxPool2x2("pool1"),
        *_conv_bn_relu("enc2a", 64, 128, cfg, rng),
        *_conv_bn_relu("enc2b", 128, 128, cfg, rng),
        Tap("s2"),
        MaxPool2x2("pool2"),
        *_conv_bn_relu("botta", 128, 256, cfg, rng),
        *_conv_bn_relu("bottb", 256, 256, cfg, rng),
        Tap("bottleneck", skip=False),
        UpsampleNearest2x("dec1_up"),
        Merge("s2"),
        *_conv_bn_relu("dec1", 256 + 128, 128, cfg, rng),
        UpsampleNearest2x("dec2_up"),
        Merge("s1"),
        *_conv_bn_relu("dec2", 128 + 64, 64, cfg, rng),
        Conv2d("head", 64, 1, 1, rng),
        Sigmoid("head_sigmoid"),
    ]
    return ModelGraph(nodes, "baseline", asdict(cfg), rng)


def build_vgg19(config: ModelConfig | None = None, weights: WeightArchive | None = None) -> ModelGraph:
    """SegUNet with a VGG19 encoder and a transposed-convolution decoder.

    With ``weights`` the 16 encoder convolutions are loaded from the archive
    (``blockB_convI.weight`` / ``.bias``); with ``None`` they keep their
    random He-normal initialization. Every parameter stays trainable.
    """
    cfg = config or ModelConfig()
    rng = np.random.default_rng(cfg.seed)
    nodes: list = []
    cin = cfg.in_channels
    for block, n, width in VGG19_BLOCKS:
        if block > 1:
            nodes.append(MaxPool2x2(f"block{block - 1}_pool"))
        for i in range(1, n + 1):
            nodes.append(Conv2d(f"block{block}_conv{i}", cin, width, 3, rng))
            nodes.append(ReLU(f"block{block}_conv{i}_relu"))
            cin = width
        nodes.append(Tap(f"s{block}") if block < 5 else Tap("bottleneck", skip=False))

    for stage, width in enumerate(DECODER_WIDTHS, start=1):
        skip = 5 - stage
        skip_width = VGG19_BLOCKS[skip - 1][2]
        nodes += [
            ConvTranspose2x(f"dec{stage}_up", cin, width, rng),
            Merge(f"s{skip}"),
            *_conv_bn_relu(f"dec{stage}", width + skip_width, width, cfg, rng),
            Dropout(f"dec{stage}_drop", cfg.dropout_rate),
        ]
        cin = width
    nodes += [Conv2d("head", cin, 1, 1, rng), Sigmoid("head_sigmoid")]

    model = ModelGraph(nodes, "vgg19_backbone", asdict(cfg), rng)
    for layer in model.layers:
        if isinstance(layer, Dropout):
            layer.rng = model.rng
    if weights is not None:
        load_vgg19_encoder(model, weights)
    return model


def load_vgg19_encoder(model: ModelGraph, weights: WeightArchive) -> None:
    params = model.parameters()
    for name, cin, cout in vgg19_conv_names():
        for suffix, shape in (("weight", (cout, cin, 3, 3)), ("bias", (cout,))):
            key = f"{name}.{suffix}"
            if key not in weights:
                raise MissingWeight(key)
            value = weights[key]
            if tuple(value.shape) != shape:
                raise WeightShapeMismatch(key, shape, value.shape)
    for name, _, _ in vgg19_conv_names():
        for suffix in ("weight", "bias"):
            key = f"{name}.{suffix}"
            params[key][...] = weights[key]


def build_model(architecture: str, config: ModelConfig | None = None,
                weights: WeightArchive | None = None) -> ModelGraph:
    if architecture == "baseline":
        return build_baseline(config)
    if architecture == "vgg19_backbone":
        return build_vgg19(config, weights)
    raise ValueError(f"unknown architecture {architecture!r}; expected one of {ARCHITECTURES}")
