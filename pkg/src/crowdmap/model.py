"""Multi-resolution encoder-decoder density network.

The encoder is VGG-16's convolutional stack (no batch norm), grouped into
five blocks each ending in 2x max pooling, so block outputs E1..E5 sit at
1/2 .. 1/32 of the input resolution. The decoder mirrors it with five
blocks, each one 2x bilinear upsampling followed by two 3x3 convolutions;
outputs of the four shallower encoder blocks re-enter through 1x1 lateral
projections added elementwise to the matching-resolution decoder features,
feature-pyramid style.

Two heads emit density: a 1x1 convolution on the 1/4-resolution decoder
stage (the counting head) and a 1x1 convolution at full resolution. ReLU
follows every convolution except the 1x1 layers; each head output passes
through a final ReLU so densities are non-negative.

With the default widths the network holds 22,134,626 trainable parameters:
14,714,688 encoder + 7,070,656 decoder + 349,120 laterals + 162 heads.

Checkpoints are a flat container: ``{"format_version": 1, "model_config":
<config dict>, "model_state": <name -> tensor>, "extra": <caller dict>}``,
saved with torch and restored bit-exactly.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import PretrainedWeightsError

ENCODER_CONV_COUNTS = (2, 2, 3, 3, 3)          # VGG-16 layout
DEFAULT_ENCODER_CHANNELS = (64, 128, 256, 512, 512)
DEFAULT_DECODER_CHANNELS = (512, 256, 128, 64, 32)
INPUT_MULTIPLE = 32
LOW_RES_FACTOR = 4
INIT_STD = 0.01

# conv layer positions inside torchvision's vgg16().features
_TORCHVISION_VGG16_CONV_IDX = (0, 2, 5, 7, 10, 12, 14, 17, 19, 21, 24, 26, 28)


@dataclass(frozen=True)
class ModelConfig:
    encoder_channels: tuple[int, ...] = DEFAULT_ENCODER_CHANNELS
    decoder_channels: tuple[int, ...] = DEFAULT_DECODER_CHANNELS
    use_pretrained_encoder: bool = True
    head_kernel: int = 1

    def __post_init__(self):
        object.__setattr__(self, "encoder_channels", tuple(int(c) for c in self.encoder_channels))
        object.__setattr__(self, "decoder_channels", tuple(int(c) for c in self.decoder_channels))
        if len(self.encoder_channels) != 5:
            raise ValueError(f"expected 5 encoder blocks, got {len(self.encoder_channels)}")
        if len(self.decoder_channels) != 5:
            raise ValueError(f"expected 5 decoder blocks, got {len(self.decoder_channels)}")
        if min(self.encoder_channels + self.decoder_channels) < 1:
            raise ValueError("channel widths must be positive")
        if self.head_kernel != 1:
            raise ValueError(f"heads are 1x1 convolutions, got kernel {self.head_kernel}")
        if self.use_pretrained_encoder and self.encoder_channels != DEFAULT_ENCODER_CHANNELS:
            raise ValueError(
                f"pretrained encoder requires channels {DEFAULT_ENCODER_CHANNELS}, "
                f"got {self.encoder_channels}")


@dataclass
class ModelOutput:
    density_low: np.ndarray    # (H/4, W/4), non-negative
    density_high: np.ndarray   # (H, W), non-negative


class _EncoderBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, n_convs: int):
        super().__init__()
        layers = []
        for i in range(n_convs):
            layers.append(nn.Conv2d(in_ch if i == 0 else out_ch, out_ch, 3, padding=1))
            layers.append(nn.ReLU(inplace=True))
        layers.append(nn.MaxPool2d(2))
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        return self.body(x)


class _DecoderBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.upsample = nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False)
        self.body = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 3, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(out_ch, out_ch, 3, padding=1), nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.body(self.upsample(x))


class MultiResolutionDensityNet(nn.Module):
    """Forward maps (N, 3, H, W) with H, W divisible by 32 to a pair of
    density tensors: (N, 1, H/4, W/4) and (N, 1, H, W)."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        enc, dec = config.encoder_channels, config.decoder_channels

        self.encoder = nn.ModuleList(
            _EncoderBlock(3 if i == 0 else enc[i - 1], enc[i], ENCODER_CONV_COUNTS[i])
            for i in range(5))
        self.decoder = nn.ModuleList(
            _DecoderBlock(enc[4] if i == 0 else dec[i - 1], dec[i]) for i in range(5))
        # decoder stage i (output at 1/16 .. 1/1) receives encoder block 4-i
        # (E4 .. E1) for i < 4; the final full-resolution stage has no source
        self.laterals = nn.ModuleList(
            nn.Conv2d(enc[3 - i], dec[i], kernel_size=1) for i in range(4))
        self.head_low = nn.Conv2d(dec[2], 1, kernel_size=1)
        self.head_high = nn.Conv2d(dec[4], 1, kernel_size=1)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected (N, 3, H, W) input, got {tuple(x.shape)}")
        h, w = x.shape[2], x.shape[3]
        if h % INPUT_MULTIPLE or w % INPUT_MULTIPLE:
            raise ValueError(
                f"input spatial size must be divisible by {INPUT_MULTIPLE}, got {h}x{w}")

        taps = []
        for block in self.encoder:
            x = block(x)
            taps.append(x)

        y = taps[4]
        low = None
        for i, block in enumerate(self.decoder):
            y = block(y)
            if i < 4:
                y = y + self.laterals[i](taps[3 - i])
            if i == 2:
                low = torch.relu(self.head_low(y))
        high = torch.relu(self.head_high(y))
        return low, high


def build(config: ModelConfig | None = None) -> MultiResolutionDensityNet:
    """Construct the network graph; weights are untouched until initialize()."""
    return MultiResolutionDensityNet(config or ModelConfig())


def initialize(model: MultiResolutionDensityNet, seed: int = 0) -> MultiResolutionDensityNet:
    """Set all weights: N(0, 0.01^2) draws, zero biases, pretrained encoder.

    Decoder, lateral, and head weights always get the Gaussian scheme. The
    encoder is copied from pretrained VGG-16 when the config asks for it
    (raising PretrainedWeightsError if the weights cannot be obtained),
    otherwise it gets the same Gaussian scheme.
    """
    gen = torch.Generator().manual_seed(int(seed))
    for module in [*model.decoder, *model.laterals, model.head_low, model.head_high]:
        for m in module.modules():
            if isinstance(m, nn.Conv2d):
                _init_conv(m, gen)

    if model.config.use_pretrained_encoder:
        _load_pretrained_encoder(model)
    else:
        for block in model.encoder:
            for m in block.modules():
                if isinstance(m, nn.Conv2d):
                    _init_conv(m, gen)
    return model


def _init_conv(conv: nn.Conv2d, gen: torch.Generator) -> None:
    with torch.no_grad():
        conv.weight.normal_(0.0, INIT_STD, generator=gen)
        conv.bias.zero_()


def _load_pretrained_encoder(model: MultiResolutionDensityNet) -> None:
    try:
        from torchvision.models import VGG16_Weights, vgg16
        reference = vgg16(weights=VGG16_Weights.IMAGENET1K_V1).features
    except Exception as e:
        raise PretrainedWeightsError(
            f"pretrained VGG-16 weights unavailable ({e}); pass a config with "
            "use_pretrained_encoder=False or provide a local torchvision cache") from e

    source = [reference[i] for i in _TORCHVISION_VGG16_CONV_IDX]
    targets = [m for block in model.encoder for m in block.modules()
               if isinstance(m, nn.Conv2d)]
    assert len(source) == len(targets) == 13
    with torch.no_grad():
        for src, dst in zip(source, targets):
            dst.weight.copy_(src.weight)
            dst.bias.copy_(src.bias)


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def run_model(model: MultiResolutionDensityNet, image: np.ndarray,
              device: str | torch.device = "cpu") -> ModelOutput:
    """Run one H x W x 3 float image in [0, 1] through the network."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {image.shape}")
    x = torch.from_numpy(np.ascontiguousarray(np.moveaxis(image, -1, 0), dtype=np.float32))
    x = x.unsqueeze(0).to(device)
    model.eval()
    with torch.no_grad():
        low, high = model(x)
    return ModelOutput(density_low=low[0, 0].cpu().numpy(),
                       density_high=high[0, 0].cpu().numpy())


def save_checkpoint(model: MultiResolutionDensityNet, path: str | Path,
                    extra: dict | None = None) -> None:
    """Atomic write: serialize to a sibling temp file, then rename over."""
    path = Path(path)
    payload = {
        "format_version": 1,
        "model_config": asdict(model.config),
        "model_state": model.state_dict(),
        "extra": extra or {},
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> tuple[MultiResolutionDensityNet, dict]:
    path = Path(path)
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if not isinstance(payload, dict) or payload.get("format_version") != 1:
        raise ValueError(f"{path}: not a recognized checkpoint")
    config = ModelConfig(**payload["model_config"])
    model = build(config)
    model.load_state_dict(payload["model_state"])
    return model, payload.get("extra", {})
