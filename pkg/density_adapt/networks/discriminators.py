"""Domain discriminators: pixel-wise feature discriminators and the map discriminator."""

import torch
from torch import nn

from density_adapt.config import DiscriminatorConfig
from density_adapt.errors import ShapeError


def init_weights(module: nn.Module) -> None:
    """DCGAN-style initialization for discriminator layers."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.normal_(m.weight, 0.0, 0.02)
            nn.init.zeros_(m.bias)


class FeatureDiscriminator(nn.Module):
    """
    Fully convolutional domain classifier for one feature tap.

    Four stride-1 3x3 convolutions with leaky ReLU in between; the output is
    a 2-channel score map (source, target) of the same size as the input.
    """

    def __init__(self, in_channels: int, config: DiscriminatorConfig):
        super().__init__()
        if in_channels < 1:
            raise ShapeError(f"Feature discriminator needs a positive channel count, got {in_channels}")
        self.in_channels = in_channels

        widths = [in_channels, *config.feature_channels, 2]
        layers: list[nn.Module] = []
        for i, (c_in, c_out) in enumerate(zip(widths[:-1], widths[1:])):
            layers.append(nn.Conv2d(c_in, c_out, kernel_size=3, stride=1, padding=1))
            if i < len(widths) - 2:
                layers.append(nn.LeakyReLU(config.negative_slope))
        self.main = nn.Sequential(*layers)
        init_weights(self)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        if f.shape[1] != self.in_channels:
            raise ShapeError(
                f"Discriminator built for {self.in_channels} channels received {f.shape[1]}"
            )
        return self.main(f)


class MapDiscriminator(nn.Module):
    """
    Whole-map domain classifier for density maps.

    Strided convolutions with leaky ReLU, global average pooling and a
    fully-connected layer producing 2 logits (source, target). Pooling makes
    any map of at least ``min_size`` per side acceptable.
    """

    def __init__(self, config: DiscriminatorConfig):
        super().__init__()
        k = config.map_kernel
        layers: list[nn.Module] = []
        channels = 1
        for width in config.map_channels:
            layers += [
                nn.Conv2d(channels, width, kernel_size=k, stride=2, padding=(k - 1) // 2),
                nn.LeakyReLU(config.negative_slope),
            ]
            channels = width
        self.features = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Linear(channels, 2)
        self.min_size = 2 ** len(config.map_channels)
        init_weights(self)

    def forward(self, density: torch.Tensor) -> torch.Tensor:
        if density.dim() != 4 or density.shape[1] != 1:
            raise ShapeError(f"Map discriminator expects N x 1 x h x w, got {tuple(density.shape)}")
        if min(density.shape[-2:]) < self.min_size:
            raise ShapeError(
                f"Map discriminator needs maps of at least {self.min_size}x{self.min_size}, "
                f"got {tuple(density.shape[-2:])}"
            )
        return self.fc(self.pool(self.features(density)).flatten(1))
