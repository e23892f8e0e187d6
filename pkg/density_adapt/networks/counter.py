"""Counter network G with named feature taps."""

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from density_adapt.config import CounterConfig
from density_adapt.errors import ShapeError
from density_adapt.losses import semantic_reshape
from density_adapt.utils import setup_logger

logger = setup_logger("density_adapt.counter")

# conv1_1 ... conv4_3; "M" is a 2x max-pool
VGG16_LAYOUT = [64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512]


@dataclass
class TapBundle:
    """Intermediate features and the density prediction of one forward pass."""

    backbone: torch.Tensor
    f1: torch.Tensor  # dilation module output
    f2: torch.Tensor  # spatial module output
    density: torch.Tensor  # N x 1 x h x w, unclamped
    padding: tuple[int, int] = (0, 0)  # rows, cols appended to the input

    def tap(self, name: str) -> torch.Tensor:
        return {"backbone": self.backbone, "dilation": self.f1, "spatial": self.f2}[name]


def make_layers(layout: list, in_channels: int) -> tuple[nn.Sequential, int]:
    """Build a conv/ReLU/max-pool stack from a layout list."""
    layers: list[nn.Module] = []
    channels = in_channels
    for item in layout:
        if item == "M":
            layers.append(nn.MaxPool2d(kernel_size=2, stride=2))
        else:
            layers += [nn.Conv2d(channels, item, kernel_size=3, padding=1), nn.ReLU(inplace=True)]
            channels = item
    return nn.Sequential(*layers), channels


class Counter(nn.Module):
    """
    Fully convolutional counter: backbone, dilation module, spatial module
    and a 1x1 regression head.

    The spatial module pairs a 1 x k and a k x 1 convolution to aggregate
    long-range context along rows and columns.
    """

    def __init__(self, config: CounterConfig):
        super().__init__()
        self.config = config

        if config.backbone == "vgg16":
            layout = VGG16_LAYOUT
        else:
            layout = []
            for width in config.block_channels:
                layout += [width] * config.convs_per_block + ["M"]
        self.backbone, backbone_channels = make_layers(layout, config.in_channels)

        dc, sc, k = config.dilation_channels, config.spatial_channels, config.spatial_kernel
        self.dilation = nn.Sequential(
            nn.Conv2d(backbone_channels, dc, kernel_size=3, padding=2, dilation=2),
            nn.ReLU(inplace=True),
            nn.Conv2d(dc, dc, kernel_size=3, padding=2, dilation=2),
            nn.ReLU(inplace=True),
        )
        self.spatial = nn.Sequential(
            nn.Conv2d(dc, sc, kernel_size=(1, k), padding=(0, k // 2)),
            nn.ReLU(inplace=True),
            nn.Conv2d(sc, sc, kernel_size=(k, 1), padding=(k // 2, 0)),
            nn.ReLU(inplace=True),
        )
        self.head = nn.Conv2d(sc, 1, kernel_size=1)

        self.tap_channels = {"backbone": backbone_channels, "dilation": dc, "spatial": sc}

    @property
    def downsample(self) -> int:
        return self.config.downsample

    @property
    def out_scale(self) -> float:
        return self.config.out_scale

    def _pad(self, x: torch.Tensor) -> tuple[torch.Tensor, tuple[int, int]]:
        height, width = x.shape[-2:]
        pad_h = -height % self.downsample
        pad_w = -width % self.downsample
        if not (pad_h or pad_w):
            return x, (0, 0)
        if not self.config.pad_to_multiple:
            raise ShapeError(
                f"Input {height}x{width} is not divisible by {self.downsample} "
                "and padding is disabled"
            )
        logger.debug("Padding counter input", extra={"pad_rows": pad_h, "pad_cols": pad_w})
        return F.pad(x, (0, pad_w, 0, pad_h)), (pad_h, pad_w)

    def forward(self, x: torch.Tensor) -> TapBundle:
        if x.dim() != 4 or x.shape[1] != self.config.in_channels:
            raise ShapeError(
                f"Counter expects N x {self.config.in_channels} x H x W input, got {tuple(x.shape)}"
            )
        x, padding = self._pad(x)
        backbone = self.backbone(x)
        f1 = self.dilation(backbone)
        f2 = self.spatial(f1)
        return TapBundle(backbone=backbone, f1=f1, f2=f2, density=self.head(f2), padding=padding)

    def predict(self, x: torch.Tensor, full_resolution: bool = False) -> torch.Tensor:
        """
        Density prediction cropped to the unpadded input.

        Args:
            x: N x C x H x W images
            full_resolution: Bring the map to H x W with a count-preserving
                bilinear reshape instead of returning the native grid

        Returns:
            N x 1 x h x w density (unclamped)
        """
        bundle = self(x)
        height, width = x.shape[-2:]
        rows = -(-height // self.downsample)
        cols = -(-width // self.downsample)
        density = bundle.density[..., :rows, :cols]
        if full_resolution:
            density = semantic_reshape(density, self.out_scale, 1.0, size=(height, width))
        return density
