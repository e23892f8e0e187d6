"""Map refiner R: a light residual network that sharpens coarse density maps."""

import torch
from torch import nn

from density_adapt.config import RefinerConfig
from density_adapt.errors import ShapeError

MIN_SIZE = 16


class MapRefiner(nn.Module):
    """
    Three convolutions (the third at stride 2), one transposed convolution
    back to full resolution and a regression convolution. PReLU follows
    every layer except the regression layer. The output is the input plus
    the regressed residual.
    """

    def __init__(self, config: RefinerConfig):
        super().__init__()
        k1, k2, k3, k4, k5 = config.kernels
        c1, c2, c3 = config.channels

        self.encode = nn.Sequential(
            nn.Conv2d(1, c1, kernel_size=k1, padding=k1 // 2),
            nn.PReLU(c1),
            nn.Conv2d(c1, c2, kernel_size=k2, padding=k2 // 2),
            nn.PReLU(c2),
            nn.Conv2d(c2, c3, kernel_size=k3, stride=2, padding=k3 // 2),
            nn.PReLU(c3),
        )
        self.deconv = nn.ConvTranspose2d(c3, c1, kernel_size=k4, stride=2, padding=k4 // 2)
        self.deconv_act = nn.PReLU(c1)
        self.regress = nn.Conv2d(c1, 1, kernel_size=k5, padding=k5 // 2)

        if config.zero_init_regression:
            self.zero_regression()

    def zero_regression(self) -> None:
        """Zero the regression layer, making the refiner the identity."""
        nn.init.zeros_(self.regress.weight)
        nn.init.zeros_(self.regress.bias)

    def forward(self, coarse: torch.Tensor) -> torch.Tensor:
        if coarse.dim() != 4 or coarse.shape[1] != 1:
            raise ShapeError(f"Refiner expects N x 1 x H x W maps, got {tuple(coarse.shape)}")
        if min(coarse.shape[-2:]) < MIN_SIZE:
            raise ShapeError(
                f"Refiner needs maps of at least {MIN_SIZE}x{MIN_SIZE}, got {tuple(coarse.shape[-2:])}"
            )
        hidden = self.encode(coarse)
        hidden = self.deconv_act(self.deconv(hidden, output_size=list(coarse.shape[-2:])))
        return coarse + self.regress(hidden)
