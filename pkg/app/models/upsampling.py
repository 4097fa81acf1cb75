"""
Upscaling primitives: transposed convolution (kernel 2^3, stride 2^3) versus
nearest-neighbour interpolation followed by a 3^3 convolution.
"""
import torch
import torch.nn as nn

from app.schemas.model import UpsampleMode


class UpscaleBlock(nn.Module):
    """Doubles every spatial axis of a (B, C, X, Y, Z) feature map"""

    def __init__(self, in_channels: int, out_channels: int, mode: UpsampleMode = UpsampleMode.NN_INTERP_CONV):
        super().__init__()
        self.mode = UpsampleMode(mode)
        if self.mode == UpsampleMode.TRANSPOSED:
            self.up = nn.Identity()
            self.conv = nn.ConvTranspose3d(in_channels, out_channels, kernel_size=2, stride=2)
        else:
            self.up = nn.Upsample(scale_factor=2, mode="nearest")
            # replicate padding keeps constant inputs constant at the borders
            self.conv = nn.Conv3d(
                in_channels, out_channels, kernel_size=3, stride=1, padding=1, padding_mode="replicate"
            )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(self.up(x))


class InstanceNorm3dAnySize(nn.InstanceNorm3d):
    """Instance norm that also accepts single-voxel maps, where the normalised value is 0"""

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x[0, 0].numel() > 1:
            return super().forward(x)
        out = torch.zeros_like(x)
        if self.affine:
            out = out + self.bias.view(1, -1, 1, 1, 1)
        return out


class ConvNormAct(nn.Sequential):
    """3^3 conv + instance norm + leaky ReLU"""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3):
        super().__init__(
            nn.Conv3d(
                in_channels, out_channels, kernel_size=kernel_size,
                padding=kernel_size // 2, padding_mode="replicate",
            ),
            InstanceNorm3dAnySize(out_channels, affine=True),
            nn.LeakyReLU(0.01, inplace=True),
        )


class UpscaleStage(nn.Module):
    """UpscaleBlock followed by instance norm and leaky ReLU"""

    def __init__(self, in_channels: int, out_channels: int, mode: UpsampleMode):
        super().__init__()
        self.upscale = UpscaleBlock(in_channels, out_channels, mode)
        self.norm = InstanceNorm3dAnySize(out_channels, affine=True)
        self.act = nn.LeakyReLU(0.01, inplace=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.act(self.norm(self.upscale(x)))


def phase_means(fmap: torch.Tensor) -> torch.Tensor:
    """Mean of each of the 8 parity phases (x%2, y%2, z%2) over the trailing three axes"""
    phases = [
        fmap[..., a::2, b::2, c::2].mean()
        for a in range(2) for b in range(2) for c in range(2)
    ]
    return torch.stack(phases)


def phase_variance(fmap: torch.Tensor) -> float:
    """Variance across parity-phase means; > 0 indicates a period-2 (checkerboard) pattern"""
    return float(phase_means(fmap.double()).var(unbiased=False))


@torch.no_grad()
def set_identity_kernel(block: UpscaleBlock) -> None:
    """Make an NN_INTERP_CONV block an exact nearest-neighbour upsampler (channels in == out)"""
    conv = block.conv
    conv.weight.zero_()
    for c in range(min(conv.in_channels, conv.out_channels)):
        if block.mode == UpsampleMode.TRANSPOSED:
            conv.weight[c, c].fill_(1.0)
        else:
            conv.weight[c, c, 1, 1, 1] = 1.0
    if conv.bias is not None:
        conv.bias.zero_()
