"""
Residual block shared by the hiding and revealing sub-networks.
"""
import torch
import torch.nn as nn
import torch.nn.functional as F


def conv3x3(in_channels: int, out_channels: int) -> nn.Conv2d:
    """3x3 convolution with padding 1, preserving spatial extent."""
    return nn.Conv2d(in_channels, out_channels, kernel_size=3, stride=1, padding=1)


class ResidualBlock(nn.Module):
    """Two 3x3 convolutions with a rectifier between them and an identity skip.

    With all weights and biases zero the block is the identity.
    """

    def __init__(self, features: int = 64):
        super().__init__()
        self.conv_a = conv3x3(features, features)
        self.conv_b = conv3x3(features, features)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.conv_b(F.relu(self.conv_a(x)))
