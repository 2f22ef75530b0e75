"""
Base class for the per-stage convolutional sub-networks.
"""
import logging
import os
from abc import ABC, abstractmethod
from typing import Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from config import config
from .blocks import ResidualBlock, conv3x3


class StageSubNet(nn.Module, ABC):
    """Stem, residual body and head shared by hiding and revealing sub-networks.

    A connected sub-network takes the previous stage's final body activation
    as extra input channels, concatenated before the stem.
    """

    def __init__(self, in_channels: int, out_channels: int,
                 features: int = config.DEFAULT_FEATURES,
                 blocks: int = config.DEFAULT_BLOCKS,
                 connected: bool = False):
        """Initialize the sub-network.

        Args:
            in_channels: Channels of the data input (without stage features).
            out_channels: Channels produced by the head.
            features: Width of the stem and body.
            blocks: Number of residual blocks in the body.
            connected: Whether an incoming stage feature map is expected.
        """
        super().__init__()
        if blocks < 1:
            raise ValueError(f"Body needs at least one residual block, got {blocks}")
        if features < 1:
            raise ValueError(f"Feature width must be positive, got {features}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.features = features
        self.connected = connected

        stem_in = in_channels + (features if connected else 0)
        self.stem = conv3x3(stem_in, features)
        self.body = nn.Sequential(*[ResidualBlock(features) for _ in range(blocks)])
        self.head = conv3x3(features, out_channels)

    def zero_head(self) -> None:
        """Set the head weights and bias to zero."""
        with torch.no_grad():
            self.head.weight.zero_()
            self.head.bias.zero_()

    def _encode(self, x: torch.Tensor, incoming: Optional[torch.Tensor]) -> torch.Tensor:
        """Run stem and body, returning the final body activation."""
        if incoming is not None:
            if not self.connected:
                raise ValueError(f"{self.name} is not connected but stage features were supplied")
            expected = (x.shape[0], self.features, x.shape[2], x.shape[3])
            if tuple(incoming.shape) != expected:
                raise ValueError(f"Stage features have shape {tuple(incoming.shape)}, expected {expected}")
            x = torch.cat((x, incoming), dim=1)
        elif self.connected:
            raise ValueError(f"{self.name} is connected and needs incoming stage features")
        return self.body(F.relu(self.stem(x)))

    @abstractmethod
    def forward(self, *inputs: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """Return (output, outgoing_features)."""

    @property
    def name(self) -> str:
        return self.__class__.__name__


def resolve_device(device: Optional[str] = None) -> torch.device:
    """Resolve "auto"/"cpu"/"cuda" to a torch device.

    Reads STAGEHIDE_DEVICE when no device is given.
    """
    device = device or os.getenv('STAGEHIDE_DEVICE', config.DEFAULT_DEVICE)
    if device == "auto":
        if torch.cuda.is_available():
            logging.info("CUDA detected - using GPU")
            return torch.device("cuda")
        logging.info("No CUDA available - using CPU")
        return torch.device("cpu")
    return torch.device(device)
