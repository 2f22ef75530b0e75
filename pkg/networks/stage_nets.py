"""
Hiding and revealing sub-networks for one stage.
"""
from typing import Optional, Tuple

import torch

from config import config
from .base import StageSubNet


class HidingSubNet(StageSubNet):
    """Embeds a secret residual into a carrier grid.

    The head output is added to the carrier (global carrier skip), so a zero
    head leaves the carrier untouched.
    """

    def __init__(self, features: int = config.DEFAULT_FEATURES,
                 blocks: int = config.DEFAULT_BLOCKS, connected: bool = False,
                 carrier_channels: int = config.CARRIER_CHANNELS):
        super().__init__(config.SECRET_CHANNELS + carrier_channels, carrier_channels,
                         features=features, blocks=blocks, connected=connected)
        self.carrier_channels = carrier_channels

    def forward(self, secret_residual: torch.Tensor, carrier_grid: torch.Tensor,
                incoming: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, torch.Tensor]:
        if secret_residual.dim() != 4 or carrier_grid.dim() != 4:
            raise ValueError("Expected batched 4-D tensors for secret residual and carrier grid")
        if secret_residual.shape[1] != config.SECRET_CHANNELS:
            raise ValueError(f"Secret residual needs {config.SECRET_CHANNELS} channels, "
                             f"got shape {tuple(secret_residual.shape)}")
        if carrier_grid.shape[1] != self.carrier_channels:
            raise ValueError(f"Carrier grid needs {self.carrier_channels} channel(s), "
                             f"got shape {tuple(carrier_grid.shape)}")
        if (secret_residual.shape[0] != carrier_grid.shape[0]
                or secret_residual.shape[2:] != carrier_grid.shape[2:]):
            raise ValueError(f"Secret residual {tuple(secret_residual.shape)} does not match "
                             f"carrier grid {tuple(carrier_grid.shape)}")

        features = self._encode(torch.cat((secret_residual, carrier_grid), dim=1), incoming)
        container = carrier_grid + self.head(features)
        return container, features


class RevealingSubNet(StageSubNet):
    """Recovers a (signed) residual estimate from a container grid."""

    def __init__(self, features: int = config.DEFAULT_FEATURES,
                 blocks: int = config.DEFAULT_BLOCKS, connected: bool = False,
                 carrier_channels: int = config.CARRIER_CHANNELS):
        super().__init__(carrier_channels, config.SECRET_CHANNELS,
                         features=features, blocks=blocks, connected=connected)
        self.carrier_channels = carrier_channels

    def forward(self, container_grid: torch.Tensor,
                incoming: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, torch.Tensor]:
        if container_grid.dim() != 4 or container_grid.shape[1] != self.carrier_channels:
            raise ValueError(f"Container grid needs shape (N, {self.carrier_channels}, w, h), "
                             f"got {tuple(container_grid.shape)}")
        features = self._encode(container_grid, incoming)
        return self.head(features), features


def _batched(tensor: Optional[torch.Tensor]) -> Tuple[Optional[torch.Tensor], bool]:
    if tensor is not None and tensor.dim() == 3:
        return tensor.unsqueeze(0), True
    return tensor, False


def hide_forward(net: HidingSubNet, secret_residual: torch.Tensor, carrier_grid: torch.Tensor,
                 incoming: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, torch.Tensor]:
    """Run one hiding stage on batched or single (3-D) inputs."""
    secret_residual, squeeze = _batched(secret_residual)
    carrier_grid, _ = _batched(carrier_grid)
    incoming, _ = _batched(incoming)
    container, features = net(secret_residual, carrier_grid, incoming)
    if squeeze:
        return container[0], features[0]
    return container, features


def reveal_forward(net: RevealingSubNet, container_grid: torch.Tensor,
                   incoming: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, torch.Tensor]:
    """Run one revealing stage on batched or single (3-D) inputs."""
    container_grid, squeeze = _batched(container_grid)
    incoming, _ = _batched(incoming)
    residual, features = net(container_grid, incoming)
    if squeeze:
        return residual[0], features[0]
    return residual, features
