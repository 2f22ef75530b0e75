"""
Single-shot baseline: all t carrier frames stacked into one t x w x h tensor,
one hiding network and one revealing network.
"""
import logging

import torch
import torch.nn as nn

from config import config
from .stage_models import ModelSpec, parameter_count
from .stage_nets import HidingSubNet, RevealingSubNet


class SingleShotModels(nn.Module):
    """Hiding net (3+t -> t channels) and revealing net (t -> 3 channels).

    Each net holds t*B residual blocks, the same block budget as a t-stage model.
    """

    def __init__(self, spec: ModelSpec):
        super().__init__()
        spec.validate()
        self.spec = spec
        budget = spec.stages * spec.blocks
        self.hiding = HidingSubNet(spec.features, budget, carrier_channels=spec.stages)
        self.revealing = RevealingSubNet(spec.features, budget, carrier_channels=spec.stages)

    @property
    def stages(self) -> int:
        return self.spec.stages

    @property
    def variant(self) -> str:
        return self.spec.variant

    def forward(self, secret: torch.Tensor, carrier_stack: torch.Tensor):
        """Hide the whole secret in the stacked carrier and reveal it.

        Args:
            secret: (N, 3, w, h) secret images.
            carrier_stack: (N, t, w, h) stacked carrier grids.

        Returns:
            Tuple of (container_stack, revealed).
        """
        container, _ = self.hiding(secret, carrier_stack)
        revealed, _ = self.revealing(container)
        return container, revealed


def init_single_shot(stages: int = config.DEFAULT_STAGES, blocks: int = config.DEFAULT_BLOCKS,
                     seed: int = config.DEFAULT_SEED,
                     features: int = config.DEFAULT_FEATURES) -> SingleShotModels:
    """Build a deterministic single-shot baseline with zero heads."""
    spec = ModelSpec(stages=stages, blocks=blocks, variant=config.SINGLE_SHOT_VARIANT,
                     seed=seed, features=features)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        models = SingleShotModels(spec)
    models.hiding.zero_head()
    models.revealing.zero_head()
    logging.info(f"Initialized single-shot baseline: t={stages}, {stages * blocks} blocks per net, "
                 f"{parameter_count(models)} parameters")
    return models
