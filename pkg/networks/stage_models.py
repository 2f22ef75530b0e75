"""
Per-stage hiding/revealing parameter sets and their wiring variants.

Variants:
    M     independent stages, no connections
    M-E   hiding stages pass features forward
    M-D   revealing stages pass features forward
    M-ED  both sides pass features forward
    S     one parameter set shared by every stage
"""
import logging
from dataclasses import asdict, dataclass
from typing import Any, Dict

import torch
import torch.nn as nn

from config import config
from .stage_nets import HidingSubNet, RevealingSubNet


@dataclass(frozen=True)
class ModelSpec:
    """Configuration header stored with every checkpoint."""
    stages: int = config.DEFAULT_STAGES
    blocks: int = config.DEFAULT_BLOCKS
    variant: str = "M"
    seed: int = config.DEFAULT_SEED
    features: int = config.DEFAULT_FEATURES

    def validate(self) -> None:
        if self.stages < 1:
            raise ValueError(f"Stage count must be >= 1, got {self.stages}")
        if self.blocks < 1:
            raise ValueError(f"Block count must be >= 1, got {self.blocks}")
        if self.features < 1:
            raise ValueError(f"Feature width must be >= 1, got {self.features}")
        if self.variant not in config.VARIANTS + (config.SINGLE_SHOT_VARIANT,):
            raise ValueError(f"Unknown variant {self.variant!r}; choose from "
                             f"{config.VARIANTS + (config.SINGLE_SHOT_VARIANT,)}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'ModelSpec':
        return cls(**data)


def hiding_connected(variant: str) -> bool:
    return variant in ("M-E", "M-ED")


def revealing_connected(variant: str) -> bool:
    return variant in ("M-D", "M-ED")


class StageModels(nn.Module):
    """Hiding and revealing sub-networks for all t stages."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        spec.validate()
        if spec.variant == config.SINGLE_SHOT_VARIANT:
            raise ValueError("Use SingleShotModels for the single-shot baseline")
        self.spec = spec
        self.shared = spec.variant == "S"

        distinct = 1 if self.shared else spec.stages
        self.hiding = nn.ModuleList([
            HidingSubNet(spec.features, spec.blocks,
                         connected=hiding_connected(spec.variant) and i > 0)
            for i in range(distinct)
        ])
        self.revealing = nn.ModuleList([
            RevealingSubNet(spec.features, spec.blocks,
                            connected=revealing_connected(spec.variant) and i > 0)
            for i in range(distinct)
        ])

    @property
    def stages(self) -> int:
        return self.spec.stages

    @property
    def variant(self) -> str:
        return self.spec.variant

    @property
    def hiding_connected(self) -> bool:
        return hiding_connected(self.variant)

    @property
    def revealing_connected(self) -> bool:
        return revealing_connected(self.variant)

    def hiding_net(self, stage: int) -> HidingSubNet:
        """Hiding sub-network for 0-based stage index."""
        self._check_stage(stage)
        return self.hiding[0 if self.shared else stage]

    def revealing_net(self, stage: int) -> RevealingSubNet:
        """Revealing sub-network for 0-based stage index."""
        self._check_stage(stage)
        return self.revealing[0 if self.shared else stage]

    def _check_stage(self, stage: int) -> None:
        if not 0 <= stage < self.stages:
            raise IndexError(f"Stage {stage} out of range for t={self.stages}")


def parameter_count(model: nn.Module) -> int:
    """Count distinct trainable scalars (shared sets counted once)."""
    return sum(p.numel() for p in model.parameters())


def init_models(stages: int = config.DEFAULT_STAGES, blocks: int = config.DEFAULT_BLOCKS,
                variant: str = "M", seed: int = config.DEFAULT_SEED,
                features: int = config.DEFAULT_FEATURES) -> StageModels:
    """Build deterministic StageModels for a seed.

    Every layer uses the framework's fan-in scaled initialization except the
    heads, which start at zero: containers equal covers and every revealed
    residual is the zero tensor until training moves them.

    Raises:
        ValueError: On an invalid configuration.
    """
    spec = ModelSpec(stages=stages, blocks=blocks, variant=variant, seed=seed, features=features)
    spec.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        models = StageModels(spec)
    for net in list(models.hiding) + list(models.revealing):
        net.zero_head()
    logging.info(f"Initialized {variant} models: t={stages}, B={blocks}, features={features}, "
                 f"seed={seed}, {parameter_count(models)} parameters")
    return models
