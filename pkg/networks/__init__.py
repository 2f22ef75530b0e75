"""
Hiding and revealing networks for multi-stage residual steganography.
"""
from .base import StageSubNet, resolve_device
from .blocks import ResidualBlock
from .checkpoint import checkpoint_id, load_checkpoint, save_checkpoint
from .single_shot import SingleShotModels, init_single_shot
from .stage_models import ModelSpec, StageModels, init_models, parameter_count
from .stage_nets import HidingSubNet, RevealingSubNet, hide_forward, reveal_forward

__all__ = [
    'StageSubNet', 'resolve_device', 'ResidualBlock',
    'checkpoint_id', 'load_checkpoint', 'save_checkpoint',
    'SingleShotModels', 'init_single_shot',
    'ModelSpec', 'StageModels', 'init_models', 'parameter_count',
    'HidingSubNet', 'RevealingSubNet', 'hide_forward', 'reveal_forward',
]
