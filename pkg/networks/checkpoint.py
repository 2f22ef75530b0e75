"""
Checkpoint files: a versioned torch blob holding the config header and the
named parameter tensors, identified by a SHA-256 content hash.
"""
import hashlib
import json
import logging
import os
from typing import Union

import torch

from config import config
from .single_shot import SingleShotModels
from .stage_models import ModelSpec, StageModels

Models = Union[StageModels, SingleShotModels]


def checkpoint_id(models: Models) -> str:
    """SHA-256 over the header and every parameter's name, dtype, shape and bytes."""
    digest = hashlib.sha256()
    header = json.dumps({'format_version': config.CHECKPOINT_FORMAT_VERSION,
                         **models.spec.to_dict()}, sort_keys=True)
    digest.update(header.encode('utf-8'))
    state = models.state_dict()
    for name in sorted(state):
        tensor = state[name].detach().cpu().contiguous()
        digest.update(name.encode('utf-8'))
        digest.update(str(tensor.dtype).encode('utf-8'))
        digest.update(str(tuple(tensor.shape)).encode('utf-8'))
        digest.update(tensor.numpy().tobytes())
    return digest.hexdigest()


def build_models(spec: ModelSpec) -> Models:
    """Instantiate the model family named by spec.variant."""
    if spec.variant == config.SINGLE_SHOT_VARIANT:
        return SingleShotModels(spec)
    return StageModels(spec)


def save_checkpoint(models: Models, path: str) -> str:
    """Write a checkpoint and return its id.

    Raises:
        OSError: If writing fails.
    """
    ident = checkpoint_id(models)
    payload = {
        'format_version': config.CHECKPOINT_FORMAT_VERSION,
        'header': models.spec.to_dict(),
        'checkpoint_id': ident,
        'state_dict': {name: tensor.detach().cpu().clone()
                       for name, tensor in models.state_dict().items()},
    }
    try:
        directory = os.path.dirname(os.path.abspath(path))
        os.makedirs(directory, exist_ok=True)
        torch.save(payload, path)
    except Exception as e:
        logging.error(f"Failed to save checkpoint {path}: {e}")
        raise
    logging.info(f"Checkpoint saved: {path} (id {ident[:12]})")
    return ident


def load_checkpoint(path: str, map_location: str = "cpu") -> Models:
    """Rebuild models from a checkpoint file.

    Raises:
        FileNotFoundError: If the file does not exist.
        ValueError: If the format version is unknown or the content hash does not verify.
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"Checkpoint not found: {path}")

    payload = torch.load(path, map_location=map_location, weights_only=True)
    version = payload.get('format_version')
    if version != config.CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"Unsupported checkpoint format version {version} in {path}")

    spec = ModelSpec.from_dict(payload['header'])
    models = build_models(spec)
    models.load_state_dict(payload['state_dict'])
    models.eval()

    ident = checkpoint_id(models)
    if payload.get('checkpoint_id') and payload['checkpoint_id'] != ident:
        raise ValueError(f"Checkpoint {path} content does not match its recorded id")
    logging.info(f"Checkpoint loaded: {path} ({spec.variant}, t={spec.stages}, id {ident[:12]})")
    return models
