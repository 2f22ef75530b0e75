"""
Multi-stage hide/reveal protocol.

Stage i hides the residual S_i = S_0 - C_{i-1}, where C_{i-1} is the sum of
the residuals revealed by stages 1..i-1, so hiding and revealing are
interleaved stage by stage. The same driver (`run_stages`) serves inference
and training.
"""
import logging
import os
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from PIL import Image

from carrier import (AudioStream, CarrierFrame, Manifest, StegoBundle, frame_offsets,
                     frames_at, grid_to_frame, splice)
from config import config
from networks import StageModels, checkpoint_id, hide_forward, reveal_forward


class CheckpointMismatchError(ValueError):
    """Raised when a manifest names a different checkpoint than the models in use."""


@dataclass(frozen=True)
class SecretImage:
    """A 3 x w x h image with values in [0, 1]."""
    pixels: np.ndarray

    def __post_init__(self):
        pixels = np.asarray(self.pixels, dtype=np.float32)
        if pixels.ndim != 3 or pixels.shape[0] != config.SECRET_CHANNELS:
            raise ValueError(f"Secret image must be 3 x w x h, got shape {pixels.shape}")
        if pixels.size and (pixels.min() < 0.0 or pixels.max() > 1.0):
            raise ValueError("Secret image values must lie in [0, 1]")
        pixels.setflags(write=False)
        object.__setattr__(self, 'pixels', pixels)

    @property
    def w(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def h(self) -> int:
        return int(self.pixels.shape[2])

    def as_tensor(self, like: Optional[torch.Tensor] = None) -> torch.Tensor:
        tensor = torch.from_numpy(self.pixels.copy())
        if like is not None:
            tensor = tensor.to(device=like.device, dtype=like.dtype)
        return tensor

    @classmethod
    def from_tensor(cls, tensor: torch.Tensor) -> 'SecretImage':
        return cls(tensor.detach().float().clamp(0.0, 1.0).cpu().numpy())


@dataclass
class RevealState:
    """Revealed residuals R_1..R_t, running sums C_0..C_t and the availability mask.

    Tensors may carry a leading batch dimension.
    """
    residuals: List[Optional[torch.Tensor]]
    partials: List[torch.Tensor]
    mask: List[bool] = field(default_factory=list)

    @property
    def stages(self) -> int:
        return len(self.residuals)

    @property
    def final(self) -> torch.Tensor:
        """clamp(C_t, 0, 1)."""
        return self.partials[-1].clamp(0.0, 1.0)

    @property
    def available_count(self) -> int:
        return sum(1 for r in self.residuals if r is not None)

    def clamped_partial(self, stage: int) -> torch.Tensor:
        """clamp(C_stage, 0, 1) for 1-based stage index."""
        return self.partials[stage].clamp(0.0, 1.0)


@dataclass
class StageTrace:
    """Everything one pass through the stages produces."""
    containers: List[torch.Tensor]
    targets: List[torch.Tensor]
    state: RevealState


def compute_residual(secret: torch.Tensor, partial: torch.Tensor) -> torch.Tensor:
    """S_i = S_0 - C_{i-1}, exact and unclipped.

    Raises:
        ValueError: If shapes differ.
    """
    if tuple(secret.shape) != tuple(partial.shape):
        raise ValueError(f"Secret shape {tuple(secret.shape)} does not match "
                         f"partial shape {tuple(partial.shape)}")
    return secret - partial


def accumulate(residuals: Sequence[Optional[torch.Tensor]], like: torch.Tensor) -> List[torch.Tensor]:
    """Running sums C_0..C_t; missing residuals contribute zero."""
    partials = [torch.zeros_like(like)]
    for residual in residuals:
        partials.append(partials[-1] if residual is None else partials[-1] + residual)
    return partials


def quantize_straight_through(container: torch.Tensor) -> torch.Tensor:
    """16-bit PCM quantization in the forward pass, identity gradient in the backward pass."""
    scale = config.PCM_SCALE
    quantized = torch.clamp(torch.round(container.clamp(-1.0, 1.0) * scale),
                            config.PCM_MIN, config.PCM_MAX) / scale
    return container + (quantized - container).detach()


def _as_float32_values(container: torch.Tensor) -> torch.Tensor:
    # Containers stored in a stream are float32; reveal from exactly those values.
    return container.clamp(-1.0, 1.0).to(torch.float32).to(container.dtype)


def run_stages(secrets: torch.Tensor, carriers: Sequence[torch.Tensor], models: StageModels,
               *, clamp_containers: bool = False, quantize: bool = False,
               detach_chain: bool = False) -> StageTrace:
    """Interleaved hide/reveal over all stages.

    Args:
        secrets: (N, 3, w, h) secret images S_0.
        carriers: t tensors of shape (N, 1, w, h), the carrier grids T_i.
        models: Stage models.
        clamp_containers: Clamp containers to [-1, 1] float32 values before revealing (inference).
        quantize: Pass containers through a straight-through 16-bit quantizer before revealing.
        detach_chain: Stop gradients flowing from revealed residuals into later stage inputs.

    Returns:
        StageTrace with containers, residual targets S_i and the reveal state.

    Raises:
        ValueError: If the carrier count does not match the stage count.
    """
    if len(carriers) != models.stages:
        raise ValueError(f"Got {len(carriers)} carrier grids for t={models.stages}")

    partial = torch.zeros_like(secrets)
    partials = [partial]
    residuals, containers, targets = [], [], []
    hiding_features = revealing_features = None

    for stage, carrier in enumerate(carriers):
        chain = partial.detach() if detach_chain else partial
        target = compute_residual(secrets, chain)

        hiding_in = hiding_features if models.hiding_connected and stage > 0 else None
        container, hiding_features = models.hiding_net(stage)(target, carrier, hiding_in)

        revealed_from = container
        if clamp_containers:
            revealed_from = _as_float32_values(container)
        if quantize:
            revealed_from = quantize_straight_through(revealed_from)

        revealing_in = revealing_features if models.revealing_connected and stage > 0 else None
        residual, revealing_features = models.revealing_net(stage)(revealed_from, revealing_in)

        partial = partial + residual
        partials.append(partial)
        residuals.append(residual)
        containers.append(revealed_from if clamp_containers else container)
        targets.append(target)

    state = RevealState(residuals=residuals, partials=partials, mask=[True] * len(residuals))
    return StageTrace(containers=containers, targets=targets, state=state)


def _model_tensor(models: StageModels) -> torch.Tensor:
    return next(models.parameters())


def _grids_to_tensors(frames: Sequence[CarrierFrame], like: torch.Tensor) -> List[torch.Tensor]:
    return [torch.from_numpy(frame.grid).to(device=like.device, dtype=like.dtype)[None, None]
            for frame in frames]


def _check_geometry(secret: SecretImage, frames: Sequence[CarrierFrame], models: StageModels) -> None:
    if len(frames) != models.stages:
        raise ValueError(f"Got {len(frames)} frames for t={models.stages}")
    for frame in frames:
        if (frame.w, frame.h) != (secret.w, secret.h):
            raise ValueError(f"Frame grid {frame.w}x{frame.h} does not match secret {secret.w}x{secret.h}")


def hide_all(secret: SecretImage, frames: Sequence[CarrierFrame],
             models: StageModels) -> Tuple[List[CarrierFrame], RevealState]:
    """Embed the secret's successive residuals into the t frames.

    Returns:
        Tuple of (containers at the original offsets, reveal trace).

    Raises:
        ValueError: On frame count or shape mismatch.
    """
    _check_geometry(secret, frames, models)
    like = _model_tensor(models)
    models.eval()
    with torch.no_grad():
        trace = run_stages(secret.as_tensor(like)[None], _grids_to_tensors(frames, like), models,
                           clamp_containers=True)

    containers = [grid_to_frame(container[0, 0].cpu().numpy(), frame.offset, frame.w, frame.h)
                  for container, frame in zip(trace.containers, frames)]
    state = RevealState(residuals=[r[0] for r in trace.state.residuals],
                        partials=[c[0] for c in trace.state.partials],
                        mask=list(trace.state.mask))
    return containers, state


def reveal_all(containers: Sequence[CarrierFrame], models: StageModels,
               mask: Optional[Sequence[bool]] = None) -> RevealState:
    """Reveal and accumulate residuals from the available containers.

    Dropped frames contribute a zero residual; a connected revealing stage whose
    predecessor was dropped receives a zero feature map.

    Raises:
        ValueError: On container count or mask length mismatch.
    """
    if len(containers) != models.stages:
        raise ValueError(f"Got {len(containers)} containers for t={models.stages}")
    mask = [True] * models.stages if mask is None else [bool(m) for m in mask]
    if len(mask) != models.stages:
        raise ValueError(f"Mask has {len(mask)} entries for t={models.stages}")

    like = _model_tensor(models)
    first = containers[0]
    shape = (config.SECRET_CHANNELS, first.w, first.h)
    zeros = torch.zeros(shape, device=like.device, dtype=like.dtype)

    residuals: List[Optional[torch.Tensor]] = []
    features = None
    models.eval()
    with torch.no_grad():
        for stage, (frame, available) in enumerate(zip(containers, mask)):
            if not available:
                residuals.append(None)
                features = None
                continue
            incoming = None
            if models.revealing_connected and stage > 0:
                incoming = features if features is not None else torch.zeros(
                    (models.spec.features, frame.w, frame.h), device=like.device, dtype=like.dtype)
            grid = torch.from_numpy(frame.grid).to(device=like.device, dtype=like.dtype)[None]
            residual, features = reveal_forward(models.revealing_net(stage), grid, incoming)
            residuals.append(residual)

    return RevealState(residuals=residuals, partials=accumulate(residuals, zeros), mask=mask)


def _resolve_offsets(manifest: Manifest, cover: AudioStream) -> List[int]:
    if manifest.offsets:
        return list(manifest.offsets)
    return frame_offsets(cover.length, manifest.t, manifest.w, manifest.h)


def embed(secret: SecretImage, cover: AudioStream, models: StageModels,
          manifest: Manifest) -> StegoBundle:
    """select frames -> hide_all -> splice.

    An empty offset list in the manifest selects the default contiguous framing.

    Raises:
        CapacityError: If the cover is too short.
        CheckpointMismatchError: If the manifest names other models.
        ValueError: On geometry mismatch.
    """
    ident = checkpoint_id(models)
    if manifest.checkpoint_id and manifest.checkpoint_id != ident:
        raise CheckpointMismatchError(f"Manifest expects checkpoint {manifest.checkpoint_id[:12]}, "
                                      f"models are {ident[:12]}")
    if manifest.t != models.stages:
        raise ValueError(f"Manifest t={manifest.t} but models have {models.stages} stages")
    if (secret.w, secret.h) != (manifest.w, manifest.h):
        raise ValueError(f"Secret is {secret.w}x{secret.h}, manifest expects {manifest.w}x{manifest.h}")

    offsets = _resolve_offsets(manifest, cover)
    resolved = replace(manifest, offsets=offsets, variant=models.variant, checkpoint_id=ident)
    resolved.validate()

    frames = frames_at(cover, offsets, manifest.w, manifest.h)
    containers, _ = hide_all(secret, frames, models)
    stream = splice(cover, containers)
    logging.info(f"Embedded {secret.w}x{secret.h} secret into {models.stages} frames "
                 f"at offsets {offsets}")
    return StegoBundle(stream=stream, manifest=resolved)


def extract_state(bundle: StegoBundle, models: StageModels,
                  mask: Optional[Sequence[bool]] = None, strict: bool = False) -> RevealState:
    """Reveal from a bundle, returning the full reveal state.

    A checkpoint-id mismatch only logs a warning unless `strict` is set:
    without the right models the output is simply garbage.
    """
    manifest = bundle.manifest
    ident = checkpoint_id(models)
    if manifest.checkpoint_id and manifest.checkpoint_id != ident:
        message = (f"Bundle was made with checkpoint {manifest.checkpoint_id[:12]}, "
                   f"extracting with {ident[:12]}")
        if strict:
            raise CheckpointMismatchError(message)
        logging.warning(message)
    if manifest.variant != models.variant:
        logging.warning(f"Bundle was made with variant {manifest.variant}, "
                        f"extracting with {models.variant}")
    if manifest.t != models.stages:
        raise ValueError(f"Manifest t={manifest.t} but models have {models.stages} stages")

    frames = frames_at(bundle.stream, manifest.offsets, manifest.w, manifest.h)
    return reveal_all(frames, models, mask)


def extract(bundle: StegoBundle, models: StageModels, mask: Optional[Sequence[bool]] = None,
            strict: bool = False) -> SecretImage:
    """select frames at manifest offsets -> reveal_all -> clamp."""
    return SecretImage.from_tensor(extract_state(bundle, models, mask, strict).final)


def drop_mask(stages: int, dropped: Sequence[int]) -> List[bool]:
    """Availability mask with the given 1-based stages dropped.

    Raises:
        ValueError: If a stage index is out of range.
    """
    dropped = set(dropped)
    for stage in dropped:
        if not 1 <= stage <= stages:
            raise ValueError(f"Dropped stage {stage} out of range 1..{stages}")
    return [stage not in dropped for stage in range(1, stages + 1)]


def load_secret(path: str, w: int, h: int) -> SecretImage:
    """Load an RGB image as a w x h secret, resizing when needed.

    Raises:
        FileNotFoundError: If the file does not exist.
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"Secret image not found: {path}")
    with Image.open(path) as img:
        img = img.convert('RGB')
        if img.size != (h, w):
            logging.warning(f"Resizing secret {path} from {img.size[1]}x{img.size[0]} to {w}x{h}")
            img = img.resize((h, w), Image.BICUBIC)
        pixels = np.asarray(img, dtype=np.float32) / 255.0
    return SecretImage(pixels.transpose(2, 0, 1))


def save_image(pixels: Union[np.ndarray, torch.Tensor, SecretImage], path: str) -> None:
    """Save a 3 x w x h (or 1 x w x h) array in [0, 1] as an 8-bit PNG."""
    if isinstance(pixels, SecretImage):
        pixels = pixels.pixels
    if isinstance(pixels, torch.Tensor):
        pixels = pixels.detach().float().cpu().numpy()
    array = np.clip(np.asarray(pixels, dtype=np.float64), 0.0, 1.0)
    array = np.rint(array * 255.0).astype(np.uint8).transpose(1, 2, 0)
    if array.shape[2] == 1:
        array = array[:, :, 0]
    try:
        Image.fromarray(array).save(path)
    except Exception as e:
        logging.error(f"Failed to save image {path}: {e}")
        raise
