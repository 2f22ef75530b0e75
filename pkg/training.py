"""
Joint multi-stage training.

Total loss: sum over stages of L_H_i + lambda_i * L_R_i, where each loss is the
per-sample sum of squared errors averaged over the batch. Adam optimizes all
stage parameters end to end; the learning rate is divided by a constant
factor every fixed number of epochs.
"""
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch.optim import Adam
from torch.optim.lr_scheduler import StepLR
from tqdm import tqdm

from carrier import frame_offsets
from config import config
from corpora import AudioCorpus, ImageCorpus, load_audio_dir, load_image_dir, synthetic_audio, \
    synthetic_images, toy_fixture
from networks import (SingleShotModels, StageModels, init_models, init_single_shot,
                      resolve_device, save_checkpoint)
from pipeline import quantize_straight_through, run_stages

Number = Union[float, torch.Tensor]


class TrainingDivergedError(RuntimeError):
    """Raised when the training loss becomes non-finite."""


@dataclass
class TrainingConfig:
    """Every knob of a training run; mirrors the flat config file keys."""
    stages: int = config.DEFAULT_STAGES
    blocks: int = config.DEFAULT_BLOCKS
    features: int = config.DEFAULT_FEATURES
    variant: str = "M"
    lambdas: Tuple[float, ...] = ()
    batch_size: int = config.DEFAULT_BATCH_SIZE
    lr: float = config.DEFAULT_LEARNING_RATE
    lr_decay_factor: float = config.LR_DECAY_FACTOR
    lr_decay_epochs: int = config.LR_DECAY_EVERY_EPOCHS
    epochs: int = config.DEFAULT_EPOCHS
    steps_per_epoch: int = config.DEFAULT_STEPS_PER_EPOCH
    # 0 disables the cap
    max_steps: int = 0
    patch: int = config.DEFAULT_PATCH
    seed: int = config.DEFAULT_SEED
    quantize_in_loop: bool = False
    detach_residual_chain: bool = False
    checkpoint_every: int = 0
    device: str = config.DEFAULT_DEVICE
    corpus: str = "synthetic"
    image_dir: str = ""
    audio_dir: str = ""
    progress: bool = True

    def __post_init__(self):
        if not self.lambdas:
            self.lambdas = (config.DEFAULT_LAMBDA,) * self.stages
        elif len(self.lambdas) == 1 and self.stages > 1:
            self.lambdas = tuple(self.lambdas) * self.stages
        self.lambdas = tuple(float(value) for value in self.lambdas)

    def validate(self) -> None:
        """Check field ranges.

        Raises:
            ValueError: On any invalid value.
        """
        if self.stages < 1:
            raise ValueError(f"stages must be >= 1, got {self.stages}")
        if self.blocks < 1:
            raise ValueError(f"blocks must be >= 1, got {self.blocks}")
        if self.variant not in config.VARIANTS + (config.SINGLE_SHOT_VARIANT,):
            raise ValueError(f"Unknown variant {self.variant!r}")
        if len(self.lambdas) != self.stages:
            raise ValueError(f"{len(self.lambdas)} lambdas given for {self.stages} stages")
        if any(value <= 0 for value in self.lambdas):
            raise ValueError(f"lambdas must be positive, got {self.lambdas}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.lr_decay_factor <= 0 or self.lr_decay_epochs < 1:
            raise ValueError("lr decay factor must be positive and decay period >= 1 epoch")
        if self.patch < config.MIN_GRID_SIDE:
            raise ValueError(f"patch must be >= {config.MIN_GRID_SIDE}, got {self.patch}")
        if self.batch_size < 1 or self.epochs < 1 or self.steps_per_epoch < 1:
            raise ValueError("batch_size, epochs and steps_per_epoch must be >= 1")
        if self.corpus not in config.CORPUS_KINDS:
            raise ValueError(f"corpus must be one of {config.CORPUS_KINDS}, got {self.corpus!r}")
        if self.corpus == "toy" and (self.patch > config.TOY_IMAGE_SIZE
                                     or self.stages * self.patch ** 2 > config.TOY_AUDIO_LENGTH):
            raise ValueError(f"The toy fixture ({config.TOY_IMAGE_SIZE}x{config.TOY_IMAGE_SIZE} images, "
                             f"{config.TOY_AUDIO_LENGTH}-sample clips) cannot hold "
                             f"t={self.stages} frames of {self.patch}x{self.patch}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def toy_training_config(**overrides) -> TrainingConfig:
    """Config of the canonical acceptance workload (t=3, B=2, 200 steps, seed 7)."""
    values = dict(
        stages=config.TOY_STAGES,
        blocks=config.TOY_BLOCKS,
        batch_size=config.TOY_BATCH_SIZE,
        lr=config.TOY_LEARNING_RATE,
        epochs=10,
        steps_per_epoch=config.TOY_STEPS // 10,
        max_steps=config.TOY_STEPS,
        patch=config.TOY_IMAGE_SIZE,
        seed=config.TOY_SEED,
        corpus="toy",
        device="cpu",
        progress=False,
    )
    values.update(overrides)
    return TrainingConfig(**values)


def toy_sweep_config(**overrides) -> TrainingConfig:
    """Toy workload for stage sweeps: each t trains long enough for its PSNR to level off."""
    values = dict(
        epochs=config.TOY_SWEEP_EPOCHS,
        steps_per_epoch=config.TOY_SWEEP_STEPS_PER_EPOCH,
        max_steps=0,
        lr_decay_epochs=config.TOY_SWEEP_DECAY_EPOCHS,
    )
    values.update(overrides)
    return toy_training_config(**values)


def learning_rate_at(cfg: TrainingConfig, epoch: int) -> float:
    """lr / factor^(epoch // period)."""
    return cfg.lr / (cfg.lr_decay_factor ** (epoch // cfg.lr_decay_epochs))


@dataclass
class Batch:
    """Secrets (N, 3, p, p) in [0, 1] and t carrier grids (N, 1, p, p) in [-1, 1]."""
    secrets: torch.Tensor
    carriers: List[torch.Tensor]

    def to(self, device: torch.device, dtype: Optional[torch.dtype] = None) -> 'Batch':
        return Batch(secrets=self.secrets.to(device=device, dtype=dtype or self.secrets.dtype),
                     carriers=[c.to(device=device, dtype=dtype or c.dtype) for c in self.carriers])

    @property
    def size(self) -> int:
        return int(self.secrets.shape[0])


def sample_batch(images: ImageCorpus, audio: AudioCorpus, cfg: TrainingConfig,
                 rng: np.random.Generator) -> Batch:
    """Random crops from the image corpus and random non-overlapping frames from one clip per sample.

    Raises:
        ValueError: If an image or clip is too small for the configured patch and stages.
    """
    patch = cfg.patch
    frame_size = patch * patch
    secrets = np.empty((cfg.batch_size, config.SECRET_CHANNELS, patch, patch), dtype=np.float32)
    carriers = np.empty((cfg.stages, cfg.batch_size, 1, patch, patch), dtype=np.float32)

    for n in range(cfg.batch_size):
        image = images[int(rng.integers(len(images)))]
        rows, cols = image.shape[1:]
        if rows < patch or cols < patch:
            raise ValueError(f"Image {rows}x{cols} smaller than patch {patch}")
        top = int(rng.integers(0, rows - patch + 1))
        left = int(rng.integers(0, cols - patch + 1))
        secrets[n] = image[:, top:top + patch, left:left + patch]

        clip = audio[int(rng.integers(len(audio)))]
        # raises CapacityError for short clips
        frame_offsets(clip.length, cfg.stages, patch, patch)
        slack = clip.length - cfg.stages * frame_size
        starts = np.sort(rng.integers(0, slack + 1, size=cfg.stages))
        for stage, start in enumerate(starts):
            offset = int(start) + stage * frame_size
            carriers[stage, n, 0] = clip.samples[offset:offset + frame_size].reshape(patch, patch)

    return Batch(secrets=torch.from_numpy(secrets),
                 carriers=[torch.from_numpy(carriers[stage]) for stage in range(cfg.stages)])


def _squared_error(estimate: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if estimate.shape != target.shape:
        raise ValueError(f"Shapes differ: {tuple(estimate.shape)} vs {tuple(target.shape)}")
    if estimate.dim() < 2:
        raise ValueError("Loss inputs need a leading batch dimension")
    return ((estimate - target) ** 2).flatten(1).sum(dim=1).mean()


def hiding_loss(container: torch.Tensor, cover: torch.Tensor) -> torch.Tensor:
    """(1/N) * sum_n ||container_n - cover_n||^2."""
    return _squared_error(container, cover)


def revealing_loss(residual_estimate: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """(1/N) * sum_n ||R_n - S_n||^2."""
    return _squared_error(residual_estimate, target)


def total_loss(hiding: Sequence[Number], revealing: Sequence[Number],
               lambdas: Sequence[float]) -> Number:
    """sum_i (L_H_i + lambda_i * L_R_i).

    Raises:
        ValueError: If the three sequences differ in length.
    """
    if not len(hiding) == len(revealing) == len(lambdas):
        raise ValueError(f"Length mismatch: {len(hiding)} hiding, {len(revealing)} revealing, "
                         f"{len(lambdas)} lambdas")
    total = 0.0
    for l_h, l_r, weight in zip(hiding, revealing, lambdas):
        total = total + l_h + weight * l_r
    return total


@dataclass
class LossBreakdown:
    """Loss terms and outputs of one forward pass over a batch."""
    total: torch.Tensor
    hiding: List[torch.Tensor]
    revealing: List[torch.Tensor]
    audio_mse: float
    revealed: torch.Tensor


class StageObjective:
    """Interleaved multi-stage forward pass and joint loss."""

    def __init__(self, models: StageModels, cfg: TrainingConfig):
        self.models = models
        self.cfg = cfg

    def __call__(self, batch: Batch) -> LossBreakdown:
        trace = run_stages(batch.secrets, batch.carriers, self.models,
                           quantize=self.cfg.quantize_in_loop,
                           detach_chain=self.cfg.detach_residual_chain)
        hiding = [hiding_loss(c, cover) for c, cover in zip(trace.containers, batch.carriers)]
        revealing = [revealing_loss(r, s) for r, s in zip(trace.state.residuals, trace.targets)]
        with torch.no_grad():
            audio_error = float(np.mean([torch.mean((c - cover) ** 2).item()
                                         for c, cover in zip(trace.containers, batch.carriers)]))
        return LossBreakdown(total=total_loss(hiding, revealing, self.cfg.lambdas),
                             hiding=hiding, revealing=revealing,
                             audio_mse=audio_error, revealed=trace.state.final)


class SingleShotObjective:
    """Baseline: all carrier grids stacked into one t-channel tensor."""

    def __init__(self, models: SingleShotModels, cfg: TrainingConfig):
        self.models = models
        self.cfg = cfg

    def __call__(self, batch: Batch) -> LossBreakdown:
        stack = torch.cat(batch.carriers, dim=1)
        container, _ = self.models.hiding(batch.secrets, stack)
        revealed_from = quantize_straight_through(container) if self.cfg.quantize_in_loop else container
        revealed, _ = self.models.revealing(revealed_from)
        hiding = [hiding_loss(container, stack)]
        revealing = [revealing_loss(revealed, batch.secrets)]
        with torch.no_grad():
            audio_error = torch.mean((container - stack) ** 2).item()
        return LossBreakdown(total=total_loss(hiding, revealing, self.cfg.lambdas[:1]),
                             hiding=hiding, revealing=revealing,
                             audio_mse=audio_error, revealed=revealed.clamp(0.0, 1.0))


@dataclass
class EpochMetrics:
    """Per-epoch means of the training losses and quality figures."""
    epoch: int
    lr: float
    total: float
    hiding: List[float]
    revealing: List[float]
    audio_mse: float
    psnr: float

    @staticmethod
    def tsv_header(stages: int) -> str:
        columns = ['epoch', 'lr', 'total']
        columns += [f'L_H{i}' for i in range(1, stages + 1)]
        columns += [f'L_R{i}' for i in range(1, stages + 1)]
        columns += ['audio_mse', 'psnr']
        return "\t".join(columns)

    def to_tsv(self) -> str:
        values = [str(self.epoch), f"{self.lr:.6g}", f"{self.total:.6f}"]
        values += [f"{value:.6f}" for value in self.hiding + self.revealing]
        values += [f"{self.audio_mse:.6e}", f"{self.psnr:.4f}"]
        return "\t".join(values)


def write_metrics_log(path: str, metrics: EpochMetrics) -> None:
    """Append one epoch line, writing the header first for a new file."""
    is_new = not os.path.exists(path)
    with open(path, 'a', encoding='utf-8') as f:
        if is_new:
            f.write(EpochMetrics.tsv_header(len(metrics.hiding)) + "\n")
        f.write(metrics.to_tsv() + "\n")


@dataclass
class TrainingResult:
    """Trained models, per-epoch metrics and the per-step total losses."""
    models: Union[StageModels, SingleShotModels]
    history: List[EpochMetrics] = field(default_factory=list)
    step_losses: List[float] = field(default_factory=list)

    @property
    def initial_loss(self) -> float:
        return self.step_losses[0]

    @property
    def final_loss(self) -> float:
        return self.history[-1].total


def _batch_psnr(revealed: torch.Tensor, secrets: torch.Tensor) -> float:
    error = torch.mean((revealed.detach() - secrets) ** 2).item()
    return math.inf if error == 0.0 else 10.0 * math.log10(1.0 / error)


def _fit(models, objective, cfg: TrainingConfig, images: ImageCorpus, audio: AudioCorpus,
         metrics_log: Optional[str], checkpoint_dir: Optional[str]) -> TrainingResult:
    device = resolve_device(cfg.device)
    models.to(device)
    models.train()
    dtype = next(models.parameters()).dtype

    optimizer = Adam(models.parameters(), lr=cfg.lr, betas=config.ADAM_BETAS, eps=config.ADAM_EPS)
    scheduler = StepLR(optimizer, step_size=cfg.lr_decay_epochs, gamma=1.0 / cfg.lr_decay_factor)
    rng = np.random.default_rng(cfg.seed)
    result = TrainingResult(models=models)
    step = 0

    for epoch in range(cfg.epochs):
        lr = optimizer.param_groups[0]['lr']
        totals, audio_errors, psnrs = [], [], []
        hiding_sums = revealing_sums = None

        for _ in tqdm(range(cfg.steps_per_epoch), desc=f"epoch {epoch}", disable=not cfg.progress,
                      leave=False):
            if cfg.max_steps and step >= cfg.max_steps:
                break
            batch = sample_batch(images, audio, cfg, rng).to(device, dtype)
            optimizer.zero_grad()
            losses = objective(batch)
            value = losses.total.item()
            if not math.isfinite(value):
                raise TrainingDivergedError(f"Non-finite loss {value} at epoch {epoch}, step {step}")
            losses.total.backward()
            optimizer.step()

            hiding = np.array([l.item() for l in losses.hiding])
            revealing = np.array([l.item() for l in losses.revealing])
            hiding_sums = hiding if hiding_sums is None else hiding_sums + hiding
            revealing_sums = revealing if revealing_sums is None else revealing_sums + revealing
            totals.append(value)
            audio_errors.append(losses.audio_mse)
            psnrs.append(_batch_psnr(losses.revealed, batch.secrets))
            result.step_losses.append(value)
            step += 1

        if not totals:
            break
        count = len(totals)
        metrics = EpochMetrics(epoch=epoch, lr=lr, total=float(np.mean(totals)),
                               hiding=list(hiding_sums / count), revealing=list(revealing_sums / count),
                               audio_mse=float(np.mean(audio_errors)), psnr=float(np.mean(psnrs)))
        result.history.append(metrics)
        logging.info(f"Epoch {epoch}: lr={lr:.3g} total={metrics.total:.4f} "
                     f"audio_mse={metrics.audio_mse:.3e} psnr={metrics.psnr:.2f} dB")
        if metrics_log:
            write_metrics_log(metrics_log, metrics)
        if checkpoint_dir and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(models, os.path.join(checkpoint_dir, f"epoch_{epoch + 1:04d}.pt"))
        scheduler.step()

    models.eval()
    return result


def train(cfg: TrainingConfig, images: ImageCorpus, audio: AudioCorpus,
          metrics_log: Optional[str] = None, checkpoint_dir: Optional[str] = None) -> TrainingResult:
    """Train all stage parameters end to end.

    Raises:
        ValueError: On an invalid config or empty corpora.
        TrainingDivergedError: If the loss becomes non-finite.
    """
    cfg.validate()
    if not images or not audio:
        raise ValueError("Training needs non-empty image and audio corpora")
    if cfg.variant == config.SINGLE_SHOT_VARIANT:
        return train_single_shot(cfg, images, audio, metrics_log, checkpoint_dir)

    models = init_models(cfg.stages, cfg.blocks, cfg.variant, cfg.seed, cfg.features)
    logging.info(f"Training {cfg.variant} t={cfg.stages} for {cfg.epochs} epochs "
                 f"x {cfg.steps_per_epoch} steps (max_steps={cfg.max_steps or 'none'})")
    return _fit(models, StageObjective(models, cfg), cfg, images, audio, metrics_log, checkpoint_dir)


def train_single_shot(cfg: TrainingConfig, images: ImageCorpus, audio: AudioCorpus,
                      metrics_log: Optional[str] = None,
                      checkpoint_dir: Optional[str] = None) -> TrainingResult:
    """Train the single-shot baseline with the same loop, batches and losses."""
    cfg.validate()
    if not images or not audio:
        raise ValueError("Training needs non-empty image and audio corpora")
    models = init_single_shot(cfg.stages, cfg.blocks, cfg.seed, cfg.features)
    logging.info(f"Training single-shot baseline t={cfg.stages}")
    return _fit(models, SingleShotObjective(models, cfg), cfg, images, audio, metrics_log, checkpoint_dir)


def load_corpora(cfg: TrainingConfig) -> Tuple[ImageCorpus, AudioCorpus]:
    """Build the corpora a config names: synthetic generators, the toy fixture or directories.

    Raises:
        FileNotFoundError: If a corpus directory is missing.
        ValueError: If a directory holds no usable items.
    """
    if cfg.corpus == "directory":
        images = load_image_dir(cfg.image_dir, cfg.patch)
        audio = load_audio_dir(cfg.audio_dir, cfg.stages * cfg.patch * cfg.patch)
        return images, audio
    if cfg.corpus == "toy":
        return toy_fixture(cfg.seed)
    size = max(cfg.patch, config.SYNTHETIC_IMAGE_SIZE)
    length = max(config.SYNTHETIC_AUDIO_LENGTH, 2 * cfg.stages * cfg.patch * cfg.patch)
    return (synthetic_images(config.SYNTHETIC_IMAGE_COUNT, size, cfg.seed),
            synthetic_audio(config.SYNTHETIC_AUDIO_COUNT, length, seed=cfg.seed))
