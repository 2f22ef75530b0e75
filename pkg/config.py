"""
Configuration constants for the StageHide toolkit.
"""
from dataclasses import dataclass
from typing import Tuple


@dataclass
class AppConfig:
    """Centralized configuration for the StageHide toolkit."""

    # File paths
    LOG_FILE: str = "stagehide.log"
    ENV_FILE: str = ".env"
    MANIFEST_SUFFIX: str = ".manifest"
    METRICS_LOG_FILE: str = "metrics.tsv"
    RESULTS_FILE: str = "results.json"
    CHECKPOINT_NAME: str = "stage_models.pt"

    # Audio settings
    PCM_SCALE: float = 32768.0
    PCM_MIN: int = -32768
    PCM_MAX: int = 32767
    DEFAULT_SAMPLE_RATE: int = 16000
    PCM_BITS_CHOICES: Tuple[str, ...] = ("16", "float")
    FRAMING_POLICIES: Tuple[str, ...] = ("contiguous", "strided")
    CORPUS_KINDS: Tuple[str, ...] = ("synthetic", "toy", "directory")

    # Geometry
    MIN_GRID_SIDE: int = 8

    # Network settings
    DEFAULT_STAGES: int = 5
    DEFAULT_BLOCKS: int = 4
    DEFAULT_FEATURES: int = 64
    SECRET_CHANNELS: int = 3
    CARRIER_CHANNELS: int = 1
    VARIANTS: Tuple[str, ...] = ("M", "M-E", "M-D", "M-ED", "S")
    SINGLE_SHOT_VARIANT: str = "single-shot"
    CHECKPOINT_FORMAT_VERSION: int = 1

    # Training settings
    DEFAULT_LAMBDA: float = 0.8
    DEFAULT_BATCH_SIZE: int = 16
    DEFAULT_LEARNING_RATE: float = 1e-4
    LR_DECAY_FACTOR: float = 3.0
    LR_DECAY_EVERY_EPOCHS: int = 20
    DEFAULT_EPOCHS: int = 200
    DEFAULT_STEPS_PER_EPOCH: int = 100
    DEFAULT_PATCH: int = 64
    DEFAULT_SEED: int = 0
    ADAM_BETAS: Tuple[float, float] = (0.9, 0.999)
    ADAM_EPS: float = 1e-8
    # "auto" picks CUDA when available, else CPU
    DEFAULT_DEVICE: str = "auto"

    # Desk-scale corpora
    SYNTHETIC_IMAGE_COUNT: int = 64
    SYNTHETIC_IMAGE_SIZE: int = 96
    SYNTHETIC_AUDIO_COUNT: int = 8
    SYNTHETIC_AUDIO_LENGTH: int = 2 ** 17

    # Canonical toy acceptance workload
    TOY_IMAGE_COUNT: int = 16
    TOY_IMAGE_SIZE: int = 32
    TOY_AUDIO_COUNT: int = 4
    TOY_AUDIO_LENGTH: int = 2 ** 15
    TOY_STAGES: int = 3
    TOY_BLOCKS: int = 2
    TOY_STEPS: int = 200
    TOY_SEED: int = 7
    TOY_BATCH_SIZE: int = 8
    TOY_LEARNING_RATE: float = 1e-3
    # Stage sweeps train every t to a plateau: longer budget, lr divided by 3 every 5 epochs
    TOY_SWEEP_EPOCHS: int = 20
    TOY_SWEEP_STEPS_PER_EPOCH: int = 100
    TOY_SWEEP_DECAY_EPOCHS: int = 5

    # Metric settings
    SSIM_WINDOW: int = 8
    SSIM_GAUSSIAN_SIGMA: float = 1.5
    SSIM_K1: float = 0.01
    SSIM_K2: float = 0.03
    MS_SSIM_LEVELS: int = 5
    MS_SSIM_WEIGHTS: Tuple[float, ...] = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)

    # Experiment settings
    SATURATION_GAIN_DB: float = 0.2
    INDEPENDENCE_TRIALS: int = 20
    EVAL_SAMPLES: int = 16


# Global config instance
config = AppConfig()
