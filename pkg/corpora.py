"""
Training corpora: deterministic synthetic images and audio for desk-scale
runs, plus loaders for directories of real images and 16-bit WAV clips.
"""
import logging
import os
from typing import List, Tuple

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from carrier import AudioStream, load_pcm
from config import config

IMAGE_EXTENSIONS = ('.png', '.jpg', '.jpeg', '.bmp', '.tif', '.tiff')

ImageCorpus = List[np.ndarray]
AudioCorpus = List[AudioStream]


def _gradient(rng: np.random.Generator, size: int) -> np.ndarray:
    rows, cols = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    image = np.empty((3, size, size))
    for c in range(3):
        angle = rng.uniform(0, 2 * np.pi)
        ramp = np.cos(angle) * rows + np.sin(angle) * cols
        ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-12)
        low, high = np.sort(rng.uniform(0, 1, size=2))
        image[c] = low + (high - low) * ramp
    return image


def _checkerboard(rng: np.random.Generator, size: int) -> np.ndarray:
    period = int(rng.integers(2, max(3, size // 4) + 1))
    rows, cols = np.mgrid[0:size, 0:size]
    pattern = ((rows // period + cols // period) % 2).astype(np.float64)
    first, second = rng.uniform(0, 1, size=(2, 3))
    return first[:, None, None] * (1 - pattern) + second[:, None, None] * pattern


def _filtered_noise(rng: np.random.Generator, size: int) -> np.ndarray:
    sigma = rng.uniform(1.0, max(1.5, size / 8))
    image = np.empty((3, size, size))
    for c in range(3):
        smooth = gaussian_filter(rng.normal(size=(size, size)), sigma=sigma, mode='wrap')
        image[c] = (smooth - smooth.min()) / max(np.ptp(smooth), 1e-12)
    return image


def _disc(rng: np.random.Generator, size: int) -> np.ndarray:
    rows, cols = np.mgrid[0:size, 0:size]
    centre = rng.uniform(0.25 * size, 0.75 * size, size=2)
    radius = rng.uniform(0.15 * size, 0.4 * size)
    inside = ((rows - centre[0]) ** 2 + (cols - centre[1]) ** 2 <= radius ** 2).astype(np.float64)
    background, foreground = rng.uniform(0, 1, size=(2, 3))
    return background[:, None, None] * (1 - inside) + foreground[:, None, None] * inside


_IMAGE_GENERATORS = (_gradient, _checkerboard, _filtered_noise, _disc)


def synthetic_images(count: int = config.SYNTHETIC_IMAGE_COUNT,
                     size: int = config.SYNTHETIC_IMAGE_SIZE, seed: int = 0) -> ImageCorpus:
    """Gradients, checkerboards, filtered noise and discs, cycling in that order.

    Returns:
        List of 3 x size x size float32 arrays in [0, 1].
    """
    rng = np.random.default_rng(seed)
    images = []
    for i in range(count):
        image = _IMAGE_GENERATORS[i % len(_IMAGE_GENERATORS)](rng, size)
        images.append(np.clip(image, 0.0, 1.0).astype(np.float32))
    return images


def synthetic_audio(count: int = config.SYNTHETIC_AUDIO_COUNT,
                    length: int = config.SYNTHETIC_AUDIO_LENGTH,
                    sample_rate: int = config.DEFAULT_SAMPLE_RATE, seed: int = 0) -> AudioCorpus:
    """Tone mixtures plus noise, peak-normalized to 0.5."""
    rng = np.random.default_rng(seed)
    t = np.arange(length) / sample_rate
    clips = []
    for _ in range(count):
        tones = int(rng.integers(2, 6))
        signal = np.zeros(length)
        for _ in range(tones):
            frequency = rng.uniform(80.0, 0.4 * sample_rate)
            signal += rng.uniform(0.1, 0.4) * np.sin(2 * np.pi * frequency * t + rng.uniform(0, 2 * np.pi))
        signal += 0.05 * rng.normal(0, 1, length)
        signal = 0.5 * signal / np.max(np.abs(signal))
        clips.append(AudioStream(samples=signal.astype(np.float32), sample_rate=sample_rate))
    return clips


def toy_fixture(seed: int = config.TOY_SEED) -> Tuple[ImageCorpus, AudioCorpus]:
    """The canonical acceptance workload: 16 images 32x32 and 4 clips of 2^15 samples."""
    images = synthetic_images(config.TOY_IMAGE_COUNT, config.TOY_IMAGE_SIZE, seed)
    audio = synthetic_audio(config.TOY_AUDIO_COUNT, config.TOY_AUDIO_LENGTH, seed=seed)
    return images, audio


def load_image_dir(path: str, min_size: int) -> ImageCorpus:
    """Load every RGB image in a directory, skipping images smaller than min_size.

    Raises:
        FileNotFoundError: If the directory does not exist.
        ValueError: If no usable image remains.
    """
    if not os.path.isdir(path):
        raise FileNotFoundError(f"Image directory not found: {path}")

    images = []
    for name in sorted(os.listdir(path)):
        if not name.lower().endswith(IMAGE_EXTENSIONS):
            continue
        file_path = os.path.join(path, name)
        try:
            with Image.open(file_path) as img:
                array = np.asarray(img.convert('RGB'), dtype=np.float32) / 255.0
        except Exception as e:
            logging.warning(f"Skipping unreadable image {file_path}: {e}")
            continue
        if min(array.shape[:2]) < min_size:
            logging.warning(f"Skipping {file_path}: {array.shape[0]}x{array.shape[1]} "
                            f"smaller than patch {min_size}")
            continue
        images.append(array.transpose(2, 0, 1).copy())

    if not images:
        raise ValueError(f"No usable images (>= {min_size}px) in {path}")
    logging.info(f"Loaded {len(images)} images from {path}")
    return images


def load_audio_dir(path: str, min_length: int) -> AudioCorpus:
    """Load every 16-bit WAV clip in a directory, skipping clips shorter than min_length.

    Raises:
        FileNotFoundError: If the directory does not exist.
        ValueError: If no usable clip remains.
    """
    if not os.path.isdir(path):
        raise FileNotFoundError(f"Audio directory not found: {path}")

    clips = []
    for name in sorted(os.listdir(path)):
        if not name.lower().endswith('.wav'):
            continue
        file_path = os.path.join(path, name)
        try:
            stream = load_pcm(file_path)
        except ValueError as e:
            logging.warning(f"Skipping {file_path}: {e}")
            continue
        if stream.length < min_length:
            logging.warning(f"Skipping {file_path}: {stream.length} samples < {min_length} required")
            continue
        clips.append(stream)

    if not clips:
        raise ValueError(f"No usable WAV clips (>= {min_length} samples) in {path}")
    logging.info(f"Loaded {len(clips)} audio clips from {path}")
    return clips
