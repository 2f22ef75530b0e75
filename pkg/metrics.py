"""
Quality metrics: container audio distortion and revealed image fidelity.

Images are 3 x w x h (or w x h) arrays in [0, 1]; PSNR uses MAX = 1.
SSIM uses valid (unpadded) windows with stabilizers C1 = (0.01)^2 and
C2 = (0.03)^2; multi-channel SSIM is the channel mean.
"""
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import windows

from carrier import AudioStream
from config import config

ArrayLike = Union[np.ndarray, torch.Tensor, Sequence[float]]


def _as_array(value) -> np.ndarray:
    if isinstance(value, AudioStream):
        value = value.samples
    if hasattr(value, 'pixels'):
        value = value.pixels
    if isinstance(value, torch.Tensor):
        value = value.detach().cpu().numpy()
    return np.asarray(value, dtype=np.float64)


def audio_mse(cover, container) -> float:
    """Mean squared sample difference over the whole stream.

    Raises:
        ValueError: If the streams differ in length.
    """
    a = _as_array(cover).ravel()
    b = _as_array(container).ravel()
    if a.shape != b.shape:
        raise ValueError(f"Stream lengths differ: {a.shape[0]} vs {b.shape[0]}")
    if a.size == 0:
        return 0.0
    return float(np.mean((a - b) ** 2))


def mse(reference, test) -> float:
    """Mean squared error between two images of the same shape."""
    r = _as_array(reference)
    t = _as_array(test)
    if r.shape != t.shape:
        raise ValueError(f"Image shapes differ: {r.shape} vs {t.shape}")
    return float(np.mean((r - t) ** 2))


def psnr(reference, test) -> float:
    """Peak signal-to-noise ratio in dB with MAX = 1; identical images give inf."""
    error = mse(reference, test)
    if error == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / error)


def window_weights(window: int = config.SSIM_WINDOW, gaussian: bool = False,
                   sigma: float = config.SSIM_GAUSSIAN_SIGMA) -> np.ndarray:
    """Normalized 2-D SSIM window: uniform, or Gaussian with the given sigma."""
    if window < 1:
        raise ValueError(f"Window must be positive, got {window}")
    if gaussian:
        profile = windows.gaussian(window, std=sigma)
        weights = np.outer(profile, profile)
    else:
        weights = np.ones((window, window))
    return weights / weights.sum()


def _channels(image: np.ndarray) -> np.ndarray:
    if image.ndim == 2:
        return image[None]
    if image.ndim == 3:
        return image
    raise ValueError(f"Expected a w x h or c x w x h image, got shape {image.shape}")


def _ssim_terms(x: np.ndarray, y: np.ndarray, weights: np.ndarray) -> Tuple[float, float]:
    """Mean SSIM and mean contrast-structure term of one channel over valid windows."""
    wx = sliding_window_view(x, weights.shape)
    wy = sliding_window_view(y, weights.shape)
    mu_x = np.einsum('...ij,ij->...', wx, weights)
    mu_y = np.einsum('...ij,ij->...', wy, weights)
    e_xx = np.einsum('...ij,ij->...', wx * wx, weights)
    e_yy = np.einsum('...ij,ij->...', wy * wy, weights)
    e_xy = np.einsum('...ij,ij->...', wx * wy, weights)
    var_x = e_xx - mu_x * mu_x
    var_y = e_yy - mu_y * mu_y
    cov_xy = e_xy - mu_x * mu_y

    c1 = config.SSIM_K1 ** 2
    c2 = config.SSIM_K2 ** 2
    cs_map = (2.0 * cov_xy + c2) / (var_x + var_y + c2)
    luminance = (2.0 * mu_x * mu_y + c1) / (mu_x * mu_x + mu_y * mu_y + c1)
    return float(np.mean(luminance * cs_map)), float(np.mean(cs_map))


def _check_pair(reference, test, min_side: int) -> Tuple[np.ndarray, np.ndarray]:
    r = _channels(_as_array(reference))
    t = _channels(_as_array(test))
    if r.shape != t.shape:
        raise ValueError(f"Image shapes differ: {r.shape} vs {t.shape}")
    if min(r.shape[1:]) < min_side:
        raise ValueError(f"Image {r.shape[1]}x{r.shape[2]} too small: need at least {min_side} per side")
    return r, t


def ssim(reference, test, window: int = config.SSIM_WINDOW, gaussian: bool = False) -> float:
    """Structural similarity, averaged over valid windows and channels.

    Raises:
        ValueError: On shape mismatch or images smaller than the window.
    """
    r, t = _check_pair(reference, test, window)
    weights = window_weights(window, gaussian)
    return float(np.mean([_ssim_terms(rc, tc, weights)[0] for rc, tc in zip(r, t)]))


def _downsample(image: np.ndarray) -> np.ndarray:
    """2x2 average pooling, dropping an odd trailing row/column."""
    rows = image.shape[0] // 2 * 2
    cols = image.shape[1] // 2 * 2
    trimmed = image[:rows, :cols]
    return 0.25 * (trimmed[0::2, 0::2] + trimmed[1::2, 0::2] + trimmed[0::2, 1::2] + trimmed[1::2, 1::2])


def level_weights(levels: int) -> np.ndarray:
    """MS-SSIM level exponents, renormalized when fewer than five levels are used."""
    if not 1 <= levels <= len(config.MS_SSIM_WEIGHTS):
        raise ValueError(f"Levels must be in 1..{len(config.MS_SSIM_WEIGHTS)}, got {levels}")
    weights = np.asarray(config.MS_SSIM_WEIGHTS[:levels], dtype=np.float64)
    if levels == len(config.MS_SSIM_WEIGHTS):
        return weights
    return weights / weights.sum()


def max_ms_ssim_levels(shape: Sequence[int], window: int = config.SSIM_WINDOW) -> int:
    """Largest level count (<= 5) the image size allows; 0 if none."""
    side = min(shape[-2:])
    levels = 0
    while levels < config.MS_SSIM_LEVELS and side >= (2 ** levels) * window:
        levels += 1
    return levels


def ms_ssim(reference, test, levels: int = config.MS_SSIM_LEVELS,
            window: int = config.SSIM_WINDOW, gaussian: bool = False) -> float:
    """Multi-scale SSIM over dyadic 2x2-average downsampling.

    Contrast-structure terms of levels 1..L-1 and full SSIM at level L are
    combined as a weighted product; negative terms are clamped to 0.

    Raises:
        ValueError: If the image is smaller than 2^(levels-1) * window per side.
    """
    r, t = _check_pair(reference, test, (2 ** (levels - 1)) * window)
    weights = window_weights(window, gaussian)
    exponents = level_weights(levels)

    scores = []
    for rc, tc in zip(r, t):
        value = 1.0
        for level in range(levels):
            full, cs = _ssim_terms(rc, tc, weights)
            term = full if level == levels - 1 else cs
            value *= max(term, 0.0) ** exponents[level]
            rc, tc = _downsample(rc), _downsample(tc)
        scores.append(value)
    return float(np.mean(scores))


@dataclass
class QualityReport:
    """Container distortion and revealed-image fidelity for one evaluation."""
    audio_mse: float
    psnr: float
    ssim: float
    ms_ssim: float
    ms_ssim_levels: int = config.MS_SSIM_LEVELS
    per_stage_psnr: List[float] = field(default_factory=list)

    @staticmethod
    def tsv_header(stages: int = 0) -> str:
        columns = ['audio_mse', 'psnr', 'ssim', 'ms_ssim', 'ms_ssim_levels']
        columns += [f'psnr_stage{i}' for i in range(1, stages + 1)]
        return "\t".join(columns)

    def to_tsv(self) -> str:
        values = [f"{self.audio_mse:.10g}", f"{self.psnr:.6f}", f"{self.ssim:.6f}",
                  f"{self.ms_ssim:.6f}", str(self.ms_ssim_levels)]
        values += [f"{value:.6f}" for value in self.per_stage_psnr]
        return "\t".join(values)


def quality_report(cover, container, reference, revealed,
                   stage_images: Optional[Sequence] = None,
                   window: int = config.SSIM_WINDOW, gaussian: bool = False) -> QualityReport:
    """Assemble a QualityReport.

    Args:
        cover: Cover audio (stream or array).
        container: Container audio of the same length.
        reference: Original secret image.
        revealed: Revealed image clamp(C_t).
        stage_images: Optional clamp(C_i) images for i = 1..t.
        window: SSIM window size.
        gaussian: Use a Gaussian SSIM window.
    """
    levels = max_ms_ssim_levels(_as_array(reference).shape, window)
    ms_value = ms_ssim(reference, revealed, levels, window, gaussian) if levels else math.nan
    return QualityReport(
        audio_mse=audio_mse(cover, container),
        psnr=psnr(reference, revealed),
        ssim=ssim(reference, revealed, window, gaussian),
        ms_ssim=ms_value,
        ms_ssim_levels=levels,
        per_stage_psnr=[psnr(reference, image) for image in (stage_images or [])],
    )
