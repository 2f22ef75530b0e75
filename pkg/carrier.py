"""
Carrier audio handling: PCM file I/O, frame selection, 1-D/2-D reshaping and
splicing containers back into the cover stream.

All math runs on float32 samples in [-1, 1]; quantization happens only at
file boundaries.
"""
import os
import wave
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from scipy.io import wavfile

from config import config


class CarrierFormatError(ValueError):
    """Raised when an audio file header is malformed or unsupported."""


class EmptyInputError(ValueError):
    """Raised when an audio payload holds no samples."""


class CapacityError(ValueError):
    """Raised when a stream is too short for the requested frames."""

    def __init__(self, required: int, available: int):
        self.required = required
        self.available = available
        super().__init__(f"Cover audio too short: {required} samples required, "
                         f"{available} available")


@dataclass(frozen=True)
class AudioStream:
    """A mono audio stream with float samples in [-1, 1]."""
    samples: np.ndarray
    sample_rate: int = config.DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float32).reshape(-1)
        samples.setflags(write=False)
        object.__setattr__(self, 'samples', samples)

    @property
    def length(self) -> int:
        """Sample count."""
        return int(self.samples.shape[0])

    def __len__(self) -> int:
        return self.length


@dataclass(frozen=True)
class CarrierFrame:
    """One audio subsequence of w*h samples and its offset in the parent stream."""
    offset: int
    flat: np.ndarray
    w: int
    h: int

    def __post_init__(self):
        flat = np.asarray(self.flat, dtype=np.float32).reshape(-1)
        if flat.shape[0] != self.w * self.h:
            raise ValueError(f"Frame holds {flat.shape[0]} samples, expected {self.w}x{self.h}")
        flat.setflags(write=False)
        object.__setattr__(self, 'flat', flat)

    @property
    def size(self) -> int:
        return self.w * self.h

    @property
    def end(self) -> int:
        return self.offset + self.size

    @property
    def grid(self) -> np.ndarray:
        """Row-major w x h view of the frame."""
        return frame_to_grid(self)


@dataclass
class Manifest:
    """Protocol parameters the receiving side needs for extraction."""
    w: int
    h: int
    t: int
    offsets: List[int] = field(default_factory=list)
    variant: str = "M"
    checkpoint_id: str = ""
    pcm_bits: str = "16"

    KEYS = ('w', 'h', 't', 'offsets', 'variant', 'checkpoint_id', 'pcm_bits')

    @property
    def frame_size(self) -> int:
        return self.w * self.h

    def validate(self) -> None:
        """Check the manifest invariants.

        Raises:
            ValueError: If any invariant is violated.
        """
        if self.t < 1:
            raise ValueError(f"Stage count must be >= 1, got {self.t}")
        if self.w < config.MIN_GRID_SIDE or self.h < config.MIN_GRID_SIDE:
            raise ValueError(f"Grid must be at least {config.MIN_GRID_SIDE}x{config.MIN_GRID_SIDE}, "
                             f"got {self.w}x{self.h}")
        if len(self.offsets) != self.t:
            raise ValueError(f"Manifest lists {len(self.offsets)} offsets for t={self.t}")
        if self.pcm_bits not in config.PCM_BITS_CHOICES:
            raise ValueError(f"pcm_bits must be one of {config.PCM_BITS_CHOICES}, got {self.pcm_bits!r}")
        variants = config.VARIANTS + (config.SINGLE_SHOT_VARIANT,)
        if self.variant not in variants:
            raise ValueError(f"variant must be one of {variants}, got {self.variant!r}")
        _check_offsets(self.offsets, self.frame_size)

    def to_text(self) -> str:
        """Serialize to `key=value` lines."""
        values = {
            'w': str(self.w),
            'h': str(self.h),
            't': str(self.t),
            'offsets': ",".join(str(o) for o in self.offsets),
            'variant': self.variant,
            'checkpoint_id': self.checkpoint_id,
            'pcm_bits': self.pcm_bits,
        }
        return "".join(f"{key}={values[key]}\n" for key in self.KEYS)

    @classmethod
    def from_text(cls, text: str) -> 'Manifest':
        """Parse `key=value` lines.

        Raises:
            ValueError: If a required key is missing or a value does not parse.
        """
        values = {}
        for raw_line in text.splitlines():
            line = raw_line.strip()
            if not line or line.startswith('#'):
                continue
            if '=' not in line:
                raise ValueError(f"Malformed manifest line: {raw_line!r}")
            key, value = line.split('=', 1)
            values[key.strip()] = value.strip()

        missing = [key for key in cls.KEYS if key not in values]
        if missing:
            raise ValueError(f"Manifest is missing keys: {missing}")

        offsets = [int(o) for o in values['offsets'].split(',') if o.strip()]
        manifest = cls(
            w=int(values['w']),
            h=int(values['h']),
            t=int(values['t']),
            offsets=offsets,
            variant=values['variant'],
            checkpoint_id=values['checkpoint_id'],
            pcm_bits=values['pcm_bits'],
        )
        manifest.validate()
        return manifest

    def save(self, path: str) -> None:
        with open(path, 'w', encoding='utf-8') as f:
            f.write(self.to_text())
        logging.info(f"Manifest written: {path}")

    @classmethod
    def load(cls, path: str) -> 'Manifest':
        if not os.path.exists(path):
            raise FileNotFoundError(f"Manifest not found: {path}")
        with open(path, 'r', encoding='utf-8') as f:
            return cls.from_text(f.read())


@dataclass(frozen=True)
class StegoBundle:
    """Container audio stream plus the manifest needed to extract from it."""
    stream: AudioStream
    manifest: Manifest

    @staticmethod
    def manifest_path(wav_path: str) -> str:
        return wav_path + config.MANIFEST_SUFFIX

    def save(self, wav_path: str) -> None:
        """Write the container WAV and its manifest next to it."""
        save_audio(self.stream, wav_path, self.manifest.pcm_bits)
        self.manifest.save(self.manifest_path(wav_path))

    @classmethod
    def load(cls, wav_path: str) -> 'StegoBundle':
        manifest = Manifest.load(cls.manifest_path(wav_path))
        stream = load_audio(wav_path, manifest.pcm_bits)
        return cls(stream=stream, manifest=manifest)


def _check_offsets(offsets: Sequence[int], frame_size: int) -> None:
    previous_end = None
    for offset in offsets:
        if offset < 0:
            raise ValueError(f"Negative frame offset: {offset}")
        if previous_end is not None and offset < previous_end:
            raise ValueError(f"Frame offsets overlap or are not increasing: {list(offsets)}")
        previous_end = offset + frame_size


def load_pcm(path: str) -> AudioStream:
    """Load a 16-bit signed PCM WAV file.

    Sample v maps to v/32768. Multichannel files keep channel 0.

    Args:
        path: Path to the WAV file.

    Returns:
        AudioStream with float samples in [-1, 1).

    Raises:
        FileNotFoundError: If the file does not exist.
        CarrierFormatError: If the header is malformed or not 16-bit PCM.
        EmptyInputError: If the file holds no samples.
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"Audio file not found: {path}")

    try:
        with wave.open(path, 'rb') as wav_file:
            frames = wav_file.getnframes()
            sample_rate = wav_file.getframerate()
            channels = wav_file.getnchannels()
            sample_width = wav_file.getsampwidth()
            raw_data = wav_file.readframes(frames)
    except (wave.Error, EOFError) as e:
        raise CarrierFormatError(f"Malformed WAV header in {path}: {e}")

    if sample_width != 2:
        raise CarrierFormatError(f"Unsupported sample width {sample_width * 8} bits in {path}; "
                                 f"16-bit PCM required")

    audio_data = np.frombuffer(raw_data, dtype='<i2')
    if channels > 1:
        logging.warning(f"{path} has {channels} channels; using channel 0")
        usable = (audio_data.shape[0] // channels) * channels
        audio_data = audio_data[:usable].reshape(-1, channels)[:, 0]

    if audio_data.shape[0] == 0:
        raise EmptyInputError(f"Audio file holds no samples: {path}")

    samples = audio_data.astype(np.float32) / np.float32(config.PCM_SCALE)
    return AudioStream(samples=samples, sample_rate=sample_rate)


def quantize_pcm(samples: np.ndarray) -> np.ndarray:
    """Map float samples to 16-bit integers: round(clamp(v)*32768) clamped to int16 range."""
    clipped = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    scaled = np.rint(clipped * config.PCM_SCALE)
    return np.clip(scaled, config.PCM_MIN, config.PCM_MAX).astype('<i2')


def save_pcm(stream: AudioStream, path: str) -> None:
    """Save a stream as mono 16-bit PCM WAV.

    Raises:
        OSError: If writing fails.
    """
    try:
        with wave.open(path, 'wb') as wav_file:
            wav_file.setnchannels(1)  # Mono
            wav_file.setsampwidth(2)  # 16-bit
            wav_file.setframerate(stream.sample_rate)
            wav_file.writeframes(quantize_pcm(stream.samples).tobytes())
    except Exception as e:
        logging.error(f"Failed to save PCM audio to {path}: {e}")
        raise


def load_float_wav(path: str) -> AudioStream:
    """Load an IEEE float32 WAV file without quantization."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"Audio file not found: {path}")
    try:
        sample_rate, data = wavfile.read(path)
    except ValueError as e:
        raise CarrierFormatError(f"Malformed WAV header in {path}: {e}")

    if data.dtype != np.float32:
        raise CarrierFormatError(f"{path} is {data.dtype}, expected float32 samples")
    if data.ndim > 1:
        logging.warning(f"{path} has {data.shape[1]} channels; using channel 0")
        data = data[:, 0]
    if data.shape[0] == 0:
        raise EmptyInputError(f"Audio file holds no samples: {path}")
    return AudioStream(samples=data, sample_rate=int(sample_rate))


def save_float_wav(stream: AudioStream, path: str) -> None:
    """Save a stream as IEEE float32 WAV (bit-exact float path)."""
    try:
        wavfile.write(path, stream.sample_rate, np.clip(stream.samples, -1.0, 1.0).astype(np.float32))
    except Exception as e:
        logging.error(f"Failed to save float audio to {path}: {e}")
        raise


def load_audio(path: str, pcm_bits: str = "16") -> AudioStream:
    """Load audio in the representation named by `pcm_bits` ("16" or "float")."""
    if str(pcm_bits) == "float":
        return load_float_wav(path)
    return load_pcm(path)


def save_audio(stream: AudioStream, path: str, pcm_bits: str = "16") -> None:
    """Save audio in the representation named by `pcm_bits` ("16" or "float")."""
    if str(pcm_bits) == "float":
        save_float_wav(stream, path)
    else:
        save_pcm(stream, path)


def frame_offsets(length: int, t: int, w: int, h: int, policy: str = "contiguous") -> List[int]:
    """Compute t non-overlapping frame offsets for a stream of `length` samples.

    Raises:
        CapacityError: If the stream cannot hold t frames.
        ValueError: On an unknown policy or bad geometry.
    """
    if t < 1 or w < 1 or h < 1:
        raise ValueError(f"Invalid framing geometry t={t}, w={w}, h={h}")
    frame_size = w * h
    required = t * frame_size
    if length < required:
        raise CapacityError(required, length)

    if policy == "contiguous":
        return [k * frame_size for k in range(t)]
    if policy == "strided":
        if t == 1:
            return [0]
        stride = (length - frame_size) // (t - 1)
        return [k * stride for k in range(t)]
    raise ValueError(f"Unknown framing policy {policy!r}; choose from {config.FRAMING_POLICIES}")


def frames_at(stream: AudioStream, offsets: Sequence[int], w: int, h: int) -> List[CarrierFrame]:
    """Read frames of w*h samples at explicit offsets.

    Raises:
        CapacityError: If a frame runs past the end of the stream.
        ValueError: If offsets overlap.
    """
    frame_size = w * h
    _check_offsets(offsets, frame_size)
    if offsets and offsets[-1] + frame_size > stream.length:
        raise CapacityError(offsets[-1] + frame_size, stream.length)
    return [CarrierFrame(offset=int(o), flat=stream.samples[o:o + frame_size], w=w, h=h)
            for o in offsets]


def select_frames(stream: AudioStream, t: int, w: int, h: int,
                  policy: str = "contiguous") -> List[CarrierFrame]:
    """Select t non-overlapping carrier frames of w*h samples.

    Args:
        stream: Cover audio.
        t: Number of frames (stages).
        w: Grid rows.
        h: Grid columns.
        policy: "contiguous" (offsets k*w*h) or "strided" (spread over the stream).

    Returns:
        List of t CarrierFrame in increasing offset order.

    Raises:
        CapacityError: If the stream is shorter than t*w*h.
    """
    offsets = frame_offsets(stream.length, t, w, h, policy)
    return frames_at(stream, offsets, w, h)


def frame_to_grid(frame: CarrierFrame) -> np.ndarray:
    """Row-major reshape of a frame into its w x h grid."""
    return frame.flat.reshape(frame.w, frame.h).copy()


def grid_to_frame(grid: np.ndarray, offset: int, w: Optional[int] = None,
                  h: Optional[int] = None) -> CarrierFrame:
    """Inverse of frame_to_grid.

    Raises:
        ValueError: If the grid is not w x h.
    """
    grid = np.asarray(grid, dtype=np.float32)
    if grid.ndim == 3 and grid.shape[0] == 1:
        grid = grid[0]
    if grid.ndim != 2:
        raise ValueError(f"Expected a 2-D grid, got shape {grid.shape}")
    w = grid.shape[0] if w is None else w
    h = grid.shape[1] if h is None else h
    if grid.shape != (w, h):
        raise ValueError(f"Grid shape {grid.shape} does not match {w}x{h}")
    return CarrierFrame(offset=offset, flat=grid.reshape(-1), w=w, h=h)


def splice(stream: AudioStream, containers: Sequence[CarrierFrame]) -> AudioStream:
    """Write container frames back into the stream at their offsets.

    Samples outside the frame spans are left bit-identical; container samples
    are clamped to [-1, 1].

    Raises:
        ValueError: If a container lies outside the stream or containers overlap.
    """
    ordered = sorted(containers, key=lambda frame: frame.offset)
    for frame in ordered:
        if frame.offset < 0 or frame.end > stream.length:
            raise ValueError(f"Container span [{frame.offset}, {frame.end}) outside stream "
                             f"of {stream.length} samples")
    for left, right in zip(ordered, ordered[1:]):
        if right.offset < left.end:
            raise ValueError(f"Containers overlap at offsets {left.offset} and {right.offset}")

    samples = stream.samples.copy()
    for frame in ordered:
        samples[frame.offset:frame.end] = np.clip(frame.flat, -1.0, 1.0)
    return AudioStream(samples=samples, sample_rate=stream.sample_rate)
