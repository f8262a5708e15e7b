"""Shear and temporal-crop augmentations producing two views per clip."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class AugmentationConfig:
    shear_amplitude: float = 0.5
    crop_pad_ratio: float = 1 / 6
    output_length: int = 64

    def __post_init__(self):
        if self.shear_amplitude < 0 or self.crop_pad_ratio < 0:
            raise ValueError("shear_amplitude and crop_pad_ratio must be non-negative")
        if self.output_length < 1:
            raise ValueError("output_length must be positive")

    def pad_frames(self, num_frames: int) -> int:
        return int(np.floor(num_frames * self.crop_pad_ratio))

    def check(self, num_frames: int) -> None:
        limit = num_frames + 2 * self.pad_frames(num_frames)
        if self.output_length > limit:
            raise ValueError(
                f"window of {self.output_length} frames impossible for T={num_frames} "
                f"(padded length {limit})"
            )


def shear_matrix(amplitude: float, rng: np.random.Generator) -> np.ndarray:
    """``I + S`` with off-diagonal ``S`` drawn from ``U(-amplitude, amplitude)``."""
    s = rng.uniform(-amplitude, amplitude, size=(3, 3))
    np.fill_diagonal(s, 0.0)
    return np.eye(3) + s


def shear(seq: np.ndarray, rng: np.random.Generator, amplitude: float = 0.5) -> np.ndarray:
    """Multiply every joint coordinate column of a ``C x T x V`` clip by one 3x3 matrix."""
    if seq.shape[0] != 3:
        raise ValueError(f"shear needs C = 3 coordinate channels, got {seq.shape[0]}")
    a = shear_matrix(amplitude, rng)
    out = np.tensordot(a, seq, axes=([1], [0]))
    return out.astype(seq.dtype, copy=False)


def reflect_pad(seq: np.ndarray, pad: int) -> np.ndarray:
    """Mirror-pad along the frame axis, repeating the edge frames' neighbours."""
    if pad == 0:
        return seq
    t = seq.shape[1]
    # np.pad "reflect" cannot exceed T - 1 frames; fall back to symmetric tiling
    mode = "reflect" if pad < t else "symmetric"
    if mode == "symmetric" and pad > t:
        idx = np.arange(-pad, t + pad)
        period = 2 * t
        idx = np.mod(idx, period)
        idx = np.where(idx >= t, period - 1 - idx, idx)
        return seq[:, idx]
    return np.pad(seq, [(0, 0), (pad, pad), (0, 0)], mode=mode)


def temporal_crop(
    seq: np.ndarray,
    rng: np.random.Generator,
    pad_ratio: float = 1 / 6,
    output_length: int = 64,
    return_offset: bool = False,
):
    t = seq.shape[1]
    pad = int(np.floor(t * pad_ratio))
    padded = reflect_pad(seq, pad)
    span = padded.shape[1] - output_length
    if span < 0:
        raise ValueError(f"window of {output_length} frames impossible for padded length {padded.shape[1]}")
    start = int(rng.integers(0, span + 1))
    out = padded[:, start:start + output_length]
    return (out, start) if return_offset else out


def augment(seq: np.ndarray, rng: np.random.Generator, config: AugmentationConfig) -> np.ndarray:
    config.check(seq.shape[1])
    x = shear(seq, rng, config.shear_amplitude)
    return temporal_crop(x, rng, config.crop_pad_ratio, config.output_length)


def augment_pair(seq: np.ndarray, rng: np.random.Generator, config: AugmentationConfig):
    return augment(seq, rng, config), augment(seq, rng, config)


def augment_batch_pair(batch: np.ndarray, rng: np.random.Generator, config: AugmentationConfig):
    """Two views of each clip in a ``(B, C, T, V)`` batch, drawn sample by sample."""
    first, second = [], []
    for seq in batch:
        a, b = augment_pair(seq, rng, config)
        first.append(a)
        second.append(b)
    return np.stack(first), np.stack(second)
