"""Relevance masks from differential noise predictions, and masked latent blending.

A denoiser is any callable ``denoiser(z_t, t, image_cond, text_cond) -> eps``
returning an array shaped like ``z_t``; ``text_cond=None`` is the null
instruction. Real diffusion backends run outside this package and exchange
latents through LTNT files::

    b"LTNT", u32 LE channels, u32 LE height, u32 LE width,
    channels * height * width float32 LE values, channel-major.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy.ndimage import convolve

from .errors import DataFormatError, InvalidInputError

Denoiser = Callable[[np.ndarray, int, object, Optional[object]], np.ndarray]

RELEVANCE_THRESHOLD = 0.35
TEXT_GUIDANCE = 7.5
IMAGE_GUIDANCE = 1.5


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal fractions ``alpha_bar[t]`` for ``t = 1..T`` (stored 0-based)."""

    alpha_bar: np.ndarray

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64).ravel()
        if ab.size == 0 or np.any(ab <= 0) or np.any(ab > 1) or np.any(np.diff(ab) >= 0):
            raise InvalidInputError("alpha_bar must be strictly decreasing in (0, 1]")
        object.__setattr__(self, "alpha_bar", ab)

    @classmethod
    def linear(cls, steps: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> "NoiseSchedule":
        """DDPM linear beta schedule."""
        betas = np.linspace(beta_start, beta_end, steps)
        return cls(np.cumprod(1.0 - betas))

    @property
    def steps(self) -> int:
        return len(self.alpha_bar)

    def __getitem__(self, t: int) -> float:
        if not 1 <= t <= self.steps:
            raise InvalidInputError(f"timestep {t} outside 1..{self.steps}")
        return float(self.alpha_bar[t - 1])

    def default_timestep(self) -> int:
        return max(1, round(0.6 * self.steps))


def forward_noise(z0, t_r: int, eps, schedule: NoiseSchedule) -> np.ndarray:
    """Noisy latent ``sqrt(ab) z0 + sqrt(1 - ab) eps`` at timestep ``t_r``."""
    z0 = np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if z0.shape != eps.shape:
        raise InvalidInputError(f"latent {z0.shape} and noise {eps.shape} differ in shape")
    ab = schedule[t_r]
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


def normalize(x) -> np.ndarray:
    """Min-max scale to [0, 1]; constant input maps to zeros."""
    x = np.asarray(x, dtype=np.float64)
    lo, hi = x.min(), x.max()
    if hi - lo <= 0:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def noise_difference(eps_text, eps_null) -> np.ndarray:
    """Channel-mean absolute difference of two ``(C, H, W)`` noise predictions."""
    eps_text = np.asarray(eps_text, dtype=np.float64)
    eps_null = np.asarray(eps_null, dtype=np.float64)
    if eps_text.shape != eps_null.shape:
        raise InvalidInputError(f"noise predictions differ in shape: {eps_text.shape} vs {eps_null.shape}")
    diff = np.abs(eps_text - eps_null)
    return diff.mean(0) if diff.ndim == 3 else diff


def relevance_map(denoiser: Denoiser, z_t, t_r: int, image_cond, text_cond) -> np.ndarray:
    """Normalised ``(H, W)`` map of where the instruction changes the predicted noise."""
    z_t = np.asarray(z_t, dtype=np.float64)
    eps_text = np.asarray(denoiser(z_t, t_r, image_cond, text_cond))
    eps_null = np.asarray(denoiser(z_t, t_r, image_cond, None))
    return normalize(noise_difference(eps_text, eps_null))


def threshold_mask(relevance, tau: float = RELEVANCE_THRESHOLD, blur: bool = False) -> np.ndarray:
    """Boolean mask ``relevance > tau``; optionally smooth with a 3x3 Gaussian first."""
    r = np.asarray(relevance, dtype=np.float64)
    if blur:
        k = np.outer([1.0, 2.0, 1.0], [1.0, 2.0, 1.0]) / 16.0
        r = convolve(r, k, mode="nearest")
    return r > tau


def upsample_mask(mask, height: int, width: int) -> np.ndarray:
    """Nearest-neighbour resize of a 2D mask to ``(height, width)``."""
    mask = np.asarray(mask)
    h, w = mask.shape
    rows = np.minimum((np.arange(height) * h) // height, h - 1)
    cols = np.minimum((np.arange(width) * w) // width, w - 1)
    return mask[rows[:, None], cols[None, :]]


def blend_latents(z_edit, z_orig, mask) -> np.ndarray:
    """Take ``z_edit`` where ``mask`` is set and ``z_orig`` elsewhere (mask broadcast over channels)."""
    z_edit = np.asarray(z_edit, dtype=np.float64)
    z_orig = np.asarray(z_orig, dtype=np.float64)
    if z_edit.shape != z_orig.shape:
        raise InvalidInputError(f"latents differ in shape: {z_edit.shape} vs {z_orig.shape}")
    m = np.asarray(mask, dtype=bool)
    if m.shape != z_orig.shape[-2:]:
        raise InvalidInputError(f"mask {m.shape} does not match latent grid {z_orig.shape[-2:]}")
    return np.where(m, z_edit, z_orig)


def relevance_mask(denoiser: Denoiser, z0, t_r: int, eps, schedule: NoiseSchedule, image_cond,
                   text_cond, tau: float = RELEVANCE_THRESHOLD) -> np.ndarray:
    """Noise ``z0`` to ``t_r``, compare conditioned and null predictions, threshold."""
    z_t = forward_noise(z0, t_r, eps, schedule)
    return threshold_mask(relevance_map(denoiser, z_t, t_r, image_cond, text_cond), tau)


@dataclass
class ToyDenoiser:
    """Deterministic stand-in for a conditional U-Net.

    Predicts ``baseline`` everywhere, plus ``amplitude`` inside ``region``
    (``(row0, row1, col0, col1)``, half-open) when a text condition is given.
    """

    region: tuple[int, int, int, int]
    amplitude: float = 1.0
    baseline: float = 0.0

    def __call__(self, z_t, t, image_cond, text_cond):
        z_t = np.asarray(z_t, dtype=np.float64)
        out = z_t * 0.0 + self.baseline
        if text_cond is not None:
            r0, r1, c0, c1 = self.region
            out[..., r0:r1, c0:c1] += self.amplitude
        return out


def toy_denoiser(region, amplitude: float = 1.0, baseline: float = 0.0) -> ToyDenoiser:
    return ToyDenoiser(tuple(region), amplitude, baseline)


def write_latent(path, latent) -> None:
    latent = np.asarray(latent, dtype="<f4")
    if latent.ndim == 2:
        latent = latent[None]
    if latent.ndim != 3:
        raise InvalidInputError("latents must be (C, H, W)")
    with open(path, "wb") as fh:
        fh.write(b"LTNT" + struct.pack("<III", *latent.shape))
        fh.write(np.ascontiguousarray(latent).tobytes())


def read_latent(path) -> np.ndarray:
    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError:
        raise DataFormatError(f"missing latent file: {path}") from None
    if len(raw) < 16 or raw[:4] != b"LTNT":
        raise DataFormatError(f"{path} is not an LTNT file")
    c, h, w = struct.unpack("<III", raw[4:16])
    if len(raw) != 16 + 4 * c * h * w:
        raise DataFormatError(f"{path}: expected {c}x{h}x{w} floats")
    return np.frombuffer(raw, dtype="<f4", offset=16).reshape(c, h, w).astype(np.float64)
