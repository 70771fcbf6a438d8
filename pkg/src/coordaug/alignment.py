"""Object-region masks and the masked DDIM edit loop.

At every reverse step the environment region (mask 0) of the edited latent is
overwritten with the stored inversion latent of the same step, so only the
object region (mask 1) is free to follow the new prompt.
"""
from __future__ import annotations

import math

import numpy as np

from . import ddim
from .errors import BackendError, DegenerateMaskError, ValidationError


def bbox_to_latent_mask(bbox, image_size, latent_size) -> np.ndarray:
    """Latent-resolution mask of the cells whose pixel footprint meets the bbox.

    ``image_size`` and ``latent_size`` are ``(height, width)``. Both image
    dimensions must be the same integer multiple ``f`` of the latent ones; cell
    ``(r, c)`` covers pixels ``[r*f, (r+1)*f) x [c*f, (c+1)*f)`` and is set when
    that square overlaps the box with positive area.
    """
    H, W = (int(v) for v in image_size)
    h, w = (int(v) for v in latent_size)
    if h <= 0 or w <= 0 or H % h or W % w or H // h != W // w:
        raise ValidationError(
            f"latent size {(h, w)} is not an integer downscale of image size {(H, W)}"
        )
    f = H // h
    x, y, bw, bh = (float(v) for v in bbox)
    if bw <= 0 or bh <= 0 or x < 0 or y < 0 or x + bw > W or y + bh > H:
        raise ValidationError(f"bbox {bbox} empty or outside image {W}x{H}")

    c0, c1 = int(math.floor(x / f)), int(math.ceil((x + bw) / f))
    r0, r1 = int(math.floor(y / f)), int(math.ceil((y + bh) / f))
    mask = np.zeros((h, w), dtype=np.float64)
    mask[r0:r1, c0:c1] = 1.0
    if mask.all() or not mask.any():
        raise DegenerateMaskError(f"bbox {bbox} yields a degenerate {h}x{w} latent mask")
    return mask


def align_step(z_edit: np.ndarray, z_inv: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Keep ``z_edit`` inside the mask and ``z_inv`` outside it."""
    z_edit = np.asarray(z_edit)
    z_inv = np.asarray(z_inv)
    if z_edit.shape != z_inv.shape:
        raise ValidationError(f"latent shapes differ: {z_edit.shape} vs {z_inv.shape}")
    if np.shape(mask) != z_edit.shape[-2:]:
        raise ValidationError(
            f"mask shape {np.shape(mask)} does not match latent spatial shape {z_edit.shape[-2:]}"
        )
    # np.where rather than arithmetic blending so each cell is copied bit-for-bit
    return np.where(np.asarray(mask) != 0, z_edit, z_inv)


def edit_latent(
    z0: np.ndarray,
    prompt: str,
    mask: np.ndarray,
    denoiser,
    schedule: ddim.NoiseSchedule,
    w: float = 7.5,
    *,
    align: bool = True,
    convention: str = ddim.CONVENTION_CURRENT,
) -> np.ndarray:
    """Invert ``z0``, then denoise under ``prompt`` with per-step region alignment.

    Alignment runs after every reverse step including the last, so the
    environment region of the result equals ``z0`` there exactly.
    """
    mask = np.asarray(mask)
    if mask.all() or not mask.any():
        raise DegenerateMaskError("edit mask is all ones or all zeros")
    if mask.shape != np.shape(z0)[-2:]:
        raise ValidationError(f"mask shape {mask.shape} does not match latent {np.shape(z0)}")
    trajectory = ddim.invert(z0, denoiser, schedule, convention=convention)
    z = trajectory[-1]
    for t in range(schedule.steps, 0, -1):
        eps = ddim.guided_epsilon(z, schedule.model_timesteps[t], prompt, w, denoiser)
        z = ddim.sample_step(z, t, eps, schedule)
        if align:
            z = align_step(z, trajectory[t - 1], mask)
    return z


def encode_image(image: np.ndarray, codec) -> tuple[np.ndarray, int]:
    try:
        latent, factor = codec.encode(image)
    except BackendError:
        raise
    except Exception as exc:
        raise BackendError(f"codec encode failed: {exc}", backend="codec") from exc
    return np.asarray(latent, dtype=np.float64), int(factor)


def decode_latent(latent: np.ndarray, codec) -> np.ndarray:
    try:
        return np.asarray(codec.decode(latent), dtype=np.uint8)
    except BackendError:
        raise
    except Exception as exc:
        raise BackendError(f"codec decode failed: {exc}", backend="codec") from exc


def cover_region(bbox, image_size, factor: int) -> np.ndarray:
    """Pixel-resolution boolean mask of the latent cells a bbox touches."""
    H, W = image_size
    cells = bbox_to_latent_mask(bbox, (H, W), (H // factor, W // factor))
    return np.kron(cells, np.ones((factor, factor))).astype(bool)
