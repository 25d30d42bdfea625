"""Frozen invertible latent codec.

Pixels map to latents by a space-to-depth rearrangement (factor 2)
followed by a fixed orthogonal mix of the 12 resulting channels, so
encode/decode are exact inverses and preserve the squared norm.  The
codec has no trainable parameters; its mixing matrix is derived from a
seed that travels with checkpoints.
"""

from __future__ import annotations

import numpy as np

SPATIAL_FACTOR = 2
LATENT_CHANNELS = 3 * SPATIAL_FACTOR * SPATIAL_FACTOR
DEFAULT_CODEC_SEED = 714

def mixing_matrix(seed: int) -> np.ndarray:
    """Seeded random orthogonal 12x12 matrix (QR with a fixed sign convention)."""
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((LATENT_CHANNELS, LATENT_CHANNELS))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    return q


class LatentCodec:
    """Pixel (H, W, 3) in [0, 1]  <->  latent (12, H/2, W/2)."""

    def __init__(self, seed: int = DEFAULT_CODEC_SEED):
        self.seed = int(seed)
        self._mix = mixing_matrix(self.seed)

    def encode(self, img: np.ndarray) -> np.ndarray:
        img = np.asarray(img)
        if img.ndim != 3 or img.shape[2] != 3:
            raise ValueError(f"encode: expected (H, W, 3) image, got {img.shape}")
        h, w, _ = img.shape
        f = SPATIAL_FACTOR
        if h % f or w % f:
            raise ValueError(f"encode: image dims ({h}, {w}) not divisible by {f}")
        # cell vector layout: channel-major over the f x f block
        x = img.astype(np.float64).transpose(2, 0, 1)
        x = x.reshape(3, h // f, f, w // f, f).transpose(1, 3, 0, 2, 4).reshape(h // f, w // f, LATENT_CHANNELS)
        lat = x @ self._mix.T
        return lat.transpose(2, 0, 1).astype(np.float32)

    def decode(self, lat: np.ndarray) -> np.ndarray:
        lat = np.asarray(lat)
        if lat.ndim != 3 or lat.shape[0] != LATENT_CHANNELS:
            raise ValueError(f"decode: expected ({LATENT_CHANNELS}, h, w) latent, got {lat.shape}")
        _, hh, ww = lat.shape
        f = SPATIAL_FACTOR
        x = lat.astype(np.float64).transpose(1, 2, 0) @ self._mix
        img = x.reshape(hh, ww, 3, f, f).transpose(2, 0, 3, 1, 4).reshape(3, hh * f, ww * f)
        return img.transpose(1, 2, 0).astype(np.float32)

    def decode_clamped(self, lat: np.ndarray) -> np.ndarray:
        """Decode and clamp to [0, 1] for display."""
        return np.clip(self.decode(lat), 0.0, 1.0)


def nearest_resize(img: np.ndarray, new_h: int, new_w: int) -> np.ndarray:
    """Nearest-neighbor resize of an (H, W, 3) image."""
    h, w = img.shape[:2]
    rows = (np.arange(new_h) * h // new_h).clip(0, h - 1)
    cols = (np.arange(new_w) * w // new_w).clip(0, w - 1)
    return img[rows][:, cols]
