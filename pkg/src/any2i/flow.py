"""Rectified-flow objective, region-weighted editing loss, Euler sampler
and dual (text + image) classifier-free guidance.

Convention: t = 0 is pure noise, t = 1 is data; the interpolant is
x_t = t*x + (1-t)*eps and the regression target is the constant
velocity x - eps, integrated forward in t.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .sequence import TaskRecord, validate_record
from .tensor import Tensor

EDIT_EQUAL_TOL = 1e-6    # Eq-style per-cell equality tolerance
WEIGHT_MIN = 1e-2
WEIGHT_MAX = 1e4
NORM_FLOOR = 1e-8


@dataclass
class GuidanceConfig:
    text_scale: float = 2.5
    image_scale: float = 1.6
    steps: int = 50

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if not (np.isfinite(self.text_scale) and np.isfinite(self.image_scale)):
            raise ValueError("guidance scales must be finite")


EDIT_IMAGE_SCALE = 2.0   # image guidance used for editing-tagged records


@dataclass
class FlowSample:
    """One training instance of the flow objective."""

    x: np.ndarray                  # target latent
    x_prime: np.ndarray | None     # input latent for editing records
    eps: np.ndarray
    t: float
    x_t: np.ndarray
    v_star: np.ndarray
    w: np.ndarray
    drop_text: bool = False
    drop_images: bool = False


def interpolate(x: np.ndarray, eps: np.ndarray, t: float) -> np.ndarray:
    """Straight-line interpolant t*x + (1-t)*eps."""
    if x.shape != eps.shape:
        raise ValueError(f"interpolate: shape mismatch {x.shape} vs {eps.shape}")
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"interpolate: t must lie in [0, 1], got {t}")
    return (t * x.astype(np.float64) + (1.0 - t) * eps.astype(np.float64)).astype(x.dtype)


def edit_weights(x: np.ndarray, x_prime: np.ndarray, tol: float = EDIT_EQUAL_TOL,
                 w_min: float = WEIGHT_MIN, w_max: float = WEIGHT_MAX) -> np.ndarray:
    """Per-cell loss weights for editing: 1 where input and target agree,
    1 / ||x - x'||^2 elsewhere (global squared difference), clamped."""
    if x.shape != x_prime.shape:
        raise ValueError(f"edit_weights: shape mismatch {x.shape} vs {x_prime.shape}")
    diff = x.astype(np.float64) - x_prime.astype(np.float64)
    changed = np.abs(diff) > tol
    w = np.ones(x.shape, dtype=np.float32)
    if changed.any():
        norm_sq = float((diff * diff).sum())
        w_changed = 1.0 / max(norm_sq, NORM_FLOOR)
        w[changed] = np.clip(w_changed, w_min, w_max)
    return w


def training_loss(v_pred: Tensor, v_star: np.ndarray, w: np.ndarray) -> Tensor:
    """Mean over all cells of w * (v_star - v_pred)^2."""
    if v_pred.shape != v_star.shape or v_pred.shape != w.shape:
        raise ValueError(f"training_loss: shape mismatch {v_pred.shape}, {v_star.shape}, {w.shape}")
    dtype = v_pred.data.dtype
    diff = Tensor(v_star.astype(dtype)) - v_pred
    return (Tensor(w.astype(dtype)) * diff * diff).mean()


def sample_training_instance(record: TaskRecord, rng: np.random.Generator,
                             p_drop_text: float = 0.1, p_drop_images: float = 0.1) -> FlowSample:
    """Draw (eps, t), form the interpolant and target velocity, pick edit
    weights for edit-tagged records and condition-dropout flags."""
    validate_record(record)
    x = record.target
    eps = rng.standard_normal(x.shape).astype(np.float32)
    t = float(rng.uniform(0.0, 1.0))
    x_prime = None
    w = np.ones(x.shape, dtype=np.float32)
    if record.task_tag == "edit" and record.input_images:
        x_prime = record.input_images[0]
        w = edit_weights(x, x_prime)
    drop_text = bool(rng.uniform() < p_drop_text)
    drop_images = bool(rng.uniform() < p_drop_images) if record.input_images else False
    return FlowSample(
        x=x, x_prime=x_prime, eps=eps, t=t,
        x_t=interpolate(x, eps, t), v_star=x - eps, w=w,
        drop_text=drop_text, drop_images=drop_images,
    )


def guided_velocity(v_uncond: np.ndarray, v_image: np.ndarray | None,
                    v_full: np.ndarray, cfg: GuidanceConfig) -> np.ndarray:
    """Dual classifier-free guidance.

    With an image condition:
        v = v_uncond + s_I * (v_image - v_uncond) + s_T * (v_full - v_image)
    without one the image term collapses:
        v = v_uncond + s_T * (v_full - v_uncond)
    """
    if v_image is None:
        return v_uncond + cfg.text_scale * (v_full - v_uncond)
    if v_uncond.shape != v_image.shape or v_uncond.shape != v_full.shape:
        raise ValueError("guided_velocity: branch shapes differ")
    return (v_uncond
            + cfg.image_scale * (v_image - v_uncond)
            + cfg.text_scale * (v_full - v_image))


def euler_sample(model, record: TaskRecord, cfg: GuidanceConfig,
                 rng: np.random.Generator | None = None, *,
                 init_noise: np.ndarray | None = None, use_cache: bool = True,
                 trajectory: list | None = None) -> np.ndarray:
    """Integrate dx/dt = v from Gaussian noise at t=0 to the sample at t=1
    with uniform Euler steps; the guidance branches share one condition
    kv-cache each across all steps."""
    validate_record(record)
    if init_noise is not None:
        if init_noise.shape != record.target.shape:
            raise ValueError(f"init noise shape {init_noise.shape} != target shape {record.target.shape}")
        x = init_noise.astype(np.float64)
    else:
        if rng is None:
            raise ValueError("euler_sample needs an rng when init_noise is not given")
        x = rng.standard_normal(record.target.shape)
    session = model.begin_sampling(record, use_cache=use_cache)
    n = cfg.steps
    for k in range(n):
        t = k / n
        branches = session.branch_velocities(x.astype(np.float32), t)
        v = guided_velocity(branches["uncond"], branches.get("image"), branches["full"], cfg)
        x = x + v.astype(np.float64) / n
        if trajectory is not None:
            trajectory.append(x.copy())
    return x.astype(np.float32)
