"""Joint gradient-descent optimization of a voxel field and per-frame poses.

Each step draws a uniform minibatch of (frame, pixel, bit) observations from
the packed store, builds one ray per observation from that frame's current
pose, renders the batch, and backpropagates the mean squared error through
both the field parameters and the pose parameters (rays are differentiable
with respect to pose through the origin and the renormalized direction).
A Fourier lowpass penalty on the pose trajectory is added to the loss; its
gradient keeps the dense trajectory smooth while the photometric term pulls
individual poses toward the data.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.ndimage import gaussian_filter

from . import pose as pose_mod
from . import radiance_field as rf
from . import rng as _rng
from .errors import InputError, NumericalError
from .frame_store import BinaryFrameStore
from .photon_sim import (CameraIntrinsics, ConventionalConfig, SpcConfig,
                         invert_conventional_response, pixel_directions)
from .pose import LowpassSpec, PoseTrajectory, _decode_many, _decode_many_backward


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def _mse_with_grad(predicted, observed):
    p = np.asarray(predicted, dtype=np.float64)
    o = np.asarray(observed, dtype=np.float64)
    if p.shape != o.shape:
        raise InputError(f"prediction shape {p.shape} != observation shape {o.shape}")
    diff = p - o
    loss = float(np.mean(diff**2))
    grad = 2.0 * diff / diff.size
    return loss, grad


def quanta_loss(predicted, observed):
    """Mean squared error between predicted detection probabilities and bits.

    Because E[(p - B)^2] is minimized by p = E[B], fitting this loss drives
    the field toward the true per-ray detection probability.
    """
    return _mse_with_grad(predicted, observed)


def conventional_loss(predicted, observed):
    """Mean squared error against conventional intensity pixels."""
    return _mse_with_grad(predicted, observed)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


class Adam:
    """Adam with bias correction over a dict of named parameter arrays."""

    def __init__(self, shapes: dict, lr: float, beta1: float = 0.9,
                 beta2: float = 0.99, eps: float = 1e-15):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros(s) for k, s in shapes.items()}
        self.v = {k: np.zeros(s) for k, s in shapes.items()}

    def step(self, params: dict, grads: dict, lr_scale: float = 1.0) -> None:
        self.t += 1
        for key, g in grads.items():
            self.m[key] = self.beta1 * self.m[key] + (1 - self.beta1) * g
            self.v[key] = self.beta2 * self.v[key] + (1 - self.beta2) * g**2
            m_hat = self.m[key] / (1 - self.beta1**self.t)
            v_hat = self.v[key] / (1 - self.beta2**self.t)
            params[key] -= self.lr * lr_scale * m_hat / (np.sqrt(v_hat) + self.eps)


# ---------------------------------------------------------------------------
# Configuration and reporting
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 1024
    field_lr: float = 1e-2
    pose_lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-15
    smoothing_lambda: float = pose_mod.DEFAULT_LAMBDA
    lowpass: LowpassSpec = dc_field(default_factory=lambda: LowpassSpec(pose_mod.DEFAULT_CUTOFF_HZ))
    n_samples: int = 32
    seed: int = 0
    pose_opt_start_iteration: int | None = None  # default: 10% of iterations
    optimize_poses: bool = True
    field_resolution: tuple = (16, 16, 16)
    bounds: rf.Box = dc_field(default_factory=lambda: rf.Box(np.full(3, -1.0), np.full(3, 1.0)))
    t_near: float = 0.05
    t_far: float = 6.0
    jitter_samples: bool = True
    cosine_decay: bool = False
    density_raw_init: float = -2.0
    albedo_raw_init: float = 0.0
    log_every: int = 50
    checkpoint_dir: str | None = None
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.iterations < 1 or self.batch_size < 1 or self.n_samples < 2:
            raise InputError("iterations, batch_size and n_samples must be positive")
        if self.field_lr <= 0 or self.pose_lr < 0:
            raise InputError("learning rates must be positive (pose_lr may be 0)")
        if self.smoothing_lambda < 0:
            raise InputError("lambda must be non-negative")
        if self.t_near >= self.t_far or self.t_near < 0:
            raise InputError("require 0 <= t_near < t_far")
        if (self.pose_opt_start_iteration is not None
                and self.pose_opt_start_iteration > self.iterations):
            raise InputError("pose_opt_start_iteration cannot exceed iterations")

    @property
    def resolved_pose_opt_start(self) -> int:
        """Poses stay frozen for the first 10% of iterations unless overridden."""
        if self.pose_opt_start_iteration is None:
            return self.iterations // 10
        return self.pose_opt_start_iteration


@dataclass
class LossReport:
    iteration: int
    photometric: float
    regularizer: float
    total: float


@dataclass
class TrainResult:
    field: rf.VoxelField
    poses: PoseTrajectory
    history: list


# ---------------------------------------------------------------------------
# Observation adapters
# ---------------------------------------------------------------------------


class _StoreObservations:
    """Uniform sampling over a packed binary store."""

    def __init__(self, store: BinaryFrameStore):
        self.store = store
        self.frame_count = store.frame_count

    def sample(self, batch_size: int, seed: int):
        batch = self.store.sample_uniform(batch_size, seed)
        return batch.frames, batch.rows, batch.cols, batch.values.astype(np.float64)


class _ArrayObservations:
    """Uniform sampling over an in-memory (frames, h, w) intensity stack."""

    def __init__(self, stack: np.ndarray):
        stack = np.asarray(stack, dtype=np.float64)
        if stack.ndim != 3:
            raise InputError("conventional observations must be a (frames, h, w) stack")
        self.stack = stack
        self.frame_count = stack.shape[0]

    def sample(self, batch_size: int, seed: int):
        gen = _rng.philox(seed, "array-sample")
        f, h, w = self.stack.shape
        frames = gen.integers(0, f, batch_size)
        rows = gen.integers(0, h, batch_size)
        cols = gen.integers(0, w, batch_size)
        return frames, rows, cols, self.stack[frames, rows, cols]


def _as_observations(observations):
    if isinstance(observations, BinaryFrameStore):
        return _StoreObservations(observations)
    if isinstance(observations, np.ndarray):
        return _ArrayObservations(observations)
    if isinstance(observations, (list, tuple)):
        return _ArrayObservations(np.stack([getattr(o, "values", o) for o in observations]))
    raise InputError("observations must be a BinaryFrameStore or an intensity stack")


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def _lr_scale(step: int, total: int, cosine: bool) -> float:
    if not cosine:
        return 1.0
    return 0.5 * (1.0 + np.cos(np.pi * step / max(total - 1, 1)))


def _diagnostic_dump(field, poses, config) -> None:
    if config.checkpoint_dir is None:
        return
    field.save(f"{config.checkpoint_dir}/diagnostic_field.qrffld")
    pose_mod.save_trajectory_csv(poses, f"{config.checkpoint_dir}/diagnostic_poses.csv")


def train(observations, initial_poses: PoseTrajectory,
          intrinsics: CameraIntrinsics, config: TrainConfig,
          initial_field: rf.VoxelField | None = None) -> TrainResult:
    """Optimize a voxel field (and optionally the poses) against observations.

    ``observations`` is a BinaryFrameStore (quanta mode) or a stack of
    conventional intensity frames. The field starts near-empty per the
    config unless ``initial_field`` supplies a warm start. Deterministic
    given the config seed; all per-step work is a single-threaded vectorized
    reduction, so results do not depend on machine parallelism.
    """
    obs = _as_observations(observations)
    if obs.frame_count != len(initial_poses):
        raise InputError(
            f"{obs.frame_count} observation frames but {len(initial_poses)} poses")

    if initial_field is None:
        field = rf.VoxelField.initial(config.field_resolution, config.bounds,
                                      density_raw_init=config.density_raw_init,
                                      albedo_raw_init=config.albedo_raw_init)
    else:
        field = rf.VoxelField(initial_field.resolution, initial_field.bounds,
                              initial_field.density_raw.copy(),
                              initial_field.albedo_raw.copy())
    poses = initial_poses.copy()

    field_params = {"density": field.density_raw, "albedo": field.albedo_raw}
    field_opt = Adam({k: v.shape for k, v in field_params.items()},
                     config.field_lr, config.beta1, config.beta2, config.eps)
    pose_params = {"poses": poses.data}
    pose_opt = Adam({"poses": poses.data.shape},
                    config.pose_lr, config.beta1, config.beta2, config.eps)

    dirs_cam_grid = pixel_directions(intrinsics)
    history: list[LossReport] = []
    pose_opt_active = config.optimize_poses and config.pose_lr > 0

    for step in range(config.iterations):
        frames, rows, cols, values = obs.sample(
            config.batch_size, _rng.derive_seed(config.seed, "batch", step))

        rot6 = poses.data[frames, 3:]
        rotations = _decode_many(rot6)
        dirs_cam = dirs_cam_grid[rows, cols]
        raw_dirs = np.einsum("bij,bj->bi", rotations, dirs_cam)
        norms = np.linalg.norm(raw_dirs, axis=1)
        dirs = raw_dirs / norms[:, None]
        origins = poses.data[frames, :3]
        if not (np.isfinite(dirs).all() and np.isfinite(origins).all()):
            _diagnostic_dump(field, poses, config)
            raise NumericalError(f"non-finite camera geometry at iteration {step}")

        jitter = (_rng.philox(_rng.derive_seed(config.seed, "jitter", step))
                  if config.jitter_samples else None)
        batch = rf.render_rays(field, origins, dirs, config.t_near, config.t_far,
                               config.n_samples, clip_to_bounds=False,
                               jitter_rng=jitter, need_cache=True)
        photometric, up = quanta_loss(batch.values, values)

        if config.smoothing_lambda > 0:
            regularizer, reg_grad = pose_mod.smoothing_penalty(poses, config.lowpass, lam=1.0)
            penalty_grad = config.smoothing_lambda * reg_grad
        else:
            regularizer = 0.0
            penalty_grad = np.zeros_like(poses.data)
        total = photometric + config.smoothing_lambda * regularizer
        if not np.isfinite(total):
            _diagnostic_dump(field, poses, config)
            raise NumericalError(f"non-finite loss at iteration {step}")

        do_poses = pose_opt_active and step >= config.resolved_pose_opt_start
        out = rf.render_rays_backward(field, batch, up, need_ray_grads=do_poses)
        if do_poses:
            grads, d_origin, d_dir = out
        else:
            grads = out

        scale = _lr_scale(step, config.iterations, config.cosine_decay)
        field_opt.step(field_params,
                       {"density": grads.density_raw, "albedo": grads.albedo_raw},
                       lr_scale=scale)

        if do_poses:
            # Chain rule through direction renormalization: the Jacobian of
            # d = raw/|raw| projects out the radial component.
            g_raw = (d_dir - dirs * (dirs * d_dir).sum(axis=1)[:, None]) / norms[:, None]
            g_rot = g_raw[:, :, None] * dirs_cam[:, None, :]
            g_rot6 = _decode_many_backward(rot6, g_rot)
            pose_grad = penalty_grad.copy()
            np.add.at(pose_grad[:, :3], frames, d_origin)
            np.add.at(pose_grad[:, 3:], frames, g_rot6)
            pose_opt.step(pose_params, {"poses": pose_grad}, lr_scale=scale)

        if step % config.log_every == 0 or step == config.iterations - 1:
            history.append(LossReport(step, photometric, regularizer, total))
        if (config.checkpoint_dir is not None and config.checkpoint_every > 0
                and (step + 1) % config.checkpoint_every == 0):
            field.save(f"{config.checkpoint_dir}/field_{step + 1:06d}.qrffld")
    return TrainResult(field, poses, history)


# ---------------------------------------------------------------------------
# Rendering and evaluation
# ---------------------------------------------------------------------------


def render_image(field, pose_row, intrinsics: CameraIntrinsics, n_samples: int,
                 t_near: float, t_far: float, clip_to_bounds: bool = False,
                 chunk: int = 16384) -> np.ndarray:
    """Render the field's value channel for a full image at one pose."""
    from .photon_sim import camera_rays

    origins, dirs = camera_rays(intrinsics, pose_row)
    values = np.empty(origins.shape[0])
    for lo in range(0, origins.shape[0], chunk):
        hi = min(lo + chunk, origins.shape[0])
        batch = rf.render_rays(field, origins[lo:hi], dirs[lo:hi], t_near, t_far,
                               n_samples, clip_to_bounds=clip_to_bounds)
        values[lo:hi] = batch.values
    return values.reshape(intrinsics.height, intrinsics.width)


PSNR_CAP_DB = 99.0


def psnr(image, reference, data_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at 99 for identical images."""
    a = np.asarray(image, dtype=np.float64)
    b = np.asarray(reference, dtype=np.float64)
    if a.shape != b.shape:
        raise InputError("psnr requires images of the same shape")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(data_range**2 / mse), PSNR_CAP_DB)


def ssim(image, reference, data_range: float = 1.0, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Structural similarity with a Gaussian window (standard constants)."""
    a = np.asarray(image, dtype=np.float64)
    b = np.asarray(reference, dtype=np.float64)
    if a.shape != b.shape:
        raise InputError("ssim requires images of the same shape")
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mu_a = gaussian_filter(a, sigma)
    mu_b = gaussian_filter(b, sigma)
    var_a = gaussian_filter(a * a, sigma) - mu_a**2
    var_b = gaussian_filter(b * b, sigma) - mu_b**2
    cov = gaussian_filter(a * b, sigma) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass
class HoldoutMetrics:
    psnr_values: list
    ssim_values: list

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr_values))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim_values))


def recover_flux(field_image: np.ndarray, response, flux_scale: float = 1.0) -> np.ndarray:
    """Map a rendered value image back to linear flux through the sensor model.

    ``response`` selects the inverse: for an SpcConfig the values are
    detection probabilities inverted through -ln(1-p)/tau; for a
    ConventionalConfig they are gamma intensities inverted through the
    camera response. ``flux_scale`` undoes any light-level scaling applied
    before capture.
    """
    if isinstance(response, SpcConfig):
        tau_eff = response.tau * response.quantum_scale * flux_scale
        return rf.invert_flux(np.clip(field_image, 0.0, 1.0), tau_eff).flux
    if isinstance(response, ConventionalConfig):
        return invert_conventional_response(field_image, response) / flux_scale
    raise InputError("response must be an SpcConfig or ConventionalConfig")


def evaluate_holdout(field, holdout_poses: PoseTrajectory, holdout_flux,
                     intrinsics: CameraIntrinsics, response, config: TrainConfig,
                     flux_scale: float = 1.0, tonemap_gamma: float = 2.4) -> HoldoutMetrics:
    """PSNR/SSIM of tonemapped recovered flux against tonemapped ground truth.

    Both sides are normalized by the maximum ground-truth flux over the
    holdout set before gamma encoding, so the comparison is in display space.
    """
    gt = [np.asarray(getattr(f, "values", f), dtype=np.float64) for f in holdout_flux]
    if len(gt) != len(holdout_poses):
        raise InputError("one holdout flux image per holdout pose is required")
    scale = max(float(np.max(g)) for g in gt)
    psnrs, ssims = [], []
    for row, truth in zip(holdout_poses.data, gt):
        rendered = render_image(field, row, intrinsics, config.n_samples,
                                config.t_near, config.t_far)
        flux_hat = recover_flux(rendered, response, flux_scale)
        img = rf.tonemap(flux_hat, gamma=tonemap_gamma, scale=scale).image
        ref = rf.tonemap(truth, gamma=tonemap_gamma, scale=scale).image
        psnrs.append(psnr(img, ref))
        ssims.append(ssim(img, ref))
    return HoldoutMetrics(psnrs, ssims)
