"""Single-photon and conventional camera simulation.

Photon arrivals at a pixel seeing radiant flux phi (photons/second) over an
exposure tau are Poisson with mean phi*tau. A SPAD pixel fires on the first
arrival and then resets, so its measurement is the binary indicator
"at least one photon", a Bernoulli draw with

    P(B = 1) = 1 - exp(-phi * tau).

A conventional pixel integrates arrivals over its (much longer) exposure,
converts them to electrons with a fixed gain, saturates at the full-well
capacity, picks up additive Gaussian read noise, and is gamma-encoded to an
intensity in [0, 1]. The Gaussian read-noise floor is what separates the two
sensors in low light: the SPAD has none and stays shot-noise limited.

All samplers are deterministic functions of (inputs, seed); frames drawn
with per-frame seeds are independent of iteration order and thread schedule.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import radiance_field as rf
from . import rng as _rng
from .errors import InputError, StoreError
from .frame_store import BinaryFrame, DefectMask
from .pose import PoseTrajectory, _decode_many

FLUX_MAGIC = b"QRFFLUX1"


# ---------------------------------------------------------------------------
# Configuration types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole camera: +z forward, +x along columns, +y along rows."""

    width: int
    height: int
    focal: float
    principal_point: tuple | None = None

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise InputError("sensor must be at least 1x1 pixels")
        if self.focal <= 0:
            raise InputError("focal length must be positive")
        if self.principal_point is not None:
            cx, cy = self.principal_point
            if not (0.0 <= cx <= self.width and 0.0 <= cy <= self.height):
                raise InputError("principal point must lie inside the image rectangle")

    @property
    def cx(self) -> float:
        return self.principal_point[0] if self.principal_point else self.width / 2.0

    @property
    def cy(self) -> float:
        return self.principal_point[1] if self.principal_point else self.height / 2.0


@dataclass(frozen=True)
class SpcConfig:
    """Single-photon camera: per-frame exposure tau at a given frame rate.

    quantum_scale folds quantum efficiency and aperture into one multiplier
    on the incident flux, which makes light level directly controllable in
    stops. dark_count_rate adds a constant false-detection flux.
    """

    tau: float
    frame_rate: float
    quantum_scale: float = 1.0
    dark_count_rate: float = 0.0
    defects: DefectMask | None = None

    def __post_init__(self):
        if self.tau <= 0 or self.frame_rate <= 0:
            raise InputError("tau and frame_rate must be positive")
        if self.tau > 1.0 / self.frame_rate * (1 + 1e-12):
            raise InputError("tau cannot exceed the frame interval 1/frame_rate")
        if self.quantum_scale <= 0:
            raise InputError("quantum_scale must be positive")
        if self.dark_count_rate < 0:
            raise InputError("dark_count_rate must be non-negative")


@dataclass(frozen=True)
class ConventionalConfig:
    """Conventional camera: integrate, saturate, add read noise, gamma-encode."""

    exposure: float
    full_well: float
    read_noise_sigma: float
    gain: float = 1.0
    response_gamma: float = 1.0 / 2.2

    def __post_init__(self):
        if self.exposure <= 0:
            raise InputError("exposure must be positive")
        if self.full_well <= 0:
            raise InputError("full_well must be positive")
        if self.read_noise_sigma < 0:
            raise InputError("read_noise_sigma must be non-negative")
        if self.gain <= 0 or self.response_gamma <= 0:
            raise InputError("gain and response_gamma must be positive")


# ---------------------------------------------------------------------------
# Images
# ---------------------------------------------------------------------------


def _validated_image(values, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise InputError(f"{name} must be a 2-D array")
    if not np.all(np.isfinite(arr)):
        raise InputError(f"{name} must be finite everywhere")
    if np.any(arr < 0.0):
        raise InputError(f"{name} must be non-negative")
    return arr


@dataclass
class FluxImage:
    """Per-pixel linear radiant flux in photons/second."""

    values: np.ndarray

    def __post_init__(self):
        self.values = _validated_image(self.values, "flux")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass
class IntensityImage:
    """Gamma-encoded conventional camera readout in [0, 1]."""

    values: np.ndarray

    def __post_init__(self):
        self.values = _validated_image(self.values, "intensity")
        if np.any(self.values > 1.0):
            raise InputError("intensity must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


def write_flux_image(image: FluxImage, path) -> None:
    """Raster: magic "QRFFLUX1", u32 width, u32 height, then f32 data."""
    import struct

    with open(path, "wb") as f:
        f.write(FLUX_MAGIC)
        f.write(struct.pack("<II", image.width, image.height))
        f.write(image.values.astype("<f4").tobytes())


def read_flux_image(path) -> FluxImage:
    import struct

    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != FLUX_MAGIC:
            raise StoreError(f"not a flux raster: bad magic {magic!r}")
        width, height = struct.unpack("<II", f.read(8))
        data = np.frombuffer(f.read(4 * width * height), dtype="<f4")
        if data.size != width * height:
            raise StoreError("flux raster truncated")
    return FluxImage(data.reshape(height, width).astype(np.float64))


# ---------------------------------------------------------------------------
# Samplers
# ---------------------------------------------------------------------------


def bernoulli_parameter(flux_values, cfg: SpcConfig) -> np.ndarray:
    """Detection probability 1 - exp(-(phi*quantum_scale + dark)*tau)."""
    lam = (np.asarray(flux_values, dtype=np.float64) * cfg.quantum_scale
           + cfg.dark_count_rate) * cfg.tau
    return -np.expm1(-lam)


def sample_binary_frame(flux: FluxImage, cfg: SpcConfig, rng_seed: int) -> BinaryFrame:
    """One SPAD exposure: each pixel fires independently with its Bernoulli rate."""
    p = bernoulli_parameter(flux.values, cfg)
    u = _rng.philox(rng_seed, "binary-frame").random(p.shape)
    bits = (u < p).astype(np.uint8)
    if cfg.defects is not None:
        if cfg.defects.dead.shape != bits.shape:
            raise InputError("defect mask dimensions must match the sensor")
        bits = np.where(cfg.defects.dead, 0, bits)
        bits = np.where(cfg.defects.hot, 1, bits).astype(np.uint8)
    return BinaryFrame(bits)


def sample_poisson_count(flux_tau, rng_seed: int, size=None):
    """Photon arrivals in one exposure: Poisson with mean flux*tau.

    Thresholding these counts at >= 1 is distributionally identical to
    sample_binary_frame at the same mean.
    """
    lam = np.asarray(flux_tau, dtype=np.float64)
    if not np.all(np.isfinite(lam)) or np.any(lam < 0.0):
        raise InputError("flux_tau must be finite and non-negative")
    counts = _rng.philox(rng_seed, "poisson-count").poisson(lam, size=size)
    if size is None and lam.ndim == 0:
        return int(counts)
    return counts


def sample_conventional_frame(flux: FluxImage, cfg: ConventionalConfig,
                              rng_seed: int) -> IntensityImage:
    """One conventional exposure.

    Poisson shot noise on the integrated photon count, gain to electrons,
    full-well saturation, additive Gaussian read noise, then normalization by
    the full well, a clip to [0, 1], and the gamma response.
    """
    gen = _rng.philox(rng_seed, "conventional-frame")
    lam = flux.values * cfg.exposure
    electrons = gen.poisson(lam).astype(np.float64) * cfg.gain
    electrons = np.minimum(electrons, cfg.full_well)
    if cfg.read_noise_sigma > 0:
        electrons = electrons + gen.normal(0.0, cfg.read_noise_sigma, lam.shape)
    normalized = np.clip(electrons / cfg.full_well, 0.0, 1.0)
    return IntensityImage(normalized**cfg.response_gamma)


def invert_conventional_response(intensity, cfg: ConventionalConfig) -> np.ndarray:
    """Intensity in [0, 1] back to a flux estimate in photons/second."""
    x = np.asarray(intensity, dtype=np.float64)
    electrons = np.clip(x, 0.0, 1.0) ** (1.0 / cfg.response_gamma) * cfg.full_well
    return electrons / (cfg.gain * cfg.exposure)


def read_noise_snr_threshold(cfg: ConventionalConfig) -> float:
    """Flux below read_noise_sigma / (gain * exposure) has per-frame SNR < 1."""
    return cfg.read_noise_sigma / (cfg.gain * cfg.exposure)


# ---------------------------------------------------------------------------
# Trajectory rendering (shared quadrature with the reconstructor)
# ---------------------------------------------------------------------------


def pixel_directions(intrinsics: CameraIntrinsics) -> np.ndarray:
    """Unnormalized camera-frame directions through each pixel center, (h, w, 3)."""
    cols = (np.arange(intrinsics.width) + 0.5 - intrinsics.cx) / intrinsics.focal
    rows = (np.arange(intrinsics.height) + 0.5 - intrinsics.cy) / intrinsics.focal
    x, y = np.meshgrid(cols, rows)
    return np.stack([x, y, np.ones_like(x)], axis=-1)


def camera_rays(intrinsics: CameraIntrinsics, pose_row: np.ndarray):
    """(origins, unit directions), each (h*w, 3), for one 9-D pose."""
    pose_row = np.asarray(pose_row, dtype=np.float64)
    rotation = _decode_many(pose_row[None, 3:])[0]
    dirs_cam = pixel_directions(intrinsics).reshape(-1, 3)
    dirs = dirs_cam @ rotation.T
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(pose_row[:3], dirs.shape)
    return origins, dirs


def render_flux_image(scene, pose_row, intrinsics: CameraIntrinsics,
                      n_samples: int = 64, t_near: float = 1e-3,
                      t_far: float | None = None) -> FluxImage:
    """Render one pose of an analytic scene (or a frozen field) to flux."""
    origins, dirs = camera_rays(intrinsics, pose_row)
    if t_far is None:
        diag = float(np.linalg.norm(scene.bounds.size))
        dist = float(np.linalg.norm(np.asarray(pose_row[:3]) - scene.bounds.center))
        t_far = dist + diag
    batch = rf.render_rays(scene, origins, dirs, t_near, t_far, n_samples)
    return FluxImage(np.maximum(batch.values, 0.0).reshape(intrinsics.height,
                                                           intrinsics.width))


def render_trajectory(scene, trajectory: PoseTrajectory,
                      intrinsics: CameraIntrinsics, n_samples: int = 64,
                      t_near: float = 1e-3,
                      t_far: float | None = None) -> Iterator[FluxImage]:
    """Stream one flux image per pose, sharing the reconstructor's quadrature."""
    for row in trajectory.data:
        yield render_flux_image(scene, row, intrinsics, n_samples=n_samples,
                                t_near=t_near, t_far=t_far)
