"""Dense camera pose trajectories and their Fourier-domain smoothing.

A pose is 9 numbers: a translation [x, y, z] followed by a continuous 6-D
rotation encoding (the first two columns of the rotation matrix, decoded by
Gram-Schmidt). The encoding is smooth and surjective onto SO(3), which is
what makes gradient descent over hundreds of thousands of poses behave.

High-rate capture means the pose trajectory is heavily oversampled relative
to the physical camera motion, so everything above a cutoff frequency is
treated as noise: ``fourier_smooth`` lowpasses each of the 9 columns along
the frame axis and ``smoothing_penalty`` charges the residual against the
smoothed trajectory, with an exact hand-derived gradient.
"""

from __future__ import annotations

import csv as _csv
import struct
from dataclasses import dataclass

import numpy as np

from .errors import InputError, StoreError
from . import rng as _rng

POSE_MAGIC = b"QRFPOSE1"
DEFAULT_CUTOFF_HZ = 500.0
DEFAULT_LAMBDA = 0.1


# ---------------------------------------------------------------------------
# Rotation encoding
# ---------------------------------------------------------------------------


def encode_rotation(rotation) -> np.ndarray:
    """First two columns of a rotation matrix, flattened to 6 components."""
    r = np.asarray(rotation, dtype=np.float64)
    if r.shape != (3, 3):
        raise InputError("rotation must be a 3x3 matrix")
    if np.abs(r.T @ r - np.eye(3)).max() > 1e-6 or np.linalg.det(r) < 0.0:
        raise InputError("encode_rotation requires a proper rotation matrix")
    return np.concatenate([r[:, 0], r[:, 1]])


def decode_rotation(components) -> np.ndarray:
    """Gram-Schmidt a 6-vector back to a proper rotation matrix."""
    v = np.asarray(components, dtype=np.float64)
    if v.shape != (6,):
        raise InputError("rotation encoding must have 6 components")
    return _decode_many(v[None])[0]


def _decode_many(v6: np.ndarray) -> np.ndarray:
    """(N, 6) encodings -> (N, 3, 3) rotations."""
    a1 = v6[:, :3]
    a2 = v6[:, 3:]
    n1 = np.linalg.norm(a1, axis=1)
    if np.any(n1 < 1e-12):
        raise InputError("rotation encoding has a zero first column")
    b1 = a1 / n1[:, None]
    dot = (b1 * a2).sum(axis=1)
    u = a2 - dot[:, None] * b1
    n2 = np.linalg.norm(u, axis=1)
    if np.any(n2 < 1e-12):
        raise InputError("rotation encoding columns are colinear")
    b2 = u / n2[:, None]
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1)


def _decode_many_backward(v6: np.ndarray, grad_rotation: np.ndarray) -> np.ndarray:
    """Adjoint of _decode_many: (N, 3, 3) upstream -> (N, 6)."""
    a1 = v6[:, :3]
    a2 = v6[:, 3:]
    n1 = np.linalg.norm(a1, axis=1)
    b1 = a1 / n1[:, None]
    dot = (b1 * a2).sum(axis=1)
    u = a2 - dot[:, None] * b1
    n2 = np.linalg.norm(u, axis=1)
    b2 = u / n2[:, None]

    g_b1 = grad_rotation[:, :, 0].copy()
    g_b2 = grad_rotation[:, :, 1].copy()
    g_b3 = grad_rotation[:, :, 2]
    # b3 = b1 x b2
    g_b1 += np.cross(b2, g_b3)
    g_b2 += np.cross(g_b3, b1)
    # b2 = u / |u|
    g_u = (g_b2 - b2 * (b2 * g_b2).sum(axis=1)[:, None]) / n2[:, None]
    # u = a2 - (b1 . a2) b1
    gu_dot_b1 = (g_u * b1).sum(axis=1)
    g_a2 = g_u - gu_dot_b1[:, None] * b1
    g_b1 += -gu_dot_b1[:, None] * a2 - dot[:, None] * g_u
    # b1 = a1 / |a1|
    g_a1 = (g_b1 - b1 * (b1 * g_b1).sum(axis=1)[:, None]) / n1[:, None]
    return np.concatenate([g_a1, g_a2], axis=1)


def _rotation_exp(vec: np.ndarray) -> np.ndarray:
    """Rodrigues: axis-angle 3-vector -> rotation matrix."""
    theta = np.linalg.norm(vec)
    if theta < 1e-12:
        return np.eye(3)
    k = vec / theta
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(theta) * kx + (1 - np.cos(theta)) * (kx @ kx)


def _rotation_log(rotation: np.ndarray) -> np.ndarray:
    """Inverse Rodrigues; safe near zero and pi."""
    cos_theta = np.clip((np.trace(rotation) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_theta)
    if theta < 1e-9:
        return np.zeros(3)
    if np.pi - theta < 1e-6:
        # Near pi the antisymmetric part vanishes; read the axis off R + I.
        m = (rotation + np.eye(3)) / 2.0
        axis = np.sqrt(np.maximum(np.diag(m), 0.0))
        # Fix signs from the off-diagonal terms.
        i = int(np.argmax(axis))
        signs = np.sign(m[i, :] / max(axis[i], 1e-12))
        signs[signs == 0] = 1.0
        axis = axis * signs
        axis /= np.linalg.norm(axis)
        return theta * axis
    w = (
        np.array(
            [
                rotation[2, 1] - rotation[1, 2],
                rotation[0, 2] - rotation[2, 0],
                rotation[1, 0] - rotation[0, 1],
            ]
        )
        / (2.0 * np.sin(theta))
    )
    return theta * w


# ---------------------------------------------------------------------------
# Trajectories
# ---------------------------------------------------------------------------


@dataclass
class PoseTrajectory:
    """(N, 9) per-frame poses sampled at ``frame_rate`` Hz."""

    data: np.ndarray
    frame_rate: float

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2 or self.data.shape[1] != 9 or self.data.shape[0] < 1:
            raise InputError("trajectory must be an (N, 9) array with N >= 1")
        if self.frame_rate <= 0:
            raise InputError("frame_rate must be positive")

    def __len__(self) -> int:
        return self.data.shape[0]

    @property
    def translations(self) -> np.ndarray:
        return self.data[:, :3]

    @property
    def rotations6(self) -> np.ndarray:
        return self.data[:, 3:]

    def rotations(self) -> np.ndarray:
        return _decode_many(self.rotations6)

    def copy(self) -> "PoseTrajectory":
        return PoseTrajectory(self.data.copy(), self.frame_rate)

    def canonical(self) -> "PoseTrajectory":
        """Re-encode rotations so the 6-D block is orthonormal columns."""
        rot = self.rotations()
        enc = np.concatenate([rot[:, :, 0], rot[:, :, 1]], axis=1)
        return PoseTrajectory(np.concatenate([self.translations, enc], axis=1),
                              self.frame_rate)


def make_pose(translation, rotation) -> np.ndarray:
    """Pack (translation 3-vector, rotation matrix) into one 9-vector row."""
    return np.concatenate([np.asarray(translation, dtype=np.float64),
                           encode_rotation(rotation)])


def trajectory_rmse(a: PoseTrajectory, b: PoseTrajectory) -> float:
    """RMSE between two trajectories over the canonical 9-D encoding."""
    if len(a) != len(b):
        raise InputError("trajectories must have the same length")
    da = a.canonical().data
    db = b.canonical().data
    return float(np.sqrt(np.mean((da - db) ** 2)))


def _look_at(position, target, up) -> np.ndarray:
    """Camera-to-world rotation: +z toward target, x/y spanning the image plane."""
    position = np.asarray(position, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - position
    z = z / np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    n = np.linalg.norm(x)
    if n < 1e-12:
        raise InputError("camera forward axis is parallel to the up vector")
    x = x / n
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=-1)


def circular_orbit(n_frames: int, radius: float, frame_rate: float,
                   height: float = 0.0, span_deg: float = 360.0,
                   start_deg: float = 0.0, target=(0.0, 0.0, 0.0),
                   up=(0.0, 1.0, 0.0)) -> PoseTrajectory:
    """Orbit in the x-z plane at constant height, always facing ``target``."""
    angles = np.deg2rad(start_deg + span_deg * np.arange(n_frames) / max(n_frames - 1, 1))
    rows = np.empty((n_frames, 9))
    for i, ang in enumerate(angles):
        p = np.array([radius * np.cos(ang), height, radius * np.sin(ang)])
        rows[i] = make_pose(p, _look_at(p, target, up))
    return PoseTrajectory(rows, frame_rate)


def sinusoidal_orbit(n_frames: int, radius: float, frame_rate: float,
                     elev_amplitude: float, n_periods: int,
                     span_deg: float = 360.0, start_deg: float = 0.0,
                     target=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0)) -> PoseTrajectory:
    """Orbit whose height oscillates sinusoidally while circling ``target``."""
    fracs = np.arange(n_frames) / max(n_frames - 1, 1)
    angles = np.deg2rad(start_deg + span_deg * fracs)
    rows = np.empty((n_frames, 9))
    for i, (ang, f) in enumerate(zip(angles, fracs)):
        h = elev_amplitude * np.sin(2.0 * np.pi * n_periods * f)
        p = np.array([radius * np.cos(ang), h, radius * np.sin(ang)])
        rows[i] = make_pose(p, _look_at(p, target, up))
    return PoseTrajectory(rows, frame_rate)


# ---------------------------------------------------------------------------
# Lowpass smoothing and its penalty
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LowpassSpec:
    """Transfer-function description of the trajectory lowpass.

    ``transition_hz`` selects the taper: None means a raised cosine of width
    10% of the cutoff; 0.0 is a hard brick wall (used by the analytic
    operator identities). ``pad_mode`` is "mirror" (reflect ~N/4 samples so
    open trajectories do not wrap) or "none" (pure circular transform; makes
    the brick-wall smoother an exact orthogonal projection).
    """

    cutoff_hz: float
    transition_hz: float | None = None
    pad_mode: str = "mirror"

    def __post_init__(self):
        if self.cutoff_hz <= 0:
            raise InputError("lowpass cutoff must be positive")
        if self.transition_hz is not None and self.transition_hz < 0:
            raise InputError("transition width must be non-negative")
        if self.pad_mode not in ("mirror", "none"):
            raise InputError("pad_mode must be 'mirror' or 'none'")

    @property
    def resolved_transition_hz(self) -> float:
        return 0.1 * self.cutoff_hz if self.transition_hz is None else self.transition_hz


def _transfer(freqs: np.ndarray, spec: LowpassSpec, nyquist: float) -> np.ndarray:
    if spec.cutoff_hz >= nyquist:
        return np.ones_like(freqs)
    w = spec.resolved_transition_hz
    if w == 0.0:
        return (freqs <= spec.cutoff_hz).astype(np.float64)
    lo = spec.cutoff_hz - 0.5 * w
    hi = spec.cutoff_hz + 0.5 * w
    h = 0.5 * (1.0 + np.cos(np.pi * np.clip((freqs - lo) / w, 0.0, 1.0)))
    return np.where(freqs <= lo, 1.0, np.where(freqs >= hi, 0.0, h))


def _pad_indices(n: int, pad: int) -> np.ndarray:
    return np.pad(np.arange(n), pad, mode="reflect")


def _smooth_columns(x: np.ndarray, spec: LowpassSpec, frame_rate: float) -> np.ndarray:
    if spec.cutoff_hz >= frame_rate / 2.0:
        return x.copy()  # filter is the identity at or above Nyquist
    n = x.shape[0]
    pad = min(n // 4, n - 1) if spec.pad_mode == "mirror" else 0
    xp = x[_pad_indices(n, pad)] if pad else x
    m = xp.shape[0]
    h = _transfer(np.fft.rfftfreq(m, d=1.0 / frame_rate), spec, frame_rate / 2.0)
    yp = np.fft.irfft(np.fft.rfft(xp, axis=0) * h[:, None], n=m, axis=0)
    return yp[pad:pad + n] if pad else yp


def _smooth_columns_adjoint(r: np.ndarray, spec: LowpassSpec, frame_rate: float) -> np.ndarray:
    """Transpose of the real linear smoothing operator applied to r."""
    if spec.cutoff_hz >= frame_rate / 2.0:
        return r.copy()
    n = r.shape[0]
    pad = min(n // 4, n - 1) if spec.pad_mode == "mirror" else 0
    m = n + 2 * pad
    h = _transfer(np.fft.rfftfreq(m, d=1.0 / frame_rate), spec, frame_rate / 2.0)
    # Crop adjoint: embed; circular filter is self-adjoint (real, even kernel);
    # pad adjoint: fold the reflected wings back onto their source samples.
    embedded = np.zeros((m, r.shape[1]))
    embedded[pad:pad + n] = r
    filtered = np.fft.irfft(np.fft.rfft(embedded, axis=0) * h[:, None], n=m, axis=0)
    if not pad:
        return filtered
    out = np.zeros_like(r)
    np.add.at(out, _pad_indices(n, pad), filtered)
    return out


def fourier_smooth(trajectory, spec: LowpassSpec):
    """Lowpass each of the 9 pose columns along the frame axis.

    The transform runs independently per column; the DC bin always passes,
    and cutoffs at or above Nyquist leave the input unchanged. Raw (N, C)
    arrays go through ``smooth_array`` instead.
    """
    if not isinstance(trajectory, PoseTrajectory):
        raise InputError("fourier_smooth expects a PoseTrajectory; use smooth_array for raw data")
    if len(trajectory) < 2:
        raise InputError("smoothing needs at least 2 frames")
    data = _smooth_columns(trajectory.data, spec, trajectory.frame_rate)
    return PoseTrajectory(data, trajectory.frame_rate)


def smooth_array(x: np.ndarray, spec: LowpassSpec, frame_rate: float) -> np.ndarray:
    """fourier_smooth for a raw (N, C) array sampled at ``frame_rate``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise InputError("smoothing needs an (N, C) array with N >= 2")
    return _smooth_columns(x, spec, frame_rate)


def smoothing_penalty(trajectory: PoseTrajectory, spec: LowpassSpec,
                      lam: float = DEFAULT_LAMBDA):
    """Quadratic penalty on the out-of-band trajectory content.

    Returns (loss, gradient) with loss = lam * sum_j |P_j - S(P)_j|^2, the
    plain sum over frames: each pose feels a restoring pull proportional to
    its own out-of-band residual regardless of how many frames there are,
    which is what lets one lam setting serve trajectories of any length.
    The gradient is the exact adjoint expression 2*lam*(I - S)^T (I - S) P.
    """
    x = trajectory.data
    if lam == 0.0:
        return 0.0, np.zeros_like(x)
    residual = x - _smooth_columns(x, spec, trajectory.frame_rate)
    loss = lam * float((residual**2).sum())
    grad = (2.0 * lam) * (
        residual - _smooth_columns_adjoint(residual, spec, trajectory.frame_rate)
    )
    return loss, grad


# ---------------------------------------------------------------------------
# Interpolation and perturbation
# ---------------------------------------------------------------------------


def interpolate_poses(anchor_indices, anchor_rows, frame_rate: float) -> PoseTrajectory:
    """Densify sparse anchor poses to one pose per frame index.

    Translations interpolate linearly; rotations follow the geodesic between
    consecutive decoded anchors. Anchor frames are reproduced exactly.
    """
    idx = np.asarray(anchor_indices, dtype=np.int64)
    rows = np.asarray(anchor_rows, dtype=np.float64)
    if idx.ndim != 1 or rows.shape != (idx.size, 9) or idx.size < 2:
        raise InputError("need >= 2 anchors with one 9-D pose row each")
    if np.any(np.diff(idx) <= 0):
        raise InputError("anchor frame indices must be strictly increasing")
    rotations = _decode_many(rows[:, 3:])
    n = int(idx[-1] - idx[0]) + 1
    out = np.empty((n, 9))
    for seg in range(idx.size - 1):
        i0, i1 = int(idx[seg]), int(idx[seg + 1])
        r_rel = _rotation_log(rotations[seg].T @ rotations[seg + 1])
        for k in range(i0, i1 + 1):
            a = (k - i0) / (i1 - i0)
            t = (1.0 - a) * rows[seg, :3] + a * rows[seg + 1, :3]
            r = rotations[seg] @ _rotation_exp(a * r_rel)
            out[k - idx[0]] = make_pose(t, r)
    return PoseTrajectory(out, frame_rate)


@dataclass(frozen=True)
class NoiseSpec:
    """Band-limited Gaussian perturbation: overall RMS ``sigma`` confined to
    the frequency band [band_hz[0], band_hz[1]]."""

    sigma: float
    band_hz: tuple = (0.0, np.inf)

    def __post_init__(self):
        if self.sigma < 0:
            raise InputError("noise sigma must be non-negative")
        if self.band_hz[0] < 0 or self.band_hz[1] < self.band_hz[0]:
            raise InputError("noise band must satisfy 0 <= lo <= hi")


def band_limited_noise(shape, noise_spec: NoiseSpec, frame_rate: float,
                       rng_seed: int) -> np.ndarray:
    """Deterministic band-limited Gaussian noise of overall RMS sigma."""
    n = shape[0]
    if noise_spec.sigma == 0.0:
        return np.zeros(shape)
    white = _rng.philox(rng_seed, "pose-noise").normal(size=shape)
    freqs = np.fft.rfftfreq(n, d=1.0 / frame_rate)
    mask = (freqs >= noise_spec.band_hz[0]) & (freqs <= noise_spec.band_hz[1])
    shaped = np.fft.irfft(np.fft.rfft(white, axis=0) * mask[:, None], n=n, axis=0)
    rms = float(np.sqrt(np.mean(shaped**2)))
    if rms == 0.0:
        return np.zeros(shape)
    return shaped * (noise_spec.sigma / rms)


def perturb_trajectory(trajectory: PoseTrajectory, noise_spec: NoiseSpec,
                       rng_seed: int) -> PoseTrajectory:
    """Add band-limited Gaussian noise to every pose column."""
    noise = band_limited_noise(trajectory.data.shape, noise_spec,
                               trajectory.frame_rate, rng_seed)
    return PoseTrajectory(trajectory.data + noise, trajectory.frame_rate)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

_CSV_HEADER = ["frame_index", "x", "y", "z", "r1", "r2", "r3", "r4", "r5", "r6"]


def save_trajectory_csv(trajectory: PoseTrajectory, path) -> None:
    with open(path, "w", newline="") as f:
        writer = _csv.writer(f)
        writer.writerow(_CSV_HEADER + [f"# frame_rate_hz={float(trajectory.frame_rate)!r}"])
        for i, row in enumerate(trajectory.data):
            writer.writerow([i] + [repr(float(v)) for v in row])


def load_trajectory_csv(path, frame_rate: float | None = None) -> PoseTrajectory:
    with open(path, newline="") as f:
        reader = _csv.reader(f)
        header = next(reader)
        rate = frame_rate
        for cell in header:
            if cell.startswith("# frame_rate_hz="):
                rate = float(cell.split("=", 1)[1])
        if rate is None:
            raise StoreError("trajectory CSV carries no frame rate; pass one explicitly")
        rows = [[float(v) for v in line[1:10]] for line in reader if line]
    if not rows:
        raise StoreError("trajectory CSV has no pose rows")
    return PoseTrajectory(np.asarray(rows), rate)


def load_anchors_csv(path):
    """(indices, rows) from a sparse trajectory CSV with explicit frame_index."""
    with open(path, newline="") as f:
        reader = _csv.reader(f)
        next(reader)
        idx, rows = [], []
        for line in reader:
            if not line:
                continue
            idx.append(int(line[0]))
            rows.append([float(v) for v in line[1:10]])
    if not idx:
        raise StoreError("anchor CSV has no pose rows")
    return np.asarray(idx, dtype=np.int64), np.asarray(rows)


def save_trajectory_binary(trajectory: PoseTrajectory, path) -> None:
    """Binary trajectory: magic, u32 version, u64 count, f64 rate, (N, 9) f64."""
    with open(path, "wb") as f:
        f.write(POSE_MAGIC)
        f.write(struct.pack("<IQd", 1, len(trajectory), trajectory.frame_rate))
        f.write(trajectory.data.astype("<f8").tobytes())


def load_trajectory_binary(path) -> PoseTrajectory:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != POSE_MAGIC:
            raise StoreError(f"not a pose file: bad magic {magic!r}")
        version, count, rate = struct.unpack("<IQd", f.read(20))
        if version != 1:
            raise StoreError(f"unsupported pose file version {version}")
        data = np.frombuffer(f.read(count * 9 * 8), dtype="<f8")
        if data.size != count * 9:
            raise StoreError("pose file truncated")
    return PoseTrajectory(data.reshape(count, 9).copy(), rate)
