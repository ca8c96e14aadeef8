"""Desk-scale experiment harness: blur-noise tradeoff, low-light bias,
view extrapolation.

Each sweep simulates a single-photon and a conventional camera observing the
same analytic scene along the same trajectory for the same total capture
time (the controlled comparison every experiment here relies on), trains a
field per camera, and reports holdout metrics. Results land in a directory
as metrics.csv, SVG curve plots, and PNG image panels.
"""

from __future__ import annotations

import csv as _csv
import os
from dataclasses import dataclass, field as dc_field, replace

import numpy as np

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from . import frame_store as fs
from . import pose as pose_mod
from . import radiance_field as rf
from . import rng as _rng
from . import trainer as tr
from .errors import InputError
from .photon_sim import (CameraIntrinsics, ConventionalConfig, FluxImage,
                         SpcConfig, bernoulli_parameter, render_flux_image,
                         sample_binary_frame, sample_conventional_frame)
from .pose import PoseTrajectory, circular_orbit, sinusoidal_orbit
from .trainer import TrainConfig, evaluate_holdout, train


# ---------------------------------------------------------------------------
# Experiment description
# ---------------------------------------------------------------------------


@dataclass
class TrajectorySpec:
    kind: str = "circular"        # "circular" | "sinusoidal"
    radius: float = 2.8
    span_deg: float = 140.0
    start_deg: float = 200.0
    height: float = 0.0
    elev_amplitude: float = 0.3   # sinusoidal only
    n_periods: int = 8            # sinusoidal only

    def build(self, n_frames: int, frame_rate: float) -> PoseTrajectory:
        if self.kind == "circular":
            return circular_orbit(n_frames, self.radius, frame_rate,
                                  height=self.height, span_deg=self.span_deg,
                                  start_deg=self.start_deg)
        if self.kind == "sinusoidal":
            return sinusoidal_orbit(n_frames, self.radius, frame_rate,
                                    self.elev_amplitude, self.n_periods,
                                    span_deg=self.span_deg, start_deg=self.start_deg)
        raise InputError(f"unknown trajectory kind {self.kind!r}")


@dataclass
class ExperimentSpec:
    """One controlled camera comparison.

    Both cameras observe for exactly ``capture_time`` seconds along the same
    trajectory; their frame counts then differ by the frame-rate ratio.
    """

    scene: rf.FluxScene
    intrinsics: CameraIntrinsics
    spc: SpcConfig
    conventional: ConventionalConfig
    conventional_rate: float
    capture_time: float
    trajectory: TrajectorySpec = dc_field(default_factory=TrajectorySpec)
    stops: tuple = (0, 1, 2, 3, 4, 5)
    seeds: tuple = (0, 1, 2)
    train: TrainConfig = dc_field(default_factory=TrainConfig)
    scene_id: str = "spheres"
    n_holdout: int = 5
    gt_samples: int = 48

    def __post_init__(self):
        if self.capture_time <= 0:
            raise InputError("capture_time must be positive")
        if self.conventional_rate <= 0:
            raise InputError("conventional_rate must be positive")
        if self.conventional.exposure > 1.0 / self.conventional_rate * (1 + 1e-12):
            raise InputError("conventional exposure cannot exceed its frame interval")
        for rate, name in ((self.spc.frame_rate, "spc"),
                           (self.conventional_rate, "conventional")):
            n = rate * self.capture_time
            if abs(n - round(n)) > 1e-9 or round(n) < 1:
                raise InputError(f"capture_time must cover a whole number of {name} frames")
        # The controlled variable: identical wall-clock capture across cameras.
        if not np.isclose(self.spc_frames / self.spc.frame_rate,
                          self.conv_frames / self.conventional_rate):
            raise InputError("cameras must share the total capture time")

    @property
    def spc_frames(self) -> int:
        return int(round(self.spc.frame_rate * self.capture_time))

    @property
    def conv_frames(self) -> int:
        return int(round(self.conventional_rate * self.capture_time))

    @property
    def frame_ratio(self) -> float:
        return self.spc_frames / self.conv_frames

    @property
    def rate_ratio(self) -> float:
        return self.spc.frame_rate / self.conventional_rate


def demo_scene(emission_scale: float = 4000.0) -> rf.FluxScene:
    """Three emissive spheres with a 16x brightness range inside a unit box."""
    e = emission_scale
    return rf.FluxScene(
        primitives=[
            rf.Sphere(np.array([0.0, 0.0, 0.0]), 0.45, 14.0, e),
            rf.Sphere(np.array([0.45, 0.30, 0.20]), 0.18, 20.0, 4.0 * e),
            rf.Sphere(np.array([-0.45, -0.30, -0.15]), 0.22, 10.0, 0.25 * e),
        ],
        bounds=rf.Box(np.full(3, -1.0), np.full(3, 1.0)),
    )


def default_spec(workdir=None, **overrides) -> ExperimentSpec:
    """Laptop-scale defaults: 64x64 sensor, 16^3 field, 200x frame-rate gap."""
    tau = 2.5e-4
    train_cfg = TrainConfig(
        iterations=1500, batch_size=1024, n_samples=32,
        field_resolution=(16, 16, 16),
        bounds=rf.Box(np.full(3, -1.0), np.full(3, 1.0)),
        t_near=0.8, t_far=4.8, optimize_poses=False, cosine_decay=True,
    )
    spec = ExperimentSpec(
        scene=demo_scene(1.0 / tau),
        intrinsics=CameraIntrinsics(64, 64, 80.0),
        spc=SpcConfig(tau=tau, frame_rate=4000.0),
        conventional=ConventionalConfig(exposure=0.05, full_well=2000.0,
                                        read_noise_sigma=40.0, gain=4.0),
        conventional_rate=20.0,
        capture_time=0.5,
        train=train_cfg,
    )
    return replace(spec, **overrides) if overrides else spec


# ---------------------------------------------------------------------------
# Shared simulation pipeline
# ---------------------------------------------------------------------------


def render_flux_stack(spec: ExperimentSpec, trajectory: PoseTrajectory) -> np.ndarray:
    """Ground-truth flux for every SPC-rate pose, (frames, h, w)."""
    stack = np.empty((len(trajectory), spec.intrinsics.height, spec.intrinsics.width))
    for i, row in enumerate(trajectory.data):
        stack[i] = render_flux_image(spec.scene, row, spec.intrinsics,
                                     n_samples=spec.gt_samples).values
    return stack


def simulate_spc_store(flux_stack: np.ndarray, spec: ExperimentSpec, path,
                       light_scale: float = 1.0, seed: int = 0) -> fs.BinaryFrameStore:
    """Sample and pack one binary frame per flux frame, seeded per frame."""

    def frames():
        for i in range(flux_stack.shape[0]):
            yield sample_binary_frame(FluxImage(flux_stack[i] * light_scale), spec.spc,
                                      _rng.derive_seed(seed, "spc-frame", i))

    return fs.pack(frames(), path, spec.spc.frame_rate, spec.spc.tau)


def conventional_window_indices(spec: ExperimentSpec):
    """Which SPC-rate flux frames each conventional exposure integrates."""
    stride = spec.spc.frame_rate / spec.conventional_rate
    window = max(1, int(round(spec.conventional.exposure * spec.spc.frame_rate)))
    out = []
    for k in range(spec.conv_frames):
        start = int(round(k * stride))
        stop = min(start + window, spec.spc_frames)
        out.append((start, stop))
    return out


def simulate_conventional(flux_stack: np.ndarray, spec: ExperimentSpec,
                          light_scale: float = 1.0, seed: int = 0):
    """(intensity stack (F, h, w), center frame indices at SPC granularity).

    Motion blur enters through the flux average over each exposure window;
    noise follows the conventional sensor model on the integrated count.
    """
    windows = conventional_window_indices(spec)
    frames = np.empty((len(windows), flux_stack.shape[1], flux_stack.shape[2]))
    centers = []
    for k, (start, stop) in enumerate(windows):
        blurred = flux_stack[start:stop].mean(axis=0) * light_scale
        frames[k] = sample_conventional_frame(
            FluxImage(blurred), spec.conventional,
            _rng.derive_seed(seed, "conv-frame", k)).values
        centers.append((start + stop - 1) // 2)
    return frames, np.asarray(centers, dtype=np.int64)


def holdout_views(spec: ExperimentSpec):
    """Evenly spaced views along the training span (interpolation regime)."""
    t = spec.trajectory
    angles = t.start_deg + t.span_deg * (np.arange(spec.n_holdout) + 0.5) / spec.n_holdout
    rows = np.stack([
        circular_orbit(1, t.radius, spec.spc.frame_rate, height=t.height,
                       span_deg=0.0, start_deg=a).data[0]
        for a in angles
    ])
    poses = PoseTrajectory(rows, spec.spc.frame_rate)
    flux = [render_flux_image(spec.scene, r, spec.intrinsics,
                              n_samples=spec.gt_samples) for r in rows]
    return poses, flux


def _train_quanta(spec, store, poses, seed):
    cfg = replace(spec.train, seed=_rng.derive_seed(seed, "train-quanta"))
    return train(store, poses, spec.intrinsics, cfg)


def _train_conventional(spec, stack, poses, seed):
    cfg = replace(spec.train, seed=_rng.derive_seed(seed, "train-conv"))
    return train(stack, poses, spec.intrinsics, cfg)


# ---------------------------------------------------------------------------
# Blur-noise tradeoff
# ---------------------------------------------------------------------------


@dataclass
class TradeoffCurve:
    """Virtual-exposure length vs (sampling noise, blur) metrics.

    noise: RMS deviation of the virtual exposure from its own expectation
    (the window-averaged true detection rate), which for a static scene is
    the deviation from the static oracle and shrinks as 1/sqrt(n).
    blur: 10-90% edge-spread width of the exposure's edge profile in pixels.
    """

    n_values: np.ndarray
    noise: np.ndarray
    blur: np.ndarray


def edge_spread_width(profile: np.ndarray) -> float:
    """10-90% rise width (in samples) of a monotone-ish edge profile."""
    p = np.asarray(profile, dtype=np.float64)
    lo_level, hi_level = p.min(), p.max()
    if hi_level - lo_level <= 0:
        return 0.0
    norm = (p - lo_level) / (hi_level - lo_level)
    if norm[0] > norm[-1]:
        norm = norm[::-1]

    def crossing(level):
        above = np.nonzero(norm >= level)[0]
        i = above[0]
        if i == 0:
            return 0.0
        f = (level - norm[i - 1]) / (norm[i] - norm[i - 1])
        return i - 1 + f

    return float(crossing(0.9) - crossing(0.1))


def translating_edge_setup(intrinsics: CameraIntrinsics, n_frames: int,
                           v_px_per_frame: float, frame_rate: float,
                           depth: float = 3.0, density: float = 200.0,
                           emission: float = 4000.0):
    """A vertical wall edge whose image translates at a known pixel velocity."""
    scene = rf.FluxScene(
        primitives=[rf.Slab(axis=0, lo=0.0, hi=50.0, density=density,
                            emission=emission)],
        bounds=rf.Box(np.array([0.0, -6.0, 0.5]), np.array([50.0, 6.0, 1.5])),
    )
    dx = v_px_per_frame * depth / intrinsics.focal
    rows = np.empty((n_frames, 9))
    identity = np.eye(3)
    for i in range(n_frames):
        rows[i] = pose_mod.make_pose(
            np.array([(i - n_frames / 2) * dx, 0.0, 1.0 - depth]), identity)
    return scene, PoseTrajectory(rows, frame_rate)


def run_blur_noise_sweep(scene: rf.FluxScene, trajectory: PoseTrajectory,
                         spc: SpcConfig, intrinsics: CameraIntrinsics,
                         n_values, rng_seed: int, store_path) -> TradeoffCurve:
    """Sweep virtual-exposure length over a captured sequence.

    The noise metric compares each exposure to its exact expectation (the
    window-averaged Bernoulli rate); the blur metric measures the 10-90%
    edge-spread of the exposure's horizontal profile.
    """
    n_values = np.asarray(sorted(n_values), dtype=np.int64)
    n_frames = len(trajectory)
    if n_values[-1] > n_frames:
        raise InputError("virtual exposure window exceeds the captured sequence")

    rate_stack = np.empty((n_frames, intrinsics.height, intrinsics.width))
    for i, row in enumerate(trajectory.data):
        flux = render_flux_image(scene, row, intrinsics, n_samples=64)
        rate_stack[i] = bernoulli_parameter(flux.values, spc)

    def frames():
        for i in range(n_frames):
            p = rate_stack[i]
            u = _rng.philox(_rng.derive_seed(rng_seed, "tradeoff-frame", i),
                            "binary-frame").random(p.shape)
            yield fs.BinaryFrame((u < p).astype(np.uint8))

    store = fs.pack(frames(), store_path, spc.frame_rate, spc.tau)
    noise = np.empty(len(n_values), dtype=np.float64)
    blur = np.empty(len(n_values), dtype=np.float64)
    for j, n in enumerate(n_values):
        start = (n_frames - int(n)) // 2
        exposure = store.virtual_exposure(start, int(n))
        expectation = rate_stack[start:start + int(n)].mean(axis=0)
        noise[j] = float(np.sqrt(np.mean((exposure - expectation) ** 2)))
        blur[j] = edge_spread_width(exposure.mean(axis=0))
    store.close()
    return TradeoffCurve(n_values, noise, blur)


# ---------------------------------------------------------------------------
# Low-light sweep
# ---------------------------------------------------------------------------


@dataclass
class LowlightResult:
    stops: np.ndarray
    seeds: tuple
    quanta_psnr: np.ndarray        # (stops, seeds)
    conventional_psnr: np.ndarray  # (stops, seeds)
    quanta_ssim: np.ndarray
    conventional_ssim: np.ndarray
    metadata: dict
    panels: dict                   # stop -> (gt, quanta, conventional) uint8-ish images


def run_lowlight_sweep(spec: ExperimentSpec, workdir) -> LowlightResult:
    """Matched-capture-time comparison across a light-level sweep in stops."""
    os.makedirs(workdir, exist_ok=True)
    traj = spec.trajectory.build(spec.spc_frames, spec.spc.frame_rate)
    flux_stack = render_flux_stack(spec, traj)
    hold_poses, hold_flux = holdout_views(spec)
    stops = np.asarray(spec.stops, dtype=np.int64)

    darkest_scale = 2.0 ** (-float(stops.max()))
    lam_dark = (flux_stack * darkest_scale * spec.spc.quantum_scale
                + spec.spc.dark_count_rate) * spec.spc.tau
    positive = flux_stack[flux_stack > 0]
    metadata = {
        "photons_per_pixel_per_frame_darkest": float(lam_dark.mean()),
        "scene_contrast_ratio": float(positive.max() / positive.min()) if positive.size else 1.0,
        "sweep_stops": int(stops.max() - stops.min()),
        "capture_time_s": spec.capture_time,
        "frame_ratio": spec.frame_ratio,
    }

    shape = (len(stops), len(spec.seeds))
    q_psnr = np.empty(shape)
    c_psnr = np.empty(shape)
    q_ssim = np.empty(shape)
    c_ssim = np.empty(shape)
    panels = {}
    tone_scale = max(float(np.max(f.values)) for f in hold_flux)

    for si, stop in enumerate(stops):
        light = 2.0 ** (-float(stop))
        for gi, seed in enumerate(spec.seeds):
            store = simulate_spc_store(flux_stack, spec,
                                       os.path.join(workdir, f"spc_s{stop}_r{seed}.qrfbin"),
                                       light_scale=light, seed=seed)
            result_q = _train_quanta(spec, store, traj, seed)
            m = evaluate_holdout(result_q.field, hold_poses, hold_flux, spec.intrinsics,
                                 spec.spc, spec.train, flux_scale=light)
            q_psnr[si, gi], q_ssim[si, gi] = m.mean_psnr, m.mean_ssim
            store.close()

            conv_stack, centers = simulate_conventional(flux_stack, spec,
                                                        light_scale=light, seed=seed)
            conv_poses = PoseTrajectory(traj.data[centers], spec.conventional_rate)
            result_c = _train_conventional(spec, conv_stack, conv_poses, seed)
            m = evaluate_holdout(result_c.field, hold_poses, hold_flux, spec.intrinsics,
                                 spec.conventional, spec.train, flux_scale=light)
            c_psnr[si, gi], c_ssim[si, gi] = m.mean_psnr, m.mean_ssim

            if gi == 0:
                row = hold_poses.data[len(hold_poses) // 2]
                gt = rf.tonemap(hold_flux[len(hold_poses) // 2].values,
                                scale=tone_scale).image
                img_q = tr.render_image(result_q.field, row, spec.intrinsics,
                                        spec.train.n_samples, spec.train.t_near,
                                        spec.train.t_far)
                img_c = tr.render_image(result_c.field, row, spec.intrinsics,
                                        spec.train.n_samples, spec.train.t_near,
                                        spec.train.t_far)
                panels[int(stop)] = (
                    gt,
                    rf.tonemap(tr.recover_flux(img_q, spec.spc, light),
                               scale=tone_scale).image,
                    rf.tonemap(tr.recover_flux(img_c, spec.conventional, light),
                               scale=tone_scale).image,
                )
    return LowlightResult(stops, tuple(spec.seeds), q_psnr, c_psnr, q_ssim, c_ssim,
                          metadata, panels)


# ---------------------------------------------------------------------------
# View extrapolation sweep
# ---------------------------------------------------------------------------


@dataclass
class ExtrapolationResult:
    displacements_deg: np.ndarray
    seeds: tuple
    quanta_psnr: np.ndarray        # (displacements, seeds)
    conventional_psnr: np.ndarray
    metadata: dict
    panels: dict


def extrapolation_test_poses(spec: ExperimentSpec, displacements_deg):
    """Poses continuing past the end of the training arc, still facing the scene."""
    t = spec.trajectory
    end = t.start_deg + t.span_deg
    rows = np.stack([
        circular_orbit(1, t.radius, spec.spc.frame_rate, height=t.height,
                       span_deg=0.0, start_deg=end + d).data[0]
        for d in displacements_deg
    ])
    return PoseTrajectory(rows, spec.spc.frame_rate)


def run_extrapolation_sweep(spec: ExperimentSpec, workdir,
                            displacements_deg=(0.0, 5.0, 10.0, 20.0, 30.0, 45.0),
                            ) -> ExtrapolationResult:
    """PSNR vs angular displacement beyond the training arc, per camera."""
    os.makedirs(workdir, exist_ok=True)
    displacements = np.asarray(displacements_deg, dtype=np.float64)
    traj = spec.trajectory.build(spec.spc_frames, spec.spc.frame_rate)
    flux_stack = render_flux_stack(spec, traj)
    test_poses = extrapolation_test_poses(spec, displacements)
    test_flux = [render_flux_image(spec.scene, r, spec.intrinsics,
                                   n_samples=spec.gt_samples)
                 for r in test_poses.data]

    shape = (len(displacements), len(spec.seeds))
    q_psnr = np.empty(shape)
    c_psnr = np.empty(shape)
    panels = {}
    tone_scale = max(float(np.max(f.values)) for f in test_flux)

    for gi, seed in enumerate(spec.seeds):
        store = simulate_spc_store(flux_stack, spec,
                                   os.path.join(workdir, f"spc_ext_r{seed}.qrfbin"),
                                   seed=seed)
        result_q = _train_quanta(spec, store, traj, seed)
        store.close()
        conv_stack, centers = simulate_conventional(flux_stack, spec, seed=seed)
        conv_poses = PoseTrajectory(traj.data[centers], spec.conventional_rate)
        result_c = _train_conventional(spec, conv_stack, conv_poses, seed)

        for di, row in enumerate(test_poses.data):
            one_pose = PoseTrajectory(row[None], spec.spc.frame_rate)
            mq = evaluate_holdout(result_q.field, one_pose, [test_flux[di]],
                                  spec.intrinsics, spec.spc, spec.train)
            mc = evaluate_holdout(result_c.field, one_pose, [test_flux[di]],
                                  spec.intrinsics, spec.conventional, spec.train)
            q_psnr[di, gi] = mq.mean_psnr
            c_psnr[di, gi] = mc.mean_psnr
            if gi == 0 and di in (0, len(displacements) - 1):
                img_q = tr.render_image(result_q.field, row, spec.intrinsics,
                                        spec.train.n_samples, spec.train.t_near,
                                        spec.train.t_far)
                img_c = tr.render_image(result_c.field, row, spec.intrinsics,
                                        spec.train.n_samples, spec.train.t_near,
                                        spec.train.t_far)
                panels[float(displacements[di])] = (
                    rf.tonemap(test_flux[di].values, scale=tone_scale).image,
                    rf.tonemap(tr.recover_flux(img_q, spec.spc), scale=tone_scale).image,
                    rf.tonemap(tr.recover_flux(img_c, spec.conventional),
                               scale=tone_scale).image,
                )
    metadata = {
        "frame_ratio": spec.frame_ratio,
        "rate_ratio": spec.rate_ratio,
        "capture_time_s": spec.capture_time,
        "interpolation_psnr_quanta": float(q_psnr[0].mean()),
        "interpolation_psnr_conventional": float(c_psnr[0].mean()),
    }
    return ExtrapolationResult(displacements, tuple(spec.seeds), q_psnr, c_psnr,
                               metadata, panels)


# ---------------------------------------------------------------------------
# Reporting
# ---------------------------------------------------------------------------


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as f:
        writer = _csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)


def _panel_figure(panels: dict, titles, path, key_label) -> None:
    keys = sorted(panels)
    fig, axes = plt.subplots(len(keys), 3, figsize=(7.5, 2.5 * len(keys)),
                             squeeze=False)
    for r, key in enumerate(keys):
        for c in range(3):
            axes[r][c].imshow(panels[key][c], cmap="gray", vmin=0, vmax=1)
            axes[r][c].set_xticks([])
            axes[r][c].set_yticks([])
            if r == 0:
                axes[r][c].set_title(titles[c], fontsize=9)
        axes[r][0].set_ylabel(f"{key_label}={key}", fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def write_tradeoff_results(curve: TradeoffCurve, outdir) -> None:
    os.makedirs(outdir, exist_ok=True)
    _write_csv(os.path.join(outdir, "metrics.csv"),
               ["n_frames", "noise_rms", "blur_width_px"],
               [[int(n), f"{v:.6g}", f"{b:.6g}"]
                for n, v, b in zip(curve.n_values, curve.noise, curve.blur)])
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3))
    ax1.loglog(curve.n_values, curve.noise, "o-")
    ax1.set_xlabel("virtual exposure length n")
    ax1.set_ylabel("noise RMS")
    ax2.semilogx(curve.n_values, curve.blur, "s-", color="tab:red")
    ax2.set_xlabel("virtual exposure length n")
    ax2.set_ylabel("10-90% edge width (px)")
    fig.suptitle("blur-noise tradeoff of virtual exposures")
    fig.tight_layout()
    fig.savefig(os.path.join(outdir, "tradeoff.svg"))
    plt.close(fig)


def write_lowlight_results(result: LowlightResult, outdir) -> None:
    os.makedirs(outdir, exist_ok=True)
    rows = []
    for si, stop in enumerate(result.stops):
        for gi, seed in enumerate(result.seeds):
            rows.append([int(stop), int(seed), "quanta",
                         f"{result.quanta_psnr[si, gi]:.4f}",
                         f"{result.quanta_ssim[si, gi]:.4f}"])
            rows.append([int(stop), int(seed), "conventional",
                         f"{result.conventional_psnr[si, gi]:.4f}",
                         f"{result.conventional_ssim[si, gi]:.4f}"])
    _write_csv(os.path.join(outdir, "metrics.csv"),
               ["stop", "seed", "camera", "psnr_db", "ssim"], rows)
    with open(os.path.join(outdir, "metadata.csv"), "w", newline="") as f:
        writer = _csv.writer(f)
        writer.writerow(["key", "value"])
        for k, v in result.metadata.items():
            writer.writerow([k, v])
    fig, ax = plt.subplots(figsize=(5, 3.4))
    ax.errorbar(result.stops, result.quanta_psnr.mean(axis=1),
                yerr=result.quanta_psnr.std(axis=1), marker="o", label="single photon")
    ax.errorbar(result.stops, result.conventional_psnr.mean(axis=1),
                yerr=result.conventional_psnr.std(axis=1), marker="s",
                label="conventional")
    ax.set_xlabel("light reduction (stops)")
    ax.set_ylabel("holdout PSNR (dB)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(os.path.join(outdir, "lowlight.svg"))
    plt.close(fig)
    _panel_figure(result.panels, ("ground truth", "single photon", "conventional"),
                  os.path.join(outdir, "panels.png"), "stop")


def write_extrapolation_results(result: ExtrapolationResult, outdir) -> None:
    os.makedirs(outdir, exist_ok=True)
    rows = []
    for di, disp in enumerate(result.displacements_deg):
        for gi, seed in enumerate(result.seeds):
            rows.append([f"{disp:g}", int(seed), "quanta",
                         f"{result.quanta_psnr[di, gi]:.4f}"])
            rows.append([f"{disp:g}", int(seed), "conventional",
                         f"{result.conventional_psnr[di, gi]:.4f}"])
    _write_csv(os.path.join(outdir, "metrics.csv"),
               ["displacement_deg", "seed", "camera", "psnr_db"], rows)
    fig, ax = plt.subplots(figsize=(5, 3.4))
    ax.plot(result.displacements_deg, result.quanta_psnr.mean(axis=1), "o-",
            label="single photon")
    ax.plot(result.displacements_deg, result.conventional_psnr.mean(axis=1), "s-",
            label="conventional")
    ax.set_xlabel("angular displacement from training arc (deg)")
    ax.set_ylabel("PSNR (dB)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(os.path.join(outdir, "extrapolation.svg"))
    plt.close(fig)
    _panel_figure(result.panels, ("ground truth", "single photon", "conventional"),
                  os.path.join(outdir, "panels.png"), "deg")
