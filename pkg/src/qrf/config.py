"""TOML run configuration: one human-readable file drives simulate/train/bench.

Sections map one-to-one onto the library's config dataclasses; unknown keys
are rejected so typos fail fast instead of silently using defaults.
"""

from __future__ import annotations

import hashlib

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import radiance_field as rf
from .bench import ExperimentSpec, TrajectorySpec, demo_scene
from .errors import ConfigError
from .photon_sim import CameraIntrinsics, ConventionalConfig, SpcConfig
from .pose import LowpassSpec
from .trainer import TrainConfig


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def load_toml(path) -> dict:
    try:
        with open(path, "rb") as f:
            return tomllib.load(f)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: malformed TOML: {e}") from e


def _check_keys(table: dict, allowed, where: str) -> None:
    unknown = set(table) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in [{where}]: {sorted(unknown)}")


def _require(table: dict, key: str, where: str):
    if key not in table:
        raise ConfigError(f"missing required key '{key}' in [{where}]")
    return table[key]


def build_scene(cfg: dict) -> rf.FluxScene:
    table = cfg.get("scene")
    if table is None:
        return demo_scene()
    _check_keys(table, {"bounds_lo", "bounds_hi", "sphere", "slab"}, "scene")
    primitives = []
    for s in table.get("sphere", []):
        _check_keys(s, {"center", "radius", "density", "emission"}, "scene.sphere")
        primitives.append(rf.Sphere(np.asarray(_require(s, "center", "scene.sphere")),
                                    float(_require(s, "radius", "scene.sphere")),
                                    float(_require(s, "density", "scene.sphere")),
                                    float(_require(s, "emission", "scene.sphere"))))
    for s in table.get("slab", []):
        _check_keys(s, {"axis", "lo", "hi", "density", "emission"}, "scene.slab")
        primitives.append(rf.Slab(int(_require(s, "axis", "scene.slab")),
                                  float(_require(s, "lo", "scene.slab")),
                                  float(_require(s, "hi", "scene.slab")),
                                  float(_require(s, "density", "scene.slab")),
                                  float(_require(s, "emission", "scene.slab"))))
    if not primitives:
        raise ConfigError("[scene] declares no primitives")
    try:
        bounds = rf.Box(np.asarray(table.get("bounds_lo", [-1.0, -1.0, -1.0])),
                        np.asarray(table.get("bounds_hi", [1.0, 1.0, 1.0])))
        return rf.FluxScene(primitives, bounds)
    except Exception as e:
        raise ConfigError(f"invalid [scene]: {e}") from e


def build_intrinsics(cfg: dict) -> CameraIntrinsics:
    table = cfg.get("camera", {})
    _check_keys(table, {"width", "height", "focal", "principal_point"}, "camera")
    try:
        return CameraIntrinsics(
            int(table.get("width", 64)), int(table.get("height", 64)),
            float(table.get("focal", 80.0)),
            tuple(table["principal_point"]) if "principal_point" in table else None)
    except Exception as e:
        raise ConfigError(f"invalid [camera]: {e}") from e


def build_spc(cfg: dict) -> SpcConfig:
    table = cfg.get("spc", {})
    _check_keys(table, {"tau", "frame_rate", "quantum_scale", "dark_count_rate"}, "spc")
    try:
        return SpcConfig(float(table.get("tau", 2.5e-4)),
                         float(table.get("frame_rate", 4000.0)),
                         float(table.get("quantum_scale", 1.0)),
                         float(table.get("dark_count_rate", 0.0)))
    except Exception as e:
        raise ConfigError(f"invalid [spc]: {e}") from e


def build_conventional(cfg: dict):
    """(ConventionalConfig, frame rate)."""
    table = cfg.get("conventional", {})
    _check_keys(table, {"exposure", "full_well", "read_noise_sigma", "gain",
                        "response_gamma", "rate"}, "conventional")
    try:
        conf = ConventionalConfig(float(table.get("exposure", 0.05)),
                                  float(table.get("full_well", 2000.0)),
                                  float(table.get("read_noise_sigma", 40.0)),
                                  float(table.get("gain", 4.0)),
                                  float(table.get("response_gamma", 1.0 / 2.2)))
        return conf, float(table.get("rate", 20.0))
    except Exception as e:
        raise ConfigError(f"invalid [conventional]: {e}") from e


def build_trajectory(cfg: dict):
    """(TrajectorySpec, frame count or None)."""
    table = cfg.get("trajectory", {})
    _check_keys(table, {"kind", "frames", "radius", "span_deg", "start_deg",
                        "height", "elev_amplitude", "n_periods"}, "trajectory")
    try:
        spec = TrajectorySpec(
            kind=table.get("kind", "circular"),
            radius=float(table.get("radius", 2.8)),
            span_deg=float(table.get("span_deg", 140.0)),
            start_deg=float(table.get("start_deg", 200.0)),
            height=float(table.get("height", 0.0)),
            elev_amplitude=float(table.get("elev_amplitude", 0.3)),
            n_periods=int(table.get("n_periods", 8)))
    except Exception as e:
        raise ConfigError(f"invalid [trajectory]: {e}") from e
    frames = table.get("frames")
    return spec, (int(frames) if frames is not None else None)


_TRAIN_KEYS = {
    "iterations", "batch_size", "field_lr", "pose_lr", "beta1", "beta2", "eps",
    "lambda", "cutoff_hz", "transition_hz", "n_samples", "seed",
    "pose_opt_start_iteration", "optimize_poses", "resolution", "bounds_lo",
    "bounds_hi", "t_near", "t_far", "jitter", "cosine_decay", "log_every",
    "checkpoint_every",
}


def build_train(cfg: dict) -> TrainConfig:
    table = cfg.get("train", {})
    _check_keys(table, _TRAIN_KEYS, "train")
    try:
        lowpass = LowpassSpec(float(table.get("cutoff_hz", 500.0)),
                              (float(table["transition_hz"])
                               if "transition_hz" in table else None))
        return TrainConfig(
            iterations=int(table.get("iterations", 2000)),
            batch_size=int(table.get("batch_size", 1024)),
            field_lr=float(table.get("field_lr", 1e-2)),
            pose_lr=float(table.get("pose_lr", 1e-4)),
            beta1=float(table.get("beta1", 0.9)),
            beta2=float(table.get("beta2", 0.99)),
            eps=float(table.get("eps", 1e-15)),
            smoothing_lambda=float(table.get("lambda", 0.1)),
            lowpass=lowpass,
            n_samples=int(table.get("n_samples", 32)),
            seed=int(table.get("seed", 0)),
            pose_opt_start_iteration=(int(table["pose_opt_start_iteration"])
                                      if "pose_opt_start_iteration" in table else None),
            optimize_poses=bool(table.get("optimize_poses", True)),
            field_resolution=tuple(table.get("resolution", (16, 16, 16))),
            bounds=rf.Box(np.asarray(table.get("bounds_lo", [-1.0, -1.0, -1.0])),
                          np.asarray(table.get("bounds_hi", [1.0, 1.0, 1.0]))),
            t_near=float(table.get("t_near", 0.8)),
            t_far=float(table.get("t_far", 4.8)),
            jitter_samples=bool(table.get("jitter", True)),
            cosine_decay=bool(table.get("cosine_decay", False)),
            log_every=int(table.get("log_every", 50)),
            checkpoint_every=int(table.get("checkpoint_every", 0)),
        )
    except ConfigError:
        raise
    except Exception as e:
        raise ConfigError(f"invalid [train]: {e}") from e


_BENCH_KEYS = {"kind", "capture_time", "stops", "seeds", "displacements_deg",
               "n_values", "edge_velocity_px", "edge_frames", "n_holdout",
               "gt_samples"}


def build_experiment(cfg: dict) -> ExperimentSpec:
    table = cfg.get("bench", {})
    _check_keys(table, _BENCH_KEYS, "bench")
    conventional, rate = build_conventional(cfg)
    trajectory, _ = build_trajectory(cfg)
    try:
        return ExperimentSpec(
            scene=build_scene(cfg),
            intrinsics=build_intrinsics(cfg),
            spc=build_spc(cfg),
            conventional=conventional,
            conventional_rate=rate,
            capture_time=float(table.get("capture_time", 0.5)),
            trajectory=trajectory,
            stops=tuple(table.get("stops", (0, 1, 2, 3, 4, 5))),
            seeds=tuple(table.get("seeds", (0, 1, 2))),
            train=build_train(cfg),
            n_holdout=int(table.get("n_holdout", 5)),
            gt_samples=int(table.get("gt_samples", 48)),
        )
    except ConfigError:
        raise
    except Exception as e:
        raise ConfigError(f"invalid bench spec: {e}") from e
