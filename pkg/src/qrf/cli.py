"""Command-line entry point.

Subcommands: simulate, pack, inspect, expose, poses, train, render, bench.
Every run writes a manifest (config hash, input digests, seeds, version,
timestamps) next to its outputs; re-running with the same inputs and seed
reproduces the outputs bit-exactly in single-threaded mode.

Exit codes: 0 ok, 2 usage, 3 config, 4 I/O, 5 numerical failure.
"""

from __future__ import annotations

import argparse
import csv as _csv
import datetime
import json
import multiprocessing
import os
import sys

import numpy as np

from . import __version__
from . import bench as bench_mod
from . import config as config_mod
from . import frame_store as fs
from . import photon_sim as ps
from . import pose as pose_mod
from . import radiance_field as rf
from . import rng as _rng
from . import trainer as tr
from .errors import ConfigError, InputError, NumericalError, StoreError

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_IO = 4
EXIT_NUMERICAL = 5

GIBIT = float(1 << 30)


def _save_png(path, image) -> None:
    import matplotlib.image

    matplotlib.image.imsave(path, np.clip(image, 0.0, 1.0), cmap="gray",
                            vmin=0.0, vmax=1.0)


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------


def write_manifest(out_path, command: str, args: dict, seed, inputs,
                   config_path=None) -> str:
    """JSON manifest describing one run; returns its path.

    ``out_path`` is the output directory (manifest.json inside) or an output
    file (manifest written alongside as <file>.manifest.json).
    """
    manifest = {
        "tool": "qrf",
        "version": __version__,
        "command": command,
        "args": {k: str(v) for k, v in args.items() if v is not None},
        "seed": seed,
        "config_sha256": config_mod.sha256_file(config_path) if config_path else None,
        "input_digests": {str(p): config_mod.sha256_file(p) for p in inputs
                          if p is not None and os.path.exists(str(p))},
        "timestamp_utc": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }
    if os.path.isdir(out_path):
        path = os.path.join(out_path, "manifest.json")
    else:
        path = str(out_path) + ".manifest.json"
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def _resolve_threads(value) -> int:
    if value is not None:
        return max(1, int(value))
    env = os.environ.get("QRF_THREADS")
    if env:
        return max(1, int(env))
    return multiprocessing.cpu_count()


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def _simulate_chunk(task):
    """Render flux and sample binary frames for one chunk (worker-safe)."""
    scene, traj_rows, intrinsics, spc, seed, start, count, gt_samples = task
    packed = []
    for i in range(start, start + count):
        flux = ps.render_flux_image(scene, traj_rows[i], intrinsics,
                                    n_samples=gt_samples)
        frame = ps.sample_binary_frame(flux, spc, _rng.derive_seed(seed, "spc-frame", i))
        packed.append(fs.pack_frame_bits(frame.bits).tobytes())
    return start, packed


def cmd_simulate(args) -> int:
    cfg = config_mod.load_toml(args.config)
    scene = config_mod.build_scene(cfg)
    intrinsics = config_mod.build_intrinsics(cfg)
    traj_spec, frames = config_mod.build_trajectory(cfg)
    seed = args.seed
    threads = _resolve_threads(args.threads)

    if args.camera == "spc":
        spc = config_mod.build_spc(cfg)
        if frames is None:
            raise ConfigError("[trajectory] must declare 'frames' for simulation")
        trajectory = traj_spec.build(frames, spc.frame_rate)
        if len(trajectory) != frames:
            raise InputError("trajectory length does not match requested frame count")
        tasks = []
        chunk = max(1, frames // max(threads * 4, 1))
        for start in range(0, frames, chunk):
            count = min(chunk, frames - start)
            tasks.append((scene, trajectory.data, intrinsics, spc, seed, start,
                          count, args.gt_samples))
        results = {}
        if threads > 1 and len(tasks) > 1:
            with multiprocessing.Pool(threads) as pool:
                for start, packed in pool.imap_unordered(_simulate_chunk, tasks):
                    results[start] = packed
        else:
            for task in tasks:
                start, packed = _simulate_chunk(task)
                results[start] = packed
        with open(args.out, "wb") as f:
            fs._write_header(f, intrinsics.width, intrinsics.height, frames,
                             spc.frame_rate, spc.tau)
            for start in sorted(results):
                for blob in results[start]:
                    f.write(blob)
        store = fs.BinaryFrameStore.open(args.out)
        print(f"wrote {store.frame_count} binary frames "
              f"({store.payload_bytes} payload bytes) to {args.out}")
        store.close()
    else:
        conventional, rate = config_mod.build_conventional(cfg)
        if frames is None:
            raise ConfigError("[trajectory] must declare 'frames' for simulation")
        trajectory = traj_spec.build(frames, rate)
        stack = np.empty((frames, intrinsics.height, intrinsics.width))
        for i, row in enumerate(trajectory.data):
            flux = ps.render_flux_image(scene, row, intrinsics,
                                        n_samples=args.gt_samples)
            stack[i] = ps.sample_conventional_frame(
                flux, conventional, _rng.derive_seed(seed, "conv-frame", i)).values
        np.save(args.out, stack.astype(np.float32))
        print(f"wrote {frames} conventional frames to {args.out}")

    if args.poses_out:
        pose_mod.save_trajectory_csv(trajectory, args.poses_out)
    write_manifest(args.out, "simulate", vars(args), seed, [args.config],
                   config_path=args.config)
    return EXIT_OK


# ---------------------------------------------------------------------------
# pack / inspect / expose
# ---------------------------------------------------------------------------


def cmd_pack(args) -> int:
    bits = np.load(args.bits)
    if bits.ndim != 3:
        raise InputError("expected a (frames, height, width) bit array")
    store = fs.pack((bits[i] for i in range(bits.shape[0])), args.out,
                    args.frame_rate, args.tau)
    print(f"packed {store.frame_count} frames of {store.width}x{store.height} "
          f"into {store.payload_bytes} payload bytes")
    store.close()
    write_manifest(args.out, "pack", vars(args), None, [args.bits])
    return EXIT_OK


def cmd_inspect(args) -> int:
    store = fs.BinaryFrameStore.open(args.store)
    rate = args.bandwidth_at if args.bandwidth_at else store.frame_rate
    unpacked_gbps = store.width * store.height * rate / GIBIT
    packed_gbps = unpacked_gbps / 8.0
    print(f"store:            {args.store}")
    print(f"dimensions:       {store.width} x {store.height}")
    print(f"frames:           {store.frame_count}")
    print(f"frame rate:       {store.frame_rate:g} Hz")
    print(f"tau:              {store.tau:g} s")
    print(f"duration:         {store.duration_s:g} s")
    print(f"payload bytes:    {store.payload_bytes}")
    print(f"bytes per frame:  {store.frame_bytes} "
          f"(1/8 of {store.width * store.height} unpacked)")
    if unpacked_gbps >= 0.1:
        print(f"bandwidth @ {rate:g} Hz: {unpacked_gbps:.1f} Gbps unpacked-equivalent, "
              f"{packed_gbps:.2f} Gbps packed")
    else:
        print(f"bandwidth @ {rate:g} Hz: {unpacked_gbps * 1024:.2f} Mbps "
              f"unpacked-equivalent, {packed_gbps * 1024:.2f} Mbps packed")
    if args.bench_reads:
        rps = store.read_throughput(args.bench_reads)
        print(f"random reads:     {rps / 1e6:.2f} Mpixel/s over {args.bench_reads} reads")
    store.close()
    return EXIT_OK


def cmd_expose(args) -> int:
    store = fs.BinaryFrameStore.open(args.store)
    image = store.virtual_exposure(args.start, args.n)
    store.close()
    ps.write_flux_image(ps.FluxImage(image), args.out)
    if args.png:
        _save_png(args.png, image)
    print(f"virtual exposure of {args.n} frames from {args.start} -> {args.out}")
    write_manifest(args.out, "expose", vars(args), None, [args.store])
    return EXIT_OK


# ---------------------------------------------------------------------------
# poses
# ---------------------------------------------------------------------------


def cmd_poses(args) -> int:
    if args.pose_command == "smooth":
        traj = pose_mod.load_trajectory_csv(args.infile, frame_rate=args.frame_rate)
        spec = pose_mod.LowpassSpec(
            args.cutoff,
            0.0 if args.brickwall else args.transition,
            pad_mode="none" if args.brickwall else "mirror")
        out = pose_mod.fourier_smooth(traj, spec)
        pose_mod.save_trajectory_csv(out, args.out)
    elif args.pose_command == "interp":
        idx, rows = pose_mod.load_anchors_csv(args.anchors)
        out = pose_mod.interpolate_poses(idx, rows, args.frame_rate or 1.0)
        pose_mod.save_trajectory_csv(out, args.out)
    elif args.pose_command == "perturb":
        traj = pose_mod.load_trajectory_csv(args.infile, frame_rate=args.frame_rate)
        band = tuple(float(v) for v in args.band.split(",")) if args.band else (0.0, np.inf)
        out = pose_mod.perturb_trajectory(traj, pose_mod.NoiseSpec(args.sigma, band),
                                          args.seed)
        pose_mod.save_trajectory_csv(out, args.out)
    else:  # pragma: no cover - argparse enforces choices
        raise ConfigError(f"unknown poses subcommand {args.pose_command!r}")
    print(f"wrote {args.out}")
    write_manifest(args.out, f"poses {args.pose_command}", vars(args),
                   getattr(args, "seed", None),
                   [getattr(args, "infile", None), getattr(args, "anchors", None)])
    return EXIT_OK


# ---------------------------------------------------------------------------
# train / render
# ---------------------------------------------------------------------------


def _load_observations(path):
    if str(path).endswith(".npy"):
        return np.load(path)
    return fs.BinaryFrameStore.open(path)


def cmd_train(args) -> int:
    cfg = config_mod.load_toml(args.config)
    train_cfg = config_mod.build_train(cfg)
    intrinsics = config_mod.build_intrinsics(cfg)
    os.makedirs(args.out, exist_ok=True)
    train_cfg.checkpoint_dir = args.out
    if args.seed is not None:
        train_cfg.seed = args.seed

    observations = _load_observations(args.frames)
    frame_rate = (observations.frame_rate
                  if isinstance(observations, fs.BinaryFrameStore)
                  else config_mod.build_conventional(cfg)[1])
    poses = pose_mod.load_trajectory_csv(args.poses, frame_rate=frame_rate)

    result = tr.train(observations, poses, intrinsics, train_cfg)
    if isinstance(observations, fs.BinaryFrameStore):
        observations.close()

    result.field.save(os.path.join(args.out, "field.qrffld"))
    pose_mod.save_trajectory_csv(result.poses, os.path.join(args.out, "poses.csv"))
    with open(os.path.join(args.out, "loss.csv"), "w", newline="") as f:
        writer = _csv.writer(f)
        writer.writerow(["iteration", "photometric", "regularizer", "total"])
        for rec in result.history:
            writer.writerow([rec.iteration, repr(rec.photometric),
                             repr(rec.regularizer), repr(rec.total)])
    for tag, idx in (("first", 0), ("mid", len(result.poses) // 2),
                     ("last", len(result.poses) - 1)):
        img = tr.render_image(result.field, result.poses.data[idx], intrinsics,
                              train_cfg.n_samples, train_cfg.t_near, train_cfg.t_far)
        _save_png(os.path.join(args.out, f"validation_{tag}.png"), img)
    write_manifest(args.out, "train", vars(args), train_cfg.seed,
                   [args.frames, args.poses, args.config], config_path=args.config)
    print(f"trained {train_cfg.iterations} iterations; "
          f"final loss {result.history[-1].total:.6g}; outputs in {args.out}")
    return EXIT_OK


def cmd_render(args) -> int:
    field = rf.VoxelField.load(args.checkpoint)
    poses = pose_mod.load_trajectory_csv(args.poses, frame_rate=args.frame_rate or 1.0)
    if args.config:
        cfg = config_mod.load_toml(args.config)
        train_cfg = config_mod.build_train(cfg)
        intrinsics = config_mod.build_intrinsics(cfg)
    else:
        train_cfg = tr.TrainConfig()
        intrinsics = ps.CameraIntrinsics(args.width, args.height, args.focal)
    os.makedirs(args.out, exist_ok=True)
    for i, row in enumerate(poses.data):
        values = tr.render_image(field, row, intrinsics, train_cfg.n_samples,
                                 train_cfg.t_near, train_cfg.t_far)
        _save_png(os.path.join(args.out, f"view_{i:04d}.png"), values)
        if args.tau:
            flux = rf.invert_flux(np.clip(values, 0.0, 1.0), args.tau).flux
            ps.write_flux_image(ps.FluxImage(flux),
                                os.path.join(args.out, f"view_{i:04d}.qrfflux"))
            _save_png(os.path.join(args.out, f"view_{i:04d}_tonemapped.png"),
                      rf.tonemap(flux).image)
    write_manifest(args.out, "render", vars(args), None,
                   [args.checkpoint, args.poses, args.config],
                   config_path=args.config)
    print(f"rendered {len(poses)} views into {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------


def cmd_bench(args) -> int:
    cfg = config_mod.load_toml(args.spec)
    table = cfg.get("bench", {})
    kind = table.get("kind", "lowlight")
    os.makedirs(args.out, exist_ok=True)
    workdir = os.path.join(args.out, "work")

    if kind == "lowlight":
        spec = config_mod.build_experiment(cfg)
        result = bench_mod.run_lowlight_sweep(spec, workdir)
        bench_mod.write_lowlight_results(result, args.out)
    elif kind == "extrapolation":
        spec = config_mod.build_experiment(cfg)
        displacements = table.get("displacements_deg", (0.0, 5.0, 10.0, 20.0, 30.0, 45.0))
        result = bench_mod.run_extrapolation_sweep(spec, workdir,
                                                   displacements_deg=displacements)
        bench_mod.write_extrapolation_results(result, args.out)
    elif kind == "blur_noise":
        spc = config_mod.build_spc(cfg)
        intrinsics = config_mod.build_intrinsics(cfg)
        n_values = table.get("n_values", (1, 4, 16, 64, 256))
        velocity = float(table.get("edge_velocity_px", 0.25))
        frames = int(table.get("edge_frames", 2048))
        scene, trajectory = bench_mod.translating_edge_setup(
            intrinsics, frames, velocity, spc.frame_rate)
        os.makedirs(workdir, exist_ok=True)
        curve = bench_mod.run_blur_noise_sweep(
            scene, trajectory, spc, intrinsics, n_values,
            rng_seed=int(table.get("seeds", [0])[0]),
            store_path=os.path.join(workdir, "edge.qrfbin"))
        bench_mod.write_tradeoff_results(curve, args.out)
    else:
        raise ConfigError(f"unknown bench kind {kind!r}")
    write_manifest(args.out, "bench", vars(args),
                   table.get("seeds", [0]), [args.spec], config_path=args.spec)
    print(f"bench '{kind}' results in {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser and dispatch
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qrf",
        description="Quanta radiance field toolkit: simulate single-photon "
                    "captures, store them bit-packed, reconstruct fields and poses.")
    parser.add_argument("--version", action="version", version=f"qrf {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="render a scene and sample camera frames")
    p.add_argument("--config", required=True, help="TOML run configuration")
    p.add_argument("--out", required=True, help="output store (.qrfbin) or stack (.npy)")
    p.add_argument("--camera", choices=("spc", "conventional"), default="spc")
    p.add_argument("--seed", type=int, default=0, help="root seed for all sampling")
    p.add_argument("--threads", type=int, default=None,
                   help="worker processes (default: machine parallelism; "
                        "results are identical for any value)")
    p.add_argument("--gt-samples", type=int, default=48,
                   help="quadrature samples per ray for ground-truth rendering")
    p.add_argument("--poses-out", default=None, help="also write the trajectory CSV")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("pack", help="bit-pack a (frames, h, w) .npy bit array")
    p.add_argument("--bits", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--frame-rate", type=float, required=True, dest="frame_rate")
    p.add_argument("--tau", type=float, required=True)
    p.set_defaults(func=cmd_pack)

    p = sub.add_parser("inspect", help="print a store's header and size report")
    p.add_argument("store")
    p.add_argument("--bandwidth-at", type=float, default=None, dest="bandwidth_at",
                   help="report unpacked-equivalent bandwidth at this frame rate")
    p.add_argument("--bench-reads", type=int, default=0, dest="bench_reads",
                   help="also time this many random single-pixel reads")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("expose", help="average n consecutive frames (virtual exposure)")
    p.add_argument("--store", required=True)
    p.add_argument("--start", type=int, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", required=True, help="output flux raster (.qrfflux)")
    p.add_argument("--png", default=None, help="also write an 8-bit preview")
    p.set_defaults(func=cmd_expose)

    p = sub.add_parser("poses", help="smooth, interpolate, or perturb trajectories")
    psub = p.add_subparsers(dest="pose_command", required=True)
    sp = psub.add_parser("smooth", help="Fourier-lowpass a trajectory CSV")
    sp.add_argument("--in", dest="infile", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--cutoff", type=float, default=pose_mod.DEFAULT_CUTOFF_HZ)
    sp.add_argument("--transition", type=float, default=None,
                    help="raised-cosine width in Hz (default 10%% of cutoff)")
    sp.add_argument("--brickwall", action="store_true",
                    help="hard cutoff, circular transform (no padding)")
    sp.add_argument("--frame-rate", type=float, default=None, dest="frame_rate")
    sp.set_defaults(func=cmd_poses)
    ip = psub.add_parser("interp", help="densify sparse anchors to per-frame poses")
    ip.add_argument("--anchors", required=True)
    ip.add_argument("--out", required=True)
    ip.add_argument("--frame-rate", type=float, default=None, dest="frame_rate")
    ip.set_defaults(func=cmd_poses)
    pp = psub.add_parser("perturb", help="add band-limited Gaussian pose noise")
    pp.add_argument("--in", dest="infile", required=True)
    pp.add_argument("--out", required=True)
    pp.add_argument("--sigma", type=float, required=True)
    pp.add_argument("--band", default=None, help="LO,HI frequency band in Hz")
    pp.add_argument("--seed", type=int, default=0)
    pp.add_argument("--frame-rate", type=float, default=None, dest="frame_rate")
    pp.set_defaults(func=cmd_poses)

    p = sub.add_parser("train", help="optimize a field (and poses) against frames")
    p.add_argument("--frames", required=True, help=".qrfbin store or intensity .npy")
    p.add_argument("--poses", required=True, help="initial trajectory CSV")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None, help="override [train] seed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render novel views from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--poses", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--tau", type=float, default=None,
                   help="invert the binary response at this tau to export flux")
    p.add_argument("--frame-rate", type=float, default=None, dest="frame_rate")
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--focal", type=float, default=80.0)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("bench", help="run a scripted experiment from a spec file")
    p.add_argument("spec", help="TOML experiment spec")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)
    return parser


def dispatch(argv) -> int:
    """Parse argv, run the subcommand, and map failures to exit codes."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code else EXIT_OK
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"qrf: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except InputError as e:
        print(f"qrf: invalid input: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as e:
        print(f"qrf: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (StoreError, FileNotFoundError, IsADirectoryError, PermissionError, OSError) as e:
        print(f"qrf: i/o error: {e}", file=sys.stderr)
        return EXIT_IO


def main(argv=None) -> int:
    return dispatch(sys.argv[1:] if argv is None else argv)


if __name__ == "__main__":
    sys.exit(main())
