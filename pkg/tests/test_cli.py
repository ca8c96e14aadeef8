import json
import os
import struct

import numpy as np
import pytest

from qrf import cli, frame_store as fs, pose
from qrf import photon_sim as ps


def run(capsys, *argv):
    code = cli.dispatch(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


SCENE_TOML = """
[scene]
[[scene.sphere]]
center = [0.0, 0.0, 0.0]
radius = 0.45
density = 14.0
emission = 4000.0

[camera]
width = 16
height = 16
focal = 20.0

[spc]
tau = 1e-3
frame_rate = 1000.0

[conventional]
exposure = 0.05
full_well = 2000.0
read_noise_sigma = 40.0
gain = 4.0
rate = 20.0

[trajectory]
kind = "circular"
frames = 50
radius = 2.8
span_deg = 90.0

[train]
iterations = 40
batch_size = 128
n_samples = 16
resolution = [6, 6, 6]
log_every = 10
checkpoint_every = 20
"""


@pytest.fixture()
def config_path(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text(SCENE_TOML)
    return path


# ---------------------------------------------------------------------------
# Exit codes and help
# ---------------------------------------------------------------------------


def test_help_lists_every_subcommand(capsys):
    code, out, _ = run(capsys, "--help")
    assert code == 0
    for sub in ("simulate", "pack", "inspect", "expose", "poses", "train",
                "render", "bench"):
        assert sub in out


def test_unknown_flag_exits_2(capsys):
    code, _, _ = run(capsys, "inspect", "--no-such-flag", "x")
    assert code == 2


def test_unknown_subcommand_exits_2(capsys):
    code, _, _ = run(capsys, "frobnicate")
    assert code == 2


def test_missing_file_exits_4(capsys):
    code, _, err = run(capsys, "inspect", "/does/not/exist.qrfbin")
    assert code == 4
    assert "i/o error" in err


def test_malformed_config_exits_3(capsys, tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("this is not [valid toml\n=")
    code, _, err = run(capsys, "simulate", "--config", str(bad),
                       "--out", str(tmp_path / "o.qrfbin"))
    assert code == 3
    assert "config error" in err


def test_unknown_config_key_exits_3(capsys, tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("[spc]\nnot_a_key = 1\n")
    code, _, err = run(capsys, "simulate", "--config", str(bad),
                       "--out", str(tmp_path / "o.qrfbin"))
    assert code == 3


# ---------------------------------------------------------------------------
# inspect
# ---------------------------------------------------------------------------


def make_sparse_store(path, width, height, frames, rate, tau):
    """Header plus a sparse (hole-backed) payload of the correct size."""
    payload = frames * height * fs.bytes_per_row(width)
    with open(path, "wb") as f:
        f.write(fs.HEADER_STRUCT.pack(fs.STORE_MAGIC, fs.STORE_VERSION,
                                      width, height, frames, rate, tau))
        f.seek(fs.HEADER_SIZE + payload - 1)
        f.write(b"\x00")


def test_inspect_reports_duration_of_high_speed_capture(capsys, tmp_path):
    # 320k frames of 512x512 at 40 kHz is an 8 s capture; the payload is
    # sparse on disk so the 10 GB store costs nothing to fabricate.
    path = tmp_path / "big.qrfbin"
    make_sparse_store(path, 512, 512, 320_000, 40_000.0, 2.5e-5)
    code, out, _ = run(capsys, "inspect", str(path))
    assert code == 0
    assert "512 x 512" in out
    assert "320000" in out
    assert "duration:         8 s" in out


def test_inspect_bandwidth_at_100khz(capsys, tmp_path):
    # 512x512 at 100 kHz is 24.4 Gbps of unpacked binary pixels.
    path = tmp_path / "bw.qrfbin"
    make_sparse_store(path, 512, 512, 10, 40_000.0, 2.5e-5)
    code, out, _ = run(capsys, "inspect", str(path), "--bandwidth-at", "100000")
    assert code == 0
    assert "24.4 Gbps unpacked-equivalent" in out


def test_pack_then_inspect_payload_arithmetic(capsys, tmp_path):
    rng = np.random.default_rng(0)
    bits = (rng.random((7, 10, 21)) < 0.5).astype(np.uint8)
    np.save(tmp_path / "bits.npy", bits)
    code, out, _ = run(capsys, "pack", "--bits", str(tmp_path / "bits.npy"),
                       "--out", str(tmp_path / "s.qrfbin"),
                       "--frame-rate", "1000", "--tau", "1e-3")
    assert code == 0
    code, out, _ = run(capsys, "inspect", str(tmp_path / "s.qrfbin"))
    assert code == 0
    expected_payload = 7 * 10 * fs.bytes_per_row(21)
    assert f"payload bytes:    {expected_payload}" in out
    store = fs.BinaryFrameStore.open(tmp_path / "s.qrfbin")
    assert np.array_equal(store.unpack_all(), bits)
    store.close()


# ---------------------------------------------------------------------------
# simulate / expose
# ---------------------------------------------------------------------------


def test_simulate_writes_store_poses_manifest(capsys, tmp_path, config_path):
    out = tmp_path / "capture.qrfbin"
    code, _, _ = run(capsys, "simulate", "--config", str(config_path),
                     "--out", str(out), "--seed", "7", "--threads", "1",
                     "--poses-out", str(tmp_path / "poses.csv"))
    assert code == 0
    store = fs.BinaryFrameStore.open(out)
    assert (store.width, store.height, store.frame_count) == (16, 16, 50)
    store.close()
    traj = pose.load_trajectory_csv(tmp_path / "poses.csv")
    assert len(traj) == 50
    manifest = json.loads((tmp_path / "capture.qrfbin.manifest.json").read_text())
    assert manifest["command"] == "simulate"
    assert manifest["seed"] == 7
    assert manifest["config_sha256"]


def test_simulate_threads_do_not_change_bits(capsys, tmp_path, config_path):
    a = tmp_path / "a.qrfbin"
    b = tmp_path / "b.qrfbin"
    assert run(capsys, "simulate", "--config", str(config_path), "--out", str(a),
               "--seed", "3", "--threads", "1")[0] == 0
    assert run(capsys, "simulate", "--config", str(config_path), "--out", str(b),
               "--seed", "3", "--threads", "2")[0] == 0
    with open(a, "rb") as fa, open(b, "rb") as fb:
        assert fa.read() == fb.read()


def test_qrf_threads_env_mirrors_flag(capsys, tmp_path, config_path, monkeypatch):
    monkeypatch.setenv("QRF_THREADS", "2")
    out = tmp_path / "env.qrfbin"
    assert run(capsys, "simulate", "--config", str(config_path),
               "--out", str(out), "--seed", "3")[0] == 0
    ref = tmp_path / "ref.qrfbin"
    monkeypatch.delenv("QRF_THREADS")
    assert run(capsys, "simulate", "--config", str(config_path),
               "--out", str(ref), "--seed", "3", "--threads", "1")[0] == 0
    assert out.read_bytes() == ref.read_bytes()


def test_simulate_conventional_stack(capsys, tmp_path, config_path):
    out = tmp_path / "conv.npy"
    code, _, _ = run(capsys, "simulate", "--config", str(config_path),
                     "--out", str(out), "--camera", "conventional",
                     "--threads", "1")
    assert code == 0
    stack = np.load(out)
    assert stack.shape == (50, 16, 16)
    assert stack.min() >= 0.0 and stack.max() <= 1.0


def test_expose_idempotent_and_previews(capsys, tmp_path, config_path):
    store_path = tmp_path / "c.qrfbin"
    run(capsys, "simulate", "--config", str(config_path), "--out",
        str(store_path), "--threads", "1")
    out = tmp_path / "mean.qrfflux"
    png = tmp_path / "mean.png"
    code, _, _ = run(capsys, "expose", "--store", str(store_path),
                     "--start", "0", "--n", "32", "--out", str(out),
                     "--png", str(png))
    assert code == 0
    first = out.read_bytes()
    img = ps.read_flux_image(out)
    assert img.values.min() >= 0.0 and img.values.max() <= 1.0
    assert png.exists()
    # re-running reproduces the output byte for byte
    code, _, _ = run(capsys, "expose", "--store", str(store_path),
                     "--start", "0", "--n", "32", "--out", str(out))
    assert code == 0
    assert out.read_bytes() == first


# ---------------------------------------------------------------------------
# poses
# ---------------------------------------------------------------------------


def test_poses_smooth_roundtrip(capsys, tmp_path):
    rng = np.random.default_rng(1)
    traj = pose.circular_orbit(256, 2.0, 1000.0)
    noisy = pose.PoseTrajectory(traj.data + rng.normal(0, 0.01, traj.data.shape),
                                1000.0)
    src = tmp_path / "in.csv"
    dst = tmp_path / "out.csv"
    pose.save_trajectory_csv(noisy, src)
    code, _, _ = run(capsys, "poses", "smooth", "--in", str(src),
                     "--out", str(dst), "--cutoff", "100")
    assert code == 0
    smoothed = pose.load_trajectory_csv(dst)
    expected = pose.fourier_smooth(noisy, pose.LowpassSpec(100.0))
    assert np.allclose(smoothed.data, expected.data)


def test_poses_interp_from_anchors(capsys, tmp_path):
    anchors = tmp_path / "anchors.csv"
    rows = ["frame_index,x,y,z,r1,r2,r3,r4,r5,r6",
            "0,0,0,0,1,0,0,0,1,0",
            "10,1,0,0,1,0,0,0,1,0"]
    anchors.write_text("\n".join(rows) + "\n")
    dst = tmp_path / "dense.csv"
    code, _, _ = run(capsys, "poses", "interp", "--anchors", str(anchors),
                     "--out", str(dst), "--frame-rate", "100")
    assert code == 0
    dense = pose.load_trajectory_csv(dst)
    assert len(dense) == 11
    assert np.allclose(dense.translations[5], [0.5, 0, 0])


def test_poses_perturb_deterministic(capsys, tmp_path):
    traj = pose.circular_orbit(64, 2.0, 1000.0)
    src = tmp_path / "in.csv"
    pose.save_trajectory_csv(traj, src)
    outs = []
    for name in ("a.csv", "b.csv"):
        dst = tmp_path / name
        code, _, _ = run(capsys, "poses", "perturb", "--in", str(src),
                         "--out", str(dst), "--sigma", "0.01",
                         "--band", "100,500", "--seed", "9")
        assert code == 0
        outs.append(pose.load_trajectory_csv(dst).data)
    assert np.array_equal(outs[0], outs[1])
    assert not np.array_equal(outs[0], traj.data)


# ---------------------------------------------------------------------------
# train / render / bench
# ---------------------------------------------------------------------------


def test_train_render_pipeline(capsys, tmp_path, config_path):
    store_path = tmp_path / "t.qrfbin"
    poses_path = tmp_path / "poses.csv"
    run(capsys, "simulate", "--config", str(config_path), "--out",
        str(store_path), "--threads", "1", "--poses-out", str(poses_path))
    out = tmp_path / "run1"
    code, _, _ = run(capsys, "train", "--frames", str(store_path),
                     "--poses", str(poses_path), "--config", str(config_path),
                     "--out", str(out))
    assert code == 0
    assert (out / "field.qrffld").exists()
    assert (out / "poses.csv").exists()
    assert (out / "manifest.json").exists()
    assert (out / "field_000020.qrffld").exists()  # periodic checkpoint
    assert (out / "field_000040.qrffld").exists()
    loss_lines = (out / "loss.csv").read_text().splitlines()
    assert loss_lines[0] == "iteration,photometric,regularizer,total"
    assert len(loss_lines) > 2
    for tag in ("first", "mid", "last"):
        assert (out / f"validation_{tag}.png").exists()

    render_out = tmp_path / "views"
    code, _, _ = run(capsys, "render", "--checkpoint", str(out / "field.qrffld"),
                     "--poses", str(poses_path), "--out", str(render_out),
                     "--config", str(config_path), "--tau", "1e-3")
    assert code == 0
    assert (render_out / "view_0000.png").exists()
    assert (render_out / "view_0000.qrfflux").exists()
    assert (render_out / "manifest.json").exists()


def test_train_deterministic_reruns(capsys, tmp_path, config_path):
    store_path = tmp_path / "t.qrfbin"
    poses_path = tmp_path / "poses.csv"
    run(capsys, "simulate", "--config", str(config_path), "--out",
        str(store_path), "--threads", "1", "--poses-out", str(poses_path))
    outputs = []
    for name in ("r1", "r2"):
        out = tmp_path / name
        code, _, _ = run(capsys, "train", "--frames", str(store_path),
                         "--poses", str(poses_path), "--config",
                         str(config_path), "--out", str(out))
        assert code == 0
        outputs.append((out / "loss.csv").read_text())
    assert outputs[0] == outputs[1]


def test_bench_blur_noise_from_spec(capsys, tmp_path):
    spec = tmp_path / "bench.toml"
    spec.write_text("""
[bench]
kind = "blur_noise"
n_values = [8, 32]
edge_frames = 128
edge_velocity_px = 0.0
seeds = [0]

[camera]
width = 16
height = 16
focal = 20.0

[spc]
tau = 1e-3
frame_rate = 1000.0
""")
    out = tmp_path / "bench_out"
    code, _, _ = run(capsys, "bench", str(spec), "--out", str(out))
    assert code == 0
    assert (out / "metrics.csv").exists()
    assert (out / "tradeoff.svg").exists()
    assert (out / "manifest.json").exists()


def test_numerical_failure_exits_5(capsys, tmp_path, config_path):
    store_path = tmp_path / "t.qrfbin"
    poses_path = tmp_path / "poses.csv"
    run(capsys, "simulate", "--config", str(config_path), "--out",
        str(store_path), "--threads", "1", "--poses-out", str(poses_path))
    blowup = tmp_path / "blowup.toml"
    blowup.write_text(SCENE_TOML.replace("iterations = 40",
                                         "iterations = 40\npose_lr = 1e160\n"
                                         "pose_opt_start_iteration = 0"))
    code, _, err = run(capsys, "train", "--frames", str(store_path),
                       "--poses", str(poses_path), "--config", str(blowup),
                       "--out", str(tmp_path / "boom"))
    assert code == 5
    assert "numerical failure" in err


def test_bench_lowlight_from_spec(capsys, tmp_path):
    spec = tmp_path / "bench.toml"
    spec.write_text("""
[bench]
kind = "lowlight"
capture_time = 0.1
stops = [0, 2]
seeds = [0]
n_holdout = 2
gt_samples = 16

[scene]
[[scene.sphere]]
center = [0.0, 0.0, 0.0]
radius = 0.45
density = 14.0
emission = 1000.0

[camera]
width = 16
height = 16
focal = 20.0

[spc]
tau = 1e-3
frame_rate = 1000.0

[conventional]
exposure = 0.05
full_well = 2000.0
read_noise_sigma = 40.0
gain = 4.0
rate = 20.0

[train]
iterations = 50
batch_size = 128
n_samples = 16
resolution = [6, 6, 6]
optimize_poses = false
""")
    out = tmp_path / "bench_out"
    code, _, _ = run(capsys, "bench", str(spec), "--out", str(out))
    assert code == 0
    assert (out / "metrics.csv").exists()
    assert (out / "metadata.csv").exists()
    assert (out / "lowlight.svg").exists()
    assert (out / "panels.png").exists()
    assert (out / "manifest.json").exists()


def test_version_flag(capsys):
    code, out, _ = run(capsys, "--version")
    assert code == 0
