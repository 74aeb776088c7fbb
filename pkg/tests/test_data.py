import filecmp
import json

import numpy as np
import pytest

from gdpose.config import DataConfig
from gdpose.data import (
    DatasetError,
    Scene,
    apply_preset,
    generate_scene,
    generate_trajectory,
    load_dataset,
    load_image,
    perturb,
    perturb_dataset,
    quantize,
    render_observation,
    save_image,
    tiling_windows,
    window_samples,
    write_dataset,
)
from gdpose.geometry import Pose, quat_exp, quat_to_matrix


def test_scene_determinism_and_seed_sensitivity():
    a, b = generate_scene(0), generate_scene(0)
    assert a.positions.tobytes() == b.positions.tobytes() and a.colors.tobytes() == b.colors.tobytes()
    assert not np.array_equal(generate_scene(1).positions, a.positions)
    assert len(a.positions) >= 32
    with pytest.raises(ValueError):
        generate_scene(0, num_landmarks=10)


def _steps(traj, closed):
    d = traj.translations()
    if closed:
        d = np.concatenate([d, d[:1]])
    return np.linalg.norm(np.diff(d, axis=0), axis=1)


@pytest.mark.parametrize("kind", ["loop", "figure_eight", "line"])
def test_trajectory_uniform_spacing(kind):
    traj = generate_trajectory(kind, 100, 20.0)
    steps = _steps(traj, kind != "line")
    assert np.all(np.abs(steps / steps.mean() - 1) < 0.10)


def test_loop_closure():
    traj = generate_trajectory("loop", 100, 20.0)
    d = traj.translations()
    assert np.linalg.norm(d[0] - d[-1]) < 2 * _steps(traj, True).mean()


def test_line_constant_heading():
    r = generate_trajectory("line", 20, 10.0).rotations()
    assert np.allclose(r, r[0])


@pytest.mark.parametrize("kind", ["loop", "figure_eight"])
def test_headings_face_travel_direction(kind):
    traj = generate_trajectory(kind, 200, 20.0)
    d = traj.translations()
    fwd = quat_to_matrix(quat_exp(traj.rotations()))[:, :, 0]
    travel = np.roll(d, -1, axis=0) - np.roll(d, 1, axis=0)
    travel /= np.linalg.norm(travel, axis=1, keepdims=True)
    assert np.min(np.sum(fwd * travel, axis=1)[1:-1]) > 0.98


def test_trajectory_needs_two_poses():
    with pytest.raises(ValueError):
        generate_trajectory("loop", 1)


def test_render_deterministic_and_in_range():
    scene = generate_scene(3)
    pose = generate_trajectory("loop", 10).poses[2]
    a, b = render_observation(pose, scene), render_observation(pose, scene)
    assert np.array_equal(a, b)
    assert a.shape == (64, 64, 3) and a.min() >= 0 and a.max() <= 1


def test_render_far_pose_is_background_only():
    scene = generate_scene(0)
    empty = Scene(0, np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0))
    far = Pose((1e4, 1e4, 1.5), (0, 0, 0))
    assert np.array_equal(render_observation(far, scene), render_observation(far, empty))


def test_render_distance_monotone_in_perturbation():
    scene = generate_scene(0)
    pose = generate_trajectory("loop", 40, 20.0).poses[5]
    base = render_observation(pose, scene)
    dists = []
    for off in np.linspace(0.02, 0.4, 12):
        moved = Pose(pose.d + np.array([off, 0.5 * off, 0.0]), pose.r)
        dists.append(np.linalg.norm(render_observation(moved, scene) - base))
    assert np.all(np.diff(dists) > 0)


@pytest.mark.parametrize("kind", ["fog", "occlusion", "gaussian_noise"])
def test_perturb_severity_zero_is_identity(kind):
    img = np.random.default_rng(0).uniform(size=(16, 16, 3))
    assert np.array_equal(perturb(img, kind, 0.0, seed=3), img)


def test_fog_full_is_white():
    img = np.random.default_rng(0).uniform(size=(8, 8, 3))
    assert np.array_equal(perturb(img, "fog", 1.0), np.ones_like(img))


@pytest.mark.parametrize("severity", [0.2, 0.5])
def test_noise_std(severity):
    img = np.full((256, 256, 3), 0.5)
    residual = perturb(img, "gaussian_noise", severity, seed=1) - img
    assert abs(residual.std() / (0.3 * severity) - 1) < 0.10


@pytest.mark.parametrize("severity", [0.3, 1.0])
def test_occlusion_coverage(severity):
    img = np.zeros((64, 64, 3))
    out = perturb(img, "occlusion", severity, seed=5)
    covered = np.any(out != 0, axis=-1).mean()
    assert 0.25 * severity <= covered < 0.25 * severity + 0.05


def test_perturb_deterministic_and_validates():
    img = np.random.default_rng(0).uniform(size=(16, 16, 3))
    assert np.array_equal(perturb(img, "occlusion", 0.5, 9), perturb(img, "occlusion", 0.5, 9))
    with pytest.raises(ValueError):
        perturb(img, "fog", 1.5)
    with pytest.raises(ValueError):
        perturb(img, "snow", 0.5)


def test_presets_are_ordered_by_damage():
    img = render_observation(generate_trajectory("loop", 10).poses[0], generate_scene(0))
    dm = np.linalg.norm(apply_preset(img, "medium", 1) - img)
    dh = np.linalg.norm(apply_preset(img, "hard", 1) - img)
    assert 0 < dm < dh


def test_perturbation_commutes_with_png_roundtrip(tmp_path):
    img = render_observation(generate_trajectory("loop", 10).poses[1], generate_scene(0))
    save_image(tmp_path / "clean.png", img)
    loaded = load_image(tmp_path / "clean.png")
    corrupted = apply_preset(loaded, "hard", 7)
    save_image(tmp_path / "hard.png", corrupted)
    assert np.array_equal(quantize(load_image(tmp_path / "hard.png")), quantize(corrupted))


def test_window_samples_counts_and_order():
    traj = generate_trajectory("loop", 12)
    scene = generate_scene(0)
    assert len(window_samples(traj, scene, 1, 1, (32, 32))) == 12
    wins = window_samples(traj, scene, 3, 3, (32, 32))
    assert len(wins) == 12 // 3
    for w in wins:
        assert list(w.window_indices) == sorted(w.window_indices)
        assert w.frames.shape == (3, 32, 32, 3)
        assert all(np.array_equal(p.d, traj.poses[i].d) for p, i in zip(w.poses, w.window_indices))
    assert len(window_samples(traj, scene, 5, 5, (32, 32))) == 2


def test_window_errors():
    traj = generate_trajectory("line", 4)
    with pytest.raises(ValueError):
        window_samples(traj, generate_scene(0), 5, 1)
    with pytest.raises(ValueError):
        window_samples(generate_trajectory("line", 20), generate_scene(0), 12, 1)


def test_tiling_windows_cover_each_frame():
    for n, k in [(10, 3), (9, 3), (2, 5), (1, 1)]:
        wins = tiling_windows(n, k)
        assert sorted(set(i for w in wins for i in w)) == list(range(n))
        assert all(len(w) == min(n, k) for w in wins)


def _small(**kw):
    base = dict(num_poses=8, image_height=32, image_width=32, window_size=3)
    base.update(kw)
    return DataConfig(**base)


def test_dataset_generation_is_byte_identical(tmp_path):
    write_dataset(tmp_path / "a", _small())
    write_dataset(tmp_path / "b", _small())
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    assert not cmp.diff_files and not cmp.left_only and not cmp.right_only
    assert not filecmp.dircmp(tmp_path / "a/frames", tmp_path / "b/frames").diff_files


def test_dataset_roundtrip_and_layout(tmp_path):
    write_dataset(tmp_path / "d", _small())
    ds = load_dataset(tmp_path / "d")
    assert ds.frames.shape == (8, 32, 32, 3)
    assert ds.poses.shape == (8, 6)
    assert len(ds.windows()) == ds.meta["num_windows"] == 6
    header = (tmp_path / "d/poses.csv").read_text().splitlines()[0]
    assert header == "frame_id,dx,dy,dz,rx,ry,rz"
    traj = generate_trajectory("loop", 8, 20.0)
    np.testing.assert_allclose(ds.poses, np.stack([p.as_vector() for p in traj.poses]), rtol=1e-8, atol=1e-8)


def test_poses_within_trajectory_bounds(tmp_path):
    write_dataset(tmp_path / "d", _small(kind="figure_eight", num_poses=12))
    ds = load_dataset(tmp_path / "d")
    half = ds.meta["config"]["scale"] / 2
    assert np.all(np.abs(ds.poses[:, :2]) <= half + 1e-9)


def test_dataset_validation_errors(tmp_path):
    with pytest.raises(DatasetError, match="does not exist"):
        load_dataset(tmp_path / "nope")
    write_dataset(tmp_path / "d", _small())
    meta = json.loads((tmp_path / "d/meta.json").read_text())
    del meta["stride"]
    (tmp_path / "d/meta.json").write_text(json.dumps(meta))
    with pytest.raises(DatasetError, match="stride"):
        load_dataset(tmp_path / "d")
    (tmp_path / "d/poses.csv").unlink()
    with pytest.raises(DatasetError, match="poses.csv"):
        load_dataset(tmp_path / "d")


def test_test_split_interleaves(tmp_path):
    write_dataset(tmp_path / "train", _small())
    write_dataset(tmp_path / "test", _small(split="test"))
    a, b = load_dataset(tmp_path / "train"), load_dataset(tmp_path / "test")
    assert not np.allclose(a.poses[:, :3], b.poses[:, :3])


def test_perturb_dataset(tmp_path):
    write_dataset(tmp_path / "d", _small())
    perturb_dataset(tmp_path / "d", tmp_path / "d-hard", "hard")
    clean, hard = load_dataset(tmp_path / "d"), load_dataset(tmp_path / "d-hard")
    assert hard.meta["preset"] == "hard"
    assert np.array_equal(clean.poses, hard.poses)
    assert not np.array_equal(clean.frames, hard.frames)
