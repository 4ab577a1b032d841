import numpy as np
import pytest

from app.errors import FormatError
from app.formats import (
    read_checkpoint,
    read_depth,
    read_pfm,
    read_poses_csv,
    read_ppm,
    write_checkpoint,
    write_depth,
    write_pfm,
    write_poses_csv,
    write_ppm,
    write_rows_csv,
)
from app.geometry import pose_from_params
from app.image import ImageBuffer, ScalarMap


def test_ppm_keeps_8bit_values_and_channel_order(tmp_path):
    levels = np.arange(24, dtype=np.float64).reshape(2, 4, 3) * 10 / 255.0
    path = tmp_path / "frame.ppm"
    write_ppm(path, ImageBuffer(levels))
    assert path.read_bytes().startswith(b"P6")
    loaded = read_ppm(path)
    assert loaded.shape == (2, 4, 3)
    assert np.allclose(loaded.data, levels, atol=1e-12)


def test_ppm_from_gray_buffer(tmp_path):
    gray = np.full((3, 2, 1), 51 / 255.0)
    path = tmp_path / "gray.ppm"
    write_ppm(path, ImageBuffer(gray))
    assert np.allclose(read_ppm(path).data, 51 / 255.0, atol=1e-12)


def test_unreadable_image_names_the_file(tmp_path):
    path = tmp_path / "bad.ppm"
    path.write_bytes(b"not an image at all")
    with pytest.raises(FormatError) as exc:
        read_ppm(path)
    assert "bad.ppm" in str(exc.value)
    with pytest.raises(FormatError):
        read_pfm(tmp_path / "missing.pfm")


def test_depth_round_trip_keeps_row_order(tmp_path):
    depth = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    path = tmp_path / "depth.pfm"
    write_depth(path, ScalarMap(depth))
    assert path.read_bytes().startswith(b"Pf")
    assert np.array_equal(read_depth(path).data, depth)


def test_pfm_three_channels(tmp_path):
    data = np.random.default_rng(0).uniform(size=(3, 5, 3)).astype(np.float32).astype(np.float64)
    path = tmp_path / "color.pfm"
    write_pfm(path, data)
    assert path.read_bytes().startswith(b"PF")
    assert np.array_equal(read_pfm(path), data)
    with pytest.raises(FormatError):
        read_depth(path)


def test_pfm_reader_rejects_8bit_images(tmp_path):
    path = tmp_path / "frame.ppm"
    write_ppm(path, ImageBuffer(np.zeros((2, 2, 3))))
    with pytest.raises(FormatError):
        read_pfm(path)


def test_poses_csv(tmp_path, rng):
    poses = [pose_from_params(rng.normal(size=6)) for _ in range(3)]
    path = tmp_path / "poses.csv"
    write_poses_csv(path, poses)
    lines = path.read_text().strip().splitlines()
    assert len(lines) == 3 and all(len(line.split(",")) == 12 for line in lines)
    loaded = read_poses_csv(path)
    assert all(a.allclose(b, atol=1e-12) for a, b in zip(poses, loaded))


def test_poses_csv_bad_line_number(tmp_path):
    path = tmp_path / "poses.csv"
    path.write_text("1,0,0,0,0,1,0,0,0,0,1,0\n1,2,3\n")
    with pytest.raises(FormatError) as exc:
        read_poses_csv(path)
    assert "offset 2" in str(exc.value)


def test_rows_csv(tmp_path):
    path = tmp_path / "loss.csv"
    write_rows_csv(path, ["step", "total"], [(0, 0.5), (1, 0.25)])
    assert path.read_text().splitlines() == ["step,total", "0,0.5", "1,0.25"]


def test_checkpoint(tmp_path, rng):
    tensors = {"embed.w": rng.normal(size=(4, 3)), "embed.b": rng.normal(size=3), "scalar": np.array(2.0)}
    path = tmp_path / "weights.ckpt"
    write_checkpoint(path, tensors, {"layers": 2})
    loaded, metadata = read_checkpoint(path)
    assert metadata == {"layers": 2}
    assert list(loaded) == list(tensors)
    for name, value in tensors.items():
        assert np.array_equal(loaded[name], value)


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"NOTACKPT" + bytes(16))
    with pytest.raises(FormatError):
        read_checkpoint(path)


def test_poses_csv_accepts_six_significant_digits(tmp_path, rng):
    poses = [pose_from_params(rng.normal(size=6)) for _ in range(4)]
    path = tmp_path / "kitti_style.csv"
    path.write_text("".join(",".join(f"{x:.6e}" for x in p.matrix().ravel()) + "\n" for p in poses))
    loaded = read_poses_csv(path)
    assert len(loaded) == 4
    for original, pose in zip(poses, loaded):
        assert np.allclose(pose.rotation.T @ pose.rotation, np.eye(3), atol=1e-12)
        assert pose.allclose(original, atol=1e-5)


def test_poses_csv_rejects_non_rotations(tmp_path):
    path = tmp_path / "scaled.csv"
    path.write_text("2,0,0,0,0,2,0,0,0,0,2,0\n")
    with pytest.raises(FormatError) as exc:
        read_poses_csv(path)
    assert "offset 1" in str(exc.value)
    path.write_text("1,0,0,0,0,1,0,0,0,0,-1,0\n")
    with pytest.raises(FormatError):
        read_poses_csv(path)


def test_checkpoint_partial_payload_is_a_format_error(tmp_path, rng):
    path = tmp_path / "weights.ckpt"
    write_checkpoint(path, {"w": rng.normal(size=4)})
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(FormatError) as exc:
        read_checkpoint(path)
    assert "whole number" in str(exc.value)
