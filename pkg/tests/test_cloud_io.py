"""PLY and xyzf32 round trips and validation."""

import numpy as np
import pytest

from vgreg.cloud_io import load_point_cloud, save_ply, save_point_cloud
from vgreg.errors import FormatError
from vgreg.geometry import PointCloud


@pytest.fixture
def cloud():
    rng = np.random.default_rng(0)
    return PointCloud(rng.normal(size=(64, 3)).astype(np.float32))


def test_binary_ply_round_trip(tmp_path, cloud):
    path = tmp_path / "a.ply"
    save_point_cloud(cloud, path)
    loaded = load_point_cloud(path)
    np.testing.assert_array_equal(loaded.points, cloud.points)


def test_ascii_ply_round_trip(tmp_path, cloud):
    path = tmp_path / "a.ply"
    save_ply(cloud, path, binary=False)
    loaded = load_point_cloud(path)
    np.testing.assert_allclose(loaded.points, cloud.points, rtol=1e-6)


def test_ply_with_extra_properties_is_skipped_by_stride(tmp_path):
    header = (
        "ply\nformat binary_little_endian 1.0\nelement vertex 2\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "end_header\n"
    ).encode()
    row = np.array([(1.0, 2.0, 3.0)], dtype="<f4,<f4,<f4").tobytes() + bytes([255, 0, 0])
    row2 = np.array([(4.0, 5.0, 6.0)], dtype="<f4,<f4,<f4").tobytes() + bytes([0, 255, 0])
    path = tmp_path / "rgb.ply"
    path.write_bytes(header + row + row2)
    cloud = load_point_cloud(path)
    np.testing.assert_allclose(cloud.points, [[1, 2, 3], [4, 5, 6]])


def test_ply_bad_magic(tmp_path):
    path = tmp_path / "bad.ply"
    path.write_bytes(b"not a ply")
    with pytest.raises(FormatError) as err:
        load_point_cloud(path)
    assert err.value.code == "bad magic"


def test_ply_truncated_data(tmp_path, cloud):
    path = tmp_path / "trunc.ply"
    save_point_cloud(cloud, path)
    data = path.read_bytes()
    path.write_bytes(data[:-10])
    with pytest.raises(FormatError) as err:
        load_point_cloud(path)
    assert err.value.code == "truncated data"


def test_ply_big_endian_rejected(tmp_path):
    path = tmp_path / "be.ply"
    path.write_text(
        "ply\nformat binary_big_endian 1.0\nelement vertex 0\n"
        "property float x\nproperty float y\nproperty float z\nend_header\n"
    )
    with pytest.raises(FormatError) as err:
        load_point_cloud(path)
    assert err.value.code == "bad format"


def test_ply_double_precision_rejected(tmp_path):
    path = tmp_path / "f64.ply"
    path.write_text(
        "ply\nformat ascii 1.0\nelement vertex 1\n"
        "property double x\nproperty double y\nproperty double z\n"
        "end_header\n0 0 0\n"
    )
    with pytest.raises(FormatError) as err:
        load_point_cloud(path)
    assert err.value.code == "bad property"


def test_xyzf32_round_trip(tmp_path, cloud):
    path = tmp_path / "a.xyzf32"
    save_point_cloud(cloud, path)
    loaded = load_point_cloud(path)
    np.testing.assert_array_equal(loaded.points, cloud.points)


def test_xyzf32_truncation(tmp_path, cloud):
    path = tmp_path / "a.xyzf32"
    save_point_cloud(cloud, path)
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(FormatError) as err:
        load_point_cloud(path)
    assert err.value.code == "truncated data"


def test_unknown_extension(tmp_path):
    path = tmp_path / "a.obj"
    path.write_text("")
    with pytest.raises(FormatError):
        load_point_cloud(path)
