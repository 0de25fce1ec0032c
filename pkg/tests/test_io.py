import struct

import numpy as np
import pytest

from hashfusion.core import Intrinsics, Pose, RgbdCalib
from hashfusion.io.calib import CalibrationError, extrinsic_matrix, parse_calibration, render_calibration
from hashfusion.io.mesh import read_obj, read_trajectory, write_mesh, write_point_cloud, write_trajectory
from hashfusion.io.netpbm import ImageFormatError, load_image_stream, read_netpbm, write_netpbm
from hashfusion.io.synth import Sphere, SyntheticScene, plane_scene, synth_render_depth
from hashfusion.voxelmap import Mesh

IDENTITY_CALIB = """320 240
300 300
159.5 119.5

320 240
300 300
159.5 119.5

1 0 0 0
0 1 0 0
0 0 1 0

0.0002 0
"""


def test_identity_extrinsic():
    c = parse_calibration(IDENTITY_CALIB)
    assert np.array_equal(c.extrinsics_d_to_rgb.rotation, np.eye(3))
    assert np.array_equal(c.extrinsics_d_to_rgb.translation, np.zeros(3))
    assert c.intrinsics_d == Intrinsics(320, 240, 300.0, 300.0, 159.5, 119.5)


def test_calibration_render_round_trip():
    text = IDENTITY_CALIB.replace("0 0 1 0", "0 0 1 0.025").replace("0.0002 0", "0.001 -0.03")
    c = parse_calibration(text)
    back = parse_calibration(render_calibration(c))
    assert back == c
    assert np.array_equal(extrinsic_matrix(back), extrinsic_matrix(c))
    assert render_calibration(back) == render_calibration(c)


def test_truncated_calibration_names_missing_section():
    text = "\n".join(IDENTITY_CALIB.splitlines()[:8])
    with pytest.raises(CalibrationError, match="extrinsic row 1"):
        parse_calibration(text)
    with pytest.raises(CalibrationError, match="depth calibration"):
        parse_calibration(IDENTITY_CALIB.replace("0.0002 0", ""))


def test_bad_tokens_report_line_number():
    with pytest.raises(CalibrationError, match="line 2"):
        parse_calibration(IDENTITY_CALIB.replace("300 300", "300 abc", 1))
    with pytest.raises(CalibrationError, match="line 9: expected 4"):
        parse_calibration(IDENTITY_CALIB.replace("1 0 0 0", "1 0 0"))
    with pytest.raises(CalibrationError, match="trailing"):
        parse_calibration(IDENTITY_CALIB + "\n1 2\n")


def test_depth_conversion_modes():
    text = IDENTITY_CALIB.replace("0.0002 0", "1000 50")
    raw = np.array([1050, 0], dtype=np.uint16)
    assert parse_calibration(text, depth_conversion="inverse").depth_to_metres(raw)[0] == 1.0
    affine = parse_calibration(text)
    assert affine.depth_to_metres(raw)[0] == np.float32(1000 * 1050 + 50)
    assert affine.depth_to_metres(raw)[1] <= 0


def write_frames(tmp_path, indices, shape=(6, 8)):
    r = np.random.default_rng(3)
    frames = {}
    for i in indices:
        d = r.integers(1, 65536, shape, dtype=np.uint16)
        c = r.integers(0, 256, shape + (3,), dtype=np.uint8)
        write_netpbm(tmp_path / f"d{i:03d}.pgm", d)
        write_netpbm(tmp_path / f"c{i:03d}.ppm", c)
        frames[i] = (d, c)
    return frames


def test_stream_yields_all_frames(tmp_path):
    frames = write_frames(tmp_path, [0, 1, 2])
    got = list(load_image_stream(str(tmp_path / "d%03d.pgm"), str(tmp_path / "c%03d.ppm")))
    assert [f.index for f in got] == [0, 1, 2]
    for f in got:
        assert np.array_equal(f.depth, frames[f.index][0])
        assert np.array_equal(f.rgb, frames[f.index][1])


def test_stream_stops_at_gap(tmp_path):
    write_frames(tmp_path, [0, 2])
    got = list(load_image_stream(str(tmp_path / "d%03d.pgm"), str(tmp_path / "c%03d.ppm")))
    assert [f.index for f in got] == [0]
    assert [f.index for f in load_image_stream(str(tmp_path / "d%03d.pgm"), start=2)] == [2]


def test_stream_stops_when_colour_missing(tmp_path):
    write_frames(tmp_path, [0, 1])
    (tmp_path / "c001.ppm").unlink()
    got = list(load_image_stream(str(tmp_path / "d%03d.pgm"), str(tmp_path / "c%03d.ppm")))
    assert len(got) == 1


@pytest.mark.parametrize("blob", [b"P2\n2 2\n255\n0 0 0 0", b"P5\n2 2\n0\n\0\0\0\0", b"P5\n2 2\n70000\n",
                                  b"P5\n2 2\n255\n\0\0", b"P5\n2 x\n255\n\0\0\0\0", b"P5\n2"])
def test_malformed_images_rejected(tmp_path, blob):
    path = tmp_path / "bad.pgm"
    path.write_bytes(blob)
    with pytest.raises(ImageFormatError):
        read_netpbm(path)


def test_header_comments_skipped(tmp_path):
    path = tmp_path / "c.pgm"
    path.write_bytes(b"P5\n# made by hand\n2 1\n65535\n\x01\x02\xff\xfe")
    assert read_netpbm(path).tolist() == [[0x0102, 0xfffe]]


def test_sixteen_bit_pgm_is_big_endian(tmp_path):
    path = tmp_path / "d.pgm"
    write_netpbm(path, np.array([[258]], dtype=np.uint16))
    assert path.read_bytes().endswith(b"\x01\x02")


def test_colour_stream_rejected_as_depth(tmp_path):
    write_netpbm(tmp_path / "d000.pgm", np.zeros((2, 2, 3), np.uint8))
    with pytest.raises(ImageFormatError):
        list(load_image_stream(str(tmp_path / "d%03d.pgm")))


def test_unsupported_array_rejected(tmp_path):
    with pytest.raises(ImageFormatError):
        write_netpbm(tmp_path / "x.pgm", np.zeros((2, 2), np.float32))
    with pytest.raises(ImageFormatError):
        write_netpbm(tmp_path / "x.pgm", np.zeros((2, 2, 4), np.uint8))


TINY = Intrinsics(5, 5, 10.0, 10.0, 2.0, 2.0)


def test_plane_centre_pixel_exact():
    calib = RgbdCalib.simple(TINY)
    raw = synth_render_depth(plane_scene(1.0), Pose(), TINY, calib=calib)
    assert raw.dtype == np.uint16
    assert calib.depth_to_metres(raw)[2, 2] == 1.0
    depth, _ = plane_scene(1.0).render(Pose(), TINY)
    assert depth[2, 2] == 1.0


def test_sphere_behind_camera_invalid():
    scene = SyntheticScene([Sphere(center=(0.0, 0.0, -2.0), radius=0.5)])
    assert not synth_render_depth(scene, Pose(), TINY).any()


def test_sphere_centre_ray():
    centre = np.array([0.3, -0.2, 2.0])
    scene = SyntheticScene([Sphere(center=tuple(centre), radius=0.4)])
    # rotate the camera so its optical axis points at the centre
    z = centre / np.linalg.norm(centre)
    x = np.cross([0.0, 1.0, 0.0], z)
    x /= np.linalg.norm(x)
    R = np.stack([x, np.cross(z, x), z])
    depth, _ = scene.render(Pose(R, np.zeros(3)), TINY)
    assert depth[2, 2] == pytest.approx(np.linalg.norm(centre) - 0.4, abs=1e-12)


def test_scene_sdf():
    scene = SyntheticScene([Sphere(center=(0.0, 0.0, 2.0), radius=0.5)])
    assert scene.sdf(np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 2.0]])).tolist() == [1.5, -0.5]


def test_depth_noise_is_seeded():
    a = synth_render_depth(plane_scene(1.0), Pose(), TINY, noise=0.01, rng=5)
    b = synth_render_depth(plane_scene(1.0), Pose(), TINY, noise=0.01, rng=5)
    assert np.array_equal(a, b)
    assert not np.all(a == 5000)


SINGLE = Mesh(np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]]), np.array([[0, 1, 2]]))


def test_empty_mesh_files(tmp_path):
    write_mesh(Mesh(), tmp_path / "e.obj")
    assert (tmp_path / "e.obj").read_text() == ""
    back = read_obj(tmp_path / "e.obj")
    assert back.vertices.shape == (0, 3) and back.faces.shape == (0, 3)
    write_mesh(Mesh(), tmp_path / "e.stl")
    data = (tmp_path / "e.stl").read_bytes()
    assert len(data) == 84 and struct.unpack("<I", data[80:]) == (0,)


def test_single_triangle_obj(tmp_path):
    write_mesh(SINGLE, tmp_path / "t.obj")
    lines = (tmp_path / "t.obj").read_text().splitlines()
    assert [ln.split()[0] for ln in lines] == ["v", "v", "v", "f"]
    assert lines[-1] == "f 1 2 3"


def test_single_triangle_stl(tmp_path):
    write_mesh(SINGLE, tmp_path / "t.stl")
    data = (tmp_path / "t.stl").read_bytes()
    assert len(data) == 84 + 50
    vals = struct.unpack("<12fH", data[84:])
    assert vals[:3] == (0.0, 0.0, 1.0)
    assert vals[3:12] == (0, 0, 0, 1, 0, 0, 0, 1, 0)


def test_mesh_format_errors(tmp_path):
    with pytest.raises(ValueError):
        write_mesh(SINGLE, tmp_path / "t.ply")
    with pytest.raises(OSError):
        write_mesh(SINGLE, tmp_path / "missing" / "t.obj")


def test_trajectory_round_trip(tmp_path):
    r = np.random.default_rng(8)
    poses = [Pose.exp(r.normal(scale=0.5, size=6)) for _ in range(5)]
    write_trajectory(tmp_path / "p.txt", [0.0, 1.0, 2.0, 3.0, 4.5], poses)
    lines = (tmp_path / "p.txt").read_text().splitlines()
    assert len(lines) == 5 and all(len(ln.split()) == 8 for ln in lines)
    stamps, back = read_trajectory(tmp_path / "p.txt")
    assert stamps == [0.0, 1.0, 2.0, 3.0, 4.5]
    for p, q in zip(poses, back):
        assert np.allclose(p.matrix, q.matrix, atol=1e-8)


def test_point_cloud_columns(tmp_path):
    pos = np.array([[0.0, 0.0, 1.0], [0.5, 0.25, 2.0]])
    nrm = np.array([[0.0, 0.0, -1.0], [0.0, 1.0, 0.0]])
    write_point_cloud(tmp_path / "s.txt", pos, nrm, [0.01, 0.02], [3.0, 1.0], [[1, 2, 3], [4, 5, 6]])
    data = np.loadtxt(tmp_path / "s.txt")
    assert data.shape == (2, 11)
    assert np.allclose(data[:, :3], pos) and np.allclose(data[:, 3:6], nrm)
    assert data[:, 8:].tolist() == [[1, 2, 3], [4, 5, 6]]
