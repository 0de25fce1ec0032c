import struct

import numpy as np
import pytest
from sklearn.base import clone

from hashfusion.core import Pose
from hashfusion.reloc import (MAGIC, FernConservatory, FernRelocaliser, RelocDatabase, Relocaliser, block_hd,
                              prepare_image)


def two_pixel_ferns():
    # one fern: depth at (0,0) > 1 m, red at (1,0) > 100, depth at (1,1) > 2 m
    return FernConservatory(np.array([[0, 1, 1]]), np.array([[0, 0, 1]]), np.array([[0, 1, 0]], np.uint8),
                            np.array([[1.0, 100.0, 2.0]], np.float32), width=2, height=2)


def test_code_bits_follow_tests():
    f = two_pixel_ferns()
    img = np.zeros((2, 2, 4))
    assert f.compute_code(img).tolist() == [0]
    img[0, 0, 0] = 1.5
    assert f.compute_code(img).tolist() == [0b001]
    img[0, 1, 1] = 200
    img[1, 1, 0] = 2.5
    assert f.compute_code(img).tolist() == [0b111]
    img[0, 0, 0] = 1.0   # equal to the threshold does not set the bit
    assert f.compute_code(img).tolist() == [0b110]


def test_code_rejects_wrong_size():
    with pytest.raises(ValueError, match="2x2x4"):
        two_pixel_ferns().compute_code(np.zeros((3, 2, 4)))


def test_generate_is_seeded_and_bounded():
    a = FernConservatory.generate(20, 4, seed=3)
    b = FernConservatory.generate(20, 4, seed=3)
    assert np.array_equal(a.x, b.x) and np.array_equal(a.threshold, b.threshold)
    assert a.x.max() < 40 and a.y.max() < 30 and a.channel.max() <= 3
    assert FernConservatory.generate(20, 4, use_colour=False).channel.max() == 0
    with pytest.raises(ValueError):
        FernConservatory.generate(5, 17)


def test_prepare_image_averages_valid_depth_only():
    depth = np.full((60, 80), 2.0)
    depth[:, :40] = -1
    depth[:2, 40:42] = 0.0
    out = prepare_image(depth, None, width=4, height=3)
    assert out.shape == (3, 4, 4)
    assert np.all(out[:, :2, 0] == -1)
    assert np.allclose(out[:, 2:, 0], 2.0)
    rgb = np.zeros((60, 80, 3), np.uint8)
    rgb[..., 2] = 90
    assert np.allclose(prepare_image(depth, rgb, 4, 3)[..., 3], 90)


def test_block_hd_shape_checks():
    with pytest.raises(ValueError):
        block_hd([1, 2], [1, 2, 3])


def test_empty_database():
    db = RelocDatabase(10, 4)
    assert db.ranked(np.zeros(10, np.uint16)) == []
    rel = Relocaliser(FernConservatory.generate(10, 4))
    assert rel.process_frame(np.zeros((30, 40, 4)), mode="relocalise").candidates == []


def test_dissimilarity_counts_shared_blocks():
    db = RelocDatabase(4, 2)
    db.add(np.array([0, 1, 2, 3], np.uint16), Pose())
    db.add(np.array([0, 0, 0, 0], np.uint16), Pose())
    db.add(np.array([3, 3, 3, 0], np.uint16), Pose())
    assert db.dissimilarities(np.array([0, 1, 0, 0], np.uint16)) == {0: 0.5, 1: 0.25, 2: 0.75}
    assert db.ranked(np.array([0, 1, 0, 0], np.uint16)) == [(1, 0.25), (0, 0.5), (2, 0.75)]


def random_image(r):
    img = np.zeros((30, 40, 4))
    img[..., 0] = r.uniform(0.3, 3.0, (30, 40))
    img[..., 1:] = r.uniform(0, 255, (30, 40, 3))
    return img


def test_harvesting_skips_repeats():
    r = np.random.default_rng(0)
    rel = Relocaliser(FernConservatory.generate(100, 4))
    img = random_image(r)
    assert rel.process_frame(img, Pose(), "train").added
    assert not rel.process_frame(img, Pose(), "train").added
    assert rel.process_frame(random_image(r), Pose(), "train").added
    with pytest.raises(ValueError):
        rel.process_frame(img, None, "train")
    with pytest.raises(ValueError):
        rel.process_frame(img, Pose(), "guess")


def test_save_load_round_trip(tmp_path):
    r = np.random.default_rng(1)
    rel = Relocaliser(FernConservatory.generate(50, 4, seed=9))
    images = [random_image(r) for _ in range(6)]
    for k, img in enumerate(images):
        rel.process_frame(img, Pose.exp([0.1 * k, 0, 0, k, 0, 0]), "train")
    path = tmp_path / "ferns.bin"
    rel.save(path)
    raw = path.read_bytes()
    assert raw[:8] == MAGIC and struct.unpack_from("<I", raw, 8) == (1,)
    back = Relocaliser.load(path)
    assert back.ferns.seed == 9
    assert np.array_equal(back.ferns.threshold, rel.ferns.threshold)
    assert back.db.tables == rel.db.tables
    assert all(np.allclose(a.matrix, b.matrix) for a, b in zip(back.db.poses, rel.db.poses))
    q = random_image(r)
    assert back.db.ranked(back.ferns.compute_code(q)) == rel.db.ranked(rel.ferns.compute_code(q))


def test_load_rejects_foreign_files(tmp_path):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"NOTFERNS" + bytes(8))
    with pytest.raises(ValueError, match="not a fern"):
        Relocaliser.load(bad)
    bad.write_bytes(MAGIC + struct.pack("<I", 99))
    with pytest.raises(ValueError, match="version"):
        Relocaliser.load(bad)


def test_estimator_returns_matching_pose():
    r = np.random.default_rng(2)
    images = [random_image(r) for _ in range(5)]
    poses = [Pose.exp([0, 0, 0, k, 0, 0]) for k in range(5)]
    est = clone(FernRelocaliser(n_ferns=200, random_state=4)).fit(images, poses)
    assert all(est.added_)
    assert est.transform(images).shape == (5, 200)
    pred = est.predict([images[3]])[0]
    assert np.allclose(pred.matrix, poses[3].matrix)
    assert est.kneighbors(images[3])[0].dissimilarity == 0.0
