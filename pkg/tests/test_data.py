import numpy as np
import pytest

from rdoq import data


def test_split_shapes_and_range(desk):
    assert desk.train.shape == (32, 1, 64, 64) and desk.test.shape == (8, 1, 64, 64)
    assert desk.calib_pool.shape[1:] == (1, data.CALIB_SIZE, data.CALIB_SIZE)
    assert len(desk.calib_pool) >= 20
    for arr in (desk.train, desk.test, desk.calib_pool):
        assert arr.dtype == np.float32 and arr.min() >= 0 and arr.max() <= 1


def test_dataset_is_reproducible(desk):
    again = data.desk_dataset()
    assert np.array_equal(again.train, desk.train)
    assert np.array_equal(again.test, desk.test)
    assert np.array_equal(again.calib_pool, desk.calib_pool)
    assert not np.array_equal(data.desk_dataset(seed=1).test, desk.test)


def test_train_and_test_never_share_a_tile(desk):
    train = {t.tobytes() for t in desk.train}
    assert not any(t.tobytes() in train for t in desk.test)


def test_calibration_windows_avoid_test_tiles():
    origins = data.tile_origins(0)
    order = np.random.default_rng(1).permutation(len(origins))
    test = [origins[i] for i in order[32:40]]
    ds = data.desk_dataset()
    images = {name: data.load_gray(name) for name in data.SOURCES}
    # Locate every calibration window in its source and check it misses each test tile.
    for win in ds.calib_pool:
        pix = data.to_uint8(win[0])
        hits = []
        for name, img in images.items():
            h, w = img.shape
            for r in range(0, h - data.CALIB_SIZE + 1, 16):
                for c in range(0, w - data.CALIB_SIZE + 1, 16):
                    if img[r, c] == pix[0, 0] and np.array_equal(
                            img[r:r + data.CALIB_SIZE, c:c + data.CALIB_SIZE], pix):
                        hits.append((name, r, c))
        assert hits
        for name, r, c in hits:
            for tn, tr, tc in test:
                if tn == name:
                    assert not data._overlaps((r, c), data.CALIB_SIZE, (tr, tc), data.CROP)


def test_calibration_subset(desk):
    a = desk.calibration(10, seed=0)
    assert a.shape[0] == 10
    assert np.array_equal(a, desk.calibration(10, seed=0))
    assert not np.array_equal(a, desk.calibration(10, seed=1))
    with pytest.raises(ValueError):
        desk.calibration(0)
    with pytest.raises(ValueError):
        desk.calibration(len(desk.calib_pool) + 1)


def test_crops_are_textured():
    pool = data.crop_pool()
    assert pool.shape == (len(data.SOURCES) * data.PER_SOURCE, 64, 64)
    assert np.all(pool.reshape(len(pool), -1).std(axis=1) >= data.MIN_STD)


def test_to_uint8_rounds_and_clips():
    assert data.to_uint8(np.array([-0.1, 0.0, 0.5, 1.0, 1.2])).tolist() == [0, 0, 128, 255, 255]


def test_too_many_crops_rejected():
    with pytest.raises(ValueError):
        data.desk_dataset(n_train=40, n_test=10)
