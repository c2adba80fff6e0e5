import numpy as np
import pytest

from cekd import data
from cekd.numerics import RngStream

SMALL = data.DatasetSpec(num_classes=4, samples_per_class=10, test_per_class=3, image_hw=16, marker_size=3, seed=5)


@pytest.fixture(scope="module")
def default_split():
    ds, manifest = data.generate_synthetic(data.DatasetSpec())
    return data.split(ds, manifest)


class TestGeneration:
    def test_reproducible(self):
        a, ma = data.generate_synthetic(SMALL)
        b, mb = data.generate_synthetic(SMALL)
        assert a.images.tobytes() == b.images.tobytes()
        assert a.ids == b.ids and ma == mb

    def test_noise_free_classes_are_constant(self):
        spec = data.DatasetSpec(num_classes=4, samples_per_class=6, test_per_class=2, image_hw=16, marker_size=3, noise_std=0.0, jitter=0)
        ds, _ = data.generate_synthetic(spec)
        for c in range(4):
            imgs = ds.images[ds.labels == c]
            assert np.all(imgs == imgs[0])
        assert not np.array_equal(ds.images[ds.labels == 0][0], ds.images[ds.labels == 1][0])

    def test_classes_sharing_a_base_differ_only_locally(self):
        spec = data.DatasetSpec(num_classes=8, samples_per_class=2, test_per_class=1, noise_std=0.0, jitter=0)
        ds, _ = data.generate_synthetic(spec)
        a = ds.images[ds.labels == 0][0]
        b = ds.images[ds.labels == 1][0]
        changed = np.argwhere(np.any(a != b, axis=0))
        span = changed.max(axis=0) - changed.min(axis=0) + 1
        assert np.all(span <= spec.marker_size)

    def test_pixel_range_and_ids(self):
        ds, manifest = data.generate_synthetic(SMALL)
        assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0
        assert len(set(ds.ids)) == len(ds.ids)
        assert not set(manifest.train_ids) & set(manifest.test_ids)
        assert set(manifest.train_ids) | set(manifest.test_ids) == set(ds.ids)
        assert len(manifest.test_ids) == SMALL.num_classes * SMALL.test_per_class

    def test_default_sizes(self, default_split):
        train, test = default_split
        assert len(train) == 8 * 120 and len(test) == 8 * 40

    def test_nearest_centroid_above_chance(self, default_split):
        train, test = default_split
        acc = data.nearest_centroid_accuracy(train, test)
        assert acc > 1 / 8 + 0.1
        assert acc < 0.9

    @pytest.mark.parametrize("kwargs", [{"marker_size": 8}, {"noise_std": -1.0}, {"channels": 2}, {"test_per_class": 0}])
    def test_invalid_spec(self, kwargs):
        with pytest.raises(ValueError):
            data.DatasetSpec(image_hw=16, **kwargs)

    def test_rgb(self):
        spec = data.DatasetSpec(num_classes=2, samples_per_class=3, test_per_class=1, image_hw=16, marker_size=3, channels=3)
        ds, _ = data.generate_synthetic(spec)
        assert ds.images.shape == (6, 3, 16, 16)


class TestPNM:
    def test_zero_image_payload(self, tmp_path):
        data.save_pgm(tmp_path / "z.pgm", np.zeros((3, 5)))
        raw = (tmp_path / "z.pgm").read_bytes()
        assert raw == b"P5\n5 3\n255\n" + bytes(15)

    def test_round_trip_quantization(self, tmp_path):
        x = np.random.default_rng(0).random((1, 7, 9))
        data.save_pgm(tmp_path / "r.pgm", x)
        y = data.load_pgm(tmp_path / "r.pgm")
        assert y.shape == x.shape
        assert np.max(np.abs(x - y)) <= 1 / 255

    def test_reference_fixture(self, tmp_path):
        (tmp_path / "ref.pgm").write_bytes(b"P5\n2 2\n255\n" + bytes([0, 85, 170, 255]))
        y = data.load_pgm(tmp_path / "ref.pgm")
        np.testing.assert_allclose(y[0], [[0, 1 / 3], [2 / 3, 1]], atol=1 / 255)

    def test_ppm_round_trip(self, tmp_path):
        x = np.random.default_rng(1).random((3, 4, 6))
        data.save_ppm(tmp_path / "c.ppm", x)
        raw = (tmp_path / "c.ppm").read_bytes()
        assert raw.startswith(b"P6\n6 4\n255\n") and len(raw) == 11 + 72
        assert np.max(np.abs(data.load_ppm(tmp_path / "c.ppm") - x)) <= 1 / 255

    def test_header_comments_tolerated(self):
        y = data.decode_pnm(b"P5\n# made by hand\n2 1\n255\n" + bytes([255, 0]))
        np.testing.assert_array_equal(y[0], [[1.0, 0.0]])

    def test_truncated_payload(self):
        with pytest.raises(data.PNMError) as info:
            data.decode_pnm(b"P5\n4 4\n255\n" + bytes(10))
        assert info.value.offset == 11 + 10

    @pytest.mark.parametrize(
        "blob, offset",
        [(b"P3\n1 1\n255\n0", 0), (b"P5\nx 1\n255\n", 3), (b"P5\n1 1\n65535\n\x00\x00", 7)],
    )
    def test_malformed_header(self, blob, offset):
        with pytest.raises(data.PNMError) as info:
            data.decode_pnm(blob)
        assert info.value.offset == offset

    def test_rejects_out_of_range_pixels(self, tmp_path):
        with pytest.raises(ValueError):
            data.save_pgm(tmp_path / "bad.pgm", np.full((2, 2), 1.5))


class TestDatasetDirectory:
    def test_round_trip(self, tmp_path):
        ds, manifest = data.generate_synthetic(SMALL)
        data.save_dataset(tmp_path, ds, manifest, SMALL)
        assert (tmp_path / "labels.tsv").read_text().splitlines()[0] == "id\tclass\tsplit"
        loaded, m2 = data.load_dataset(tmp_path)
        assert loaded.ids == ds.ids and np.array_equal(loaded.labels, ds.labels)
        assert np.max(np.abs(loaded.images - ds.images)) <= 1 / 255
        assert m2.train_ids == manifest.train_ids and m2.spec_hash == SMALL.digest()
        assert not list(tmp_path.rglob("*.tmp"))


class TestBatchIter:
    def make(self, n=10):
        return data.Dataset(np.zeros((n, 1, 4, 4)), np.zeros(n, dtype=int), [f"s{i}" for i in range(n)], 2, seed=3)

    def test_same_epoch_same_order(self):
        ds = self.make()
        a = [b.tolist() for b in data.batch_iter(ds, 4, 0)]
        b = [b.tolist() for b in data.batch_iter(ds, 4, 0)]
        assert a == b

    def test_covers_all_but_dropped(self):
        ds = self.make(9)
        batches = list(data.batch_iter(ds, 4, 1))
        seen = np.concatenate(batches)
        assert len(set(seen.tolist())) == len(seen) == 8
        assert all(len(b) >= 2 for b in batches)

    def test_short_batch_of_two_kept(self):
        assert sum(len(b) for b in data.batch_iter(self.make(10), 4, 0)) == 10

    def test_epochs_differ(self):
        ds = self.make(20)
        orders = [np.concatenate(list(data.batch_iter(ds, 5, e))).tolist() for e in range(3)]
        assert orders[0] != orders[1] or orders[0] != orders[2]

    def test_batch_size_floor(self):
        with pytest.raises(ValueError):
            list(data.batch_iter(self.make(), 1, 0))


class TestTransforms:
    def test_flip_involution(self):
        x = np.random.default_rng(0).random((1, 6, 6))
        once = data.flip_crop(x, True, 2, 2)
        assert np.array_equal(data.flip_crop(once, True, 2, 2), x)

    def test_symmetric_image_flip_identity(self):
        x = np.random.default_rng(1).random((1, 6, 3))
        x = np.concatenate([x, x[..., ::-1]], axis=-1)
        assert np.array_equal(data.flip_crop(x, True, 2, 2), x)

    def test_crop_offsets_bounded(self):
        x = np.ones((1, 8, 8))
        for seed in range(200):
            out = data.basic_transforms(x, RngStream(seed))
            assert out.shape == x.shape
            rows = np.flatnonzero(out[0].any(axis=1))
            cols = np.flatnonzero(out[0].any(axis=0))
            # zero rows/cols come only from the 2-pixel padding
            assert 8 - len(rows) <= 2 and 8 - len(cols) <= 2

    def test_range_preserved_and_deterministic(self):
        x = np.random.default_rng(2).random((3, 1, 8, 8))
        a = data.transform_batch(x, RngStream(4))
        b = data.transform_batch(x, RngStream(4))
        assert np.array_equal(a, b)
        assert a.min() >= 0 and a.max() <= 1
