import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ssldg import dataio
from ssldg.dataio import FormatError, PhantomConfig, dice_score, gen_phantom


def hist(img, bins=32):
    h, _ = np.histogram(img, bins=bins, range=(0.0, 1.0))
    return h / h.sum()


class TestPhantom:
    def test_deterministic(self):
        cfg = PhantomConfig(image_size=32)
        a, b = gen_phantom(cfg, 3, 7), gen_phantom(cfg, 3, 7)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_labels_and_range(self):
        img, mask = gen_phantom(PhantomConfig(image_size=32), 0, 0)
        assert set(np.unique(mask)) <= {0, 1, 2, 3}
        assert img.min() >= 0.0 and img.max() <= 1.0

    def test_domains_share_geometry_but_not_intensities(self):
        a_cfg, b_cfg = PhantomConfig(domain="A"), PhantomConfig(domain="B")
        dists = []
        for sid in range(100):
            ia, ma = gen_phantom(a_cfg, sid, 11)
            ib, mb = gen_phantom(b_cfg, sid, 11)
            np.testing.assert_array_equal(ma, mb)
            dists.append(np.abs(hist(ia) - hist(ib)).sum())
        assert min(dists) > 0.1

    def test_every_class_appears(self):
        seen = set()
        for sid in range(20):
            seen |= set(np.unique(gen_phantom(PhantomConfig(), sid, 0)[1]).tolist())
        assert seen == {0, 1, 2, 3}

    def test_palette_separation_enforced(self):
        with pytest.raises(ValueError):
            PhantomConfig(palettes={"A": ((0.3, 0.35, 0.7, 0.9), 1.0)})
        with pytest.raises(ValueError):
            PhantomConfig(domain="C")


class TestDice:
    def test_identical(self):
        m = np.array([[0, 1], [1, 2]])
        assert dice_score(m, m, 1) == 1.0

    def test_disjoint(self):
        assert dice_score(np.array([1, 0]), np.array([0, 1]), 1) == 0.0

    def test_half_coverage(self):
        truth = np.zeros((20, 20), int)
        truth[:10, :10] = 1
        pred = np.zeros_like(truth)
        pred[:5, :10] = 1
        assert dice_score(pred, truth, 1) == pytest.approx(2 * 50 / 150, abs=1e-12)

    def test_both_empty(self):
        assert dice_score(np.zeros(4, int), np.zeros(4, int), 2) == 1.0

    @given(arrays(np.int64, (6, 6), elements=st.integers(0, 3)), arrays(np.int64, (6, 6), elements=st.integers(0, 3)),
           st.integers(0, 3))
    def test_counting_oracle(self, p, t, c):
        a, b = (p == c).ravel().tolist(), (t == c).ravel().tolist()
        inter = sum(x and y for x, y in zip(a, b))
        want = 1.0 if sum(a) + sum(b) == 0 else 2 * inter / (sum(a) + sum(b))
        assert dice_score(p, t, c) == pytest.approx(want, abs=1e-12)
        assert dice_score(p, t, c) == dice_score(t, p, c)


class TestPgm:
    @settings(max_examples=25, deadline=None)
    @given(arrays(np.int64, st.tuples(st.integers(1, 9), st.integers(1, 9)), elements=st.integers(0, 3)))
    def test_mask_roundtrip(self, tmp_path_factory, m):
        path = tmp_path_factory.mktemp("pgm") / "m.pgm"
        dataio.write_mask(path, m, 3)
        np.testing.assert_array_equal(dataio.read_mask(path), m)

    def test_image_roundtrip_within_quantization(self, tmp_path):
        img = np.random.default_rng(0).uniform(size=(7, 5))
        dataio.write_image(tmp_path / "i.pgm", img)
        assert np.abs(dataio.read_image(tmp_path / "i.pgm") - img).max() <= 0.5 / 65535 + 1e-15

    def test_header(self, tmp_path):
        dataio.write_mask(tmp_path / "m.pgm", np.zeros((2, 3), int), 3)
        assert (tmp_path / "m.pgm").read_bytes().startswith(b"P5\n3 2\n3\n")
        dataio.write_image(tmp_path / "i.pgm", np.ones((2, 2)))
        raw = (tmp_path / "i.pgm").read_bytes()
        assert raw.startswith(b"P5\n2 2\n65535\n") and raw.endswith(b"\xff\xff")

    def test_comments_in_header(self, tmp_path):
        (tmp_path / "c.pgm").write_bytes(b"P5\n# made by hand\n2 1\n255\n\x00\x07")
        a, maxval = dataio.read_pgm(tmp_path / "c.pgm")
        assert maxval == 255 and a.tolist() == [[0, 7]]

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.pgm").write_bytes(b"P2\n1 1\n255\n0")
        with pytest.raises(FormatError) as e:
            dataio.read_pgm(tmp_path / "x.pgm")
        assert e.value.offset == 0

    def test_non_integer_field_offset(self, tmp_path):
        (tmp_path / "x.pgm").write_bytes(b"P5\n4 q\n255\n")
        with pytest.raises(FormatError) as e:
            dataio.read_pgm(tmp_path / "x.pgm")
        assert e.value.offset == 5

    def test_truncated_raster(self, tmp_path):
        (tmp_path / "x.pgm").write_bytes(b"P5\n4 4\n255\n" + bytes(10))
        with pytest.raises(FormatError):
            dataio.read_pgm(tmp_path / "x.pgm")

    def test_truncated_header(self, tmp_path):
        (tmp_path / "x.pgm").write_bytes(b"P5\n4")
        with pytest.raises(FormatError):
            dataio.read_pgm(tmp_path / "x.pgm")

    def test_write_rejects_out_of_range(self, tmp_path):
        with pytest.raises(ValueError):
            dataio.write_mask(tmp_path / "m.pgm", np.array([[4]]), 3)


class TestSplits:
    @pytest.mark.parametrize("frac", dataio.LABELED_PRESETS)
    def test_fraction_and_determinism(self, frac):
        a = dataio.make_split(50, frac, 3)
        np.testing.assert_array_equal(a, dataio.make_split(50, frac, 3))
        assert a.sum() == round(frac * 50)

    def test_unknown_fraction(self):
        with pytest.raises(ValueError):
            dataio.make_split(10, 0.3, 0)

    def test_dataset_partition(self):
        ds = dataio.synth_dataset(10, seed=1, cfg=PhantomConfig(image_size=16))
        lab, unl = set(ds.labeled_indices()), set(ds.unlabeled_indices())
        assert not lab & unl and lab | unl == set(range(20))
        assert len(ds.domain("A")) == len(ds.domain("B")) == 10
        assert ds.domain("A").labeled_fraction == pytest.approx(0.2)
        assert len({s.id for s in ds.samples}) == 20

    def test_batches_are_half_labeled(self):
        ds = dataio.synth_dataset(20, domains=("A",), seed=2, cfg=PhantomConfig(image_size=16))
        for step in range(30):
            idx = dataio.sample_batch(ds, 4, step, 0)
            flags = [ds.samples[i].labeled for i in idx]
            assert sum(flags) == 2
        assert dataio.sample_batch(ds, 4, 5, 0) == dataio.sample_batch(ds, 4, 5, 0)

    def test_odd_batch_rejected(self):
        ds = dataio.synth_dataset(10, domains=("A",), cfg=PhantomConfig(image_size=16))
        with pytest.raises(ValueError):
            dataio.sample_batch(ds, 3, 0, 0)

    def test_fully_labeled_batches(self):
        ds = dataio.synth_dataset(10, domains=("A",), labeled_fraction=1.0, cfg=PhantomConfig(image_size=16))
        assert all(ds.samples[i].labeled for i in dataio.sample_batch(ds, 4, 0, 0))


def test_dataset_roundtrip(tmp_path):
    ds = dataio.synth_dataset(4, seed=5, cfg=PhantomConfig(image_size=16))
    dataio.save_dataset(ds, tmp_path)
    assert (tmp_path / "images" / "B" / "00004.pgm").exists()
    assert (tmp_path / "split.txt").read_text().splitlines()[0].split()[1] == "A"
    back = dataio.load_dataset(tmp_path)
    for s, t in zip(ds.samples, back.samples):
        assert (s.id, s.domain, s.labeled) == (t.id, t.domain, t.labeled)
        np.testing.assert_array_equal(s.mask, t.mask)
        assert np.abs(s.image - t.image).max() <= 0.5 / 65535 + 1e-15


def test_bad_split_line(tmp_path):
    (tmp_path / "split.txt").write_text("00001 A maybe\n")
    with pytest.raises(ValueError):
        dataio.load_dataset(tmp_path)


def test_metrics_csv(tmp_path):
    dataio.write_metrics_csv(tmp_path / "m.csv", {2: 0.5, 1: 0.25}, 0.375)
    assert (tmp_path / "m.csv").read_text().splitlines() == [
        "class,dice", "1,0.250000", "2,0.500000", "average,0.375000"]
