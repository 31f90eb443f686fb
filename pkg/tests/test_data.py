import numpy as np
import pytest
from scipy.ndimage import uniform_filter

from hpsnet import ContractError, DataError, IoError
from hpsnet.data import (
    GID5_CLASSES,
    GID15_CLASSES,
    Sample,
    crop_patches,
    decode_pnm,
    encode_pnm,
    flip_pair,
    gen_synthetic,
    gid_hierarchy,
    identity_hierarchy,
    read_manifest,
    read_pnm,
    read_raster,
    remap_labels,
    write_dataset,
    write_pnm,
    write_raster,
)


def pixel_features(samples):
    """Per-pixel colour plus 3x3 local variance of the grey level."""
    feats, labels = [], []
    for s in samples:
        img = s.image[0]
        g = img.mean(axis=0)
        var = np.maximum(uniform_filter(g * g, 3) - uniform_filter(g, 3) ** 2, 0)
        feats.append(np.concatenate([img.reshape(3, -1), var.reshape(1, -1)]).T)
        labels.append(s.labels.reshape(-1))
    x, y = np.concatenate(feats), np.concatenate(labels)
    keep = y != 255
    return x[keep], y[keep]


class TestSynthetic:
    def test_label_values(self):
        for s in gen_synthetic(5, 4, 32, 0):
            assert set(np.unique(s.labels)) <= {0, 1, 2, 3, 255}
            assert s.image.shape == (1, 3, 32, 32)
            assert 0.0 <= s.image.min() and s.image.max() <= 1.0

    def test_deterministic(self):
        a, b = gen_synthetic(3, 5, 24, 7), gen_synthetic(3, 5, 24, 7)
        for s, t in zip(a, b):
            np.testing.assert_array_equal(s.image, t.image)
            np.testing.assert_array_equal(s.labels, t.labels)
            assert s.id == t.id

    def test_seed_matters(self):
        assert not np.array_equal(gen_synthetic(1, 4, 32, 0)[0].labels, gen_synthetic(1, 4, 32, 1)[0].labels)

    def test_class_frequency(self):
        labels = np.stack([s.labels for s in gen_synthetic(100, 4, 64, 3)])
        for c in range(4):
            assert (labels == c).mean() >= 0.01

    def test_ignore_only_on_boundaries(self):
        s = gen_synthetic(1, 4, 64, 0, ignore_fraction=1.0)[0]
        ignored = s.labels == 255
        assert ignored.any()
        clean = gen_synthetic(1, 4, 64, 0, ignore_fraction=0.0)[0]
        assert not (clean.labels == 255).any()
        # every ignored pixel has a neighbour of a different class in the clean map
        lab = clean.labels.astype(int)
        pad = np.pad(lab, 1, mode="edge")
        differs = np.zeros_like(lab, bool)
        for dy, dx in ((0, 1), (2, 1), (1, 0), (1, 2)):
            differs |= pad[dy : dy + 64, dx : dx + 64] != lab
        assert np.all(differs[ignored])

    def test_separable_by_colour_and_texture(self):
        xtr, ytr = pixel_features(gen_synthetic(60, 4, 64, 11))
        xte, yte = pixel_features(gen_synthetic(40, 4, 64, 12))
        mu, sd = xtr.mean(0), xtr.std(0)
        cent = np.stack([((xtr - mu) / sd)[ytr == c].mean(0) for c in range(4)])

        def accuracy(cols):
            z = ((xte - mu) / sd)[:, cols]
            d = ((z[:, None] - cent[None, :, cols]) ** 2).sum(-1)
            return (d.argmin(1) == yte).mean()

        assert accuracy([0, 1, 2, 3]) > 0.6
        assert accuracy([0, 1, 2]) < accuracy([0, 1, 2, 3])

    def test_contracts(self):
        with pytest.raises(ContractError):
            gen_synthetic(1, 1, 32, 0)
        with pytest.raises(ContractError):
            gen_synthetic(1, 4, 8, 0)
        with pytest.raises(ContractError):
            gen_synthetic(1, 4, 32, 0, ignore_fraction=1.5)


class TestCrop:
    def test_grid_count(self):
        assert len(crop_patches(gen_synthetic(1, 4, 64, 0)[0], 32)) == 4

    def test_remainder_dropped(self):
        s = Sample(np.zeros((1, 3, 70, 70)), np.zeros((70, 70), np.uint8), "x")
        assert len(crop_patches(s, 32)) == 4

    def test_reassembly(self):
        s = gen_synthetic(1, 4, 50, 0)[0]
        patches = crop_patches(s, 16)
        img = np.block([[patches[3 * i + j].image for j in range(3)] for i in range(3)])
        lab = np.block([[patches[3 * i + j].labels for j in range(3)] for i in range(3)])
        np.testing.assert_array_equal(img, s.image[:, :, :48, :48])
        np.testing.assert_array_equal(lab, s.labels[:48, :48])

    def test_patch_too_large(self):
        with pytest.raises(ContractError):
            crop_patches(gen_synthetic(1, 4, 32, 0)[0], 40)

    def test_flip_pair_consistent(self, rng):
        img = rng.random((3, 4, 5))
        lab = rng.integers(0, 3, (4, 5))
        fi, fl = flip_pair(img, lab, True, True)
        np.testing.assert_array_equal(fi, img[:, ::-1, ::-1])
        np.testing.assert_array_equal(fl, lab[::-1, ::-1])


class TestSample:
    def test_label_shape_checked(self):
        with pytest.raises(Exception):
            Sample(np.zeros((1, 3, 4, 4)), np.zeros((3, 4), np.uint8))

    def test_non_finite(self):
        img = np.zeros((1, 3, 2, 2))
        img[0, 0, 0, 0] = np.nan
        with pytest.raises(DataError):
            Sample(img, np.zeros((2, 2), np.uint8))


class TestHierarchy:
    def test_fifteen_to_five(self):
        h = gid_hierarchy()
        assert len(GID15_CLASSES) == 15 and len(GID5_CLASSES) == 5
        assert sorted(h.fine_to_coarse) == list(range(15))
        assert len(set(h.fine_to_coarse.values())) == 5

    def test_named_groups(self):
        h = gid_hierarchy()
        coarse = {GID15_CLASSES[f]: GID5_CLASSES[c] for f, c in h.fine_to_coarse.items()}
        assert coarse["paddy field"] == "farmland"
        assert coarse["garden land"] == "forest"
        assert coarse["artificial meadow"] == "meadow"
        assert coarse["traffic land"] == "built-up"
        assert coarse["pond"] == "water"

    def test_single_class_raster(self):
        out = remap_labels(np.full((3, 3), 9, np.uint8), gid_hierarchy())
        assert np.all(out == 3)

    def test_ignore_preserved(self):
        out = remap_labels(np.array([[255, 0], [14, 255]], np.uint8), gid_hierarchy())
        np.testing.assert_array_equal(out, [[255, 0], [4, 255]])

    def test_unmapped_label(self):
        with pytest.raises(DataError):
            remap_labels(np.array([[15]]), gid_hierarchy())

    def test_identity_idempotent(self, rng):
        lab = rng.integers(0, 6, (5, 5)).astype(np.uint8)
        lab[0, 0] = 255
        h = identity_hierarchy(6)
        once = remap_labels(lab, h)
        np.testing.assert_array_equal(remap_labels(once, h), once)
        np.testing.assert_array_equal(once, lab)


class TestPnm:
    def test_round_trip_bytes(self, tmp_path, rng):
        rgb = rng.integers(0, 256, (5, 7, 3)).astype(np.uint8)
        gray = rng.integers(0, 256, (5, 7)).astype(np.uint8)
        write_pnm(tmp_path / "a.ppm", rgb)
        write_pnm(tmp_path / "a.pgm", gray)
        np.testing.assert_array_equal(read_pnm(tmp_path / "a.ppm"), rgb)
        np.testing.assert_array_equal(read_pnm(tmp_path / "a.pgm"), gray)
        raw = (tmp_path / "a.pgm").read_bytes()
        assert raw.startswith(b"P5\n7 5\n255\n")
        assert encode_pnm(decode_pnm(raw)) == raw

    def test_header_whitespace_and_comments(self):
        payload = bytes(range(6))
        buf = b"P5 # a comment\n\t3\r\n#another\n 2   255\n" + payload
        np.testing.assert_array_equal(decode_pnm(buf), np.arange(6, dtype=np.uint8).reshape(2, 3))

    def test_truncated_payload_offset(self):
        buf = b"P5\n4 4\n255\n" + bytes(10)
        with pytest.raises(IoError) as e:
            decode_pnm(buf)
        assert e.value.offset == len(buf)

    def test_bad_magic(self):
        with pytest.raises(IoError) as e:
            decode_pnm(b"P2\n1 1\n255\n0")
        assert e.value.offset == 0

    def test_bad_field(self):
        with pytest.raises(IoError) as e:
            decode_pnm(b"P5\n4 x\n255\n")
        assert e.value.offset == 5

    def test_unsupported_maxval(self):
        with pytest.raises(IoError):
            decode_pnm(b"P5\n1 1\n65535\n\x00\x00")

    def test_sample_round_trip(self, tmp_path):
        s = gen_synthetic(1, 4, 32, 0)[0]
        write_raster(s, tmp_path / "i.ppm", tmp_path / "l.pgm")
        back = read_raster(tmp_path / "i.ppm", tmp_path / "l.pgm")
        np.testing.assert_array_equal(back.image, s.image)
        np.testing.assert_array_equal(back.labels, s.labels)

    def test_truncated_file_gives_no_sample(self, tmp_path):
        s = gen_synthetic(1, 4, 32, 0)[0]
        write_raster(s, tmp_path / "i.ppm", tmp_path / "l.pgm")
        data = (tmp_path / "i.ppm").read_bytes()
        (tmp_path / "i.ppm").write_bytes(data[:-5])
        with pytest.raises(IoError):
            read_raster(tmp_path / "i.ppm", tmp_path / "l.pgm")

    def test_size_mismatch(self, tmp_path):
        write_pnm(tmp_path / "i.ppm", np.zeros((4, 4, 3), np.uint8))
        write_pnm(tmp_path / "l.pgm", np.zeros((4, 5), np.uint8))
        with pytest.raises(IoError):
            read_raster(tmp_path / "i.ppm", tmp_path / "l.pgm")

    def test_manifest(self, tmp_path):
        samples = gen_synthetic(3, 4, 32, 0)
        manifest = write_dataset(samples, tmp_path)
        assert manifest.read_text().count("\n") == 3
        back = read_manifest(manifest)
        for a, b in zip(samples, back):
            np.testing.assert_array_equal(a.labels, b.labels)

    def test_bad_manifest_line(self, tmp_path):
        (tmp_path / "m.txt").write_text("only_one_field\n")
        with pytest.raises(IoError):
            read_manifest(tmp_path / "m.txt")
