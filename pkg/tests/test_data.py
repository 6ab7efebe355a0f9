import numpy as np
import pytest

from lucenet import data as D
from lucenet.data import (AugmentParams, SynthParams, affine_resample,
                          augment, generate_dataset, load_pgm, load_ppm,
                          read_manifest, save_pgm, save_ppm, write_manifest)
from lucenet.rng import substream

SMALL = SynthParams(size=64, n_loose=8, n_well_fixed=8, seed=7)


@pytest.fixture(scope="module")
def small_dataset():
    return generate_dataset(SMALL)


# ---------------------------------------------------------------------------
# generator
# ---------------------------------------------------------------------------

def test_counts_and_labels(small_dataset):
    loose = [s for s in small_dataset if s.label == "loose"]
    fixed = [s for s in small_dataset if s.label == "well_fixed"]
    assert len(loose) == 8 and len(fixed) == 8


def test_well_fixed_has_no_mask(small_dataset):
    for s in small_dataset:
        if s.label == "well_fixed":
            assert s.lucency_mask is None
        else:
            assert s.lucency_mask is not None and s.lucency_mask.any()


def test_pixels_in_range(small_dataset):
    for s in small_dataset:
        assert s.pixels.dtype == np.float32
        assert s.pixels.min() >= 0.0 and s.pixels.max() <= 1.0


def test_generator_is_deterministic(small_dataset):
    again = generate_dataset(SMALL)
    for a, b in zip(small_dataset, again):
        assert a.id == b.id
        np.testing.assert_array_equal(a.pixels, b.pixels)


def test_zero_lucency_width_rejected():
    with pytest.raises(ValueError, match="width"):
        SynthParams(lucency_width=(0, 2))


def band_outer_ring(band):
    """Same-width ring just outside the band, away from the implant.

    The band encircles the implant, so of the connected components of ~band
    only the implant interior avoids the image border. The ring is then the
    next width-sized shell of the distance field around the implant.
    """
    from scipy import ndimage
    labels, _ = ndimage.label(~band)
    touching = np.unique(np.concatenate([labels[0], labels[-1],
                                         labels[:, 0], labels[:, -1]]))
    implant = (labels > 0) & ~np.isin(labels, touching)
    dist = ndimage.distance_transform_edt(~implant)
    width = int(np.ceil(dist[band].max()))
    return (dist > width) & (dist <= 2 * width)


def test_band_darker_than_outer_ring(small_dataset):
    # for every loose image: mean inside the band < mean in the same-width
    # ring just outside it, by at least half the configured contrast
    for s in small_dataset:
        if s.label != "loose":
            continue
        ring = band_outer_ring(s.lucency_mask)
        inner = s.pixels[s.lucency_mask].mean()
        outer = s.pixels[ring].mean()
        assert outer - inner >= SMALL.lucency_contrast * 0.5


def test_counts_validated():
    with pytest.raises(ValueError, match="counts"):
        generate_dataset(SynthParams(n_loose=0))


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def test_identity_ranges_give_bitwise_identity(small_dataset):
    sample = small_dataset[0]
    out = augment(sample, D.IDENTITY_AUGMENT, substream(0, "aug"))
    np.testing.assert_array_equal(out.pixels, sample.pixels)
    np.testing.assert_array_equal(out.lucency_mask, sample.lucency_mask)


def test_integer_translation_is_exact_shift():
    rng = np.random.default_rng(5)
    img = rng.random((16, 16)).astype(np.float32)
    out = affine_resample(img, rotation_deg=0.0, scale=1.0, tx=2.0, ty=0.0)
    # shifted right two columns, left border replicated
    np.testing.assert_array_equal(out[:, 2:], img[:, :-2])
    np.testing.assert_array_equal(out[:, 0], img[:, 0])
    np.testing.assert_array_equal(out[:, 1], img[:, 0])


def test_augment_preserves_label_id_shape_range(small_dataset):
    sample = small_dataset[0]
    params = AugmentParams()
    rng = substream(3, "aug-sweep")
    for _ in range(1000):
        out = augment(sample, params, rng)
        assert out.label == sample.label
        assert out.id == sample.id
        assert out.pixels.shape == sample.pixels.shape
        assert out.pixels.min() >= 0.0 and out.pixels.max() <= 1.0


def test_augment_param_validation():
    with pytest.raises(ValueError, match="rotation_deg"):
        AugmentParams(rotation_deg=-1.0)
    with pytest.raises(ValueError, match="scale_delta"):
        AugmentParams(scale_delta=1.0)


def test_rotation_moves_pixels(small_dataset):
    sample = small_dataset[0]
    out = affine_resample(sample.pixels, 10.0, 1.0, 0.0, 0.0)
    assert not np.array_equal(out, sample.pixels)


# ---------------------------------------------------------------------------
# PGM / PPM codecs
# ---------------------------------------------------------------------------

def test_pgm_roundtrip_quantization_bound(tmp_path):
    rng = np.random.default_rng(11)
    img = rng.random((9, 13)).astype(np.float32)
    path = tmp_path / "x.pgm"
    save_pgm(path, img)
    back = load_pgm(path)
    assert back.shape == img.shape
    assert np.abs(back - img).max() <= 1.0 / 255.0


def test_pgm_roundtrip_idempotent(tmp_path):
    rng = np.random.default_rng(12)
    img = rng.random((6, 6))
    p1, p2 = tmp_path / "a.pgm", tmp_path / "b.pgm"
    save_pgm(p1, img)
    first = load_pgm(p1)
    save_pgm(p2, first)
    second = load_pgm(p2)
    np.testing.assert_array_equal(first, second)
    assert p1.read_bytes()[p1.read_bytes().index(b"255\n"):] == \
        p2.read_bytes()[p2.read_bytes().index(b"255\n"):]


def test_pgm_errors(tmp_path):
    path = tmp_path / "bad.pgm"
    path.write_bytes(b"P6\n2 2\n255\n" + b"\x00" * 4)
    with pytest.raises(D.PgmFormatError, match="magic"):
        load_pgm(path)
    path.write_bytes(b"P5\n2 2\n255\n" + b"\x00" * 3)
    with pytest.raises(D.PgmFormatError, match="payload"):
        load_pgm(path)
    path.write_bytes(b"P5\n0 2\n255\n")
    with pytest.raises(D.PgmFormatError, match="dimensions"):
        load_pgm(path)
    path.write_bytes(b"P5\n2 2\n65535\n" + b"\x00" * 8)
    with pytest.raises(D.PgmFormatError, match="maxval"):
        load_pgm(path)


def test_pgm_header_comments_ok(tmp_path):
    path = tmp_path / "c.pgm"
    path.write_bytes(b"P5\n# made elsewhere\n2 2\n255\n" + bytes([0, 64, 128, 255]))
    img = load_pgm(path)
    np.testing.assert_allclose(img, np.array([[0, 64], [128, 255]]) / 255.0,
                               atol=1e-7)


def test_ppm_roundtrip(tmp_path):
    rng = np.random.default_rng(13)
    img = rng.random((5, 4, 3))
    path = tmp_path / "x.ppm"
    save_ppm(path, img)
    back = load_ppm(path)
    assert np.abs(back - img).max() <= 1.0 / 255.0


def test_save_pgm_validates_range(tmp_path):
    with pytest.raises(ValueError, match="0, 1"):
        save_pgm(tmp_path / "y.pgm", np.array([[1.5]]))


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

def test_manifest_roundtrip(tmp_path):
    records = [("a.pgm", "loose", "a"), ("b.pgm", "well_fixed", "b")]
    path = tmp_path / "manifest.csv"
    write_manifest(records, path)
    assert read_manifest(path) == records
    assert path.read_text().splitlines()[0] == "path,label,id"


def test_manifest_strict_label(tmp_path):
    path = tmp_path / "manifest.csv"
    path.write_text("path,label,id\na.pgm,Loose ,a\n")
    with pytest.raises(D.ManifestError, match="line 2"):
        read_manifest(path)


def test_manifest_bad_header(tmp_path):
    path = tmp_path / "manifest.csv"
    path.write_text("file,class,id\n")
    with pytest.raises(D.ManifestError, match="line 1"):
        read_manifest(path)


def test_manifest_duplicate_path(tmp_path):
    path = tmp_path / "manifest.csv"
    path.write_text("path,label,id\na.pgm,loose,a\na.pgm,loose,b\n")
    with pytest.raises(D.ManifestError, match="duplicate"):
        read_manifest(path)


def test_dataset_roundtrip_on_disk(tmp_path, small_dataset):
    manifest = D.save_dataset(small_dataset, tmp_path / "ds")
    loaded = D.load_dataset(manifest)
    assert [s.id for s in loaded] == [s.id for s in small_dataset]
    for a, b in zip(small_dataset, loaded):
        assert np.abs(a.pixels - b.pixels).max() <= 1.0 / 255.0
        if a.lucency_mask is None:
            assert b.lucency_mask is None
        else:
            np.testing.assert_array_equal(a.lucency_mask, b.lucency_mask)
