import numpy as np
import pytest

import oracles
from mmsformer.data import (
    BORDER,
    Dataset,
    DatasetManifest,
    SynthSpec,
    generate_synthetic,
    read_label,
    read_raster,
    write_label,
    write_raster,
)
from mmsformer.errors import ConfigError, FormatError, MissingFileError


def test_raster_round_trip_bit_identical(tmp_path, rng):
    x = rng.normal(size=(3, 17, 9)).astype(np.float32)
    write_raster(tmp_path / "a.tns", x)
    y = read_raster(tmp_path / "a.tns")
    assert y.dtype == np.float32 and y.tobytes() == x.tobytes()


def test_raster_is_little_endian_with_header(tmp_path):
    write_raster(tmp_path / "a.tns", np.array([[[1.0]]], dtype=np.float32))
    raw = (tmp_path / "a.tns").read_bytes()
    assert raw[:4] == b"TNSR" and raw[4:8] == (1).to_bytes(4, "little") and raw[8:12] == (3).to_bytes(4, "little")
    assert raw[-4:] == np.float32(1.0).tobytes()


def test_label_round_trip(tmp_path, rng):
    lab = rng.integers(0, 5, size=(7, 11))
    lab[0, 0] = 255
    write_label(tmp_path / "l.lbl", lab)
    np.testing.assert_array_equal(read_label(tmp_path / "l.lbl"), lab)


@pytest.mark.parametrize("cut", [3, 10, 20])
def test_truncated_raster_is_format_error(tmp_path, cut):
    write_raster(tmp_path / "a.tns", np.ones((3, 4, 4), np.float32))
    raw = (tmp_path / "a.tns").read_bytes()
    (tmp_path / "a.tns").write_bytes(raw[:-cut] if cut > 4 else raw[:cut])
    with pytest.raises(FormatError):
        read_raster(tmp_path / "a.tns")


def test_bad_magic_and_missing_file(tmp_path):
    (tmp_path / "x.lbl").write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(FormatError):
        read_label(tmp_path / "x.lbl")
    with pytest.raises(MissingFileError, match="nothere.tns"):
        read_raster(tmp_path / "nothere.tns")


def test_manifest_text_round_trip():
    m = DatasetManifest(["rgb", "nir"], ["a", "b"], {"train": ["0", "1"], "val": ["2"]}, (32, 64), "x")
    back = DatasetManifest.from_text(m.to_text())
    assert back == m


def test_incomplete_manifest():
    with pytest.raises(FormatError):
        DatasetManifest.from_text("modalities = a\n")


def test_structure_of_generated_dataset(tmp_path):
    ds = generate_synthetic(tmp_path, SynthSpec(num_modalities=3, num_classes=2, n_samples=8, extent=32))
    assert len(ds.ids("train")) == 8 and len(ds.modalities) == 3
    for m in [*ds.modalities, "labels"]:
        assert len(list((tmp_path / "train" / m).iterdir())) == 8
    assert ds.manifest.source == "synthetic:xor_fusion"


def test_subset_request_order(tmp_path):
    ds = generate_synthetic(tmp_path, SynthSpec(num_modalities=4, num_classes=3, n_samples=2, extent=32,
                                                mode="per_class_modality"), modality_names=["a", "b", "c", "d"])
    imgs, lab = ds.load_sample("train", "0000", ["d", "b"])
    assert len(imgs) == 2
    np.testing.assert_array_equal(imgs[0].data, read_raster(tmp_path / "train" / "d" / "0000.tns"))
    assert lab.shape == (32, 32)
    with pytest.raises(ConfigError):
        ds.load_sample("train", "0000", ["zz"])


def test_same_seed_gives_byte_identical_dataset(tmp_path):
    spec = SynthSpec(num_classes=3, mode="per_class_modality", n_samples=3, extent=32, noise_sigma=0.2, seed=5)
    generate_synthetic(tmp_path / "a", spec)
    generate_synthetic(tmp_path / "b", spec)
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


@pytest.mark.parametrize("mode,K", [("xor_fusion", 2), ("per_class_modality", 4), ("single_modality_sufficient", 3)])
def test_ignore_only_in_border_band(tmp_path, mode, K):
    ds = generate_synthetic(tmp_path, SynthSpec(num_classes=K, mode=mode, n_samples=2, extent=32))
    _, lab = ds.load_sample("train", "0001")
    inner = lab[BORDER:-BORDER, BORDER:-BORDER]
    assert (inner != 255).all() and inner.max() < K
    band = np.ones_like(lab, bool)
    band[BORDER:-BORDER, BORDER:-BORDER] = False
    assert (lab[band] == 255).all()


@pytest.mark.parametrize("bad", [
    dict(mode="xor_fusion", num_modalities=1),
    dict(mode="xor_fusion", num_classes=3),
    dict(mode="other"),
    dict(noise_sigma=-1.0),
    dict(n_samples=0),
])
def test_invalid_spec(tmp_path, bad):
    with pytest.raises(ConfigError):
        generate_synthetic(tmp_path, SynthSpec(**bad))


def _pixels(ds, modality):
    X, y = [], []
    for sid in ds.ids("train"):
        imgs, lab = ds.load_sample("train", sid, [modality])
        keep = lab != 255
        X.append(imgs[0].data.reshape(3, -1).T[keep.ravel()])
        y.append(lab[keep])
    return np.concatenate(X).astype(np.float64), np.concatenate(y)


@pytest.fixture(scope="module")
def xor_ds(tmp_path_factory):
    return generate_synthetic(tmp_path_factory.mktemp("xor"), SynthSpec(n_samples=16, extent=32))


@pytest.mark.parametrize("modality", [0, 1])
def test_single_modality_probe_is_at_chance(xor_ds, modality):
    X, y = _pixels(xor_ds, xor_ds.modalities[modality])
    assert oracles.logistic_probe_accuracy(X, y) <= 0.55


def test_both_modalities_separate_perfectly(xor_ds):
    X1, y = _pixels(xor_ds, xor_ds.modalities[0])
    X2, _ = _pixels(xor_ds, xor_ds.modalities[1])
    pred = (X1[:, 0] * X2[:, 0] > 0).astype(int)
    assert (pred == y).all()


def test_per_class_modality_carries_class_only_in_its_modality(tmp_path):
    ds = generate_synthetic(tmp_path, SynthSpec(num_modalities=2, num_classes=3, mode="per_class_modality",
                                                n_samples=2, extent=32))
    imgs, lab = ds.load_sample("train", "0000")
    for m, c in ((0, 1), (1, 2)):
        x = imgs[m].data
        assert np.abs(x[:, lab == c]).min() > 0.1
        others = (lab != c) & (lab != 255)
        assert np.abs(x[:, others]).max() == 0.0


def test_missing_dataset_dir(tmp_path):
    with pytest.raises(MissingFileError, match="nope"):
        Dataset(tmp_path / "nope")
