import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from PIL import Image

from mixercseg.data import (
    CrackSpec,
    generate,
    load_dataset,
    read_png,
    split,
    split_counts,
    write_dataset,
    write_pgm,
    write_png,
)
from mixercseg.exceptions import ConfigError, ImageIOError


def test_no_cracks_gives_empty_mask():
    for s in generate(CrackSpec(n_cracks=0), 5, 32, 32):
        assert not s.mask.any()


def test_same_seed_same_samples():
    a = generate(CrackSpec(seed=3), 4, 32, 32)
    b = generate(CrackSpec(seed=3), 4, 32, 32)
    for x, y in zip(a, b):
        assert np.array_equal(x.image, y.image) and np.array_equal(x.mask, y.mask) and x.id == y.id
    c = generate(CrackSpec(seed=4), 1, 32, 32)
    assert not np.array_equal(a[0].image, c[0].image)


def test_sample_depends_only_on_index():
    few = generate(CrackSpec(seed=1), 2, 32, 32)
    many = generate(CrackSpec(seed=1), 5, 32, 32)
    assert np.array_equal(few[1].image, many[1].image)


def test_sample_invariants():
    for s in generate(CrackSpec(), 10, 64, 64):
        assert s.image.shape == (3, 64, 64) and s.mask.shape == (1, 64, 64)
        assert s.image.dtype == np.float32
        assert np.isfinite(s.image).all()
        assert s.image.min() >= 0 and s.image.max() <= 1
        assert set(np.unique(s.mask)) <= {0.0, 1.0}


def test_foreground_fraction_regime():
    fractions = [s.mask.mean() for s in generate(CrackSpec(), 100, 64, 64)]
    assert 0.005 <= np.mean(fractions) <= 0.10


def test_cracks_darker_than_background():
    for s in generate(CrackSpec(noise=0.0), 10, 64, 64):
        if s.mask.any():
            gray = s.image.mean(axis=0)
            assert gray[s.mask[0] > 0].mean() < gray[s.mask[0] == 0].mean()


@pytest.mark.parametrize("change", [
    {"width_range": (0.5, 2.0)},
    {"width_range": (3.0, 2.0)},
    {"branch_prob": 1.5},
    {"n_cracks": -1},
    {"contrast": (0.5, 1.2)},
    {"texture_scale": 0.0},
])
def test_spec_validation(change):
    with pytest.raises(ConfigError):
        CrackSpec(**change).validate()


def test_spec_from_dict():
    spec = CrackSpec.from_dict({"width_range": [1, 2], "seed": 9})
    assert spec.width_range == (1, 2) and spec.seed == 9
    with pytest.raises(ConfigError):
        CrackSpec.from_dict({"cracks": 3})


def test_ten_samples_split_seven_one_two():
    assert split_counts(10, (7, 1, 2)) == [7, 1, 2]
    train, val, test = split(list(range(10)), (7, 1, 2), seed=0)
    assert (len(train), len(val), len(test)) == (7, 1, 2)


@given(st.integers(3, 200), st.integers(0, 2 ** 31 - 1))
def test_split_disjoint_and_covering(n, seed):
    parts = split(list(range(n)), (7, 1, 2), seed=seed)
    flat = [i for p in parts for i in p]
    assert sorted(flat) == list(range(n))
    assert split(list(range(n)), (7, 1, 2), seed=seed) == parts


def test_split_errors():
    with pytest.raises(ConfigError):
        split_counts(2, (7, 1, 2))
    with pytest.raises(ConfigError):
        split_counts(10, (1, -1, 2))


def test_png_round_trip(tmp_path, rng):
    arr = rng.random((3, 8, 5))
    write_png(arr, tmp_path / "a.png")
    back = read_png(tmp_path / "a.png")
    assert back.shape == (3, 8, 5)
    assert np.abs(back - arr).max() <= 0.5 / 255 + 1e-7


def test_mask_png_is_binary(tmp_path):
    s = generate(CrackSpec(), 1, 32, 32)[0]
    write_png(s.mask, tmp_path / "m.png")
    assert set(np.unique(np.asarray(Image.open(tmp_path / "m.png")))) <= {0, 255}


def test_pgm_is_binary_graymap(tmp_path, rng):
    arr = rng.random((6, 4))
    write_pgm(arr, tmp_path / "p.pgm")
    raw = (tmp_path / "p.pgm").read_bytes()
    assert raw.startswith(b"P5")
    with Image.open(tmp_path / "p.pgm") as img:
        assert img.mode == "L" and img.size == (4, 6)
        np.testing.assert_array_equal(np.asarray(img), np.round(arr * 255).astype(np.uint8))


def test_non_image_raises(tmp_path):
    bad = tmp_path / "bad.png"
    bad.write_text("not an image")
    with pytest.raises(ImageIOError, match="bad.png"):
        read_png(bad)
    with pytest.raises(ImageIOError):
        read_png(tmp_path / "missing.png")


def test_dataset_round_trip(tmp_path):
    samples = generate(CrackSpec(seed=2), 10, 32, 32)
    train, val, test = split(samples, seed=2)
    write_dataset(tmp_path, samples, {"train": train, "val": val, "test": test}, meta={"size": 32})
    index = json.loads((tmp_path / "split.json").read_text())
    assert index["meta"] == {"size": 32}
    loaded = load_dataset(tmp_path)
    assert [s.id for s in loaded["test"]] == [s.id for s in test]
    for orig, back in zip(test, loaded["test"]):
        assert np.array_equal(orig.mask, back.mask)
        assert np.abs(orig.image - back.image).max() <= 0.5 / 255 + 1e-6


def test_missing_split_file(tmp_path):
    with pytest.raises(ImageIOError):
        load_dataset(tmp_path)
