"""Synthetic dataset tests: box tightness against the pixel mask,
balance, determinism and persistence."""

import numpy as np
import pytest

from avbench import data
from avbench.errors import FormatError


@pytest.fixture(scope="module")
def small_ds():
    return data.gen_synth_dataset(num_classes=10, per_class=4, h=64, w=64, seed=123)


def object_mask(im, box, label):
    """Pixels that lean toward the object's color family."""
    fam = data.COLOR_FAMILIES[label % 2]
    oth = data.COLOR_FAMILIES[1 - label % 2]
    px = im.pixels
    # object pixels sit much closer to their own family color than to the
    # other one; the near-achromatic background scores close to zero
    margin = (np.abs(px - oth[:, None, None]).sum(axis=0)
              - np.abs(px - fam[:, None, None]).sum(axis=0))
    return margin > 0.42


def test_class_balance_and_order(small_ds):
    labels = small_ds.label_array()
    assert len(small_ds) == 40
    for c in range(10):
        assert (labels == c).sum() == 4
    # class-block order
    assert np.array_equal(labels, np.repeat(np.arange(10), 4))


def test_pixel_range_and_dtype(small_ds):
    x = small_ds.pixel_array()
    assert x.dtype == np.float32
    assert x.shape == (40, 3, 64, 64)
    assert x.min() >= 0.0 and x.max() <= 1.0


def test_boxes_are_tight_around_colored_pixels(small_ds):
    for im in small_ds.images:
        x0, y0, x1, y1 = im.boxes[0]
        assert 0 <= x0 < x1 <= 64 and 0 <= y0 < y1 <= 64
        m = object_mask(im, im.boxes[0], im.labels[0])
        inside = m[y0:y1, x0:x1]
        # every box edge touches object-colored pixels
        assert inside[0].any() and inside[-1].any()
        assert inside[:, 0].any() and inside[:, -1].any()


def test_same_seed_is_byte_identical():
    a = data.gen_synth_dataset(num_classes=4, per_class=2, h=48, w=48, seed=7)
    b = data.gen_synth_dataset(num_classes=4, per_class=2, h=48, w=48, seed=7)
    assert np.array_equal(a.pixel_array(), b.pixel_array())
    assert [im.boxes for im in a.images] == [im.boxes for im in b.images]
    c = data.gen_synth_dataset(num_classes=4, per_class=2, h=48, w=48, seed=8)
    assert not np.array_equal(a.pixel_array(), c.pixel_array())


def test_per_image_streams_independent_of_per_class():
    """Image (label, j) is identical no matter how many images follow it."""
    a = data.gen_synth_dataset(num_classes=2, per_class=3, h=48, w=48, seed=9)
    b = data.gen_synth_dataset(num_classes=2, per_class=1, h=48, w=48, seed=9)
    assert np.array_equal(a.images[0].pixels, b.images[0].pixels)
    assert np.array_equal(a.images[3].pixels, b.images[1].pixels)


def test_multi_fraction_adds_disjoint_second_object():
    ds = data.gen_synth_dataset(num_classes=10, per_class=6, h=64, w=64,
                                seed=11, multi_fraction=0.8)
    multi = [im for im in ds.images if len(im.labels) == 2]
    assert multi, "no multi-object images generated"
    for im in multi:
        assert im.labels[0] != im.labels[1]
        (ax0, ay0, ax1, ay1), (bx0, by0, bx1, by1) = im.boxes
        # boxes may touch but the second object avoided the first's pixels,
        # so the boxes cannot coincide
        assert (ax0, ay0, ax1, ay1) != (bx0, by0, bx1, by1)


def test_split_train_test_blocks():
    ds = data.gen_synth_dataset(num_classes=4, per_class=5, h=48, w=48, seed=3)
    train, test = data.split_train_test(ds, 2, num_classes=4)
    assert len(train) == 12 and len(test) == 8
    assert np.array_equal(test.label_array(), np.repeat(np.arange(4), 2))
    # test images are exactly the tail of each class block
    assert np.array_equal(test.images[0].pixels, ds.images[3].pixels)


def test_save_load_round_trip(tmp_path, small_ds):
    data.save_dataset(str(tmp_path / "d"), small_ds, tag="t")
    ds2 = data.load_dataset(str(tmp_path / "d"))
    assert np.array_equal(ds2.pixel_array(), small_ds.pixel_array())
    assert [im.labels for im in ds2.images] == [im.labels for im in small_ds.images]
    assert [im.boxes for im in ds2.images] == [im.boxes for im in small_ds.images]


def test_load_rejects_bad_header(tmp_path):
    d = tmp_path / "d"
    d.mkdir()
    (d / "manifest.txt").write_text("WRONG 9\n")
    with pytest.raises(FormatError):
        data.load_dataset(str(d))


def test_class_names_cover_all_labels():
    names = {data.class_name(c) for c in range(data.NUM_CLASSES)}
    assert len(names) == data.NUM_CLASSES
    assert "disk_warm" in names and "ring_cold" in names
