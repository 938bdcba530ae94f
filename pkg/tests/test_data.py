import numpy as np
import pytest
from PIL import Image

from stn_icnn.data import (AUG_OPS, DataError, Sample, augment, load_helen, masks_from_categories,
                           preprocess, random_synth_spec, resize_nearest, synth_dataset,
                           synth_face, write_helen)
from stn_icnn.labels import HELEN_CATEGORIES


def _sample(h, w, rng, sid="s0"):
    cat = rng.integers(0, len(HELEN_CATEGORIES), size=(h, w))
    return Sample(sid, rng.random((3, h, w)).astype(np.float32), masks_from_categories(cat))


# loading

def test_write_load_round_trip(tmp_path, synth_small):
    samples = [s for s, _, _ in synth_small[:3]]
    write_helen(tmp_path, samples, {"train": [s.id for s in samples[:2]], "test": [samples[2].id]})
    train = load_helen(tmp_path, "train", validate_sizes=False)
    assert [s.id for s in train] == [s.id for s in samples[:2]]
    for got, want in zip(train, samples):
        np.testing.assert_array_equal(got.masks, want.masks)
        assert np.abs(got.image - want.image).max() <= 0.5 / 255 + 1e-6
    assert load_helen(tmp_path, "test", validate_sizes=False)[0].split == "test"


def test_overlapping_masks_repaired_by_argmax(tmp_path, rng):
    s = _sample(20, 20, rng, "ov")
    write_helen(tmp_path, [s], {"train": ["ov"]})
    # mark a nose pixel also as skin at a higher raw value
    p = tmp_path / "labels" / "ov" / "ov_lbl01.png"
    lab = np.asarray(Image.open(p)).copy()
    lab[3, 4] = 255
    Image.fromarray(lab).save(p)
    p6 = tmp_path / "labels" / "ov" / "ov_lbl06.png"
    nose = np.asarray(Image.open(p6)).copy()
    nose[3, 4] = 200
    Image.fromarray(nose).save(p6)
    a = load_helen(tmp_path, "train", validate_sizes=False)[0]
    b = load_helen(tmp_path, "train", validate_sizes=False)[0]
    assert a.masks.sum(axis=0).max() == 1
    assert a.category_map()[3, 4] == 1
    np.testing.assert_array_equal(a.masks, b.masks)


def test_missing_label_names_the_id(tmp_path, rng):
    write_helen(tmp_path, [_sample(16, 16, rng, "abc")], {"train": ["abc"]})
    (tmp_path / "labels" / "abc" / "abc_lbl04.png").unlink()
    with pytest.raises(DataError, match="abc"):
        load_helen(tmp_path, "train", validate_sizes=False)


def test_id_absent_on_disk(tmp_path):
    (tmp_path / "exemplars.txt").write_text("ghost\n")
    with pytest.raises(DataError, match="ghost"):
        load_helen(tmp_path, "train")


def test_standard_split_sizes_enforced(tmp_path, rng):
    write_helen(tmp_path, [_sample(16, 16, rng, "a")], {"train": ["a"], "val": ["a"], "test": ["a"]})
    with pytest.raises(DataError, match="2000"):
        load_helen(tmp_path, "train")


# preprocessing

def test_preprocess_rectangular(rng):
    p = preprocess(_sample(300, 400, rng))
    assert p.image_resized.shape == (3, 128, 128)
    assert p.image_padded.shape == (3, 400, 400)
    assert p.offsets == (50, 0)
    assert np.all(p.image_padded[:, :50] == 0) and np.all(p.image_padded[:, 350:] == 0)


def test_preprocess_square_is_identity_padding(rng):
    s = _sample(64, 64, rng)
    p = preprocess(s)
    assert p.offsets == (0, 0)
    np.testing.assert_array_equal(p.image_padded, s.image)


def test_pad_preserves_pixels_at_offset(rng):
    s = _sample(21, 34, rng)
    p = preprocess(s)
    np.testing.assert_array_equal(p.unpad(p.image_padded), s.image)
    np.testing.assert_array_equal(p.unpad(p.labels_padded), s.class_map())


def test_resized_labels_stay_binary(rng):
    s = _sample(50, 70, rng)
    oh = preprocess(s).resized_onehot
    assert set(np.unique(oh)) <= {0.0, 1.0}
    np.testing.assert_array_equal(oh.sum(axis=0), 1)
    assert set(np.unique(resize_nearest(s.class_map(), (13, 9)))) <= set(np.unique(s.class_map()))


def test_preprocess_too_small(rng):
    with pytest.raises(DataError):
        preprocess(_sample(10, 40, rng))


# augmentation

@pytest.fixture(scope="module")
def augmented(synth_small):
    return [augment(s, seed=k) for k, (s, _, _) in enumerate(synth_small[:6])]


def test_augment_yields_five_with_i_ops(augmented):
    for outs in augmented:
        assert len(outs) == 5
        for i, o in enumerate(outs):
            ops = o.meta["aug_ops"]
            assert len(ops) == i == len(set(ops))
            assert set(ops) <= set(AUG_OPS)


def test_augment_ranges(augmented):
    for outs in augmented:
        for o in outs:
            p = o.meta["aug_params"]
            assert -15 <= p.get("angle", 0) <= 15
            sx, sy = p.get("shift", (0, 0))
            assert abs(sx) <= 0.2 * 128 and abs(sy) <= 0.2 * 128
            assert 0.2 <= p.get("scale", 1.0) <= 1.2


def test_augment_output_zero_is_identity(synth_small, augmented):
    src = synth_small[0][0]
    np.testing.assert_array_equal(augmented[0][0].image, src.image)
    np.testing.assert_array_equal(augmented[0][0].masks, src.masks)


def test_noise_leaves_masks_untouched(synth_small):
    src = synth_small[0][0]
    for seed in range(40):
        for o in augment(src, seed):
            if o.meta["aug_ops"] == ["noise"]:
                np.testing.assert_array_equal(o.masks, src.masks)
                assert not np.array_equal(o.image, src.image)
                return
    pytest.fail("no noise-only variant drawn")


def test_augment_deterministic_and_one_hot(synth_small):
    src = synth_small[2][0]
    a, b = augment(src, 9), augment(src, 9)
    for x, y in zip(a, b):
        assert x.image.tobytes() == y.image.tobytes()
        np.testing.assert_array_equal(x.masks.sum(axis=0), 1)


# synthetic faces

def test_synth_centroids_match_pixels(synth_small):
    for sample, _, cents in synth_small:
        cm = sample.category_map()
        for name, (cx, cy) in cents.items():
            cats = ["u_lip", "i_mouth", "l_lip"] if name == "mouth" else [name]
            ys, xs = np.nonzero(np.isin(cm, [HELEN_CATEGORIES.index(c) for c in cats]))
            assert abs(xs.mean() - cx) <= 0.5 and abs(ys.mean() - cy) <= 0.5


def test_synth_seeds_differ_and_repeat():
    a, b = random_synth_spec(1), random_synth_spec(2)
    assert a.parts != b.parts
    assert random_synth_spec(1) == random_synth_spec(1)
    x = synth_dataset(2, 5)
    y = synth_dataset(2, 5)
    assert x[1][0].image.tobytes() == y[1][0].image.tobytes()


def test_synth_samples_are_one_hot(synth_small):
    for sample, theta, _ in synth_small:
        np.testing.assert_array_equal(sample.masks.sum(axis=0), 1)
        assert 0 <= sample.image.min() and sample.image.max() <= 1
        assert theta.shape == (6, 2, 3)


def test_synth_overlapping_spec_rejected():
    spec = random_synth_spec(0)
    spec.parts["r_eye"] = spec.parts["l_eye"]
    with pytest.raises(DataError):
        synth_face(spec)
