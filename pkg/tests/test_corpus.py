import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from micap.augment import AugmentPolicy, augment, bilinear_resize
from micap.corpus import (Bag, ImageCache, ManifestError, bag_stats, compose_batches, load_image, load_manifest,
                          save_image, write_manifest)
from micap.synthetic import ARCH_SIZE_HISTOGRAM, arch_shaped_bags


def _write(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records))
    return path


@pytest.fixture
def image_dir(tmp_path):
    (tmp_path / "img").mkdir()
    for name in ("a.png", "b.png", "c.png"):
        save_image(tmp_path / "img" / name, np.full((3, 8, 8), 0.5))
    return tmp_path


def rec(bag_id, refs, caption="a caption", source="book"):
    return {"bag_id": bag_id, "image_refs": refs, "caption": caption, "source": source}


def test_refs_resolve_relative_to_manifest(image_dir):
    bags = load_manifest(_write(image_dir / "m.jsonl", [rec("x", ["img/a.png", "img/b.png"]), rec("y", ["img/c.png"])]))
    assert [b.size for b in bags] == [2, 1]
    assert bags[0].image_refs[0] == str(image_dir / "img" / "a.png")


@pytest.mark.parametrize("record,message", [
    (rec("x", ["img/a.png", "img/missing.png"]), "line 2.*does not resolve"),
    (rec("x", ["img/a.png"], caption="  "), "line 2.*empty caption"),
    (rec("x", []), "line 2.*non-empty"),
    (rec("x", ["img/a.png"], source="blog"), "line 2.*source"),
    ({"bag_id": "x", "caption": "c", "source": "book"}, "line 2.*image_refs"),
])
def test_bad_records_name_their_line(image_dir, record, message):
    with pytest.raises(ManifestError, match=message):
        load_manifest(_write(image_dir / "m.jsonl", [rec("ok", ["img/a.png"]), record]))


def test_duplicate_ids_and_missing_file(image_dir):
    with pytest.raises(ManifestError, match="duplicate"):
        load_manifest(_write(image_dir / "m.jsonl", [rec("x", ["img/a.png"]), rec("x", ["img/b.png"])]))
    with pytest.raises(FileNotFoundError):
        load_manifest(image_dir / "absent.jsonl")


def test_write_then_load_round_trip(image_dir):
    bags = load_manifest(_write(image_dir / "m.jsonl", [rec("x", ["img/a.png", "img/b.png"])]))
    write_manifest(image_dir / "n.jsonl", bags)
    assert load_manifest(image_dir / "n.jsonl") == bags


def test_arch_shaped_statistics():
    stats = bag_stats(arch_shaped_bags())
    assert stats.histogram == ARCH_SIZE_HISTOGRAM
    assert (stats.total_bags, stats.total_images) == (11816, 15164)
    assert stats.to_csv().splitlines()[-2:] == ["total_bags,11816", "total_images,15164"]


def test_stats_of_small_sets():
    assert bag_stats([Bag("a", ("x",), "c")]).histogram == {1: 1}
    assert bag_stats([]).total_bags == 0


bag_sets = st.lists(st.integers(1, 9), min_size=1, max_size=80).map(
    lambda sizes: [Bag(f"b{i}", tuple(f"{i}/{j}" for j in range(k)), "c") for i, k in enumerate(sizes)])


@settings(max_examples=1000)
@given(bag_sets, st.integers(0, 2**31 - 1))
def test_batch_plans_partition_without_splitting(bags, seed):
    plan = compose_batches(bags, 32, seed)
    ids = plan.bag_ids()
    assert sorted(ids) == sorted(b.bag_id for b in bags) and len(ids) == len(set(ids))
    size = {b.bag_id: b.size for b in bags}
    assert all(sum(size[i] for i in batch) <= 32 for batch in plan.batches)


def test_batch_plan_depends_on_epoch_seed_only():
    bags = arch_shaped_bags()[:300]
    assert compose_batches(bags, 32, 5).batches == compose_batches(bags, 32, 5).batches
    assert compose_batches(bags, 32, 5).batches != compose_batches(bags, 32, 6).batches


def test_oversized_bag_is_rejected():
    with pytest.raises(ValueError, match="max_images"):
        compose_batches([Bag("big", tuple(str(i) for i in range(40)), "c")], 32)


def test_image_loading_resizes(tmp_path):
    save_image(tmp_path / "x.png", np.random.default_rng(0).random((3, 20, 10)))
    img = load_image(tmp_path / "x.png", 16)
    assert img.shape == (3, 16, 16) and img.dtype == np.float32 and 0 <= img.min() and img.max() <= 1
    cache = ImageCache(16)
    assert cache(str(tmp_path / "x.png")) is cache(str(tmp_path / "x.png"))


# -- augmentation -----------------------------------------------------------------------

def test_identity_policy_is_identity(rng):
    img = rng.random((2, 3, 16, 16)).astype(np.float32)
    assert np.array_equal(augment(img, AugmentPolicy.identity(), 3), img)


@given(st.integers(0, 10**6))
def test_augment_is_pure_in_seed(seed):
    img = np.random.default_rng(1).random((3, 16, 16)).astype(np.float32)
    full = AugmentPolicy(crop_p=1, jitter_p=1, gaussian_p=1, salt_pepper_p=1, jpeg_p=1)
    a, b = augment(img, full, seed), augment(img, full, seed)
    assert np.array_equal(a, b) and a.shape == img.shape and a.dtype == img.dtype
    assert a.min() >= 0 and a.max() <= 1


def test_augment_does_not_mutate_input(rng):
    img = rng.random((3, 16, 16)).astype(np.float32)
    before = img.copy()
    augment(img, AugmentPolicy(crop_p=1, jitter_p=1), 0)
    assert np.array_equal(img, before)


def test_bilinear_resize_preserves_constants():
    assert np.allclose(bilinear_resize(np.full((2, 3, 3), 0.25), 7, 5), 0.25)
