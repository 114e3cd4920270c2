import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import FIXTURES
from opendet_lab.openset_eval import (ContainmentMode, SplitShortfallError, SplitSpec, build_split,
                                      ingest_annotations, wilderness_ratio)

SPLIT = FIXTURES / "split"


def sources():
    return ingest_annotations(SPLIT / "known_source.json"), ingest_annotations(SPLIT / "open_source.json")


def toy(images):
    anns = []
    for i, objs in enumerate(images, 1):
        for c in objs:
            anns.append({"id": len(anns) + 1, "image_id": i, "category_id": c, "bbox": [0, 0, 5, 5]})
    return ingest_annotations({"images": [{"id": i} for i in range(1, len(images) + 1)],
                               "categories": [{"id": c} for c in (1, 2, 10, 11)], "annotations": anns})


def test_t1_contains_only_group_images():
    known, open_ = sources()
    spec = SplitSpec.from_json(SPLIT / "t1_spec.json")
    m = build_split(spec, known, open_)
    group = set(spec.group_classes)
    per_image = {}
    for a in m["annotations"]:
        per_image.setdefault(a["image_id"], set()).add(a["category_id"])
    assert len(m["images"]) == 8
    assert all(per_image[im["id"]] & group for im in m["images"])


def test_t2_has_no_close_set_annotations_and_ratio():
    known, open_ = sources()
    spec = SplitSpec.from_json(SPLIT / "t2_spec.json")
    m = build_split(spec, known, open_)
    opened = [im["id"] for im in m["images"] if im["source"] == "open"]
    close = set(spec.close_set_classes)
    assert not any(a["category_id"] in close for a in m["annotations"] if a["image_id"] in opened)
    assert m["open_set"]["known_images"] == m["open_set"]["open_images"] == 6
    assert abs(wilderness_ratio(m) * 6 - spec.wilderness_ratio * 6) <= 1


def test_containing_toy_source_keeps_exactly_group_images():
    src = toy([[1], [10], [2], [1, 11]])
    spec = SplitSpec([1, 2], [[10, 11]], open_image_count=2)
    m = build_split(spec, None, src)
    assert sorted(im["source_image_id"] for im in m["images"]) == [2, 4]


def test_disjoint_shortfall():
    src = toy([[1], [2, 10], [1, 11]])
    spec = SplitSpec([1, 2], [], open_image_count=2, mode="disjoint")
    with pytest.raises(SplitShortfallError) as e:
        build_split(spec, None, src)
    assert e.value.shortfall == 2


def test_overlapping_class_sets_rejected():
    with pytest.raises(ValueError):
        SplitSpec([1, 10], [[10]], open_image_count=1)


def test_spec_rejects_unknown_keys():
    with pytest.raises(ValueError, match="unknown split spec keys"):
        SplitSpec.from_json({"close_set_classes": [1], "open_image_count": 1, "colour": "red"})


def test_unknown_category_added():
    m = build_split(SplitSpec([1, 2], [[10]], open_image_count=1, unknown_label=99), None, toy([[10]]))
    assert {"id": 99, "name": "unknown"} in m["categories"]
    assert m["annotations"][0]["open_set"] == "unknown"


@given(st.integers(0, 12), st.sampled_from([0.5, 1.0, 1.5, 2.0]), st.integers(0, 100))
def test_disjoint_ratio_within_one_image(known_count, ratio, seed):
    known, open_ = sources()
    spec = SplitSpec([1, 2], [], known_image_count=min(known_count, 10), wilderness_ratio=ratio,
                     mode=ContainmentMode.DISJOINT, seed=seed)
    try:
        m = build_split(spec, known, open_)
    except SplitShortfallError:
        return
    k = m["open_set"]["known_images"]
    assert abs(m["open_set"]["open_images"] - ratio * k) <= 1
    assert not any(a["open_set"] == "known" for a in m["annotations"]
                   if m["images"][a["image_id"] - 1]["source"] == "open")
