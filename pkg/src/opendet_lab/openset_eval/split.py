"""Joint open-set test sets built from a close-set source and an open source.

``containing`` mode keeps open-source images with at least one object of the
designated open-set groups (close-set objects may co-occur). ``disjoint``
mode keeps open-source images without any close-set object, and its image
count can be derived from a target wilderness ratio.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .io import AnnotationFormatError, Document


class ContainmentMode(str, enum.Enum):
    CONTAINING = "containing"
    DISJOINT = "disjoint"


class SplitShortfallError(ValueError):
    def __init__(self, what: str, requested: int, available: int):
        self.requested = requested
        self.available = available
        self.shortfall = requested - available
        super().__init__(
            f"{what}: requested {requested} images but only {available} are eligible "
            f"(shortfall {self.shortfall})")


@dataclass
class SplitSpec:
    close_set_classes: list
    open_set_groups: list = field(default_factory=list)
    known_image_count: int = 0
    open_image_count: int | None = None
    wilderness_ratio: float | None = None
    mode: ContainmentMode = ContainmentMode.CONTAINING
    seed: int = 0
    unknown_label: int | None = None

    def __post_init__(self):
        self.mode = ContainmentMode(self.mode)
        overlap = set(self.close_set_classes) & set(self.group_classes)
        if overlap:
            raise ValueError(f"classes {sorted(overlap)} are both close-set and open-set")
        if self.wilderness_ratio is not None and self.wilderness_ratio < 0:
            raise ValueError("wilderness_ratio must be >= 0")
        if self.open_image_count is None and self.wilderness_ratio is None:
            raise ValueError("give open_image_count or wilderness_ratio")

    @property
    def group_classes(self) -> list:
        return sorted({c for g in self.open_set_groups for c in g})

    @property
    def requested_open(self) -> int:
        if self.open_image_count is not None:
            return int(self.open_image_count)
        return int(round(self.wilderness_ratio * self.known_image_count))

    @classmethod
    def from_json(cls, source) -> "SplitSpec":
        doc = source if isinstance(source, dict) else json.loads(Path(source).read_text())
        doc = doc.get("split", doc)
        known = {f for f in cls.__dataclass_fields__}
        bad = set(doc) - known
        if bad:
            raise ValueError(f"unknown split spec keys: {sorted(bad)}")
        if "close_set_classes" not in doc:
            raise ValueError("split spec is missing 'close_set_classes'")
        return cls(**doc)


def _by_image(doc: Document) -> dict:
    out: dict = {im["id"]: [] for im in doc.images}
    for r in doc.records:
        out.setdefault(r.image_id, []).append(r)
    return out


def _choose(eligible: list, count: int, rng, what: str) -> list:
    if count > len(eligible):
        raise SplitShortfallError(what, count, len(eligible))
    if count == len(eligible):
        return list(eligible)
    keep = np.sort(rng.choice(len(eligible), size=count, replace=False))
    return [eligible[i] for i in keep]


def wilderness_ratio(manifest: dict) -> float:
    """#images with unknown objects / #images with known objects."""
    unk, kn = set(), set()
    for a in manifest["annotations"]:
        (unk if a["open_set"] == "unknown" else kn).add(a["image_id"])
    return len(unk) / len(kn) if kn else float("inf") if unk else 0.0


def build_split(spec: SplitSpec, known_source: Document | None, open_source: Document) -> dict:
    """Select images and emit the joint manifest in the interchange format."""
    close = set(spec.close_set_classes)
    group = set(spec.group_classes)
    rng = np.random.default_rng(spec.seed)

    cats = {}
    for src in (known_source, open_source):
        if src is None:
            continue
        for cid, name in src.categories.items():
            if cid in cats and cats[cid] != name:
                raise AnnotationFormatError(f"category id {cid} is '{cats[cid]}' in one source and '{name}' in another")
            cats[cid] = name

    known_imgs = []
    if spec.known_image_count:
        if known_source is None:
            raise ValueError("known_image_count > 0 needs a close-set source")
        per = _by_image(known_source)
        eligible = [i for i, rs in per.items() if any(r.class_id in close for r in rs)]
        known_imgs = [("known", i, per[i]) for i in
                      _choose(eligible, spec.known_image_count, rng, "close-set source")]

    per = _by_image(open_source)
    if spec.mode is ContainmentMode.CONTAINING:
        eligible = [i for i, rs in per.items() if any(r.class_id in group for r in rs)]
    else:
        def ok(rs):
            if any(r.class_id in close for r in rs):
                return False
            return any(r.class_id in group for r in rs) if group else bool(rs)
        eligible = [i for i, rs in per.items() if ok(rs)]
    open_imgs = [("open", i, per[i]) for i in
                 _choose(eligible, spec.requested_open, rng, f"open source ({spec.mode.value})")]

    unknown_label = spec.unknown_label
    if unknown_label is None:
        unknown_label = max(cats, default=0) + 1
    src_images = {"known": {im["id"]: im for im in (known_source.images if known_source else [])},
                  "open": {im["id"]: im for im in open_source.images}}

    images, annotations = [], []
    for new_id, (src, old_id, recs) in enumerate(known_imgs + open_imgs, start=1):
        meta = dict(src_images[src].get(old_id, {}))
        meta.update(id=new_id, source=src, source_image_id=old_id)
        images.append(meta)
        for r in recs:
            annotations.append({
                "id": len(annotations) + 1, "image_id": new_id, "category_id": r.class_id,
                "bbox": [int(v) if float(v).is_integer() else v for v in r.box],
                "open_set": "known" if r.class_id in close else "unknown",
            })
    unknown_ids = sorted({a["category_id"] for a in annotations if a["open_set"] == "unknown"})
    categories = [{"id": k, "name": v} for k, v in sorted(cats.items())]
    if unknown_label not in cats:
        categories.append({"id": unknown_label, "name": "unknown"})
    manifest = {
        "images": images,
        "categories": categories,
        "annotations": annotations,
        "open_set": {
            "mode": spec.mode.value,
            "known_category_ids": sorted(close),
            "unknown_category_ids": unknown_ids,
            "unknown_label": unknown_label,
            "known_images": len(known_imgs),
            "open_images": len(open_imgs),
            "wilderness_ratio_target": spec.wilderness_ratio,
        },
    }
    manifest["open_set"]["wilderness_ratio"] = wilderness_ratio(manifest)
    return manifest
