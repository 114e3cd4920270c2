"""Reading and writing the detection interchange format.

A document is a JSON object with ``images``, ``categories`` and either
``annotations`` (ground truth) or ``detections``. Boxes are
``[x, y, width, height]`` in pixels; detections also carry ``score``.
A bare JSON list is accepted for detections (results-file style).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .metrics import DetectionRecord, GroundTruthRecord


class AnnotationFormatError(ValueError):
    pass


@dataclass
class Document:
    images: list = field(default_factory=list)
    categories: dict = field(default_factory=dict)  # id -> name
    records: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)  # any other top-level keys


def _load(source):
    if isinstance(source, (dict, list)):
        return source
    try:
        return json.loads(Path(source).read_text())
    except json.JSONDecodeError as e:
        raise AnnotationFormatError(f"{source}: malformed JSON at line {e.lineno} column {e.colno}: {e.msg}")


def _categories(doc, where) -> dict:
    cats = {}
    for i, c in enumerate(doc.get("categories", [])):
        if not isinstance(c, dict) or "id" not in c:
            raise AnnotationFormatError(f"{where}: categories[{i}] has no 'id'")
        cats[int(c["id"])] = str(c.get("name", c["id"]))
    return cats


def _images(doc, where) -> list:
    images = doc.get("images", [])
    if not isinstance(images, list):
        raise AnnotationFormatError(f"{where}: 'images' must be a list")
    for i, im in enumerate(images):
        if not isinstance(im, dict) or "id" not in im:
            raise AnnotationFormatError(f"{where}: images[{i}] has no 'id'")
    return images


def _parse_entry(entry, i, key, where, registry, image_ids, with_score):
    name = f"{key}[{i}]"
    if not isinstance(entry, dict):
        raise AnnotationFormatError(f"{where}: {name} is not an object")
    ident = entry.get("id", i)
    label = f"{where}: {key[:-1]} id {ident} ({name})"
    needed = ["image_id", "category_id", "bbox"] + (["score"] if with_score else [])
    for k in needed:
        if k not in entry:
            raise AnnotationFormatError(f"{label}: missing field '{k}'")
    bbox = entry["bbox"]
    if not isinstance(bbox, list) or len(bbox) != 4:
        raise AnnotationFormatError(f"{label}: bbox must be [x, y, width, height]")
    try:
        bbox = [float(v) for v in bbox]
    except (TypeError, ValueError):
        raise AnnotationFormatError(f"{label}: bbox entries must be numbers")
    if bbox[2] <= 0 or bbox[3] <= 0:
        raise AnnotationFormatError(f"{label}: bbox has non-positive width/height {bbox[2:]}")
    cat = int(entry["category_id"])
    if registry is not None and cat not in registry:
        raise AnnotationFormatError(f"{label}: category id {cat} not in the category list")
    image_id = entry["image_id"]
    if image_ids is not None and image_id not in image_ids:
        raise AnnotationFormatError(f"{label}: image id {image_id} not in the image list")
    if with_score:
        score = float(entry["score"])
        if not 0.0 <= score <= 1.0:
            raise AnnotationFormatError(f"{label}: score {score} outside [0, 1]")
        return DetectionRecord(image_id, cat, score, tuple(bbox), ident)
    return GroundTruthRecord(image_id, cat, tuple(bbox), False, ident)


def _ingest(source, key, with_score, categories=None) -> Document:
    where = "<document>" if isinstance(source, (dict, list)) else str(source)
    doc = _load(source)
    if isinstance(doc, list) and with_score:
        doc = {key: doc}
    if not isinstance(doc, dict):
        raise AnnotationFormatError(f"{where}: top level must be an object")
    if key not in doc:
        raise AnnotationFormatError(f"{where}: missing '{key}' array")
    entries = doc[key]
    if not isinstance(entries, list):
        raise AnnotationFormatError(f"{where}: '{key}' must be a list")
    cats = _categories(doc, where)
    registry = cats or categories
    images = _images(doc, where)
    image_ids = {im["id"] for im in images} if "images" in doc else None
    records = [_parse_entry(e, i, key, where, registry, image_ids, with_score)
               for i, e in enumerate(entries)]
    extra = {k: v for k, v in doc.items() if k not in ("images", "categories", key)}
    return Document(images, cats, records, extra)


def ingest_annotations(source) -> Document:
    """Parse a ground-truth document (path, or an already-loaded dict)."""
    return _ingest(source, "annotations", with_score=False)


def ingest_detections(source, categories=None) -> Document:
    """Parse a detection document; ``categories`` backs up a bare list."""
    return _ingest(source, "detections", with_score=True, categories=categories)


def _box(b):
    return [int(v) if float(v).is_integer() else v for v in b]


def emit_annotations(doc: Document) -> dict:
    return {
        **doc.extra,
        "images": doc.images,
        "categories": [{"id": k, "name": v} for k, v in sorted(doc.categories.items())],
        "annotations": [{"id": r.ann_id, "image_id": r.image_id, "category_id": r.class_id,
                         "bbox": _box(r.box)} for r in doc.records],
    }


def emit_detections(doc: Document) -> dict:
    return {
        **doc.extra,
        "images": doc.images,
        "categories": [{"id": k, "name": v} for k, v in sorted(doc.categories.items())],
        "detections": [{"id": r.det_id, "image_id": r.image_id, "category_id": r.class_id,
                        "bbox": _box(r.box), "score": r.score} for r in doc.records],
    }


@dataclass
class OpenSetRegistry:
    known_category_ids: list
    unknown_category_ids: list | None
    unknown_label: int

    def designate(self, records) -> list:
        """Mark ground truth of unknown categories as unknown."""
        known = set(self.known_category_ids)
        unknown = None if self.unknown_category_ids is None else set(self.unknown_category_ids)
        out = []
        for r in records:
            if r.class_id in known:
                flag = False
            elif unknown is None or r.class_id in unknown:
                flag = True
            else:
                raise AnnotationFormatError(
                    f"annotation id {r.ann_id}: category {r.class_id} is neither known nor unknown")
            out.append(GroundTruthRecord(r.image_id, r.class_id, r.box, flag, r.ann_id))
        return out


def load_registry(source) -> OpenSetRegistry:
    """Read the ``open_set`` block of a split file or split manifest."""
    doc = _load(source)
    block = doc.get("open_set") if isinstance(doc, dict) else None
    if not isinstance(block, dict):
        raise AnnotationFormatError(f"{source}: missing 'open_set' object")
    for k in ("known_category_ids", "unknown_label"):
        if k not in block:
            raise AnnotationFormatError(f"{source}: open_set is missing '{k}'")
    return OpenSetRegistry([int(c) for c in block["known_category_ids"]],
                           None if block.get("unknown_category_ids") is None
                           else [int(c) for c in block["unknown_category_ids"]],
                           int(block["unknown_label"]))
