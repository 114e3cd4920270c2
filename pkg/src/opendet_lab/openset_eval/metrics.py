"""Open-set detection metrics: per-class AP, mAP_K, WI, AOSE and AP_U.

Boxes are ``(x, y, width, height)``. Detections are matched greedily in
descending score order (ties keep input order); each ground truth can be
claimed once.
"""
from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import asdict, dataclass, field

import numpy as np


@dataclass(frozen=True)
class GroundTruthRecord:
    image_id: int
    class_id: int
    box: tuple
    is_unknown: bool = False
    ann_id: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "box", tuple(float(v) for v in self.box))
        if self.box[2] <= 0 or self.box[3] <= 0:
            raise ValueError(f"ground truth {self.ann_id} has non-positive box size {self.box}")


@dataclass(frozen=True)
class DetectionRecord:
    image_id: int
    class_id: int
    score: float
    box: tuple
    det_id: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "box", tuple(float(v) for v in self.box))
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"detection {self.det_id} score {self.score} outside [0, 1]")


def iou(box_a, box_b) -> float:
    """Intersection over union of two ``(x, y, w, h)`` boxes."""
    ax, ay, aw, ah = box_a
    bx, by, bw, bh = box_b
    if aw <= 0 or ah <= 0 or bw <= 0 or bh <= 0:
        raise ValueError("iou needs boxes with positive width and height")
    iw = min(ax + aw, bx + bw) - max(ax, bx)
    ih = min(ay + ah, by + bh) - max(ay, by)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (aw * ah + bw * bh - inter)


def _score_order(dets) -> list[int]:
    return sorted(range(len(dets)), key=lambda i: -dets[i].score)


def _greedy_match(dets, gts, iou_threshold) -> tuple[np.ndarray, set]:
    """Match ``dets`` against ``gts`` image by image.

    Returns a TP flag per detection (input order) and the set of matched gt
    positions.
    """
    by_image = defaultdict(list)
    for j, g in enumerate(gts):
        by_image[g.image_id].append(j)
    tp = np.zeros(len(dets), dtype=bool)
    taken: set[int] = set()
    for i in _score_order(dets):
        d = dets[i]
        best, best_iou = None, iou_threshold
        for j in by_image.get(d.image_id, ()):
            if j in taken:
                continue
            o = iou(d.box, gts[j].box)
            if o >= best_iou and (best is None or o > best_iou):
                best, best_iou = j, o
        if best is not None:
            taken.add(best)
            tp[i] = True
    return tp, taken


def _gts_for_label(gts, label, unknown_label):
    if unknown_label is not None and label == unknown_label:
        return [g for g in gts if g.is_unknown]
    return [g for g in gts if not g.is_unknown and g.class_id == label]


def match_detections(dets, gts, iou_threshold: float = 0.5, unknown_label=None) -> np.ndarray:
    """TP/FP flag for every detection, matched within its predicted class.

    Detections carrying ``unknown_label`` are matched against the merged
    unknown ground truth.
    """
    tp = np.zeros(len(dets), dtype=bool)
    by_label = defaultdict(list)
    for i, d in enumerate(dets):
        by_label[d.class_id].append(i)
    for label, idx in by_label.items():
        sub = [dets[i] for i in idx]
        flags, _ = _greedy_match(sub, _gts_for_label(gts, label, unknown_label), iou_threshold)
        tp[idx] = flags
    return tp


def precision_recall(tp_labels, scores, num_gt: int) -> tuple[np.ndarray, np.ndarray]:
    """Cumulative precision and recall down the score-sorted list."""
    tp_labels = np.asarray(tp_labels, dtype=bool)
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    tp = np.cumsum(tp_labels[order])
    fp = np.cumsum(~tp_labels[order])
    recall = tp / num_gt if num_gt > 0 else np.zeros(len(tp))
    precision = tp / np.maximum(tp + fp, 1)
    return precision, recall


def average_precision(tp_labels, scores, num_gt: int) -> tuple[float, bool]:
    """All-point interpolated AP. Returns ``(ap, flagged)``.

    ``flagged`` marks the degenerate case of no ground truth, where AP is 0.
    """
    if num_gt == 0:
        return 0.0, True
    if len(tp_labels) == 0:
        return 0.0, False
    precision, recall = precision_recall(tp_labels, scores, num_gt)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1])), False


def ap_unknown(dets, gts, unknown_label: int, iou_threshold: float = 0.5) -> tuple[float, bool]:
    """Class-agnostic AP of unknown-labelled detections vs. all unknown gts."""
    sub = [d for d in dets if d.class_id == unknown_label]
    unk = [g for g in gts if g.is_unknown]
    tp, _ = _greedy_match(sub, unk, iou_threshold)
    return average_precision(tp, [d.score for d in sub], len(unk))


@dataclass
class WildernessImpact:
    wi: float  # x100
    tp_k: int
    fp_k: int
    fp_u: int
    threshold: float | None
    recall: float
    recall_reached: bool


def _known_det_labels(dets, gts, known, iou_threshold):
    """Per known-labelled detection: 'tp', 'fp_u' or 'fp_k'."""
    tp = match_detections(dets, [g for g in gts if not g.is_unknown], iou_threshold)
    unk_by_image = defaultdict(list)
    for g in gts:
        if g.is_unknown:
            unk_by_image[g.image_id].append(g)
    labels = []
    for d, hit in zip(dets, tp):
        if hit:
            labels.append("tp")
        elif any(iou(d.box, g.box) >= iou_threshold for g in unk_by_image.get(d.image_id, ())):
            labels.append("fp_u")
        else:
            labels.append("fp_k")
    return labels


def wilderness_impact(dets, gts, known_classes, recall_level: float = 0.8,
                      iou_threshold: float = 0.5) -> WildernessImpact:
    """WI x100 at the highest score threshold reaching ``recall_level``.

    Recall is pooled over all known classes. A known-labelled detection is
    TP_K if it matches a known gt of its class, FP_U if it instead overlaps
    an unknown gt, FP_K otherwise.
    """
    known = set(known_classes)
    kd = [d for d in dets if d.class_id in known]
    num_gt = sum(1 for g in gts if not g.is_unknown and g.class_id in known)
    labels = _known_det_labels(kd, gts, known, iou_threshold)
    if not kd:
        return WildernessImpact(0.0, 0, 0, 0, None, 0.0, num_gt == 0)

    scores = np.array([d.score for d in kd])
    lab = np.array(labels)
    chosen, reached = None, False
    for thr in sorted(set(scores.tolist()), reverse=True):
        keep = scores >= thr
        tp = int(np.sum(lab[keep] == "tp"))
        if num_gt > 0 and tp / num_gt >= recall_level:
            chosen, reached = thr, True
            break
    if chosen is None:
        chosen = float(scores.min())
    keep = scores >= chosen
    tp_k = int(np.sum(lab[keep] == "tp"))
    fp_k = int(np.sum(lab[keep] == "fp_k"))
    fp_u = int(np.sum(lab[keep] == "fp_u"))
    denom = tp_k + fp_k
    wi = 100.0 * fp_u / denom if denom > 0 else 0.0
    recall = tp_k / num_gt if num_gt else 0.0
    return WildernessImpact(wi, tp_k, fp_k, fp_u, float(chosen), recall, reached)


def aose(dets, gts, known_classes, iou_threshold: float = 0.5) -> int:
    """Number of unknown gt objects claimed by known-labelled detections."""
    known = set(known_classes)
    kd = [d for d in dets if d.class_id in known]
    _, taken = _greedy_match(kd, [g for g in gts if g.is_unknown], iou_threshold)
    return len(taken)


def latent_statistics(embeddings, labels) -> tuple[float, float]:
    """Mean within-class squared distance to centroid, mean centroid distance."""
    x = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ValueError("latent statistics need at least two classes")
    centroids = []
    intra = []
    for c in classes:
        xc = x[labels == c]
        mu = xc.mean(axis=0)
        centroids.append(mu)
        intra.append(np.mean(np.sum((xc - mu) ** 2, axis=1)))
    centroids = np.array(centroids)
    i, j = np.triu_indices(len(classes), k=1)
    inter = np.linalg.norm(centroids[i] - centroids[j], axis=1).mean()
    return float(np.mean(intra)), float(inter)


@dataclass
class EvalReport:
    per_class_ap: dict
    map_k: float
    wi: float
    aose: int
    ap_u: float
    tp_k: int
    fp_k: int
    fp_u: int
    wi_threshold: float | None = None
    wi_recall: float = 0.0
    flags: list = field(default_factory=list)
    intra_class_variance: float | None = None
    inter_class_distance: float | None = None

    def rows(self) -> list[tuple[str, object]]:
        """Metric table with APs scaled to percent."""
        out = [("mAP_K", 100.0 * self.map_k), ("WI", self.wi), ("AOSE", self.aose),
               ("AP_U", 100.0 * self.ap_u), ("TP_K", self.tp_k), ("FP_K", self.fp_k),
               ("FP_U", self.fp_u), ("WI_threshold", self.wi_threshold),
               ("WI_recall", self.wi_recall)]
        out += [(f"AP[{c}]", 100.0 * ap) for c, ap in sorted(self.per_class_ap.items())]
        if self.intra_class_variance is not None:
            out.append(("intra_class_variance", self.intra_class_variance))
        if self.inter_class_distance is not None:
            out.append(("inter_class_distance", self.inter_class_distance))
        return out

    def to_csv(self) -> str:
        lines = ["metric,value"]
        for k, v in self.rows():
            lines.append(f"{k},{'' if v is None else repr(v)}")
        lines += [f"flag,{f}" for f in self.flags]
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        doc = {k: v for k, v in self.rows()}
        doc["flags"] = list(self.flags)
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def as_dict(self) -> dict:
        return asdict(self)


def evaluate(gts, dets, known_classes, unknown_label: int, recall_level: float = 0.8,
             iou_threshold: float = 0.5, score_floor: float = 0.05) -> EvalReport:
    """Full open-set report; detections below ``score_floor`` are dropped."""
    dets = [d for d in dets if d.score >= score_floor]
    known = list(known_classes)
    flags = []
    per_class = {}
    counted = []
    for c in known:
        sub = [d for d in dets if d.class_id == c]
        cg = [g for g in gts if not g.is_unknown and g.class_id == c]
        tp, _ = _greedy_match(sub, cg, iou_threshold)
        ap, flagged = average_precision(tp, [d.score for d in sub], len(cg))
        per_class[c] = ap
        if flagged:
            flags.append(f"class {c}: no ground truth, AP set to 0 and left out of mAP_K")
        else:
            counted.append(ap)
    map_k = float(np.mean(counted)) if counted else 0.0

    w = wilderness_impact(dets, gts, known, recall_level, iou_threshold)
    if not w.recall_reached:
        flags.append(f"recall {recall_level} not reached; WI taken at recall {w.recall!r}")
    ap_u, unk_flag = ap_unknown(dets, gts, unknown_label, iou_threshold)
    if unk_flag:
        flags.append("no unknown ground truth, AP_U set to 0")
    return EvalReport(per_class, map_k, w.wi, aose(dets, gts, known, iou_threshold), ap_u,
                      w.tp_k, w.fp_k, w.fp_u, w.threshold, w.recall, flags)
