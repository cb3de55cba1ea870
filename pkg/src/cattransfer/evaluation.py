"""Detection metrics: NMS, VOC07 11-point AP and CorLoc for the teacher."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .boxes import decode, iou, iou_matrix, validate_boxes  # noqa: F401
from .dsmt import Teacher, teacher_forward

NMS_THRESHOLD = 0.3
MATCH_IOU = 0.5


@dataclass(frozen=True)
class Detection:
    image_id: str
    box: tuple[float, float, float, float]
    category: int
    score: float


def nms(boxes, scores, iou_threshold: float = NMS_THRESHOLD) -> list[int]:
    """Greedy NMS; returns kept indices in descending score order.

    Equal scores are ordered by box coordinates (then index), so the kept set
    does not depend on input order.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if boxes.shape[0] == 0:
        return []
    order = np.lexsort((np.arange(len(scores)), boxes[:, 3], boxes[:, 2], boxes[:, 1],
                        boxes[:, 0], -scores))
    ov = iou_matrix(boxes, boxes)
    keep = []
    alive = np.ones(len(scores), dtype=bool)
    for i in order:
        if not alive[i]:
            continue
        keep.append(int(i))
        alive &= ov[i] <= iou_threshold
        alive[i] = False
    return keep


def _match(dets_sorted, gts: dict[str, np.ndarray], thr: float) -> np.ndarray:
    """Greedy matching in the given order; True where the detection is a TP."""
    used = {k: np.zeros(len(v), dtype=bool) for k, v in gts.items()}
    tp = np.zeros(len(dets_sorted), dtype=bool)
    for n, (img, _score, box) in enumerate(dets_sorted):
        g = gts.get(img)
        if g is None or len(g) == 0:
            continue
        ov = iou_matrix(np.asarray(box, dtype=np.float64), g)[0]
        ov[used[img] | (ov < thr)] = -1.0
        j = int(np.argmax(ov))
        if ov[j] >= thr:
            used[img][j] = True
            tp[n] = True
    return tp


def eleven_point(recall: np.ndarray, precision: np.ndarray) -> float:
    ap = 0.0
    for i in range(11):
        t = i / 10
        mask = recall >= t
        ap += float(precision[mask].max()) if mask.any() else 0.0
    return ap / 11.0


def average_precision(dets: Sequence[tuple[str, float, Sequence[float]]],
                      gts: dict[str, np.ndarray], iou_threshold: float = MATCH_IOU) -> float | None:
    """VOC07 11-point AP for one category.

    ``dets`` are ``(image_id, score, box)``; ``gts`` maps image id to a
    ``m x 4`` array.  Precision/recall points are taken at every distinct
    score threshold.  Returns None when the category has no ground truth.
    """
    npos = sum(len(v) for v in gts.values())
    if npos == 0:
        return None
    if not dets:
        return 0.0
    scores = np.array([d[1] for d in dets], dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    dets_sorted = [dets[i] for i in order]
    tp = _match(dets_sorted, gts, iou_threshold)
    s = scores[order]
    ctp = np.cumsum(tp)
    # last index of each run of equal scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    recall = ctp[ends] / npos
    precision = ctp[ends] / (ends + 1)
    return eleven_point(recall, precision)


def corloc(top_boxes: dict[tuple[str, int], Sequence[float]],
           gts: dict[tuple[str, int], np.ndarray],
           thr: float = MATCH_IOU) -> tuple[list[float | None], float]:
    """Per-category and mean CorLoc over positive (image, category) pairs.

    ``gts`` keys are the positive pairs; ``top_boxes`` gives the top-scoring
    box predicted for each.  Categories without positives get None.
    """
    cats = sorted({c for _, c in gts})
    hits: dict[int, list[bool]] = {c: [] for c in cats}
    for (img, c), g in gts.items():
        box = top_boxes.get((img, c))
        ok = box is not None and len(g) > 0 and \
            iou_matrix(np.asarray(box, dtype=np.float64), g)[0].max() >= thr
        hits[c].append(bool(ok))
    n_cat = (max(cats) + 1) if cats else 0
    per = [None] * n_cat
    for c in cats:
        per[c] = float(np.mean(hits[c]))
    vals = [v for v in per if v is not None]
    return per, float(np.mean(vals)) if vals else 0.0


@dataclass
class EvalReport:
    categories: list[str]
    ap: list[float | None]
    corloc: list[float | None]
    mAP: float
    mean_corloc: float

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["category", "ap", "corloc"])
        for name, a, c in zip(self.categories, self.ap, self.corloc):
            w.writerow([name, "" if a is None else repr(a), "" if c is None else repr(c)])
        w.writerow(["mean", repr(self.mAP), repr(self.mean_corloc)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "EvalReport":
        rows = list(csv.reader(io.StringIO(text)))
        body, summary = rows[1:-1], rows[-1]

        def num(s):
            return None if s == "" else float(s)

        return cls([r[0] for r in body], [num(r[1]) for r in body], [num(r[2]) for r in body],
                   float(summary[1]), float(summary[2]))


def predict(teacher: Teacher, image, nms_threshold: float = NMS_THRESHOLD):
    """Teacher detections for one image: per weak category, kept (boxes, scores)."""
    probs, deltas = teacher_forward(image.features, teacher)
    boxes = decode(image.proposals, deltas)
    c_w = probs.shape[1] - 1
    out = []
    for c in range(c_w):
        keep = nms(boxes, probs[:, c], nms_threshold)
        out.append((boxes[keep], probs[keep, c]))
    return out, boxes, probs


def evaluate(teacher: Teacher, images, category_names: Sequence[str],
             nms_threshold: float = NMS_THRESHOLD, with_ap: bool = True) -> EvalReport:
    """Score ``images`` (weak label space) with the teacher branch only."""
    c_w = len(category_names)
    dets: list[list] = [[] for _ in range(c_w)]
    gts: list[dict] = [{} for _ in range(c_w)]
    top: dict = {}
    pos: dict = {}
    for img in images:
        for c in range(c_w):
            gts[c][img.image_id] = img.gt_boxes[img.gt_labels == c]
        if with_ap:
            kept, boxes, probs = predict(teacher, img, nms_threshold)
            for c, (b, s) in enumerate(kept):
                dets[c].extend((img.image_id, float(sc), bb) for bb, sc in zip(b, s))
        else:
            probs, deltas = teacher_forward(img.features, teacher)
            boxes = decode(img.proposals, deltas)
        for c in img.present():
            pos[(img.image_id, c)] = gts[c][img.image_id]
            top[(img.image_id, c)] = boxes[int(np.argmax(probs[:, c]))]
    ap = [average_precision(dets[c], gts[c]) for c in range(c_w)] if with_ap else [None] * c_w
    per_cl, mean_cl = corloc(top, pos)
    per_cl = (per_cl + [None] * c_w)[:c_w]
    valid = [a for a in ap if a is not None]
    return EvalReport(list(category_names), ap, per_cl,
                      float(np.mean(valid)) if valid else 0.0, mean_cl)
