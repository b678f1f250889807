"""Detection quality metrics: IoU matching, average precision, mAP.

Average precision uses greedy matching in descending score order (each
ground-truth box matched at most once, IoU at or above the threshold)
and 101-point interpolation of the precision-recall curve at a single
IoU threshold. Ties are broken deterministically by (score desc,
image id asc, detection index asc). mAP averages AP over the classes
present in the ground truth.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .boxes import Box
from .boxes import iou as iou  # re-exported; validates positive areas
from .detector import ArchConfig, DecodeConfig, DetectionSet, ParamVector, decode_stack
from .scenes import SceneSample

RECALL_POINTS = np.linspace(0.0, 1.0, 101)


@dataclass(frozen=True)
class EvalReport:
    per_class_ap: dict[int, float]
    map: float
    n_images: int
    n_gt: int
    n_detections: int

    def to_dict(self) -> dict:
        return {
            "per_class_ap": {str(k): v for k, v in sorted(self.per_class_ap.items())},
            "map": self.map,
            "n_images": self.n_images,
            "n_gt": self.n_gt,
            "n_detections": self.n_detections,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


def average_precision(
    dets_by_image: Mapping[int, Sequence[tuple[float, Box]]],
    gts_by_image: Mapping[int, Sequence[Box]],
    iou_threshold: float = 0.5,
) -> float:
    """Single-class AP over a set of images.

    `dets_by_image` maps image id to (score, box) pairs in DetectionSet
    order; `gts_by_image` maps image id to ground-truth boxes.
    """
    n_gt = sum(len(g) for g in gts_by_image.values())
    if n_gt == 0:
        return 0.0
    flat = [
        (-score, image_id, det_index, box)
        for image_id, dets in dets_by_image.items()
        for det_index, (score, box) in enumerate(dets)
    ]
    flat.sort(key=lambda e: e[:3])
    matched: dict[int, np.ndarray] = {
        image_id: np.zeros(len(g), dtype=bool) for image_id, g in gts_by_image.items()
    }
    tp = np.zeros(len(flat))
    for rank, (_, image_id, _, box) in enumerate(flat):
        gts = gts_by_image.get(image_id, ())
        best_iou, best_idx = 0.0, -1
        for gt_idx, gt_box in enumerate(gts):
            if matched[image_id][gt_idx]:
                continue
            overlap = iou(box, gt_box)
            if overlap >= iou_threshold and overlap > best_iou:
                best_iou, best_idx = overlap, gt_idx
        if best_idx >= 0:
            matched[image_id][best_idx] = True
            tp[rank] = 1.0
    cum_tp = np.cumsum(tp)
    recall = cum_tp / n_gt
    precision = cum_tp / np.arange(1, len(flat) + 1)
    return interpolated_ap(precision, recall)


def interpolated_ap(precision: np.ndarray, recall: np.ndarray) -> float:
    """101-point interpolated AP from a precision/recall sequence."""
    if len(precision) == 0:
        return 0.0
    # Running max of precision from the right = best precision at recall >= r.
    prec_from_right = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    for r in RECALL_POINTS:
        idx = np.searchsorted(recall, r, side="left")
        ap += prec_from_right[idx] if idx < len(recall) else 0.0
    return float(ap / len(RECALL_POINTS))


def report_from_detections(
    samples: Sequence[SceneSample],
    detections_per_sample: Sequence[DetectionSet],
    iou_threshold: float = 0.5,
) -> EvalReport:
    """Assemble per-class AP and mAP from already-decoded detections."""
    if not samples:
        raise ValueError("evaluation requires at least one sample")
    classes = sorted({o.class_id for s in samples for o in s.objects})
    per_class: dict[int, float] = {}
    for class_id in classes:
        dets_by_image = {
            s.sample_id: [(d.score, d.box) for d in dets if d.class_id == class_id]
            for s, dets in zip(samples, detections_per_sample)
        }
        gts_by_image = {
            s.sample_id: [o.box for o in s.objects if o.class_id == class_id] for s in samples
        }
        per_class[class_id] = average_precision(dets_by_image, gts_by_image, iou_threshold)
    mean_ap = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return EvalReport(
        per_class_ap=per_class,
        map=mean_ap,
        n_images=len(samples),
        n_gt=sum(len(s.objects) for s in samples),
        n_detections=sum(len(d) for d in detections_per_sample),
    )


def evaluate(
    params: ParamVector,
    samples: Sequence[SceneSample],
    decode_cfg: DecodeConfig,
    arch: ArchConfig,
    iou_threshold: float = 0.5,
) -> EvalReport:
    """Decode every (un-augmented) sample and score against its labels."""
    if not samples:
        raise ValueError("evaluation requires at least one sample")
    pixels = np.stack([s.pixels for s in samples])
    detections = decode_stack(params, arch, pixels, decode_cfg)
    return report_from_detections(samples, detections, iou_threshold)
