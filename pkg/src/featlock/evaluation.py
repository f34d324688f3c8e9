"""VOC-protocol detection scoring: IoU, per-class AP, and mAP in [0, 1].

AP uses the VOC2007 11-point interpolation by default; the continuous
(precision-envelope) protocol is selectable via ``protocol="continuous"``
so conformance against either convention can be checked.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from featlock.data import Sample, resize_and_normalize
from featlock.detector import KeyedDetector, decode_and_nms, generate_priors
from featlock.keyed_transforms import SecretKey, encrypt_image

PROTOCOL_TAGS = ("Correct", "Plain", "Incorrect", "Baseline")
_MODE_TO_TAG = {"correct": "Correct", "plain": "Plain", "incorrect": "Incorrect", "baseline": "Baseline"}


def iou(a, b) -> float:
    """Intersection-over-union of two corner-form boxes; 0 when disjoint."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    for box in (a, b):
        if box.shape != (4,):
            raise ValueError(f"expected a 4-vector box, got shape {box.shape}")
        if not (box[0] < box[2] and box[1] < box[3]):
            raise ValueError(f"degenerate box {tuple(box)}")
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (N,4) and (M,4) corner-form boxes."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    iy = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(ix, 0, None) * np.clip(iy, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return out


def _interpolated_ap(recall: np.ndarray, precision: np.ndarray, protocol: str) -> float:
    if protocol == "voc07":
        ap = 0.0
        for r in np.linspace(0.0, 1.0, 11):
            mask = recall >= r - 1e-12
            ap += precision[mask].max() if mask.any() else 0.0
        return float(ap / 11.0)
    if protocol == "continuous":
        # VOC2010+: integrate the precision envelope over recall
        mrec = np.concatenate([[0.0], recall, [1.0]])
        mpre = np.concatenate([[0.0], precision, [0.0]])
        for i in range(len(mpre) - 2, -1, -1):
            mpre[i] = max(mpre[i], mpre[i + 1])
        idx = np.where(mrec[1:] != mrec[:-1])[0]
        return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))
    raise ValueError(f"unknown AP protocol {protocol!r}")


def average_precision(detections, gts, iou_thresh: float = 0.5, protocol: str = "voc07") -> float:
    """AP for one class.

    detections: iterable of ``(image_id, score, box)``; ties in score keep
    input order (callers supply a deterministic order).
    gts: mapping image_id -> (G,4) boxes, or -> (boxes, difficult_mask);
    difficult ground truth is ignored (matches neither count as TP nor FP).
    Zero non-difficult ground truth defines AP = 0.
    """
    norm_gts = {}
    npos = 0
    for image_id, value in gts.items():
        if isinstance(value, tuple):
            boxes, difficult = value
        else:
            boxes, difficult = value, None
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        if difficult is None:
            difficult = np.zeros(len(boxes), dtype=bool)
        difficult = np.asarray(difficult, dtype=bool).reshape(-1)
        norm_gts[image_id] = (boxes, difficult, np.zeros(len(boxes), dtype=bool))
        npos += int((~difficult).sum())

    if npos == 0:
        return 0.0
    dets = list(detections)
    if not dets:
        return 0.0

    scores = np.array([d[1] for d in dets], dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    tp = np.zeros(len(dets))
    fp = np.zeros(len(dets))
    for rank, di in enumerate(order):
        image_id, _, box = dets[di]
        entry = norm_gts.get(image_id)
        if entry is None or len(entry[0]) == 0:
            fp[rank] = 1.0
            continue
        boxes, difficult, matched = entry
        ious = iou_matrix(np.asarray(box, dtype=np.float64).reshape(1, 4), boxes)[0]
        jmax = int(np.argmax(ious))
        if ious[jmax] >= iou_thresh:
            if difficult[jmax]:
                continue  # ignored: neither TP nor FP
            if not matched[jmax]:
                matched[jmax] = True
                tp[rank] = 1.0
            else:
                fp[rank] = 1.0
        else:
            fp[rank] = 1.0

    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(fp)
    recall = tp_cum / npos
    precision = tp_cum / np.maximum(tp_cum + fp_cum, np.finfo(np.float64).eps)
    return _interpolated_ap(recall, precision, protocol)


@dataclass
class EvalReport:
    """Per-class AP, their mean, and the protocol the scores were taken under."""

    protocol: str
    per_class_ap: dict[str, float]
    map_value: float
    num_images: int
    num_gt_boxes: int
    num_detections: int
    zero_gt_classes: tuple[str, ...] = field(default_factory=tuple)

    def write_csv(self, path) -> None:
        """Emit ``protocol,class,ap`` rows plus the ``protocol,mAP,value`` summary."""
        lines = ["protocol,class,ap"]
        for name, ap in self.per_class_ap.items():
            lines.append(f"{self.protocol},{name},{ap!r}")
        lines.append(f"{self.protocol},mAP,{self.map_value!r}")
        with open(path, "w", newline="") as fh:
            fh.write("\n".join(lines) + "\n")


def _forward_batched(model: KeyedDetector, images: np.ndarray, key, batch_size: int):
    locs, logits = [], []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            batch = torch.from_numpy(images[start : start + batch_size])
            loc, cls = model(batch, key=key)
            locs.append(loc.numpy())
            logits.append(cls.numpy())
    return np.concatenate(locs), np.concatenate(logits)


def evaluate(
    model: KeyedDetector,
    samples: list[Sample],
    mode: str,
    key: SecretKey | None = None,
    *,
    shf_block: int | None = None,
    class_names=None,
    iou_thresh: float = 0.5,
    protocol: str = "voc07",
    score_thresh: float = 0.05,
    nms_iou: float = 0.45,
    top_k: int = 100,
    batch_size: int = 64,
) -> EvalReport:
    """Score a model over a dataset under one access protocol.

    mode "correct"/"incorrect" require a key (the true key and a wrong key
    respectively); "plain" and "baseline" forbid one.  For models trained
    on shuffled input images pass ``shf_block``: the key then encrypts the
    resized test images instead of (or in addition to) permuting feature
    maps.  Deterministic given (model parameters, samples).
    """
    if mode not in _MODE_TO_TAG:
        raise ValueError(f"mode must be one of {sorted(_MODE_TO_TAG)}, got {mode!r}")
    if mode in ("correct", "incorrect") and key is None:
        raise ValueError(f"mode {mode!r} requires a key")
    if mode in ("plain", "baseline") and key is not None:
        raise ValueError(f"mode {mode!r} forbids a key (unauthorized protocols never see one)")
    if not samples:
        raise ValueError("cannot evaluate on an empty dataset (no ground truth)")

    config = model.config
    names = list(class_names) if class_names is not None else [f"class_{k}" for k in range(config.num_classes)]
    if len(names) != config.num_classes:
        raise ValueError(f"{len(names)} class names for {config.num_classes} classes")

    prepared = [resize_and_normalize(s, config.input_size) for s in samples]
    images = np.stack([s.image for s in prepared])
    if shf_block is not None and key is not None:
        images = np.stack([encrypt_image(im, key, shf_block).astype(np.float32) for im in images])
    forward_key = key if config.encrypted_sites else None

    priors = generate_priors(config)
    loc, logits = _forward_batched(model, images, forward_key, batch_size)

    per_class_dets: dict[int, list] = {k: [] for k in range(config.num_classes)}
    num_detections = 0
    for image_id, _ in enumerate(prepared):
        dets = decode_and_nms(
            loc[image_id], logits[image_id], priors, score_thresh=score_thresh, nms_iou=nms_iou, top_k=top_k
        )
        num_detections += len(dets)
        for det in dets:
            per_class_dets[det.label].append((image_id, det.score, det.box))

    per_class_ap: dict[str, float] = {}
    zero_gt = []
    num_gt = 0
    for k, name in enumerate(names):
        gts = {}
        class_npos = 0
        for image_id, s in enumerate(prepared):
            sel = s.labels == k
            gts[image_id] = (s.boxes[sel], s.difficult[sel])
            class_npos += int((~s.difficult[sel]).sum())
        num_gt += class_npos
        if class_npos == 0:
            zero_gt.append(name)
        per_class_ap[name] = average_precision(per_class_dets[k], gts, iou_thresh=iou_thresh, protocol=protocol)

    map_value = float(np.mean(list(per_class_ap.values())))
    return EvalReport(
        protocol=_MODE_TO_TAG[mode],
        per_class_ap=per_class_ap,
        map_value=map_value,
        num_images=len(prepared),
        num_gt_boxes=num_gt,
        num_detections=num_detections,
        zero_gt_classes=tuple(zero_gt),
    )
