"""
COCO-style evaluation of detector snapshots, base/new category breakdowns, activation distances
between snapshots and per-location response-map dumps.
"""

import dataclasses
import logging
from typing import Iterable, Sequence

import numpy as np
import torch

from erdet.erdistill import DistillConfig, ers_classification, format_level_record
from erdet.errors import ConfigurationError, EvaluationError
from erdet.synthshapes import Annotation, PartitionView
from erdet.tinydet.decode import Detections, decode_boxes
from erdet.tinydet.model import TinyDetector, forward, images_to_tensor
from erdet.tinydet.snapshot import DetectorSnapshot

IOU_THRESHOLDS = np.linspace(0.5, 0.95, 10)
RECALL_THRESHOLDS = np.linspace(0.0, 1.0, 101)
COMPONENTS = ("pyramid_features", "cls_head", "reg_head")
DEFAULT_PROBES = 10


@dataclasses.dataclass(frozen=True, kw_only=True)
class MetricsReport:
    mAP: float
    ap50: float
    ap75: float
    per_class_ap: dict[int, float]
    base_ap: float | None = None
    new_ap: float | None = None
    base_categories: tuple[int, ...] = ()
    new_categories: tuple[int, ...] = ()
    num_detections: int = 0
    num_ground_truths: int = 0
    num_images: int = 0

    def to_json_dict(self, **extra) -> dict:
        """JSON-ready form; extra keys (step, strategy, selection) are merged in."""
        d = dataclasses.asdict(self)
        d["per_class_ap"] = {str(c): ap for c, ap in sorted(self.per_class_ap.items())}
        d["base_categories"] = list(self.base_categories)
        d["new_categories"] = list(self.new_categories)
        d.update(extra)
        return d

    @classmethod
    def from_json_dict(cls, d: dict) -> "MetricsReport":
        fields = {f.name for f in dataclasses.fields(cls)}
        kwargs = {k: v for k, v in d.items() if k in fields}
        kwargs["per_class_ap"] = {int(c): float(ap) for c, ap in d["per_class_ap"].items()}
        kwargs["base_categories"] = tuple(d.get("base_categories", ()))
        kwargs["new_categories"] = tuple(d.get("new_categories", ()))
        return cls(**kwargs)


@dataclasses.dataclass(frozen=True)
class DistanceReport:
    """Mean L2 distance per component between two snapshots' activations on the probe images."""

    distances: dict[str, float]
    num_probes: int

    def to_text(self) -> str:
        return "".join(f"{name} {self.distances[name]:.6g}\n" for name in COMPONENTS)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of (N, 4) and (M, 4) x0y0x1y1 boxes."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    area_a = np.clip(a[:, 2] - a[:, 0], 0, None) * np.clip(a[:, 3] - a[:, 1], 0, None)
    area_b = np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)


def average_precision(tp: np.ndarray, num_gt: int) -> float:
    """
    101-point interpolated AP from a TP flag per detection, detections already sorted by
    descending score.
    """
    if num_gt == 0:
        raise EvaluationError("AP is undefined without ground truth")
    tp = np.asarray(tp, dtype=np.float64)
    tp_sum = np.cumsum(tp)
    fp_sum = np.cumsum(1.0 - tp)
    recall = tp_sum / num_gt
    precision = tp_sum / np.maximum(tp_sum + fp_sum, np.finfo(np.float64).eps)
    # Precision envelope: best precision at any recall at least as high.
    precision = np.maximum.accumulate(precision[::-1])[::-1] if precision.size else precision

    idx = np.searchsorted(recall, RECALL_THRESHOLDS, side="left")
    q = np.zeros(len(RECALL_THRESHOLDS))
    valid = idx < len(precision)
    q[valid] = precision[idx[valid]]
    return float(np.mean(q))


def _match(order, det_image, det_boxes, gts_by_image, iou_threshold) -> np.ndarray:
    """Greedy highest-score-first matching; each ground truth is matched at most once."""
    matched = {i: np.zeros(len(g), dtype=bool) for i, g in gts_by_image.items()}
    ious = {}
    tp = np.zeros(len(order))
    for rank, d in enumerate(order):
        img = det_image[d]
        gts = gts_by_image.get(img)
        if gts is None or len(gts) == 0:
            continue
        if d not in ious:
            ious[d] = iou_matrix(det_boxes[d][None], gts)[0]
        candidates = np.where(~matched[img], ious[d], -1.0)
        best = int(np.argmax(candidates))
        if candidates[best] >= iou_threshold:
            matched[img][best] = True
            tp[rank] = 1.0
    return tp


def evaluate_detections(
    detections: Sequence[Detections],
    ground_truths: Sequence[Sequence[Annotation]],
    categories: Iterable[int],
    base_categories: Iterable[int] | None = None,
) -> MetricsReport:
    """
    Scores per-image detections against per-image ground truth over the given categories.
    Categories without any ground truth are left out of every mean.
    """
    if not ground_truths:
        raise EvaluationError("Cannot evaluate an empty test set")
    if len(detections) != len(ground_truths):
        raise ConfigurationError(
            f"{len(detections)} detection sets for {len(ground_truths)} images"
        )
    categories = sorted(set(categories))

    det_image, det_label, det_score, det_boxes = [], [], [], []
    for i, dets in enumerate(detections):
        det_image.extend([i] * len(dets))
        det_label.extend(np.asarray(dets.labels).reshape(-1).tolist())
        det_score.extend(np.asarray(dets.scores, dtype=np.float64).reshape(-1).tolist())
        det_boxes.extend(np.asarray(dets.boxes, dtype=np.float64).reshape(-1, 4).tolist())
    det_image = np.asarray(det_image, dtype=np.int64)
    det_label = np.asarray(det_label, dtype=np.int64)
    det_score = np.asarray(det_score, dtype=np.float64)
    det_boxes = np.asarray(det_boxes, dtype=np.float64).reshape(-1, 4)

    ap = np.zeros((len(categories), len(IOU_THRESHOLDS)))
    has_gt = np.zeros(len(categories), dtype=bool)
    num_gt_total = 0
    for ci, c in enumerate(categories):
        gts_by_image = {}
        for i, anns in enumerate(ground_truths):
            boxes = [a.box for a in anns if a.category_id == c]
            if boxes:
                gts_by_image[i] = np.asarray(boxes, dtype=np.float64)
        num_gt = sum(len(g) for g in gts_by_image.values())
        num_gt_total += num_gt
        if num_gt == 0:
            logging.warning(f"Category {c} has no ground truth in the test set, skipping it")
            continue
        has_gt[ci] = True

        mine = np.nonzero(det_label == c)[0]
        # Descending score; image index and box break ties so input order never matters.
        keys = (
            det_boxes[mine, 3],
            det_boxes[mine, 2],
            det_boxes[mine, 1],
            det_boxes[mine, 0],
            det_image[mine],
            -det_score[mine],
        )
        order = mine[np.lexsort(keys)] if mine.size else mine
        for ti, thr in enumerate(IOU_THRESHOLDS):
            tp = _match(order, det_image, det_boxes, gts_by_image, thr)
            ap[ci, ti] = average_precision(tp, num_gt)

    if not has_gt.any():
        raise EvaluationError(f"No ground truth for any of the categories {categories}")

    scored = [c for c, ok in zip(categories, has_gt) if ok]
    ap = ap[has_gt]
    per_class = {c: float(v) for c, v in zip(scored, ap.mean(axis=1))}

    base = sorted(set(base_categories) & set(categories)) if base_categories is not None else []
    new = sorted(set(categories) - set(base)) if base_categories is not None else []

    def subset_mean(subset):
        values = [per_class[c] for c in subset if c in per_class]
        return float(np.mean(values)) if values else None

    return MetricsReport(
        mAP=float(ap.mean()),
        ap50=float(ap[:, 0].mean()),
        ap75=float(ap[:, 5].mean()),
        per_class_ap=per_class,
        base_ap=subset_mean(base),
        new_ap=subset_mean(new),
        base_categories=tuple(base),
        new_categories=tuple(new),
        num_detections=int(np.isin(det_label, categories).sum()),
        num_ground_truths=num_gt_total,
        num_images=len(ground_truths),
    )


def _batches(view: PartitionView, batch_size: int):
    for start in range(0, len(view.records), batch_size):
        records = view.records[start : start + batch_size]
        yield records, images_to_tensor([view.load_image(r) for r in records])


@torch.no_grad()
def detect(
    model: TinyDetector,
    view: PartitionView,
    categories: Iterable[int] | None = None,
    score_threshold: float = 0.05,
    nms_iou: float = 0.6,
    batch_size: int = 16,
) -> list[Detections]:
    device = next(model.parameters()).device
    model.eval()
    detections = []
    for _, images in _batches(view, batch_size):
        responses = forward(model, images.to(device))
        for dets in decode_boxes(responses, score_threshold, nms_iou, categories):
            detections.append(
                Detections(
                    boxes=dets.boxes.cpu().numpy(),
                    scores=dets.scores.cpu().numpy(),
                    labels=dets.labels.cpu().numpy(),
                )
            )
    return detections


def evaluate(
    snapshot: DetectorSnapshot,
    view: PartitionView,
    categories: Iterable[int],
    base_categories: Iterable[int] | None = None,
    score_threshold: float = 0.05,
    nms_iou: float = 0.6,
    device: str = "cpu",
    batch_size: int = 16,
) -> MetricsReport:
    """
    COCO-style AP of a snapshot on a test view, restricted to the given categories. When
    base_categories is given the report also carries base and new (the rest) aggregates.
    """
    if not view.records:
        raise EvaluationError(f"Test view {view.name!r} has no images")
    categories = sorted(set(categories))
    model = snapshot.build(device)
    detections = detect(model, view, categories, score_threshold, nms_iou, batch_size)
    report = evaluate_detections(
        detections, [r.annotations for r in view.records], categories, base_categories
    )
    logging.info(
        f"Step {snapshot.step_index} evaluation on {report.num_images} images: "
        f"mAP {report.mAP:.4f} AP50 {report.ap50:.4f} AP75 {report.ap75:.4f}"
    )
    return report


def select_probe_images(view: PartitionView, count: int = DEFAULT_PROBES, seed: int = 0):
    """A fixed-seed random sample of records, returned in partition order."""
    if not view.records:
        raise EvaluationError(f"Cannot draw probe images from empty view {view.name!r}")
    rng = np.random.default_rng(seed)
    picked = rng.choice(len(view.records), size=min(count, len(view.records)), replace=False)
    return [view.records[i] for i in sorted(picked.tolist())]


@torch.no_grad()
def feature_distance(
    snapshot_a: DetectorSnapshot,
    snapshot_b: DetectorSnapshot,
    images: Sequence[np.ndarray],
    device: str = "cpu",
) -> DistanceReport:
    """
    For every probe image, the L2 norm of the activation difference of the two snapshots at
    the pyramid features, the classification head and the regression head, averaged over the
    probes.
    """
    if not images:
        raise EvaluationError("feature_distance needs at least one probe image")
    if snapshot_a.head_config != snapshot_b.head_config:
        raise ConfigurationError("Cannot compare snapshots with different head configs")

    model_a, model_b = snapshot_a.build(device), snapshot_b.build(device)
    totals = dict.fromkeys(COMPONENTS, 0.0)
    for image in images:
        batch = images_to_tensor([image]).to(device)
        ra, rb = forward(model_a, batch), forward(model_b, batch)
        parts = {name: [] for name in COMPONENTS}
        for la, lb in zip(ra.levels, rb.levels):
            parts["pyramid_features"].append((la.features - lb.features).reshape(-1))
            parts["cls_head"].append((la.cls_logits - lb.cls_logits).reshape(-1))
            parts["reg_head"].append((la.reg_logits - lb.reg_logits).reshape(-1))
        for name in COMPONENTS:
            totals[name] += float(torch.linalg.vector_norm(torch.cat(parts[name]).double()))

    return DistanceReport(
        distances={name: totals[name] / len(images) for name in COMPONENTS},
        num_probes=len(images),
    )


@torch.no_grad()
def dump_response_maps(
    snapshot: DetectorSnapshot,
    image: np.ndarray,
    level: int,
    image_name: str = "image",
    alpha: float = 2.0,
    categories: Iterable[int] | None = None,
    device: str = "cpu",
) -> str:
    """
    The classification confidence grid of one pyramid level for one image, with the elastic
    selection threshold, in the selection-dump record format. Confidence is taken over the
    snapshot's seen categories unless categories is given.
    """
    categories = snapshot.categories_seen if categories is None else frozenset(categories)
    model = snapshot.build(device)
    responses = forward(model, images_to_tensor([image]).to(device))
    if not 0 <= level < len(responses.levels):
        raise ConfigurationError(
            f"level {level} out of range for {len(responses.levels)} pyramid levels"
        )
    selection = ers_classification(responses, categories, DistillConfig(alpha_cls=alpha))
    return format_level_record(
        image_name,
        "cls",
        level,
        responses.levels[level].grid_shape,
        selection.levels[level],
    )
