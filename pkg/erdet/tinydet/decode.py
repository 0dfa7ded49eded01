import dataclasses
from typing import Iterable

import torch

from erdet.errors import ConfigurationError
from erdet.tinydet.losses import expected_distance
from erdet.tinydet.model import LevelResponse, ResponseSet

MAX_DETECTIONS = 100
PRE_NMS_TOPK = 1000


@dataclasses.dataclass(frozen=True)
class Detections:
    """Final detections of one image: boxes (D, 4) in pixels, scores (D,), labels (D,)."""

    boxes: torch.Tensor
    scores: torch.Tensor
    labels: torch.Tensor

    def __len__(self) -> int:
        return len(self.scores)


def distance_to_boxes(centers: torch.Tensor, distances: torch.Tensor) -> torch.Tensor:
    """(..., 2) centers and (..., 4) pixel distances (l, t, r, b) to x0y0x1y1 boxes."""
    return torch.stack(
        [
            centers[..., 0] - distances[..., 0],
            centers[..., 1] - distances[..., 1],
            centers[..., 0] + distances[..., 2],
            centers[..., 1] + distances[..., 3],
        ],
        dim=-1,
    )


def level_boxes(level: LevelResponse) -> torch.Tensor:
    """(B, H*W, 4) decoded pixel boxes: edge distance = expected bin x stride."""
    distances = expected_distance(level.flat_reg()) * level.stride
    return distance_to_boxes(level.centers(), distances)


def box_iou_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    area_a = (a[:, 2] - a[:, 0]).clamp(min=0) * (a[:, 3] - a[:, 1]).clamp(min=0)
    area_b = (b[:, 2] - b[:, 0]).clamp(min=0) * (b[:, 3] - b[:, 1]).clamp(min=0)
    lt = torch.maximum(a[:, None, :2], b[None, :, :2])
    rb = torch.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    return torch.where(union > 0, inter / union.clamp(min=1e-12), torch.zeros_like(inter))


def nms(boxes: torch.Tensor, scores: torch.Tensor, iou_threshold: float) -> torch.Tensor:
    """
    Greedy non-maximum suppression. Boxes are visited in descending score order (ties keep
    input order); a box is dropped when its IoU with an already kept box exceeds iou_threshold.
    Returns the kept indices in visiting order.
    """
    if scores.numel() == 0:
        return torch.empty(0, dtype=torch.long, device=scores.device)
    order = torch.sort(scores, descending=True, stable=True).indices
    ious = box_iou_matrix(boxes[order], boxes[order])
    keep = torch.ones(order.numel(), dtype=torch.bool, device=scores.device)
    for i in range(order.numel()):
        if keep[i]:
            keep[i + 1 :] &= ious[i, i + 1 :] <= iou_threshold
    return order[keep]


def _check_unit(name: str, value: float):
    if not 0.0 <= value <= 1.0:
        raise ConfigurationError(f"{name} must be in [0, 1], got {value}")


def decode_boxes(
    responses: ResponseSet,
    score_threshold: float = 0.05,
    nms_iou: float = 0.6,
    categories: Iterable[int] | None = None,
    max_detections: int = MAX_DETECTIONS,
) -> list[Detections]:
    """
    Turns head responses into per-image detections: sigmoid scores per category, expectation
    decoding of the edge distributions, per-category NMS. When categories is given only those
    channels are decoded.
    """
    _check_unit("score_threshold", score_threshold)
    _check_unit("nms_iou", nms_iou)

    size = responses.image_size
    boxes = torch.cat([level_boxes(lvl) for lvl in responses.levels], dim=1).clamp(0, size)
    scores = torch.cat([torch.sigmoid(lvl.flat_cls()) for lvl in responses.levels], dim=1)
    if categories is not None:
        channels = torch.tensor(sorted(set(categories)), dtype=torch.long, device=scores.device)
    else:
        channels = torch.arange(scores.shape[-1], device=scores.device)

    results = []
    for b in range(responses.batch_size):
        img_scores = scores[b][:, channels]  # (L, C)
        loc, col = (img_scores > score_threshold).nonzero(as_tuple=True)
        cand_scores = img_scores[loc, col]
        if cand_scores.numel() > PRE_NMS_TOPK:
            top = torch.sort(cand_scores, descending=True, stable=True).indices[:PRE_NMS_TOPK]
            loc, col, cand_scores = loc[top], col[top], cand_scores[top]
        cand_boxes = boxes[b][loc]
        cand_labels = channels[col]

        kept = []
        for label in torch.unique(cand_labels):
            idx = (cand_labels == label).nonzero(as_tuple=True)[0]
            kept.append(idx[nms(cand_boxes[idx], cand_scores[idx], nms_iou)])
        if kept:
            kept = torch.cat(kept)
            kept = kept[torch.sort(cand_scores[kept], descending=True, stable=True).indices]
            kept = kept[:max_detections]
        else:
            kept = torch.empty(0, dtype=torch.long, device=scores.device)
        results.append(
            Detections(
                boxes=cand_boxes[kept].detach(),
                scores=cand_scores[kept].detach(),
                labels=cand_labels[kept].detach(),
            )
        )
    return results
