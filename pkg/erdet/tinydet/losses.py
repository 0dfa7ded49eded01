import dataclasses
from typing import Iterable

import torch
import torch.nn.functional as F

from erdet.errors import ConfigurationError
from erdet.tinydet.assign import Assignment
from erdet.tinydet.model import ResponseSet

FOCAL_GAMMA = 2.0
FOCAL_ALPHA = 0.25


@dataclasses.dataclass(frozen=True)
class LossBreakdown:
    total: torch.Tensor
    cls: torch.Tensor
    dfl: torch.Tensor
    iou: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {f.name: float(getattr(self, f.name)) for f in dataclasses.fields(self)}


def focal_loss(
    logits: torch.Tensor,
    targets: torch.Tensor,
    gamma: float = FOCAL_GAMMA,
    alpha: float = FOCAL_ALPHA,
) -> torch.Tensor:
    """Elementwise sigmoid focal loss."""
    p = torch.sigmoid(logits)
    ce = F.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    p_t = p * targets + (1 - p) * (1 - targets)
    alpha_t = alpha * targets + (1 - alpha) * (1 - targets)
    return alpha_t * (1 - p_t) ** gamma * ce


def distribution_focal_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """
    Distribution focal loss. pred is (N, n) bin logits, target is (N,) continuous distances in
    [0, n - 1]. Cross-entropy against the two bins bracketing the target, linearly weighted.
    """
    n = pred.shape[-1]
    dis_left = target.floor().long().clamp(max=n - 2)
    dis_right = dis_left + 1
    weight_left = dis_right.to(target.dtype) - target
    weight_right = target - dis_left.to(target.dtype)
    return (
        F.cross_entropy(pred, dis_left, reduction="none") * weight_left
        + F.cross_entropy(pred, dis_right, reduction="none") * weight_right
    )


def expected_distance(reg_logits: torch.Tensor) -> torch.Tensor:
    """Expectation of the SoftMax bin distribution over the last axis, in bin units."""
    n = reg_logits.shape[-1]
    project = torch.arange(n, dtype=reg_logits.dtype, device=reg_logits.device)
    return F.softmax(reg_logits, dim=-1) @ project


def edge_iou(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """IoU of boxes given as (left, top, right, bottom) distances from a shared point."""
    lo = torch.minimum(pred, target)
    inter_w = lo[..., 0] + lo[..., 2]
    inter_h = lo[..., 1] + lo[..., 3]
    inter = inter_w.clamp(min=0) * inter_h.clamp(min=0)
    area_p = (pred[..., 0] + pred[..., 2]) * (pred[..., 1] + pred[..., 3])
    area_t = (target[..., 0] + target[..., 2]) * (target[..., 1] + target[..., 3])
    return inter / (area_p + area_t - inter).clamp(min=1e-9)


def _category_lookup(active: Iterable[int], num_categories: int) -> torch.Tensor:
    active = sorted(set(active))
    if not active:
        raise ConfigurationError("detector_loss needs at least one active category")
    if active[0] < 0 or active[-1] >= num_categories:
        raise ConfigurationError(
            f"active categories {active} exceed the head's {num_categories} channels"
        )
    return torch.tensor(active, dtype=torch.long)


def detector_loss(
    responses: ResponseSet, assignment: Assignment, active_categories: Iterable[int]
) -> LossBreakdown:
    """
    L_model: focal classification loss over the active category channels plus distribution
    focal loss and IoU loss over positive locations, each normalized by the positive count.
    Channels outside active_categories receive no supervision.
    """
    device = responses.levels[0].cls_logits.device
    active = _category_lookup(active_categories, responses.num_categories).to(device)
    lookup = torch.full((responses.num_categories,), -1, dtype=torch.long, device=device)
    lookup[active] = torch.arange(len(active), device=device)

    num_pos = assignment.num_positives
    normalizer = max(num_pos, 1)

    cls_total = responses.levels[0].cls_logits.new_zeros(())
    reg_logits, reg_targets = [], []
    for level, assigned in zip(responses.levels, assignment.levels):
        logits = level.cls_logits.index_select(-1, active)
        targets = torch.zeros_like(logits)
        pos = assigned.positive
        if pos.any():
            cols = lookup[assigned.labels[pos]]
            rows = pos.nonzero(as_tuple=False)
            keep = cols >= 0
            rows, cols = rows[keep], cols[keep]
            targets[rows[:, 0], rows[:, 1], rows[:, 2], cols] = 1.0
            reg_logits.append(level.reg_logits[pos])
            reg_targets.append(assigned.target_edges[pos].to(level.reg_logits.dtype))
        cls_total = cls_total + focal_loss(logits, targets).sum()

    cls_loss = cls_total / normalizer
    if num_pos == 0:
        zero = sum(lvl.reg_logits.sum() for lvl in responses.levels) * 0.0
        return LossBreakdown(total=cls_loss + zero, cls=cls_loss, dfl=zero, iou=zero)

    pred = torch.cat(reg_logits)  # (P, 4, n)
    target = torch.cat(reg_targets)  # (P, 4)
    n = pred.shape[-1]
    dfl = distribution_focal_loss(pred.reshape(-1, n), target.reshape(-1)).reshape(-1, 4)
    dfl_loss = dfl.mean(dim=1).sum() / normalizer
    iou_loss = (1.0 - edge_iou(expected_distance(pred), target)).sum() / normalizer

    return LossBreakdown(
        total=cls_loss + dfl_loss + iou_loss, cls=cls_loss, dfl=dfl_loss, iou=iou_loss
    )
