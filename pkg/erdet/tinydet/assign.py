import dataclasses
from typing import Sequence

import torch

from erdet.synthshapes import Annotation
from erdet.tinydet.model import HeadConfig, grid_centers

BACKGROUND = -1


@dataclasses.dataclass(frozen=True)
class LevelAssignment:
    """
    labels:       (B, H, W) category id, or BACKGROUND.
    target_edges: (B, H, W, 4) distances (left, top, right, bottom) in stride units, zero at
                  background locations.
    """

    stride: int
    labels: torch.Tensor
    target_edges: torch.Tensor

    @property
    def positive(self) -> torch.Tensor:
        return self.labels != BACKGROUND


@dataclasses.dataclass(frozen=True)
class Assignment:
    levels: tuple[LevelAssignment, ...]

    @property
    def num_positives(self) -> int:
        return int(sum(lvl.positive.sum() for lvl in self.levels))

    def to(self, device) -> "Assignment":
        return Assignment(
            levels=tuple(
                LevelAssignment(lvl.stride, lvl.labels.to(device), lvl.target_edges.to(device))
                for lvl in self.levels
            )
        )


def _sort_key(ann: Annotation):
    # Smaller boxes win; the remaining fields only make equal-area ties independent of input order.
    return (ann.area, ann.category_id, ann.box)


def _assign_level(
    annotations: Sequence[Annotation], stride: int, config: HeadConfig
) -> tuple[torch.Tensor, torch.Tensor]:
    h = w = config.image_size // stride
    centers = grid_centers(h, w, stride, torch.empty(0, dtype=torch.float32))
    cx, cy = centers[:, 0], centers[:, 1]
    labels = torch.full((h * w,), BACKGROUND, dtype=torch.long)
    edges = torch.zeros(h * w, 4)
    max_dist = config.num_bins - 1

    # Largest first, so smaller boxes overwrite the locations they share.
    for ann in sorted(annotations, key=_sort_key, reverse=True):
        x0, y0, x1, y1 = (float(v) for v in ann.box)
        bw, bh = x1 - x0, y1 - y0
        central = (
            (cx >= x0 + bw / 4) & (cx <= x1 - bw / 4) & (cy >= y0 + bh / 4) & (cy <= y1 - bh / 4)
        )
        dist = torch.stack([cx - x0, cy - y0, x1 - cx, y1 - cy], dim=-1) / stride
        representable = (dist >= 0).all(dim=-1) & (dist <= max_dist).all(dim=-1)
        mask = central & representable
        labels[mask] = ann.category_id
        edges[mask] = dist[mask]

    return labels.reshape(h, w), edges.reshape(h, w, 4)


def assign_targets(
    annotations: Sequence[Sequence[Annotation]], config: HeadConfig
) -> Assignment:
    """
    Labels every location of every level for a batch of images (one annotation sequence per
    image). A location is positive for a box when it lies in the central half of the box and
    all four edge distances fit in [0, num_bins - 1] at that level; overlapping boxes resolve
    to the smaller one.
    """
    levels = []
    for stride in config.pyramid_strides:
        per_image = [_assign_level(anns, stride, config) for anns in annotations]
        levels.append(
            LevelAssignment(
                stride=stride,
                labels=torch.stack([lab for lab, _ in per_image]),
                target_edges=torch.stack([edg for _, edg in per_image]),
            )
        )
    return Assignment(levels=tuple(levels))
