"""
Elastic response selection and the selective response distillation losses.

Selection works on one image of a teacher ResponseSet at a time. A location's classification
confidence is the highest sigmoid probability over the old-category channels; a box's
confidence aggregates the Top-1 probability of its four edge distributions. Within each
statistics group (one pyramid level, or all levels together) locations with
confidence >= mean + alpha * std are selected, and regression candidates are then thinned with
NMS over the teacher's decoded boxes.
"""

import dataclasses
import logging
from typing import Iterable, Sequence

import torch
import torch.nn.functional as F

from erdet.errors import ConfigurationError, SelectionError
from erdet.tinydet.decode import level_boxes, nms
from erdet.tinydet.model import LevelResponse, ResponseSet

DUMP_HEADER = "# erd selection v1"


@dataclasses.dataclass(frozen=True, kw_only=True)
class DistillConfig:
    alpha_cls: float = 2.0
    alpha_reg: float = 2.0
    lambda_cls: float = 1.0
    lambda_reg: float = 1.0
    lambda_feat: float = 0.0
    temperature: float = 1.0
    nms_iou_ers: float = 0.5
    per_level_stats: bool = True
    use_kl_localization: bool = True
    normalize_distill: bool = True
    box_confidence: str = "mean"
    cls_on_softened: bool = False
    feature_selection: str = "ers"
    cache_teacher: bool = False

    def validate(self):
        for name in ("alpha_cls", "alpha_reg", "lambda_cls", "lambda_reg", "lambda_feat"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.temperature <= 0:
            raise ConfigurationError(f"temperature must be > 0, got {self.temperature}")
        if not 0.0 < self.nms_iou_ers <= 1.0:
            raise ConfigurationError(f"nms_iou_ers must be in (0, 1], got {self.nms_iou_ers}")
        if self.box_confidence not in ("mean", "min"):
            raise ConfigurationError(
                f"box_confidence must be mean or min, got {self.box_confidence}"
            )
        if self.feature_selection not in ("all", "ers"):
            raise ConfigurationError(
                f"feature_selection must be all or ers, got {self.feature_selection}"
            )


@dataclasses.dataclass(frozen=True)
class GroupStats:
    mean: float
    std: float
    threshold: float
    count: int
    fallback: bool = False


@dataclasses.dataclass(frozen=True)
class LevelSelection:
    """
    confidences: (H*W,) G value of every location of the level.
    candidates:  flat indices passing the threshold (before NMS, after the empty fallback).
    selected:    flat indices kept for distillation, ascending.
    """

    stride: int
    confidences: torch.Tensor
    candidates: torch.Tensor
    selected: torch.Tensor
    stats: GroupStats | None = None


@dataclasses.dataclass(frozen=True)
class BranchSelection:
    branch: str
    levels: tuple[LevelSelection, ...]

    @property
    def count(self) -> int:
        return sum(int(lvl.selected.numel()) for lvl in self.levels)


@dataclasses.dataclass(frozen=True)
class SelectionMask:
    cls: BranchSelection | None = None
    reg: BranchSelection | None = None


def soften(logits: torch.Tensor, t: float = 1.0, dim: int = -1) -> torch.Tensor:
    """Temperature-softened SoftMax, with the max subtracted before exponentiating."""
    scaled = logits / t
    scaled = scaled - scaled.amax(dim=dim, keepdim=True)
    e = torch.exp(scaled)
    return e / e.sum(dim=dim, keepdim=True)


def _old_channels(old_categories: Iterable[int], num_categories: int) -> torch.Tensor:
    old = sorted(set(old_categories))
    if not old:
        raise SelectionError("No old categories: the teacher has no knowledge to distill")
    if old[0] < 0 or old[-1] >= num_categories:
        raise ConfigurationError(f"old categories {old} exceed {num_categories} head channels")
    return torch.tensor(old, dtype=torch.long)


def classification_confidence(
    level: LevelResponse, old: torch.Tensor, image_index: int = 0
) -> torch.Tensor:
    logits = level.flat_cls()[image_index]
    return torch.sigmoid(logits[:, old.to(logits.device)]).amax(dim=-1)


def box_confidence(level: LevelResponse, image_index: int = 0, aggregate: str = "mean"):
    top1 = soften(level.flat_reg()[image_index], 1.0).amax(dim=-1)  # (H*W, 4)
    if aggregate == "min":
        return top1.amin(dim=-1)
    return top1.mean(dim=-1)


def threshold_stats(confidences: torch.Tensor, alpha: float) -> GroupStats:
    """Mean, population std and mean + alpha * std, computed in float64."""
    g = confidences.detach().to(torch.float64).reshape(-1)
    if bool(g.max() == g.min()):
        mean, std = float(g[0]), 0.0
    else:
        mean_t = g.mean()
        mean, std = float(mean_t), float(((g - mean_t) ** 2).mean().sqrt())
    return GroupStats(mean=mean, std=std, threshold=mean + alpha * std, count=int(g.numel()))


def _split_by_level(flat: torch.Tensor, sizes: Sequence[int]) -> list[torch.Tensor]:
    """Maps indices into the concatenation of all levels back to per-level flat indices."""
    out, offset = [], 0
    for size in sizes:
        mask = (flat >= offset) & (flat < offset + size)
        out.append(torch.sort(flat[mask] - offset).values)
        offset += size
    return out


def _threshold_groups(
    confidences: list[torch.Tensor], alpha: float, per_level: bool
) -> list[tuple[torch.Tensor, GroupStats]]:
    """Per level candidate indices and the stats of the group each level belongs to."""
    groups = [[c] for c in confidences] if per_level else [confidences]
    results = []
    for group in groups:
        g = torch.cat(group)
        stats = threshold_stats(g, alpha)
        picked = (g.to(torch.float64) >= stats.threshold).nonzero(as_tuple=True)[0]
        if picked.numel() == 0:
            picked = torch.argmax(g).reshape(1)
            stats = dataclasses.replace(stats, fallback=True)
        for idx in _split_by_level(picked.cpu(), [c.numel() for c in group]):
            results.append((idx, stats))
    return results


def ers_classification(
    teacher: ResponseSet, old_categories: Iterable[int], cfg: DistillConfig, image_index: int = 0
) -> BranchSelection:
    """Classification branch of elastic response selection for one image."""
    old = _old_channels(old_categories, teacher.num_categories)
    confidences = [
        classification_confidence(lvl, old, image_index).detach().cpu() for lvl in teacher.levels
    ]
    groups = _threshold_groups(confidences, cfg.alpha_cls, cfg.per_level_stats)
    return BranchSelection(
        branch="cls",
        levels=tuple(
            LevelSelection(lvl.stride, conf, idx, idx, stats)
            for lvl, conf, (idx, stats) in zip(teacher.levels, confidences, groups)
        ),
    )


def ers_regression(
    teacher: ResponseSet, cfg: DistillConfig, image_index: int = 0
) -> BranchSelection:
    """Regression branch of elastic response selection for one image, NMS included."""
    confidences = [
        box_confidence(lvl, image_index, cfg.box_confidence).detach().cpu()
        for lvl in teacher.levels
    ]
    boxes = [level_boxes(lvl)[image_index].detach().cpu() for lvl in teacher.levels]
    groups = _threshold_groups(confidences, cfg.alpha_reg, cfg.per_level_stats)

    # NMS runs over each statistics group: per level, or over the pooled candidates of all levels.
    spans = [[i] for i in range(len(groups))] if cfg.per_level_stats else [list(range(len(groups)))]
    selected = [None] * len(groups)
    for span in spans:
        cand_boxes = torch.cat([boxes[i][groups[i][0]] for i in span])
        cand_scores = torch.cat([confidences[i][groups[i][0]] for i in span])
        owners = torch.cat([torch.full((groups[i][0].numel(),), i) for i in span])
        local = torch.cat([groups[i][0] for i in span])
        keep = nms(cand_boxes, cand_scores, cfg.nms_iou_ers)
        for i in span:
            selected[i] = torch.sort(local[keep][owners[keep] == i]).values

    return BranchSelection(
        branch="reg",
        levels=tuple(
            LevelSelection(lvl.stride, conf, cand, sel, stats)
            for lvl, conf, (cand, stats), sel in zip(teacher.levels, confidences, groups, selected)
        ),
    )


def select_topk(
    teacher: ResponseSet,
    k: int | str | None,
    old_categories: Iterable[int],
    image_index: int = 0,
    branch: str = "cls",
) -> BranchSelection:
    """
    Fixed-count baseline: the k locations with the highest classification confidence across all
    levels. k of None, "all" or at least the location count selects every location.
    """
    old = _old_channels(old_categories, teacher.num_categories)
    confidences = [
        classification_confidence(lvl, old, image_index).detach().cpu() for lvl in teacher.levels
    ]
    sizes = [c.numel() for c in confidences]
    flat = torch.cat(confidences)
    if k is None or k == "all" or int(k) >= flat.numel():
        picked = torch.arange(flat.numel())
    else:
        if int(k) < 1:
            raise ConfigurationError(f"k must be positive, got {k}")
        picked = torch.sort(flat, descending=True, stable=True).indices[: int(k)]
    per_level = _split_by_level(picked, sizes)
    return BranchSelection(
        branch=branch,
        levels=tuple(
            LevelSelection(lvl.stride, conf, idx, idx)
            for lvl, conf, idx in zip(teacher.levels, confidences, per_level)
        ),
    )


def select_all(teacher: ResponseSet, branch: str) -> BranchSelection:
    return BranchSelection(
        branch=branch,
        levels=tuple(
            LevelSelection(
                lvl.stride,
                torch.zeros(lvl.num_locations),
                torch.arange(lvl.num_locations),
                torch.arange(lvl.num_locations),
            )
            for lvl in teacher.levels
        ),
    )


def _zero_like_graph(student: ResponseSet) -> torch.Tensor:
    return sum(lvl.cls_logits.sum() + lvl.reg_logits.sum() for lvl in student.levels) * 0.0


def distill_cls_loss(
    teacher: ResponseSet,
    student: ResponseSet,
    selections: Sequence[BranchSelection],
    old_categories: Iterable[int],
    cfg: DistillConfig | None = None,
) -> torch.Tensor:
    """
    Squared difference of teacher and student old-category logits at the selected locations,
    summed over channels and divided by the number of selected locations. selections holds one
    BranchSelection per image of the batch. Teacher values never receive gradients.
    """
    cfg = cfg or DistillConfig()
    old = _old_channels(old_categories, teacher.num_categories)
    total, m = None, 0
    for b, selection in enumerate(selections):
        for t_lvl, s_lvl, sel in zip(teacher.levels, student.levels, selection.levels):
            idx = sel.selected
            if idx.numel() == 0:
                continue
            s_logits = s_lvl.flat_cls()[b]
            idx = idx.to(s_logits.device)
            ct = t_lvl.flat_cls()[b].detach()[idx][:, old.to(s_logits.device)]
            cs = s_logits[idx][:, old.to(s_logits.device)]
            if cfg.cls_on_softened:
                ct, cs = soften(ct, cfg.temperature), soften(cs, cfg.temperature)
            term = ((ct - cs) ** 2).sum()
            total = term if total is None else total + term
            m += int(idx.numel())

    if m == 0:
        logging.warning("Classification distillation has an empty selection, loss is 0")
        return _zero_like_graph(student)
    return total / m if cfg.normalize_distill else total


def distill_reg_loss(
    teacher: ResponseSet,
    student: ResponseSet,
    selections: Sequence[BranchSelection],
    cfg: DistillConfig | None = None,
) -> torch.Tensor:
    """
    Localization distillation over the selected boxes: per box, the sum over its four edges of
    KL(softened teacher || softened student), averaged over boxes. With use_kl_localization
    off the per-edge KL becomes the squared difference of the softened distributions.
    """
    cfg = cfg or DistillConfig()
    t = cfg.temperature
    total, count = None, 0
    for b, selection in enumerate(selections):
        for t_lvl, s_lvl, sel in zip(teacher.levels, student.levels, selection.levels):
            idx = sel.selected
            if idx.numel() == 0:
                continue
            s_reg = s_lvl.flat_reg()[b]
            idx = idx.to(s_reg.device)
            r_t = t_lvl.flat_reg()[b].detach()[idx]  # (J, 4, n)
            r_s = s_reg[idx]
            if cfg.use_kl_localization:
                # Both sides in log space through the same op, so equal logits give exactly 0.
                log_t = F.log_softmax(r_t / t, dim=-1)
                log_s = F.log_softmax(r_s / t, dim=-1)
                term = F.kl_div(log_s, log_t, reduction="sum", log_target=True)
            else:
                term = ((soften(r_t, t) - soften(r_s, t)) ** 2).sum()
            total = term if total is None else total + term
            count += int(idx.numel())

    if count == 0:
        logging.warning("Localization distillation has an empty selection, loss is 0")
        return _zero_like_graph(student)
    return total / count if cfg.normalize_distill else total


def distill_feature_loss(
    teacher: ResponseSet,
    student: ResponseSet,
    selections: Sequence[BranchSelection] | None = None,
) -> torch.Tensor:
    """
    Squared L2 distance between teacher and student pyramid feature vectors, averaged over
    locations: the selected ones, or every location when selections is None.
    """
    total, count = None, 0
    for level_index, (t_lvl, s_lvl) in enumerate(zip(teacher.levels, student.levels)):
        if t_lvl.features is None or s_lvl.features is None:
            raise ConfigurationError("Feature distillation needs responses with features")
        b, c, h, w = s_lvl.features.shape
        f_t = t_lvl.features.detach().reshape(b, c, h * w).transpose(1, 2)
        f_s = s_lvl.features.reshape(b, c, h * w).transpose(1, 2)
        for i in range(b):
            if selections is None:
                diff = f_t[i] - f_s[i]
            else:
                idx = selections[i].levels[level_index].selected.to(f_s.device)
                if idx.numel() == 0:
                    continue
                diff = f_t[i][idx] - f_s[i][idx]
            term = (diff**2).sum()
            total = term if total is None else total + term
            count += int(diff.shape[0])

    if count == 0:
        return _zero_like_graph(student)
    return total / count


def total_loss(
    l_model: torch.Tensor,
    l_cls: torch.Tensor,
    l_reg: torch.Tensor,
    cfg: DistillConfig,
    l_feat: torch.Tensor | None = None,
) -> torch.Tensor:
    """L_model + lambda_cls * L_cls + lambda_reg * L_reg (+ lambda_feat * L_feat)."""
    total = l_model + cfg.lambda_cls * l_cls + cfg.lambda_reg * l_reg
    if l_feat is not None and cfg.lambda_feat:
        total = total + cfg.lambda_feat * l_feat
    return total


def _fmt(value: float) -> str:
    return f"{value:.6g}"


def format_level_record(
    image_name: str, branch: str, level_index: int, grid_shape: tuple[int, int], sel: LevelSelection
) -> str:
    """One structured-text record: header, stats, the G grid row by row and the selection."""
    h, w = grid_shape
    lines = [
        f"image {image_name} branch {branch} level {level_index} stride {sel.stride} grid {h} {w}"
    ]
    if sel.stats is None:
        lines.append("stats none")
    else:
        s = sel.stats
        lines.append(
            f"stats mean {_fmt(s.mean)} std {_fmt(s.std)} threshold {_fmt(s.threshold)} "
            f"count {s.count} fallback {int(s.fallback)}"
        )
    grid = sel.confidences.reshape(h, w).tolist()
    lines.extend("G " + " ".join(_fmt(v) for v in row) for row in grid)
    lines.append("selected " + " ".join(str(int(i)) for i in sel.selected.tolist()))
    return "\n".join(lines)


def format_selection_dump(
    image_name: str, mask: SelectionMask, grid_shapes: Sequence[tuple[int, int]]
) -> str:
    records = [DUMP_HEADER]
    for branch in (mask.cls, mask.reg):
        if branch is None:
            continue
        for i, (shape, sel) in enumerate(zip(grid_shapes, branch.levels)):
            records.append(format_level_record(image_name, branch.branch, i, shape, sel))
    return "\n".join(records) + "\n"
