"""
Multi-step class-incremental training.

Step 0 trains a detector from scratch on the base categories. Every later step copies the
previous step's snapshot into a student, freezes the snapshot as the teacher and optimizes

    L_model (new-category channels) + lambda_cls * L_cls + lambda_reg * L_reg (old channels)

where the distillation terms are computed on the responses the strategy selects.
"""

import csv
import dataclasses
import io
import logging
from collections import defaultdict
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from erdet import evalkit
from erdet.artifacts import ArtifactWriter
from erdet.erdistill import (
    DistillConfig,
    SelectionMask,
    distill_cls_loss,
    distill_feature_loss,
    distill_reg_loss,
    ers_classification,
    ers_regression,
    format_selection_dump,
    select_all,
    select_topk,
    total_loss,
)
from erdet.errors import (
    ArtifactError,
    ConfigurationError,
    EmptyStepError,
    ErdetError,
    TrainingDivergedError,
)
from erdet.schemas import dump_json, generate_metrics_schema
from erdet.synthshapes import (
    PartitionView,
    ShapesDataset,
    TaskSplit,
    filter_by_categories,
    filter_by_step,
    hflip,
)
from erdet.tinydet.assign import assign_targets
from erdet.tinydet.losses import detector_loss
from erdet.tinydet.model import (
    HeadConfig,
    LevelResponse,
    ResponseSet,
    TinyDetector,
    forward,
    images_to_tensor,
)
from erdet.tinydet.snapshot import DetectorSnapshot

STRATEGIES = (
    "upper_bound",
    "finetune",
    "kd_all",
    "kd_all_cls",
    "kd_all_reg",
    "topk",
    "erd_cls_only",
    "erd_full",
)
DISTILLING_STRATEGIES = ("kd_all", "kd_all_cls", "kd_all_reg", "topk", "erd_cls_only", "erd_full")
LOSS_COLUMNS = (
    "epoch",
    "iteration",
    "lr",
    "total",
    "model",
    "cls",
    "dfl",
    "iou",
    "distill_cls",
    "distill_reg",
    "distill_feat",
)
# Seed offset between protocol steps; base training never uses it.
STEP_SEED_STRIDE = 1000


@dataclasses.dataclass(frozen=True, kw_only=True)
class TrainConfig:
    epochs_per_step: int = 12
    batch_size: int = 8
    base_lr: float = 0.01
    incremental_lr_scale: float = 0.1
    lr_decay_epochs: tuple[int, ...] = (8, 11)
    lr_decay_factor: float = 0.1
    warmup_iters: int = 100
    momentum: float = 0.9
    weight_decay: float = 1e-4
    grad_clip_norm: float | None = 35.0
    strategy: str = "erd_full"
    topk: int | None = None
    hflip: bool = False
    deterministic: bool = True
    seed: int = 0
    device: str = "cpu"
    num_train_images: int = 2000
    num_test_images: int = 400
    eval_score_threshold: float = 0.05
    eval_nms_iou: float = 0.6
    selection_dump_images: int = 4

    def __post_init__(self):
        object.__setattr__(self, "lr_decay_epochs", tuple(self.lr_decay_epochs))

    def validate(self):
        if self.epochs_per_step < 1:
            raise ConfigurationError(f"epochs_per_step must be >= 1, got {self.epochs_per_step}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.base_lr <= 0 or self.incremental_lr_scale <= 0 or self.lr_decay_factor <= 0:
            raise ConfigurationError("learning rates and decay factor must be positive")
        if self.strategy not in STRATEGIES:
            raise ConfigurationError(
                f"Unknown strategy {self.strategy!r}, expected one of {STRATEGIES}"
            )
        if self.topk is not None and self.topk < 1:
            raise ConfigurationError(f"topk must be positive, got {self.topk}")
        if self.warmup_iters < 0 or self.selection_dump_images < 0:
            raise ConfigurationError("warmup_iters and selection_dump_images must be >= 0")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["lr_decay_epochs"] = list(self.lr_decay_epochs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclasses.dataclass
class LossCurve:
    """One row per training iteration, columns as in LOSS_COLUMNS."""

    rows: list[dict[str, float]] = dataclasses.field(default_factory=list)

    def append(self, **values: float):
        self.rows.append({c: values.get(c, 0.0) for c in LOSS_COLUMNS})

    def column(self, name: str) -> np.ndarray:
        return np.asarray([row[name] for row in self.rows], dtype=np.float64)

    def smoothed(self, name: str = "total", beta: float = 0.9) -> np.ndarray:
        values = self.column(name)
        out = np.empty_like(values)
        running = values[0] if values.size else 0.0
        for i, v in enumerate(values):
            running = beta * running + (1 - beta) * v
            out[i] = running
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=LOSS_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in self.rows:
            writer.writerow(
                {k: v if k in ("epoch", "iteration") else repr(v) for k, v in row.items()}
            )
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "LossCurve":
        curve = cls()
        for row in csv.DictReader(io.StringIO(text)):
            curve.rows.append(
                {k: int(v) if k in ("epoch", "iteration") else float(v) for k, v in row.items()}
            )
        return curve


@dataclasses.dataclass
class SelectionCounter:
    """Per-image selection counts of both branches over an incremental step."""

    counts: dict[str, list[int]] = dataclasses.field(
        default_factory=lambda: {"cls": [], "reg": []}
    )

    def add(self, mask: SelectionMask):
        for branch in ("cls", "reg"):
            selection = getattr(mask, branch)
            if selection is not None:
                self.counts[branch].append(selection.count)

    def summary(self) -> dict:
        out = {}
        for branch, counts in self.counts.items():
            if counts:
                out[branch] = {
                    "images": len(counts),
                    "mean": float(np.mean(counts)),
                    "min": int(min(counts)),
                    "max": int(max(counts)),
                }
            else:
                out[branch] = {"images": 0, "mean": None, "min": None, "max": None}
        return out


@dataclasses.dataclass(frozen=True, kw_only=True)
class StepResult:
    step_index: int
    strategy: str
    snapshot: DetectorSnapshot
    metrics: evalkit.MetricsReport | None
    losses: LossCurve
    selection: dict = dataclasses.field(default_factory=dict)
    selection_dumps: dict[str, str] = dataclasses.field(default_factory=dict)

    def metrics_json(self) -> str:
        if self.metrics is None:
            raise ConfigurationError(f"Step {self.step_index} was not evaluated")
        document = self.metrics.to_json_dict(
            step=self.step_index,
            strategy=self.strategy,
            selection=self.selection or SelectionCounter().summary(),
        )
        return dump_json(document, generate_metrics_schema())


def seed_everything(seed: int, deterministic: bool):
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(deterministic, warn_only=True)


class _StepData:
    """The images and annotations of a training view, held in memory for a whole step."""

    def __init__(self, view: PartitionView):
        if not view.records:
            raise EmptyStepError(f"No training images in view {view.name!r}")
        self.records = view.records
        self.images = [view.load_image(r) for r in view.records]

    def __len__(self):
        return len(self.records)

    def batches(self, epoch: int, batch_size: int, seed: int, flip: bool):
        generator = torch.Generator().manual_seed(seed * STEP_SEED_STRIDE + epoch)
        order = torch.randperm(len(self), generator=generator).tolist()
        flips = (torch.rand(len(self), generator=generator) < 0.5).tolist()
        for start in range(0, len(order), batch_size):
            keys, images, annotations = [], [], []
            for i in order[start : start + batch_size]:
                image, anns = self.images[i], self.records[i].annotations
                flipped = flip and flips[i]
                if flipped:
                    image, anns = hflip(image, anns)
                keys.append((self.records[i].name, flipped))
                images.append(image)
                annotations.append(anns)
            yield keys, images_to_tensor(images), annotations


def _lr_at(config: TrainConfig, base: float, epoch: int, iteration: int) -> float:
    lr = base * config.lr_decay_factor ** sum(1 for e in config.lr_decay_epochs if epoch >= e)
    if iteration < config.warmup_iters:
        lr *= (iteration + 1) / config.warmup_iters
    return lr


def concat_responses(items: Sequence[ResponseSet]) -> ResponseSet:
    """Concatenates single-image (or batched) ResponseSets along the batch dimension."""
    levels = []
    for parts in zip(*(item.levels for item in items)):
        features = None
        if all(p.features is not None for p in parts):
            features = torch.cat([p.features for p in parts])
        levels.append(
            LevelResponse(
                parts[0].stride,
                torch.cat([p.cls_logits for p in parts]),
                torch.cat([p.reg_logits for p in parts]),
                features,
            )
        )
    return ResponseSet(levels=tuple(levels), image_size=items[0].image_size)


@torch.no_grad()
def teacher_responses(
    teacher: TinyDetector, images: torch.Tensor, keys=None, cache: dict | None = None
) -> ResponseSet:
    """
    Teacher forward pass without gradients. With a cache, responses are stored per
    (image name, flipped) key and reused; the teacher is frozen so they never change.
    """
    if cache is None or keys is None:
        return forward(teacher, images).detach()
    missing = [i for i, key in enumerate(keys) if key not in cache]
    if missing:
        fresh = forward(teacher, images[missing]).detach()
        for j, i in enumerate(missing):
            cache[keys[i]] = fresh.image(j)
    return concat_responses([cache[key] for key in keys])


def select_responses(
    teacher: ResponseSet,
    strategy: str,
    old_categories: Iterable[int],
    distill: DistillConfig,
    topk: int | None = None,
    image_index: int = 0,
) -> SelectionMask:
    """The locations each branch distills for one image under a distilling strategy."""
    if strategy in ("kd_all", "kd_all_cls", "kd_all_reg"):
        return SelectionMask(
            cls=None if strategy == "kd_all_reg" else select_all(teacher, "cls"),
            reg=None if strategy == "kd_all_cls" else select_all(teacher, "reg"),
        )
    if strategy == "topk":
        selection = select_topk(teacher, topk, old_categories, image_index)
        return SelectionMask(cls=selection, reg=dataclasses.replace(selection, branch="reg"))
    if strategy == "erd_cls_only":
        return SelectionMask(cls=ers_classification(teacher, old_categories, distill, image_index))
    if strategy == "erd_full":
        return SelectionMask(
            cls=ers_classification(teacher, old_categories, distill, image_index),
            reg=ers_regression(teacher, distill, image_index),
        )
    raise ConfigurationError(f"Strategy {strategy!r} does not distill responses")


def distillation_terms(
    teacher: ResponseSet,
    student: ResponseSet,
    strategy: str,
    old_categories: Iterable[int],
    distill: DistillConfig,
    topk: int | None = None,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor | None, list[SelectionMask]]:
    old = frozenset(old_categories)
    masks = [
        select_responses(teacher, strategy, old, distill, topk, b)
        for b in range(teacher.batch_size)
    ]
    zero = sum(lvl.cls_logits.sum() for lvl in student.levels) * 0.0

    l_cls = zero
    if masks[0].cls is not None:
        l_cls = distill_cls_loss(teacher, student, [m.cls for m in masks], old, distill)
    l_reg = zero
    if masks[0].reg is not None:
        l_reg = distill_reg_loss(teacher, student, [m.reg for m in masks], distill)

    l_feat = None
    if distill.lambda_feat > 0:
        selections = None
        if distill.feature_selection == "ers":
            selections = [
                ers_classification(teacher, old, distill, b) for b in range(teacher.batch_size)
            ]
        l_feat = distill_feature_loss(teacher, student, selections)
    return l_cls, l_reg, l_feat, masks


def _fit(
    model: TinyDetector,
    data: _StepData,
    config: TrainConfig,
    lr: float,
    active_categories: frozenset[int],
    step_index: int,
    seed: int,
    teacher: TinyDetector | None = None,
    old_categories: frozenset[int] = frozenset(),
    distill: DistillConfig | None = None,
    strategy: str = "upper_bound",
    counter: SelectionCounter | None = None,
) -> LossCurve:
    device = torch.device(config.device)
    optimizer = torch.optim.SGD(
        model.parameters(), lr=lr, momentum=config.momentum, weight_decay=config.weight_decay
    )
    cache = {} if teacher is not None and distill.cache_teacher else None
    curve = LossCurve()
    iteration = 0
    for epoch in range(config.epochs_per_step):
        model.train()
        epoch_sums = defaultdict(float)
        num_batches = 0
        for keys, images, annotations in data.batches(
            epoch, config.batch_size, seed, config.hflip
        ):
            lr_now = _lr_at(config, lr, epoch, iteration)
            for group in optimizer.param_groups:
                group["lr"] = lr_now

            images = images.to(device)
            student = forward(model, images)
            assignment = assign_targets(annotations, model.config).to(device)
            model_loss = detector_loss(student, assignment, active_categories)

            values = {"epoch": epoch, "iteration": iteration, "lr": lr_now}
            values.update({k: float(v) for k, v in model_loss.as_floats().items()})
            values["model"] = values.pop("total")
            if teacher is not None:
                t_resp = teacher_responses(teacher, images, keys, cache)
                l_cls, l_reg, l_feat, masks = distillation_terms(
                    t_resp, student, strategy, old_categories, distill, config.topk
                )
                for mask in masks:
                    counter.add(mask)
                loss = total_loss(model_loss.total, l_cls, l_reg, distill, l_feat)
                values["distill_cls"] = float(l_cls)
                values["distill_reg"] = float(l_reg)
                values["distill_feat"] = 0.0 if l_feat is None else float(l_feat)
            else:
                loss = model_loss.total
            values["total"] = float(loss)

            if not torch.isfinite(loss):
                terms = {k: v for k, v in values.items() if k not in ("epoch", "iteration", "lr")}
                raise TrainingDivergedError(
                    f"Loss became non-finite at step {step_index} epoch {epoch} "
                    f"iteration {iteration}: {terms}"
                )

            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            if config.grad_clip_norm:
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip_norm)
            optimizer.step()

            curve.append(**values)
            logging.debug(f"Step {step_index} iteration {iteration}: {values}")
            for k in ("total", "model", "distill_cls", "distill_reg"):
                epoch_sums[k] += values.get(k, 0.0)
            num_batches += 1
            iteration += 1

        means = ", ".join(f"{k} {v / num_batches:.4f}" for k, v in epoch_sums.items())
        logging.info(
            f"Step {step_index} epoch {epoch + 1}/{config.epochs_per_step}: {means}, "
            f"lr {lr_now:.2e}"
        )
    return curve


def _view_categories(view: PartitionView) -> frozenset[int]:
    if view.categories is not None:
        return frozenset(view.categories)
    return frozenset(a.category_id for r in view.records for a in r.annotations)


def train_base(
    view: PartitionView,
    config: TrainConfig,
    head_config: HeadConfig,
    categories: Iterable[int] | None = None,
    step_index: int = 0,
    losses: LossCurve | None = None,
) -> DetectorSnapshot:
    """
    Trains a detector from scratch with L_model on the view's categories. Training depends on
    config.seed only, so the same view and config always give the same snapshot. When losses
    is given the per-iteration loss rows are appended to it.
    """
    config.validate()
    categories = frozenset(categories) if categories is not None else _view_categories(view)
    data = _StepData(view)
    seed_everything(config.seed, config.deterministic)
    model = TinyDetector(head_config).to(config.device)
    logging.info(
        f"Training step {step_index} from scratch on {len(data)} images, "
        f"categories {sorted(categories)}"
    )
    curve = _fit(model, data, config, config.base_lr, categories, step_index, config.seed)
    if losses is not None:
        losses.rows.extend(curve.rows)
    return DetectorSnapshot.from_model(model, step_index, categories)


def _selection_dumps(
    teacher: TinyDetector,
    view: PartitionView,
    config: TrainConfig,
    old_categories: frozenset[int],
    distill: DistillConfig,
) -> dict[str, str]:
    dumps = {}
    records = view.records[: config.selection_dump_images]
    if not records:
        return dumps
    images = images_to_tensor([view.load_image(r) for r in records]).to(config.device)
    responses = teacher_responses(teacher, images)
    shapes = [lvl.grid_shape for lvl in responses.levels]
    for b, record in enumerate(records):
        mask = select_responses(
            responses, config.strategy, old_categories, distill, config.topk, b
        )
        dumps[record.name] = format_selection_dump(record.name, mask, shapes)
    return dumps


def train_incremental_step(
    teacher: DetectorSnapshot,
    view: PartitionView,
    config: TrainConfig,
    distill_cfg: DistillConfig,
    step_index: int | None = None,
    head_config: HeadConfig | None = None,
    test_view: PartitionView | None = None,
    base_categories: Iterable[int] | None = None,
) -> StepResult:
    """
    One incremental step: the student starts as an exact copy of the frozen teacher, L_model
    supervises the view's (new) categories only and distillation covers the teacher's
    categories. The step is evaluated on test_view over every category seen so far when given.
    """
    config.validate()
    distill_cfg.validate()
    strategy = config.strategy
    if strategy == "upper_bound":
        raise ConfigurationError("upper_bound retrains from scratch, it has no incremental step")
    if head_config is not None and head_config != teacher.head_config:
        raise ConfigurationError(
            f"Teacher head config {teacher.head_config} does not match {head_config}"
        )
    step_index = teacher.step_index + 1 if step_index is None else step_index
    old = frozenset(teacher.categories_seen)
    new = _view_categories(view)
    if not new or old & new:
        raise ConfigurationError(
            f"Step {step_index} categories {sorted(new)} must be non-empty and disjoint from "
            f"the teacher's {sorted(old)}"
        )
    if max(new) >= teacher.head_config.num_categories_total:
        raise ConfigurationError(f"Categories {sorted(new)} exceed the head's channels")
    if strategy == "finetune":
        distill_cfg = dataclasses.replace(distill_cfg, lambda_cls=0.0, lambda_reg=0.0)

    data = _StepData(view)
    seed = config.seed + step_index
    seed_everything(seed, config.deterministic)
    teacher_model = teacher.build(config.device).requires_grad_(False)
    student = teacher.build(config.device).train()
    logging.info(
        f"Incremental step {step_index} ({strategy}) on {len(data)} images, "
        f"old {sorted(old)} new {sorted(new)}"
    )

    counter = SelectionCounter()
    distilling = strategy in DISTILLING_STRATEGIES
    curve = _fit(
        student,
        data,
        config,
        config.base_lr * config.incremental_lr_scale,
        new,
        step_index,
        seed,
        teacher=teacher_model if distilling else None,
        old_categories=old,
        distill=distill_cfg,
        strategy=strategy,
        counter=counter,
    )
    snapshot = DetectorSnapshot.from_model(student, step_index, old | new)

    dumps = {}
    if distilling:
        dumps = _selection_dumps(teacher_model, view, config, old, distill_cfg)
    metrics = None
    if test_view is not None:
        metrics = evalkit.evaluate(
            snapshot,
            test_view,
            old | new,
            base_categories,
            config.eval_score_threshold,
            config.eval_nms_iou,
            config.device,
        )
    return StepResult(
        step_index=step_index,
        strategy=strategy,
        snapshot=snapshot,
        metrics=metrics,
        losses=curve,
        selection=counter.summary(),
        selection_dumps=dumps,
    )


def step_dir(step_index: int) -> str:
    return f"step_{step_index}"


def step_actions(result: StepResult) -> list[ArtifactWriter.Action]:
    """The artifacts of one protocol step, as writer actions relative to the run directory."""
    base = step_dir(result.step_index)
    actions = [
        ArtifactWriter.SnapshotAction(path=f"{base}/snapshot.pt", snapshot=result.snapshot),
        ArtifactWriter.WriteFileAction(path=f"{base}/losses.csv", body=result.losses.to_csv()),
    ]
    if result.metrics is not None:
        actions.append(
            ArtifactWriter.WriteFileAction(
                path=f"{base}/metrics.json",
                body=result.metrics_json(),
                mime_type="application/json",
            )
        )
    for name, text in sorted(result.selection_dumps.items()):
        actions.append(
            ArtifactWriter.WriteFileAction(
                path=f"{base}/selections/{Path(name).stem}.txt", body=text
            )
        )
    return actions


def persist_step(writer: ArtifactWriter, result: StepResult):
    failures = writer.write(step_actions(result))
    if failures.any_permanent():
        raise ArtifactError(f"Could not persist step {result.step_index}: {failures}")
    if failures.any_temporary():
        logging.warning(f"Temporary failures persisting step {result.step_index}: {failures}")


def run_protocol(
    split: TaskSplit,
    dataset: ShapesDataset,
    head_config: HeadConfig,
    config: TrainConfig,
    distill_cfg: DistillConfig,
    writer: ArtifactWriter | None = None,
    base_result: StepResult | None = None,
) -> list[StepResult]:
    """
    Runs every step of a protocol. Step 0 is base training; step t > 0 distills from step
    t - 1's snapshot, except under upper_bound which retrains from scratch on every category
    seen through t. Each step is evaluated on all categories seen so far and persisted before
    the next one starts, so a failing step leaves earlier results on disk.

    base_result, when given, is reused as step 0 instead of training it again. It must come
    from a run with the same base categories, head and training settings.
    """
    config.validate()
    distill_cfg.validate()
    if max(split.categories) >= head_config.num_categories_total:
        raise ConfigurationError(
            f"Protocol categories exceed the head's {head_config.num_categories_total} channels"
        )

    base_categories = split.steps[0]
    results = []
    for t in range(len(split)):
        seen = split.categories_through(t)
        test_view = filter_by_categories(dataset.test, seen)
        try:
            if t == 0 and base_result is not None:
                if (
                    base_result.step_index != 0
                    or base_result.snapshot.head_config != head_config
                    or base_result.snapshot.categories_seen != seen
                ):
                    raise ConfigurationError("base_result does not match step 0 of this protocol")
                logging.info("Reusing the base step of an earlier run")
                result = dataclasses.replace(base_result, strategy=config.strategy)
            elif t == 0 or config.strategy == "upper_bound":
                train_view = filter_by_categories(dataset.train, seen)
                if not train_view.records:
                    raise EmptyStepError(f"No training images for categories {sorted(seen)}")
                curve = LossCurve()
                snapshot = train_base(train_view, config, head_config, seen, t, curve)
                metrics = evalkit.evaluate(
                    snapshot,
                    test_view,
                    seen,
                    base_categories,
                    config.eval_score_threshold,
                    config.eval_nms_iou,
                    config.device,
                )
                result = StepResult(
                    step_index=t,
                    strategy=config.strategy,
                    snapshot=snapshot,
                    metrics=metrics,
                    losses=curve,
                )
            else:
                result = train_incremental_step(
                    results[-1].snapshot,
                    filter_by_step(dataset.train, split, t),
                    config,
                    distill_cfg,
                    step_index=t,
                    head_config=head_config,
                    test_view=test_view,
                    base_categories=base_categories,
                )
            if writer is not None:
                persist_step(writer, result)
        except ErdetError:
            logging.exception(f"Step {t} of the protocol failed")
            raise
        results.append(result)
    return results
