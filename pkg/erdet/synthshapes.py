"""
Deterministic synthetic shape-detection dataset and class-incremental task splits.

A category is a (shape, colour) pair drawn as a filled polygon or ellipse on a noisy grey
background. A dataset lives on disk as

    <root>/scene.json
    <root>/<partition>/images/00000.png
    <root>/<partition>/annotations.txt

where the annotation file has a `# synthshapes v1` header followed by one
`image_name category_id x_min y_min x_max y_max` record per object. Box maxima are exclusive.
"""

import dataclasses
import json
import logging
import shutil
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image, ImageDraw

from erdet.errors import ConfigurationError, EmptyStepError, GenerationError

ANNOTATION_HEADER = "# synthshapes v1"
SPLIT_HEADER = "# synthshapes split v1"
PARTITIONS = ("train", "test")

SHAPES = ("ellipse", "rectangle", "triangle", "diamond", "hexagon", "cross")
COLOURS = (
    (220, 40, 40),
    (40, 170, 60),
    (50, 80, 220),
    (235, 205, 40),
    (200, 60, 200),
    (40, 200, 210),
)
MAX_CATEGORIES = len(SHAPES) * len(COLOURS)

PROTOCOLS = ("one_step", "two_step", "four_step", "reversed")

# Placement attempts per object before the object is skipped.
MAX_PLACEMENT_ATTEMPTS = 100
LOG_INTERVAL = 100


@dataclasses.dataclass(frozen=True, kw_only=True)
class SceneSpec:
    image_size: int = 128
    num_categories: int = 16
    objects_per_image: tuple[int, int] = (1, 6)
    min_box_side: int = 12
    max_overlap_iou: float = 0.3
    seed: int = 0

    @property
    def max_box_side(self) -> int:
        return max(self.min_box_side, self.image_size * 3 // 8)

    def validate(self):
        lo, hi = self.objects_per_image
        if self.image_size < 4 * self.min_box_side:
            raise GenerationError(
                f"image_size ({self.image_size}) must be at least 4 x min_box_side "
                f"({self.min_box_side})"
            )
        if self.min_box_side < 1:
            raise GenerationError(f"min_box_side must be positive, got {self.min_box_side}")
        if not 2 <= self.num_categories <= MAX_CATEGORIES:
            raise GenerationError(
                f"num_categories must be in [2, {MAX_CATEGORIES}], got {self.num_categories}"
            )
        if lo < 1 or hi < lo:
            raise GenerationError(
                f"objects_per_image must be positive and ordered, got {self.objects_per_image}"
            )
        if not 0.0 <= self.max_overlap_iou < 1.0:
            raise GenerationError(f"max_overlap_iou must be in [0, 1), got {self.max_overlap_iou}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["objects_per_image"] = list(self.objects_per_image)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        if "objects_per_image" in d:
            d["objects_per_image"] = tuple(d["objects_per_image"])
        return cls(**d)


@dataclasses.dataclass(frozen=True, kw_only=True)
class Annotation:
    category_id: int
    box: tuple[int, int, int, int]

    @property
    def area(self) -> int:
        x0, y0, x1, y1 = self.box
        return (x1 - x0) * (y1 - y0)

    def validate(self, spec: SceneSpec):
        x0, y0, x1, y1 = self.box
        if not 0 <= self.category_id < spec.num_categories:
            raise GenerationError(f"category_id {self.category_id} out of range")
        if not (0 <= x0 < x1 <= spec.image_size and 0 <= y0 < y1 <= spec.image_size):
            raise GenerationError(f"box {self.box} is not inside the image")
        if x1 - x0 < spec.min_box_side or y1 - y0 < spec.min_box_side:
            raise GenerationError(f"box {self.box} is smaller than min_box_side")


@dataclasses.dataclass(frozen=True, kw_only=True)
class ImageRecord:
    name: str
    annotations: tuple[Annotation, ...]

    @property
    def category_ids(self) -> frozenset[int]:
        return frozenset(a.category_id for a in self.annotations)


@dataclasses.dataclass(frozen=True, kw_only=True)
class PartitionView:
    """
    An immutable, ordered selection of images from one partition. Step views share the image
    directory of the partition they were filtered from.
    """

    name: str
    image_dir: Path
    records: tuple[ImageRecord, ...]
    categories: frozenset[int] | None = None

    def __len__(self) -> int:
        return len(self.records)

    @property
    def num_annotations(self) -> int:
        return sum(len(r.annotations) for r in self.records)

    def load_image(self, record: ImageRecord) -> np.ndarray:
        with Image.open(self.image_dir / record.name) as img:
            return np.asarray(img.convert("RGB"), dtype=np.uint8)


@dataclasses.dataclass(frozen=True, kw_only=True)
class ShapesDataset:
    root: Path
    spec: SceneSpec
    train: PartitionView
    test: PartitionView

    def partition(self, name: str) -> PartitionView:
        if name not in PARTITIONS:
            raise ConfigurationError(f"Unknown partition {name!r}")
        return getattr(self, name)


@dataclasses.dataclass(frozen=True)
class TaskSplit:
    """Ordered incremental steps, each a set of category ids introduced at that step."""

    steps: tuple[frozenset[int], ...]

    def __post_init__(self):
        steps = tuple(frozenset(s) for s in self.steps)
        object.__setattr__(self, "steps", steps)
        if not steps:
            raise ConfigurationError("A task split needs at least one step")
        seen = set()
        for i, step in enumerate(steps):
            if not step:
                raise ConfigurationError(f"Step {i} of the task split is empty")
            if seen & step:
                raise ConfigurationError(
                    f"Step {i} repeats categories {sorted(seen & step)} from earlier steps"
                )
            seen |= step

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def categories(self) -> frozenset[int]:
        return frozenset().union(*self.steps)

    def check_step(self, step_index: int):
        if not 0 <= step_index < len(self.steps):
            raise ConfigurationError(
                f"step_index {step_index} out of range for a {len(self.steps)}-step split"
            )

    def categories_before(self, step_index: int) -> frozenset[int]:
        self.check_step(step_index)
        return frozenset().union(*self.steps[:step_index])

    def categories_through(self, step_index: int) -> frozenset[int]:
        self.check_step(step_index)
        return frozenset().union(*self.steps[: step_index + 1])

    def to_text(self) -> str:
        lines = [SPLIT_HEADER] + [" ".join(str(c) for c in sorted(s)) for s in self.steps]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TaskSplit":
        steps = []
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                steps.append(frozenset(int(tok) for tok in line.split()))
            except ValueError as e:
                raise ConfigurationError(f"Malformed split line {line!r}: {e}") from e
        return cls(tuple(steps))


def category_style(category_id: int) -> tuple[str, tuple[int, int, int]]:
    return SHAPES[category_id % len(SHAPES)], COLOURS[category_id // len(SHAPES)]


def box_iou(a: Sequence[float], b: Sequence[float]) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def _shape_points(shape: str, box: tuple[int, int, int, int]) -> list[tuple[float, float]]:
    # Points span the closed pixel range [x0, x1 - 1] so the drawn shape touches its box.
    x0, y0 = box[0], box[1]
    x1, y1 = box[2] - 1, box[3] - 1
    cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
    w, h = x1 - x0, y1 - y0
    if shape == "triangle":
        return [(cx, y0), (x1, y1), (x0, y1)]
    if shape == "diamond":
        return [(cx, y0), (x1, cy), (cx, y1), (x0, cy)]
    if shape == "hexagon":
        return [
            (x0 + w / 4, y0),
            (x1 - w / 4, y0),
            (x1, cy),
            (x1 - w / 4, y1),
            (x0 + w / 4, y1),
            (x0, cy),
        ]
    if shape == "cross":
        ax, ay = w / 3, h / 3
        return [
            (x0 + ax, y0),
            (x1 - ax, y0),
            (x1 - ax, y0 + ay),
            (x1, y0 + ay),
            (x1, y1 - ay),
            (x1 - ax, y1 - ay),
            (x1 - ax, y1),
            (x0 + ax, y1),
            (x0 + ax, y1 - ay),
            (x0, y1 - ay),
            (x0, y0 + ay),
            (x0 + ax, y0 + ay),
        ]
    raise AssertionError(f"BUG: no polygon for shape {shape}")


def render_image(
    annotations: Sequence[Annotation], spec: SceneSpec, rng: np.random.Generator
) -> Image.Image:
    size = spec.image_size
    base = int(rng.integers(90, 150))
    noise = rng.normal(0.0, 8.0, size=(size, size, 1))
    background = np.clip(base + noise + rng.normal(0.0, 3.0, size=(size, size, 3)), 0, 255)
    img = Image.fromarray(background.astype(np.uint8))
    draw = ImageDraw.Draw(img)

    for ann in annotations:
        shape, colour = category_style(ann.category_id)
        x0, y0, x1, y1 = ann.box
        if shape == "ellipse":
            draw.ellipse([x0, y0, x1 - 1, y1 - 1], fill=colour)
        elif shape == "rectangle":
            draw.rectangle([x0, y0, x1 - 1, y1 - 1], fill=colour)
        else:
            draw.polygon(_shape_points(shape, ann.box), fill=colour)
    return img


def _place_objects(
    first_category: int, spec: SceneSpec, rng: np.random.Generator
) -> list[Annotation]:
    lo, hi = spec.objects_per_image
    count = int(rng.integers(lo, hi + 1))
    categories = [first_category] + [
        int(c) for c in rng.integers(0, spec.num_categories, size=count - 1)
    ]

    placed: list[Annotation] = []
    for i, category_id in enumerate(categories):
        for _ in range(MAX_PLACEMENT_ATTEMPTS):
            w = int(rng.integers(spec.min_box_side, spec.max_box_side + 1))
            h = int(rng.integers(spec.min_box_side, spec.max_box_side + 1))
            x0 = int(rng.integers(0, spec.image_size - w + 1))
            y0 = int(rng.integers(0, spec.image_size - h + 1))
            box = (x0, y0, x0 + w, y0 + h)
            if all(box_iou(box, other.box) <= spec.max_overlap_iou for other in placed):
                placed.append(Annotation(category_id=category_id, box=box))
                break
        else:
            if i == 0:
                raise GenerationError(
                    f"Could not place an object of side >= {spec.min_box_side} in a "
                    f"{spec.image_size}px image"
                )
            logging.debug(f"Skipped object {i} of category {category_id}: no free space")
    return placed


def format_annotations(records: Iterable[ImageRecord]) -> str:
    lines = [ANNOTATION_HEADER]
    for record in records:
        for ann in record.annotations:
            lines.append(f"{record.name} {ann.category_id} {' '.join(str(v) for v in ann.box)}")
    return "\n".join(lines) + "\n"


def parse_annotations(text: str) -> tuple[ImageRecord, ...]:
    lines = text.splitlines()
    if not lines or lines[0].strip() != ANNOTATION_HEADER:
        raise ConfigurationError(f"Annotation file does not start with {ANNOTATION_HEADER!r}")

    by_image: dict[str, list[Annotation]] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) != 6:
            raise ConfigurationError(f"Malformed annotation record on line {lineno}: {line!r}")
        name, category, *box = fields
        try:
            ann = Annotation(category_id=int(category), box=tuple(int(v) for v in box))
        except ValueError as e:
            raise ConfigurationError(f"Malformed annotation record on line {lineno}: {e}") from e
        by_image.setdefault(name, []).append(ann)
    return tuple(
        ImageRecord(name=name, annotations=tuple(anns)) for name, anns in sorted(by_image.items())
    )


def _generate_partition(
    partition_dir: Path, num_images: int, spec: SceneSpec, rng: np.random.Generator
) -> tuple[ImageRecord, ...]:
    image_dir = partition_dir / "images"
    image_dir.mkdir(parents=True, exist_ok=True)

    records = []
    for i in range(num_images):
        # Round-robin first object guarantees every category appears in every partition.
        annotations = _place_objects(i % spec.num_categories, spec, rng)
        for ann in annotations:
            ann.validate(spec)
        record = ImageRecord(name=f"{i:05d}.png", annotations=tuple(annotations))
        render_image(record.annotations, spec, rng).save(image_dir / record.name, format="PNG")
        records.append(record)

        if (i + 1) % LOG_INTERVAL == 0:
            logging.info(f"Generated {i + 1}/{num_images} {partition_dir.name} images")

    (partition_dir / "annotations.txt").write_text(format_annotations(records), encoding="utf-8")
    return tuple(records)


def generate_dataset(spec: SceneSpec, num_train: int, num_test: int, out_dir: Path | str):
    """
    Renders train and test partitions under out_dir, replacing any partitions already there.
    Output is bit-identical for identical arguments.
    """
    spec.validate()
    for name, count in (("num_train", num_train), ("num_test", num_test)):
        if count <= 0:
            raise GenerationError(f"{name} must be positive, got {count}")
        if count < spec.num_categories:
            raise GenerationError(
                f"{name} ({count}) must be at least num_categories ({spec.num_categories}) "
                "for every category to appear in every partition"
            )

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "scene.json").write_text(
        json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )

    # Separate streams per partition: the test set does not change when num_train does.
    seeds = np.random.SeedSequence(spec.seed).spawn(2)
    train_rng, test_rng = (np.random.default_rng(s) for s in seeds)
    views = {}
    for name, count, rng in (("train", num_train, train_rng), ("test", num_test, test_rng)):
        partition_dir = out_dir / name
        if partition_dir.exists():
            logging.info(f"Removing existing partition at {partition_dir}")
            shutil.rmtree(partition_dir)
        records = _generate_partition(partition_dir, count, spec, rng)
        views[name] = PartitionView(name=name, image_dir=partition_dir / "images", records=records)

    logging.info(
        f"Dataset generated in {out_dir}: {num_train} train / {num_test} test images, "
        f"{views['train'].num_annotations} train objects"
    )
    return ShapesDataset(root=out_dir, spec=spec, train=views["train"], test=views["test"])


def load_dataset(root: Path | str) -> ShapesDataset:
    root = Path(root)
    try:
        spec = SceneSpec.from_dict(json.loads((root / "scene.json").read_text(encoding="utf-8")))
    except FileNotFoundError as e:
        raise ConfigurationError(f"No synthshapes dataset at {root}") from e
    except ValueError as e:
        raise ConfigurationError(f"Unreadable scene.json in {root}: {e}") from e

    views = {}
    for name in PARTITIONS:
        path = root / name / "annotations.txt"
        try:
            text = path.read_text(encoding="utf-8")
        except FileNotFoundError as e:
            raise ConfigurationError(f"Dataset at {root} has no {name} partition ({path})") from e
        views[name] = PartitionView(
            name=name, image_dir=root / name / "images", records=parse_annotations(text)
        )
    return ShapesDataset(root=root, spec=spec, **views)


def filter_by_categories(view: PartitionView, categories: Iterable[int]) -> PartitionView:
    """
    Keeps the images with at least one object of the given categories and drops every
    annotation of other categories.
    """
    categories = frozenset(categories)
    records = []
    for record in view.records:
        kept = tuple(a for a in record.annotations if a.category_id in categories)
        if kept:
            records.append(ImageRecord(name=record.name, annotations=kept))
    return PartitionView(
        name=view.name, image_dir=view.image_dir, records=tuple(records), categories=categories
    )


def filter_by_step(view: PartitionView, split: TaskSplit, step_index: int) -> PartitionView:
    split.check_step(step_index)
    step_view = filter_by_categories(view, split.steps[step_index])
    if not step_view.records:
        raise EmptyStepError(
            f"No {view.name} image contains categories {sorted(split.steps[step_index])} "
            f"of step {step_index}"
        )
    return step_view


def _chunks(categories: Sequence[int], parts: int) -> list[list[int]]:
    return [list(map(int, c)) for c in np.array_split(np.asarray(categories), parts)]


def make_protocol(name: str, num_categories: int, base_fraction: float = 0.5) -> TaskSplit:
    """
    Builds the category split of a named incremental protocol:

      one_step  -> base + 1 increment (base_fraction = 1.0 gives a single joint step)
      two_step  -> base + 2 increments
      four_step -> base + 4 increments
      reversed  -> upper-id categories as the base, then the lower ids
    """
    if name not in PROTOCOLS:
        raise ConfigurationError(f"Unknown protocol {name!r}, expected one of {PROTOCOLS}")
    if not 0.0 < base_fraction <= 1.0:
        raise ConfigurationError(f"base_fraction must be in (0, 1], got {base_fraction}")

    all_categories = list(range(num_categories))
    num_base = int(round(base_fraction * num_categories))
    if num_base < 1:
        raise ConfigurationError(
            f"base_fraction {base_fraction} leaves the base step of {num_categories} "
            "categories empty"
        )
    if num_base == num_categories:
        if name != "one_step":
            raise ConfigurationError(
                f"base_fraction {base_fraction} leaves no categories for the increments of {name}"
            )
        return TaskSplit((frozenset(all_categories),))

    base, rest = all_categories[:num_base], all_categories[num_base:]
    if name == "reversed":
        cut = num_categories - num_base
        steps = [all_categories[cut:], all_categories[:cut]]
    else:
        increments = {"one_step": 1, "two_step": 2, "four_step": 4}[name]
        if len(rest) < increments:
            raise ConfigurationError(
                f"{len(rest)} incremental categories cannot fill {increments} steps of {name}"
            )
        steps = [base] + _chunks(rest, increments)
    return TaskSplit(tuple(frozenset(s) for s in steps))


def write_split(split: TaskSplit, path: Path | str):
    Path(path).write_text(split.to_text(), encoding="utf-8")


def read_split(path: Path | str) -> TaskSplit:
    return TaskSplit.from_text(Path(path).read_text(encoding="utf-8"))


def hflip(image: np.ndarray, annotations: Sequence[Annotation]):
    """Mirrors an HxWx3 image and its boxes left to right."""
    width = image.shape[1]
    flipped = [
        Annotation(
            category_id=a.category_id, box=(width - a.box[2], a.box[1], width - a.box[0], a.box[3])
        )
        for a in annotations
    ]
    return np.ascontiguousarray(image[:, ::-1]), flipped
