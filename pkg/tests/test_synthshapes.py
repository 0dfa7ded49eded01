import numpy as np
import pytest

from erdet.errors import ConfigurationError, EmptyStepError, GenerationError
from erdet.synthshapes import (
    Annotation,
    ImageRecord,
    PartitionView,
    SceneSpec,
    TaskSplit,
    box_iou,
    filter_by_categories,
    filter_by_step,
    format_annotations,
    generate_dataset,
    hflip,
    load_dataset,
    make_protocol,
    parse_annotations,
    read_split,
    write_split,
)


def test_generation_is_bit_identical(tmp_path, tiny_spec):
    generate_dataset(tiny_spec, 8, 4, tmp_path / "a")
    generate_dataset(tiny_spec, 8, 4, tmp_path / "b")

    for partition in ("train", "test"):
        a = (tmp_path / "a" / partition / "annotations.txt").read_bytes()
        b = (tmp_path / "b" / partition / "annotations.txt").read_bytes()
        assert a == b
        for image in sorted((tmp_path / "a" / partition / "images").iterdir()):
            other = tmp_path / "b" / partition / "images" / image.name
            assert image.read_bytes() == other.read_bytes()


def test_different_seed_gives_different_dataset(tmp_path, tiny_spec):
    generate_dataset(tiny_spec, 8, 4, tmp_path / "a")
    other = SceneSpec(**{**tiny_spec.to_dict(), "objects_per_image": (1, 3), "seed": 4})
    generate_dataset(other, 8, 4, tmp_path / "b")

    a = (tmp_path / "a" / "train" / "annotations.txt").read_text()
    b = (tmp_path / "b" / "train" / "annotations.txt").read_text()
    assert a != b


def test_every_category_in_every_partition(tiny_dataset, tiny_spec):
    for view in (tiny_dataset.train, tiny_dataset.test):
        seen = frozenset().union(*(r.category_ids for r in view.records))
        assert seen == frozenset(range(tiny_spec.num_categories))


def test_boxes_respect_bounds_and_overlap(tiny_dataset, tiny_spec):
    for view in (tiny_dataset.train, tiny_dataset.test):
        for record in view.records:
            assert tiny_spec.objects_per_image[0] <= len(record.annotations)
            assert len(record.annotations) <= tiny_spec.objects_per_image[1]
            for ann in record.annotations:
                ann.validate(tiny_spec)
            for i, a in enumerate(record.annotations):
                for b in record.annotations[i + 1 :]:
                    assert box_iou(a.box, b.box) <= tiny_spec.max_overlap_iou


def test_images_have_declared_size(tiny_dataset, tiny_spec):
    record = tiny_dataset.train.records[0]
    image = tiny_dataset.train.load_image(record)
    assert image.shape == (tiny_spec.image_size, tiny_spec.image_size, 3)
    assert image.dtype == np.uint8


def test_shape_drawn_inside_its_box(tiny_dataset):
    view = tiny_dataset.train
    record = view.records[0]
    ann = record.annotations[0]
    image = view.load_image(record).astype(int)
    x0, y0, x1, y1 = ann.box
    cx, cy = (x0 + x1) // 2, (y0 + y1) // 2
    # Every shape covers its box centre. Saturated colours stand out from the grey background.
    pixel = image[cy, cx]
    assert pixel.max() - pixel.min() > 60


def test_load_dataset_matches_generated(tiny_dataset):
    loaded = load_dataset(tiny_dataset.root)
    assert loaded.spec == tiny_dataset.spec
    assert loaded.train.records == tiny_dataset.train.records
    assert loaded.test.records == tiny_dataset.test.records


def test_load_dataset_missing(tmp_path):
    with pytest.raises(ConfigurationError):
        load_dataset(tmp_path / "nothing")


def test_load_dataset_missing_partition(tmp_path, tiny_dataset):
    (tmp_path / "scene.json").write_bytes((tiny_dataset.root / "scene.json").read_bytes())
    with pytest.raises(ConfigurationError, match="train"):
        load_dataset(tmp_path)


def test_load_dataset_unreadable_scene(tmp_path):
    (tmp_path / "scene.json").write_text("{not json")
    with pytest.raises(ConfigurationError):
        load_dataset(tmp_path)


@pytest.mark.parametrize(
    "kwargs",
    [
        {"image_size": 40, "min_box_side": 12},
        {"num_categories": 1},
        {"num_categories": 37},
        {"objects_per_image": (3, 2)},
        {"objects_per_image": (0, 2)},
        {"max_overlap_iou": 1.0},
    ],
)
def test_invalid_scene_specs(tmp_path, kwargs):
    with pytest.raises(GenerationError):
        generate_dataset(SceneSpec(**kwargs), 40, 40, tmp_path)


def test_too_few_images_for_categories(tmp_path):
    with pytest.raises(GenerationError):
        generate_dataset(SceneSpec(num_categories=16), 8, 16, tmp_path)


def test_parse_annotations_rejects_bad_input():
    with pytest.raises(ConfigurationError):
        parse_annotations("no header\n")
    with pytest.raises(ConfigurationError):
        parse_annotations("# synthshapes v1\n00000.png 1 2 3\n")
    with pytest.raises(ConfigurationError, match="line 2"):
        parse_annotations("# synthshapes v1\n00000.png one 2 3 4 5\n")
    with pytest.raises(ConfigurationError):
        parse_annotations("# synthshapes v1\n00000.png 1 2 3 4 5.5\n")


def test_annotation_text_is_stable():
    records = (
        ImageRecord(
            name="00000.png",
            annotations=(
                Annotation(category_id=2, box=(1, 2, 20, 30)),
                Annotation(category_id=0, box=(30, 30, 50, 60)),
            ),
        ),
    )
    text = format_annotations(records)
    assert text == "# synthshapes v1\n00000.png 2 1 2 20 30\n00000.png 0 30 30 50 60\n"
    assert parse_annotations(text) == records


@pytest.mark.parametrize(
    "name,expected",
    [
        ("one_step", [set(range(8)), set(range(8, 16))]),
        ("two_step", [set(range(8)), set(range(8, 12)), set(range(12, 16))]),
        (
            "four_step",
            [set(range(8)), {8, 9}, {10, 11}, {12, 13}, {14, 15}],
        ),
        ("reversed", [set(range(8, 16)), set(range(8))]),
    ],
)
def test_protocols(name, expected):
    split = make_protocol(name, 16)
    assert [set(s) for s in split.steps] == expected
    assert split.categories == frozenset(range(16))


def test_single_joint_step():
    split = make_protocol("one_step", 16, base_fraction=1.0)
    assert len(split) == 1
    assert split.steps[0] == frozenset(range(16))


@pytest.mark.parametrize(
    "name,fraction",
    [("unknown", 0.5), ("one_step", 0.0), ("two_step", 1.0), ("four_step", 0.9), ("one_step", 1.5)],
)
def test_protocol_errors(name, fraction):
    with pytest.raises(ConfigurationError):
        make_protocol(name, 16, fraction)


def test_task_split_rejects_overlap_and_empty():
    with pytest.raises(ConfigurationError):
        TaskSplit((frozenset({0, 1}), frozenset({1, 2})))
    with pytest.raises(ConfigurationError):
        TaskSplit((frozenset({0}), frozenset()))
    with pytest.raises(ConfigurationError):
        TaskSplit(())


def test_task_split_accessors():
    split = TaskSplit((frozenset({0, 1}), frozenset({2}), frozenset({3})))
    assert split.categories_before(0) == frozenset()
    assert split.categories_before(2) == frozenset({0, 1, 2})
    assert split.categories_through(1) == frozenset({0, 1, 2})
    with pytest.raises(ConfigurationError):
        split.categories_through(3)


def test_split_file(tmp_path):
    split = make_protocol("two_step", 8)
    write_split(split, tmp_path / "split.txt")
    assert (tmp_path / "split.txt").read_text().startswith("# synthshapes split v1\n")
    assert read_split(tmp_path / "split.txt") == split

    (tmp_path / "bad.txt").write_text("0 1\n2 x\n")
    with pytest.raises(ConfigurationError):
        read_split(tmp_path / "bad.txt")


def test_filter_by_categories_drops_other_annotations(tiny_dataset):
    view = filter_by_categories(tiny_dataset.train, {0, 1})
    assert view.categories == frozenset({0, 1})
    assert len(view) > 0
    for record in view.records:
        assert record.category_ids <= {0, 1}
        assert record.annotations

    names = {r.name for r in view.records}
    for record in tiny_dataset.train.records:
        if record.category_ids & {0, 1}:
            assert record.name in names


def test_filter_by_step(tiny_dataset):
    split = make_protocol("one_step", 4)
    view = filter_by_step(tiny_dataset.train, split, 1)
    assert view.categories == frozenset({2, 3})
    with pytest.raises(ConfigurationError):
        filter_by_step(tiny_dataset.train, split, 2)


def test_filter_by_step_empty(tmp_path):
    record = ImageRecord(
        name="a.png", annotations=(Annotation(category_id=0, box=(0, 0, 4, 4)),)
    )
    view = PartitionView(name="train", image_dir=tmp_path, records=(record,))
    split = TaskSplit((frozenset({0}), frozenset({1})))
    with pytest.raises(EmptyStepError):
        filter_by_step(view, split, 1)


def test_hflip():
    image = np.zeros((4, 6, 3), dtype=np.uint8)
    image[:, 0] = 255
    anns = [Annotation(category_id=1, box=(0, 1, 2, 3))]

    flipped, flipped_anns = hflip(image, anns)

    assert (flipped[:, 5] == 255).all()
    assert flipped_anns[0].box == (4, 1, 6, 3)
    assert flipped_anns[0].category_id == 1
