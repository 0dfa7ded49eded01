import logging

import numpy as np
import pytest
import torch

from erdet.errors import ConfigurationError, EvaluationError
from erdet.evalkit import (
    COMPONENTS,
    MetricsReport,
    average_precision,
    dump_response_maps,
    evaluate,
    evaluate_detections,
    feature_distance,
    iou_matrix,
    select_probe_images,
)
from erdet.synthshapes import Annotation, PartitionView
from erdet.tinydet.decode import Detections
from erdet.tinydet.model import TinyDetector
from erdet.tinydet.snapshot import DetectorSnapshot


def dets(boxes, scores, labels):
    return Detections(
        boxes=np.asarray(boxes, dtype=np.float64).reshape(-1, 4),
        scores=np.asarray(scores, dtype=np.float64),
        labels=np.asarray(labels, dtype=np.int64),
    )


GROUND_TRUTH = [
    [
        Annotation(category_id=0, box=(0, 0, 10, 10)),
        Annotation(category_id=1, box=(20, 20, 40, 40)),
    ],
    [Annotation(category_id=0, box=(5, 5, 25, 25))],
]


@pytest.fixture
def snapshot(tiny_head):
    torch.manual_seed(0)
    return DetectorSnapshot.from_model(TinyDetector(tiny_head), 0, {0, 1})


def test_iou_matrix():
    ious = iou_matrix([[0, 0, 10, 10]], [[0, 0, 10, 10], [5, 0, 15, 10], [20, 20, 30, 30]])
    assert ious[0].tolist() == pytest.approx([1.0, 1 / 3, 0.0])


def test_average_precision_interpolation():
    ap = average_precision(np.array([1.0, 0.0, 1.0]), num_gt=2)
    assert ap == pytest.approx((51 * 1.0 + 50 * 2 / 3) / 101, abs=1e-6)


def test_average_precision_without_ground_truth():
    with pytest.raises(EvaluationError):
        average_precision(np.array([1.0]), 0)


def test_perfect_detections():
    detections = [
        dets([[0, 0, 10, 10], [20, 20, 40, 40]], [0.9, 0.8], [0, 1]),
        dets([[5, 5, 25, 25]], [0.7], [0]),
    ]
    report = evaluate_detections(detections, GROUND_TRUTH, [0, 1])
    assert report.mAP == pytest.approx(1.0)
    assert report.ap50 == pytest.approx(1.0)
    assert report.per_class_ap == pytest.approx({0: 1.0, 1: 1.0})
    assert report.num_detections == 3
    assert report.num_ground_truths == 3
    assert report.num_images == 2


def test_no_detections():
    report = evaluate_detections([dets([], [], []), dets([], [], [])], GROUND_TRUTH, [0, 1])
    assert report.mAP == 0.0
    assert report.num_detections == 0


def test_iou_between_thresholds():
    gt = [[Annotation(category_id=0, box=(0, 0, 10, 10))]]
    # IoU 0.6 with the ground truth.
    report = evaluate_detections([dets([[0, 0, 10, 6]], [0.9], [0])], gt, [0])
    assert report.ap50 == pytest.approx(1.0)
    assert report.ap75 == 0.0
    assert 0.2 <= report.mAP <= 0.3


def test_detection_order_does_not_matter():
    boxes = [[0, 0, 10, 10], [1, 1, 11, 11], [20, 20, 40, 40], [0, 0, 30, 30]]
    scores = [0.9, 0.9, 0.5, 0.3]
    labels = [0, 0, 1, 0]
    a = evaluate_detections([dets(boxes, scores, labels), dets([], [], [])], GROUND_TRUTH, [0, 1])
    perm = [3, 1, 2, 0]
    b = evaluate_detections(
        [
            dets([boxes[i] for i in perm], [scores[i] for i in perm], [labels[i] for i in perm]),
            dets([], [], []),
        ],
        GROUND_TRUTH,
        [0, 1],
    )
    assert a == b


def test_lower_score_duplicate_does_not_help():
    single = [dets([[0, 0, 10, 10]], [0.9], [0]), dets([[5, 5, 25, 25]], [0.8], [0])]
    duplicated = [
        dets([[0, 0, 10, 10], [0, 0, 10, 10]], [0.9, 0.85], [0, 0]),
        dets([[5, 5, 25, 25]], [0.8], [0]),
    ]
    a = evaluate_detections(single, GROUND_TRUTH, [0])
    b = evaluate_detections(duplicated, GROUND_TRUTH, [0])
    assert b.mAP <= a.mAP


def box_iou_py(a, b) -> float:
    area_a = max(a[2] - a[0], 0.0) * max(a[3] - a[1], 0.0)
    area_b = max(b[2] - b[0], 0.0) * max(b[3] - b[1], 0.0)
    w = max(min(a[2], b[2]) - max(a[0], b[0]), 0.0)
    h = max(min(a[3], b[3]) - max(a[1], b[1]), 0.0)
    inter = w * h
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0


def reference_class_aps(detections, ground_truths, categories) -> dict[int, list[float]]:
    """AP per category and IoU threshold, by brute force over python lists."""
    out = {}
    for c in categories:
        gts = {
            i: [[float(v) for v in a.box] for a in anns if a.category_id == c]
            for i, anns in enumerate(ground_truths)
        }
        num_gt = sum(len(g) for g in gts.values())
        if num_gt == 0:
            continue
        candidates = [
            (float(score), i, [float(v) for v in box])
            for i, d in enumerate(detections)
            for box, score, label in zip(d.boxes, d.scores, d.labels)
            if int(label) == c
        ]
        candidates.sort(key=lambda cand: -cand[0])

        aps = []
        for thr in np.linspace(0.5, 0.95, 10):
            used = {i: [False] * len(g) for i, g in gts.items()}
            hits, precisions, recalls = 0, [], []
            for k, (_, i, box) in enumerate(candidates, start=1):
                best, best_iou = None, -1.0
                for j, gt in enumerate(gts[i]):
                    if not used[i][j] and box_iou_py(box, gt) > best_iou:
                        best, best_iou = j, box_iou_py(box, gt)
                if best is not None and best_iou >= thr:
                    used[i][best] = True
                    hits += 1
                precisions.append(hits / k)
                recalls.append(hits / num_gt)
            points = [
                max((p for p, r in zip(precisions, recalls) if r >= level), default=0.0)
                for level in np.linspace(0.0, 1.0, 101)
            ]
            aps.append(sum(points) / 101)
        out[c] = aps
    return out


def random_evaluation_set(seed: int, num_images: int = 20, num_categories: int = 3):
    rng = np.random.default_rng(seed)
    ground_truths, detections = [], []
    for _ in range(num_images):
        anns = []
        for _ in range(rng.integers(1, 4)):
            x0, y0 = (int(v) for v in rng.integers(0, 80, size=2))
            w, h = (int(v) for v in rng.integers(8, 40, size=2))
            category = int(rng.integers(0, num_categories))
            anns.append(Annotation(category_id=category, box=(x0, y0, x0 + w, y0 + h)))
        boxes, labels = [], []
        for ann in anns:
            for _ in range(rng.integers(0, 3)):
                boxes.append(np.asarray(ann.box, dtype=np.float64) + rng.normal(0, 3, size=4))
                confused = rng.random() < 0.1
                labels.append(int(rng.integers(0, num_categories)) if confused else ann.category_id)
        for _ in range(rng.integers(0, 3)):
            x0, y0 = rng.uniform(0, 80, size=2)
            w, h = rng.uniform(8, 40, size=2)
            boxes.append([x0, y0, x0 + w, y0 + h])
            labels.append(int(rng.integers(0, num_categories)))
        detections.append(dets(boxes, rng.uniform(size=len(boxes)), labels))
        ground_truths.append(anns)
    return detections, ground_truths


@pytest.mark.parametrize("seed", range(20))
def test_evaluate_detections_matches_reference(seed):
    detections, ground_truths = random_evaluation_set(seed)

    report = evaluate_detections(detections, ground_truths, [0, 1, 2])
    expected = reference_class_aps(detections, ground_truths, [0, 1, 2])

    assert set(report.per_class_ap) == set(expected)
    for c, aps in expected.items():
        assert report.per_class_ap[c] == pytest.approx(np.mean(aps), abs=1e-12)
    table = np.asarray(list(expected.values()))
    assert report.mAP == pytest.approx(table.mean(), abs=1e-12)
    assert report.ap50 == pytest.approx(table[:, 0].mean(), abs=1e-12)
    assert report.ap75 == pytest.approx(table[:, 5].mean(), abs=1e-12)


def test_category_without_ground_truth_is_skipped(caplog):
    detections = [dets([[0, 0, 10, 10]], [0.9], [0]), dets([[5, 5, 25, 25]], [0.8], [0])]
    with caplog.at_level(logging.WARNING):
        report = evaluate_detections(detections, GROUND_TRUTH, [0, 3])
    assert "Category 3 has no ground truth" in caplog.text
    assert set(report.per_class_ap) == {0}
    assert report.mAP == pytest.approx(1.0)


def test_base_and_new_aggregates():
    detections = [dets([[0, 0, 10, 10]], [0.9], [0]), dets([[5, 5, 25, 25]], [0.8], [0])]
    report = evaluate_detections(detections, GROUND_TRUTH, [0, 1], base_categories=[0])
    assert report.base_ap == pytest.approx(1.0)
    assert report.new_ap == 0.0
    assert report.base_categories == (0,)
    assert report.new_categories == (1,)

    plain = evaluate_detections(detections, GROUND_TRUTH, [0, 1])
    assert plain.base_ap is None and plain.new_ap is None


def test_evaluate_detections_errors():
    with pytest.raises(EvaluationError):
        evaluate_detections([], [], [0])
    with pytest.raises(ConfigurationError):
        evaluate_detections([dets([], [], [])], GROUND_TRUTH, [0])
    with pytest.raises(EvaluationError):
        evaluate_detections([dets([], [], [])] * 2, GROUND_TRUTH, [5])


def test_metrics_report_json_keys():
    report = MetricsReport(mAP=0.5, ap50=0.7, ap75=0.4, per_class_ap={3: 0.5, 1: 0.5})
    d = report.to_json_dict(step=2)
    assert list(d["per_class_ap"]) == ["1", "3"]
    assert d["step"] == 2
    assert MetricsReport.from_json_dict(d) == report


def test_evaluate_snapshot(tiny_dataset, snapshot):
    report = evaluate(snapshot, tiny_dataset.test, [0, 1], base_categories=[0], batch_size=4)
    assert 0.0 <= report.mAP <= 1.0
    assert report.num_images == len(tiny_dataset.test)
    assert report.base_categories == (0,)


def test_evaluate_empty_view(tmp_path, snapshot):
    view = PartitionView(name="test", image_dir=tmp_path, records=())
    with pytest.raises(EvaluationError):
        evaluate(snapshot, view, [0])


def test_probe_images(tiny_dataset):
    probes = select_probe_images(tiny_dataset.test, 5, seed=1)
    assert len(probes) == 5
    assert probes == select_probe_images(tiny_dataset.test, 5, seed=1)
    names = [r.name for r in probes]
    assert names == sorted(names)
    assert len(select_probe_images(tiny_dataset.test, 100)) == len(tiny_dataset.test)


def test_feature_distance(tiny_dataset, tiny_head, snapshot):
    torch.manual_seed(1)
    other = DetectorSnapshot.from_model(TinyDetector(tiny_head), 1, {0, 1, 2})
    images = [tiny_dataset.test.load_image(r) for r in tiny_dataset.test.records[:3]]

    same = feature_distance(snapshot, snapshot, images)
    assert same.distances == {name: 0.0 for name in COMPONENTS}
    assert same.num_probes == 3

    ab = feature_distance(snapshot, other, images)
    ba = feature_distance(other, snapshot, images)
    for name in COMPONENTS:
        assert ab.distances[name] > 0
        assert ab.distances[name] == pytest.approx(ba.distances[name])
    assert ab.to_text().splitlines()[0].startswith("pyramid_features ")

    with pytest.raises(EvaluationError):
        feature_distance(snapshot, other, [])


def test_dump_response_maps(tiny_dataset, snapshot):
    image = tiny_dataset.test.load_image(tiny_dataset.test.records[0])
    text = dump_response_maps(snapshot, image, level=0, image_name="00000.png")
    lines = text.splitlines()
    assert lines[0] == "image 00000.png branch cls level 0 stride 8 grid 8 8"
    assert lines[1].startswith("stats mean ")
    grid = [line for line in lines if line.startswith("G ")]
    assert len(grid) == 8
    assert all(len(row.split()) == 9 for row in grid)
    assert lines[-1].startswith("selected")

    with pytest.raises(ConfigurationError):
        dump_response_maps(snapshot, image, level=5)
