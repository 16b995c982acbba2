import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from centeruda.data import generate_dataset, load_image, subset
from centeruda.errors import ConfigError, DataError
from centeruda.evaluation import (
    EvalReport,
    average_precision,
    evaluate,
    export_manifest_maps,
    export_maps,
    format_table,
    heatmap_mean,
    iou,
    match_detections,
    throughput,
    to_gray,
)
from centeruda.model import build_model

from conftest import TINY_ARCH, TINY_CLASSES, TINY_SIZE, tiny_scene


def test_iou_of_overlapping_squares():
    assert iou((0, 0, 2, 2), (1, 1, 3, 3)) == pytest.approx(1 / 7)
    assert iou((0, 0, 2, 2), (5, 5, 6, 6)) == 0.0


def test_average_precision_reference_value():
    gt = {1: [(0, 0, 10, 10)], 2: [(0, 0, 10, 10)]}
    dets = [(1, 0.9, (0, 0, 10, 10)), (1, 0.8, (50, 50, 60, 60)), (2, 0.7, (0, 0, 10, 10))]
    assert average_precision(dets, gt) == pytest.approx(0.8333333, abs=1e-6)


def test_average_precision_edge_cases():
    gt = {1: [(0, 0, 10, 10)]}
    assert average_precision([(1, 0.5, (0, 0, 10, 10))], gt) == 1.0
    assert average_precision([], gt) == 0.0
    assert math.isnan(average_precision([(1, 0.5, (0, 0, 10, 10))], {1: []}))


def test_each_ground_truth_matches_once():
    gt = {1: [(0, 0, 10, 10)]}
    dets = [(1, 0.9, (0, 0, 10, 10)), (1, 0.8, (0, 0, 10, 10))]
    assert match_detections(dets, gt).tolist() == [True, False]


def _ranked_ap(flags, num_gt):
    """All-point interpolated AP from ranked TP flags."""
    tp = np.cumsum(flags)
    precision = tp / np.arange(1, len(flags) + 1)
    total = 0.0
    for i, hit in enumerate(flags):
        if hit:
            total += precision[i:].max() / num_gt
    return total


@settings(max_examples=60, deadline=None)
@given(
    flags=st.lists(st.booleans(), min_size=1, max_size=15),
    missed=st.integers(0, 3),
    seed=st.integers(0, 1000),
)
def test_average_precision_matches_ranked_oracle(flags, missed, seed):
    scores = np.random.default_rng(seed).permutation(len(flags)) + 1.0
    order = np.argsort(-scores)
    ranked = [flags[i] for i in order]
    num_gt = sum(flags) + missed
    if num_gt == 0:
        return
    boxes = [(20.0 * k, 0.0, 20.0 * k + 10, 10.0) for k in range(num_gt)]
    gt = {1: boxes}
    dets, used = [], 0
    for flag, score in zip(flags, scores):
        if flag:
            dets.append((1, float(score), boxes[used]))
            used += 1
        else:
            dets.append((1, float(score), (0.0, 500.0, 10.0, 510.0)))
    ap = average_precision(dets, gt)
    assert ap == pytest.approx(_ranked_ap(ranked, num_gt), abs=1e-12)
    squashed = [(i, s ** 3, b) for i, s, b in dets]
    assert average_precision(squashed, gt) == pytest.approx(ap, abs=1e-12)


def test_heatmap_mean():
    assert heatmap_mean([np.zeros(2), np.full(2, 0.5)]) == pytest.approx(0.25)
    assert math.isnan(heatmap_mean([]))


def test_to_gray_rounds_half_up():
    np.testing.assert_array_equal(to_gray(np.array([0.0, 0.5, 1.0, 1.5, -1.0])), [0, 128, 255, 255, 0])


def test_export_maps_writes_every_class_and_entropy(tmp_path, tiny_params):
    tiny_params["head.heatmap.out.weight"].data[:] = 0.0
    tiny_params["head.heatmap.out.bias"].data[:] = 0.0
    images = np.random.default_rng(0).random((2, 3, TINY_SIZE, TINY_SIZE))
    written = export_maps(tiny_params, images, tmp_path)
    assert len(written) == 2 * (TINY_CLASSES + 1)
    heat = np.asarray(Image.open(tmp_path / "image000_heatmap_c0.png"))
    entropy = np.asarray(Image.open(tmp_path / "image001_entropy.png"))
    assert heat.shape == (8, 8)
    assert (heat == 128).all()
    assert (entropy == 255).all()


def test_export_maps_needs_two_classes(tmp_path):
    params = build_model(TINY_ARCH, 1, seed=0)
    with pytest.raises(ConfigError):
        export_maps(params, np.zeros((1, 3, TINY_SIZE, TINY_SIZE)), tmp_path)


def test_export_manifest_maps_uses_image_stems(tmp_path, tiny_params, test_manifest):
    written = export_manifest_maps(tiny_params, test_manifest, tmp_path, limit=2)
    assert len(written) == 2 * (TINY_CLASSES + 1)
    assert (tmp_path / "target_00000_entropy.png").is_file()


def test_evaluate_reports_counts(tiny_params, test_manifest, source_manifest):
    report = evaluate(tiny_params, test_manifest, source_probe=source_manifest, label="baseline")
    assert report.num_images == 3
    assert sum(report.num_ground_truth.values()) == test_manifest.num_annotations()
    assert report.class_names == ["disc", "square", "triangle"]
    assert 0.0 <= report.mAP <= 1.0
    assert report.mean_heatmap_pred == pytest.approx(0.01, abs=0.005)
    assert 0.0 < report.mean_heatmap_gt < 1.0
    assert 0.0 <= report.mean_entropy <= 1.0
    assert 0.0 <= report.source_mean_entropy <= 1.0
    assert report.images_per_second > 0


def test_evaluate_input_errors(tmp_path, tiny_params, test_manifest, target_manifest):
    with pytest.raises(DataError, match="empty"):
        evaluate(tiny_params, subset(test_manifest, 0))
    with pytest.raises(DataError, match="no labels"):
        evaluate(tiny_params, target_manifest)
    empty = generate_dataset(tiny_scene("target", object_count=(0, 0)), 2, seed=1, out_dir=tmp_path / "e")
    with pytest.raises(DataError, match="no ground-truth"):
        evaluate(tiny_params, empty)


def test_report_json_roundtrip(tmp_path):
    report = EvalReport(
        class_names=["disc", "square"],
        ap={"disc": 0.5, "square": float("nan")},
        mAP=0.5,
        num_detections={"disc": 3, "square": 0},
        num_ground_truth={"disc": 2, "square": 0},
        mean_heatmap_pred=0.02,
        mean_heatmap_gt=0.03,
        mean_entropy=0.9,
        images_per_second=12.5,
        num_images=4,
        label="em",
    )
    path = tmp_path / "report.json"
    text = report.to_json(path)
    assert '"square": null' in text
    assert path.read_text() == text
    again = EvalReport.from_json(text)
    assert again.to_dict() == report.to_dict()
    assert math.isnan(again.source_mean_entropy)

    table = format_table([report, again.__class__(**{**again.__dict__, "label": "msl"})])
    assert "mAP" in table and "em" in table and "msl" in table


def test_throughput(tiny_params):
    report = throughput(tiny_params, TINY_SIZE, iterations=10, warmup=1)
    assert report.iterations == 10
    assert report.images_per_second > 0
    assert report.median_total_s >= report.median_forward_s
    assert "numpy" in report.to_dict()["environment"]
    with pytest.raises(ConfigError):
        throughput(tiny_params, TINY_SIZE, iterations=5)


def test_loaded_test_images_feed_the_model(test_manifest):
    image = load_image(test_manifest.entries[0].image_path)
    assert image.shape == (3, TINY_SIZE, TINY_SIZE)


def test_evaluate_accepts_mixed_image_sizes(tmp_path, tiny_params, test_manifest):
    larger = generate_dataset(replace(tiny_scene("target"), image_size=(48, 48)), 2, seed=300, out_dir=tmp_path / "l")
    shifted = [replace(e, image_id=e.image_id + 1000) for e in larger.entries]
    mixed = replace(test_manifest, entries=[test_manifest.entries[0], *shifted, *test_manifest.entries[1:]])
    report = evaluate(tiny_params, mixed, batch_size=4)
    assert report.num_images == 5
    assert sum(report.num_ground_truth.values()) == mixed.num_annotations()
    assert 0.0 <= report.mAP <= 1.0
