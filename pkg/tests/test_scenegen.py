import dataclasses
import json

import numpy as np
import pytest
from scipy import stats

from countlab.boxes import Box, iou
from countlab.scenegen import (
    CLASS_NAMES,
    Instance,
    Question,
    QuestionUnsatisfiable,
    SceneSpec,
    SpecError,
    count_matches,
    generate_dataset,
    generate_scene,
    load_dataset,
    make_question,
    propose_regions,
    save_dataset,
)

SPEC = SceneSpec()


def _matches_brute(inst, q):
    # independent re-implementation of the question predicate
    if inst.class_id != q.class_id:
        return False
    if q.mode == "complex-attribute":
        return inst.attribute_id == q.attribute_id
    if q.mode == "complex-position":
        cx, cy = inst.box.center()
        return {"left-half": cx < 0.5, "right-half": cx > 0.5,
                "top-half": cy < 0.5, "bottom-half": cy > 0.5}[q.predicate]
    return True


# ---------------------------------------------------------------------------
# generate_scene
# ---------------------------------------------------------------------------


def test_zero_max_instances_means_empty_scene():
    spec = dataclasses.replace(SPEC, max_instances=0, label_weights=(1.0,))
    assert generate_scene(spec, seed=3) == []


def test_scene_is_deterministic_for_a_seed():
    assert generate_scene(SPEC, seed=7) == generate_scene(SPEC, seed=7)


def test_scene_boxes_within_canvas_and_count_in_bounds():
    for seed in range(25):
        scene = generate_scene(SPEC, seed)
        assert 0 <= len(scene) <= SPEC.max_instances
        for inst in scene:
            assert inst.box.is_valid() and inst.box.within_canvas()
            assert 0 <= inst.class_id < SPEC.n_classes
            assert 0 <= inst.attribute_id < SPEC.n_attributes


def test_instance_counts_follow_the_uniform_sampling_law():
    n_scenes = 1000
    counts = [len(generate_scene(SPEC, seed)) for seed in range(n_scenes)]
    observed = np.bincount(counts, minlength=SPEC.max_instances + 1)
    expected = np.full(SPEC.max_instances + 1, n_scenes / (SPEC.max_instances + 1))
    result = stats.chisquare(observed, expected)
    assert result.pvalue > 0.01


def test_infeasible_spec_rejected_at_validation():
    with pytest.raises(SpecError):
        dataclasses.replace(SPEC, size_range=(1.2, 1.5)).validate()
    with pytest.raises(SpecError):
        dataclasses.replace(SPEC, feature_dim=2).validate()
    with pytest.raises(SpecError):
        dataclasses.replace(SPEC, jitter=0.4).validate()  # cannot hold coverage IoU


# ---------------------------------------------------------------------------
# propose_regions
# ---------------------------------------------------------------------------


def test_identity_configuration_gives_one_proposal_per_instance():
    spec = dataclasses.replace(SPEC, duplicate_range=(1, 1), distractor_range=(0, 0))
    scene = generate_scene(spec, seed=5)
    assert len(scene) > 0
    proposals = propose_regions(scene, spec, seed=6)
    assert len(proposals) == len(scene)
    assert sorted(p.source for p in proposals) == list(range(len(scene)))


def test_proposal_arithmetic_two_instances_fixed_ranges():
    spec = dataclasses.replace(SPEC, duplicate_range=(2, 2), distractor_range=(3, 3))
    scene = [
        Instance(0, 0, Box(0.1, 0.1, 0.3, 0.3)),
        Instance(1, 1, Box(0.5, 0.5, 0.8, 0.8)),
    ]
    proposals = propose_regions(scene, spec, seed=9)
    assert len(proposals) == 2 * 2 + 3


def test_duplicates_keep_iou_at_least_half():
    # direct IoU computation over 1000 sampled duplicates
    checked = 0
    seed = 0
    while checked < 1000:
        scene = generate_scene(SPEC, seed)
        for p in propose_regions(scene, SPEC, seed=seed + 10_000):
            if p.source is not None:
                assert iou(p.box, scene[p.source].box) >= SPEC.coverage_iou
                checked += 1
        seed += 1


def test_distractor_features_center_on_background_prototype():
    spec = dataclasses.replace(SPEC, duplicate_range=(1, 1), distractor_range=(4, 4),
                               noise_sd=0.0)
    _, _, background = spec.prototypes()
    proposals = propose_regions([], spec, seed=3)
    assert len(proposals) == 4
    for p in proposals:
        assert np.allclose(p.feature, background)


# ---------------------------------------------------------------------------
# make_question
# ---------------------------------------------------------------------------


def test_simple_count_of_three_cats():
    boxes = [Box(0.1 * i, 0.1, 0.1 * i + 0.08, 0.2) for i in range(1, 6)]
    scene = [Instance(0, 0, boxes[0]), Instance(0, 1, boxes[1]), Instance(0, 0, boxes[2]),
             Instance(1, 0, boxes[3]), Instance(2, 1, boxes[4])]
    q = Question("simple", 0, text=f"how many {CLASS_NAMES[0]}?")
    count, gt = count_matches(scene, q)
    assert count == 3
    assert gt == boxes[:3]


def test_attribute_question_filters_by_attribute():
    # two red cubes and one blue cube: asking for red gives 2
    red, blue = 0, 1
    scene = [
        Instance(3, red, Box(0.1, 0.1, 0.2, 0.2)),
        Instance(3, red, Box(0.3, 0.3, 0.4, 0.4)),
        Instance(3, blue, Box(0.5, 0.5, 0.6, 0.6)),
    ]
    q = Question("complex-attribute", 3, attribute_id=red, text="how many red?")
    count, gt = count_matches(scene, q)
    brute = sum(1 for inst in scene if _matches_brute(inst, q))
    assert count == brute == 2


def test_zero_count_question_has_empty_gt():
    scene = generate_scene(SPEC, seed=11)
    q, count, gt = make_question(scene, "simple", seed=2, zero_count=True)
    assert count == 0 and gt == []
    assert all(inst.class_id != q.class_id for inst in scene)


def test_make_question_signals_unsatisfiable():
    # a scene containing every class admits no zero-count simple question
    scene = [Instance(k, 0, Box(0.1, 0.1, 0.2, 0.2)) for k in range(len(CLASS_NAMES))]
    with pytest.raises(QuestionUnsatisfiable):
        make_question(scene, "simple", seed=0, zero_count=True)
    with pytest.raises(QuestionUnsatisfiable):
        make_question([], "simple", seed=0)


def test_make_question_modes_are_consistent():
    for seed in range(30):
        scene = generate_scene(SPEC, seed)
        if not scene:
            continue
        for mode in ("simple", "complex-attribute", "complex-position"):
            try:
                q, count, gt = make_question(scene, mode, seed=seed)
            except QuestionUnsatisfiable:
                continue
            brute = [inst for inst in scene if _matches_brute(inst, q)]
            assert count == len(brute)
            assert gt == [inst.box for inst in brute]


# ---------------------------------------------------------------------------
# generate_dataset
# ---------------------------------------------------------------------------


def test_empty_dataset_round_trips_with_header(tmp_path):
    ds = generate_dataset(SPEC, 0, seed=1)
    path = tmp_path / "empty.jsonl"
    save_dataset(ds, path)
    lines = path.read_text().splitlines()
    assert len(lines) == 1
    header = json.loads(lines[0])
    assert header["kind"] == "countlab-dataset" and header["n_triplets"] == 0
    assert len(load_dataset(path)) == 0


def test_uniform_histogram_targeting_within_one():
    weights = tuple([1.0] * 11)  # labels 0..10
    ds = generate_dataset(SPEC, 1100, seed=21, label_weights=weights)
    hist = np.bincount(ds.labels(), minlength=11)
    assert np.all(np.abs(hist - 100) <= 1)
    assert hist.sum() == 1100


def test_generated_labels_match_independent_recount():
    scenes = {}
    ds = generate_dataset(SPEC, 5000, seed=33, scenes_out=scenes)
    for t in ds.triplets:
        brute = [inst for inst in scenes[t.image_id] if _matches_brute(inst, t.question)]
        assert t.count == len(brute) == len(t.gt_boxes)
        assert t.gt_boxes == [inst.box for inst in brute]
        for gt in t.gt_boxes:
            assert gt.is_valid() and gt.within_canvas()


def test_every_gt_box_is_covered_by_a_proposal():
    ds = generate_dataset(SPEC, 400, seed=8)
    for t in ds.triplets:
        for gt in t.gt_boxes:
            best = max((iou(p.box, gt) for p in t.regions), default=0.0)
            assert best >= SPEC.coverage_iou


def test_dataset_generation_is_byte_identical(tmp_path):
    a = generate_dataset(SPEC, 120, seed=5)
    b = generate_dataset(SPEC, 120, seed=5)
    pa, pb = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    save_dataset(a, pa)
    save_dataset(b, pb)
    assert pa.read_bytes() == pb.read_bytes()
    assert a.content_hash() == b.content_hash()


def test_round_trip_is_bit_exact(tmp_path):
    ds = generate_dataset(SPEC, 60, seed=17)
    p1 = tmp_path / "d1.jsonl"
    save_dataset(ds, p1)
    loaded = load_dataset(p1)
    p2 = tmp_path / "d2.jsonl"
    save_dataset(loaded, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_unreachable_label_rejected():
    spec = dataclasses.replace(SPEC, max_instances=4)
    with pytest.raises(SpecError, match="label 12"):
        generate_dataset(spec, 10, seed=1, label_weights=tuple([0.0] * 12 + [1.0]))


def test_nearest_prototype_separability():
    class_protos, attr_protos, _ = SPEC.prototypes()

    def nearest(feature):
        return int(np.argmax(class_protos @ feature))

    noiseless = dataclasses.replace(SPEC, noise_sd=0.0)
    hits = total = 0
    for seed in range(40):
        scene = generate_scene(noiseless, seed)
        for p in propose_regions(scene, noiseless, seed=seed):
            if p.source is not None:
                hits += nearest(p.feature) == scene[p.source].class_id
                total += 1
    assert total > 100 and hits == total  # noiseless recovery is exact

    hits = total = 0
    for seed in range(60):
        scene = generate_scene(SPEC, seed)
        for p in propose_regions(scene, SPEC, seed=seed):
            if p.source is not None:
                hits += nearest(p.feature) == scene[p.source].class_id
                total += 1
    assert total > 300
    assert hits / total > 0.95


def test_questions_per_image_share_scenes():
    ds = generate_dataset(SPEC, 300, seed=4)
    by_image = {}
    for t in ds.triplets:
        by_image.setdefault(t.image_id, []).append(t)
    multi = [ts for ts in by_image.values() if len(ts) > 1]
    assert multi, "some images should carry several questions"
    for ts in multi:
        classes = [t.question.class_id for t in ts]
        assert len(set(classes)) == len(classes)
        first = ts[0].regions
        for t in ts[1:]:
            assert t.regions is first  # same proposals object per image
