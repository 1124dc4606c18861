import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from countlab.mcd import (
    DatasetSplit,
    MCDError,
    SplitStrategy,
    apply_strategy,
    bhattacharyya,
    carve_validation,
    count_histogram,
    replay_split,
    split_report,
)
from countlab.scenegen import SceneSpec, generate_dataset, combine_pools

SPEC = SceneSpec()


def _toy_dataset(n_train=400, n_test=150, seed=(1, 2)):
    train = generate_dataset(SPEC, n_train, seed=seed[0], image_prefix="train")
    test = generate_dataset(SPEC, n_test, seed=seed[1], image_prefix="test")
    return combine_pools(train, test)


@pytest.fixture(scope="module")
def dataset():
    return _toy_dataset()


@pytest.fixture(scope="module")
def base_split(dataset):
    return carve_validation(dataset, 0.10, seed=5)


# ---------------------------------------------------------------------------
# carve_validation
# ---------------------------------------------------------------------------


def test_carve_holds_out_exactly_ten_of_hundred_images(dataset):
    pool_images = {dataset.triplets[i].image_id
                   for i in range(len(dataset)) if i not in set(dataset.test_ids)}
    split = carve_validation(dataset, 0.10, seed=5)
    held = {dataset.triplets[i].image_id for i in split.validation}
    assert len(held) == math.ceil(0.10 * len(pool_images))


def test_carve_tiny_fraction_holds_at_least_one_image(dataset):
    split = carve_validation(dataset, 1e-9, seed=5)
    held = {dataset.triplets[i].image_id for i in split.validation}
    assert len(held) == 1


def test_carve_is_image_disjoint(dataset):
    for seed in range(5):
        split = carve_validation(dataset, 0.2, seed=seed)
        train_imgs = {dataset.triplets[i].image_id for i in split.train}
        val_imgs = {dataset.triplets[i].image_id for i in split.validation}
        assert not (train_imgs & val_imgs)


def test_carve_rejects_single_image_and_bad_fraction():
    ds = _toy_dataset(2, 1)
    # collapse the pool onto one image id
    for t in ds.triplets:
        t.image_id = "train-000000"
    ds.test_ids = ()
    ds._hash = None
    with pytest.raises(MCDError, match="single image"):
        carve_validation(ds, 0.5, seed=0)
    with pytest.raises(MCDError, match="fraction"):
        carve_validation(_toy_dataset(50, 10), 0.0, seed=0)


# ---------------------------------------------------------------------------
# apply_strategy against the published split-count arithmetic
# ---------------------------------------------------------------------------

# per-label counts summing to 87,289 odd / 137,102 even triplets
_ODD_LABELS = {1: 60_000, 3: 20_000, 5: 5_000, 7: 2_289}
_EVEN_LABELS = {0: 70_000, 2: 50_000, 4: 12_000, 6: 4_000, 8: 1_102}


class _LabelOnlyTriplet:
    __slots__ = ("count", "image_id")

    def __init__(self, count, image_id):
        self.count = count
        self.image_id = image_id


class _LabelOnlyDataset:
    """Minimal stand-in carrying only labels, for split arithmetic tests."""

    def __init__(self, label_counts):
        self.triplets = []
        for label, n in sorted(label_counts.items()):
            for _ in range(n):
                self.triplets.append(_LabelOnlyTriplet(label, f"img{len(self.triplets)}"))
        self.test_ids = ()

    def __len__(self):
        return len(self.triplets)

    def labels(self):
        return [t.count for t in self.triplets]

    def content_hash(self):
        return "label-only"


def _parity_counts(ids, dataset):
    labels = dataset.labels()
    odd = sum(1 for i in ids if labels[i] % 2 == 1)
    return odd, len(ids) - odd


@pytest.fixture(scope="module")
def tallyqa_like_split():
    ds = _LabelOnlyDataset({**_ODD_LABELS, **_EVEN_LABELS})
    ids = tuple(range(len(ds)))
    split = DatasetSplit(train=ids, validation=(), test=(),
                         provenance={"dataset_hash": "label-only",
                                     "carve_fraction": 0.1, "carve_seed": 0,
                                     "strategy": None, "strategy_seed": None})
    return ds, split


def test_odd_even_50_retains_about_half_the_even_train(tallyqa_like_split):
    ds, split = tallyqa_like_split
    out = apply_strategy(split, SplitStrategy("odd-even", 50.0), seed=3, dataset=ds)
    odd, even = _parity_counts(out.train, ds)
    assert odd == 87_289
    assert abs(even - 68_549) <= 2


def test_odd_even_90_retains_published_count_within_five(tallyqa_like_split):
    ds, split = tallyqa_like_split
    out = apply_strategy(split, SplitStrategy("odd-even", 90.0), seed=3, dataset=ds)
    odd, even = _parity_counts(out.train, ds)
    assert odd == 87_289
    assert abs(even - 13_707) <= 5


def test_odd_even_100_empties_even_train_exactly(tallyqa_like_split):
    ds, split = tallyqa_like_split
    out = apply_strategy(split, SplitStrategy("odd-even", 100.0), seed=3, dataset=ds)
    odd, even = _parity_counts(out.train, ds)
    assert odd == 87_289 and even == 0


def test_p_zero_is_the_identity(dataset, base_split):
    out = apply_strategy(base_split, SplitStrategy("odd-even", 0.0), seed=9,
                         dataset=dataset)
    assert out.train == base_split.train
    assert out.validation == base_split.validation
    assert out.test == base_split.test


def test_parity_purity_at_full_removal(dataset, base_split):
    labels = dataset.labels()
    out = apply_strategy(base_split, SplitStrategy("odd-even", 100.0), seed=9,
                         dataset=dataset)
    assert all(labels[i] % 2 == 1 for i in out.train)
    assert all(labels[i] % 2 == 1 for i in out.validation)
    assert all(labels[i] % 2 == 0 for i in out.test)
    mirrored = apply_strategy(base_split, SplitStrategy("even-odd", 100.0), seed=9,
                              dataset=dataset)
    assert all(labels[i] % 2 == 0 for i in mirrored.train)
    assert all(labels[i] % 2 == 1 for i in mirrored.test)


def test_retained_even_train_count_is_monotone_in_p(dataset, base_split):
    labels = dataset.labels()
    retained = []
    for p in (0, 20, 40, 60, 80, 100):
        out = apply_strategy(base_split, SplitStrategy("odd-even", float(p)), seed=9,
                             dataset=dataset)
        retained.append(sum(1 for i in out.train if labels[i] % 2 == 0))
    assert retained == sorted(retained, reverse=True)


def test_strategies_preserve_image_disjointness(dataset, base_split):
    for p in (30.0, 70.0, 100.0):
        out = apply_strategy(base_split, SplitStrategy("odd-even", p), seed=2,
                             dataset=dataset)
        train_imgs = {dataset.triplets[i].image_id for i in out.train}
        val_imgs = {dataset.triplets[i].image_id for i in out.validation}
        assert not (train_imgs & val_imgs)
        assert set(out.train) <= set(base_split.train)
        assert set(out.test) <= set(base_split.test)


def test_membership_replays_from_provenance(dataset, base_split):
    out = apply_strategy(base_split, SplitStrategy("odd-even", 90.0), seed=7,
                         dataset=dataset)
    again = replay_split(dataset, out.provenance)
    assert again == out


# ---------------------------------------------------------------------------
# count_histogram
# ---------------------------------------------------------------------------


def test_empty_ids_give_empty_histogram(dataset):
    assert count_histogram([], dataset) == {}


def test_histogram_direct_tally():
    ds = _LabelOnlyDataset({1: 2, 2: 1, 3: 1})
    assert count_histogram(range(4), ds) == {1: 2, 2: 1, 3: 1}


def test_histogram_unknown_id_rejected(dataset):
    with pytest.raises(MCDError, match="unknown"):
        count_histogram([len(dataset) + 5], dataset)


def test_union_of_sets_recovers_full_histogram(dataset, base_split):
    ids = base_split.train + base_split.validation + base_split.test
    assert count_histogram(ids, dataset) == count_histogram(range(len(dataset)), dataset)


# ---------------------------------------------------------------------------
# bhattacharyya
# ---------------------------------------------------------------------------


def test_bhattacharyya_identical_is_one():
    p = {0: 0.25, 1: 0.25, 2: 0.5}
    assert bhattacharyya(p, dict(p)) == pytest.approx(1.0, abs=1e-12)


def test_bhattacharyya_disjoint_is_zero():
    assert bhattacharyya({0: 1.0}, {1: 1.0}) == 0.0


def test_bhattacharyya_hand_value():
    got = bhattacharyya([0.5, 0.5], [0.9, 0.1])
    assert got == pytest.approx(math.sqrt(0.45) + math.sqrt(0.05), abs=1e-12)
    assert got == pytest.approx(0.8944, abs=1e-4)


def test_bhattacharyya_rejects_bad_inputs():
    with pytest.raises(MCDError, match="normalize"):
        bhattacharyya([0.5, 0.6], [0.5, 0.5])
    with pytest.raises(MCDError, match="negative"):
        bhattacharyya([1.5, -0.5], [0.5, 0.5])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0.01, 10.0), min_size=1, max_size=8))
def test_bhattacharyya_self_similarity_property(weights):
    p = np.asarray(weights) / np.sum(weights)
    c = bhattacharyya(p.tolist(), p.tolist())
    assert 0.0 <= c <= 1.0
    assert c == pytest.approx(1.0, abs=1e-9)


# ---------------------------------------------------------------------------
# split_report
# ---------------------------------------------------------------------------


def test_report_identity_strategy_has_unit_coefficients(dataset, base_split):
    out = apply_strategy(base_split, SplitStrategy("odd-even", 0.0), seed=1,
                         dataset=dataset)
    stats = split_report(out, dataset)
    for per_set in stats.coefficients.values():
        assert per_set["tokens"] == 1.0
        assert per_set["visual"] == 1.0


def test_report_full_removal_keeps_token_similarity_high(dataset, base_split):
    out = apply_strategy(base_split, SplitStrategy("odd-even", 100.0), seed=1,
                         dataset=dataset)
    stats = split_report(out, dataset)
    assert stats.coefficients["train"]["tokens"] >= 0.97
    assert stats.coefficients["train"]["visual"] >= 0.97


def test_report_histograms_sum_to_set_sizes(dataset, base_split):
    out = apply_strategy(base_split, SplitStrategy("odd-even", 60.0), seed=1,
                         dataset=dataset)
    stats = split_report(out, dataset)
    for name in ("train", "validation", "test"):
        assert sum(stats.label_hist[name].values()) == len(getattr(out, name))


def test_report_regenerates_identically_from_provenance(dataset, base_split):
    out = apply_strategy(base_split, SplitStrategy("even-odd", 45.0), seed=12,
                         dataset=dataset)
    stats = split_report(out, dataset)
    replayed = replay_split(dataset, out.provenance)
    stats2 = split_report(replayed, dataset)
    assert stats.to_json() == stats2.to_json()


def test_split_serialization_round_trip(dataset, base_split):
    out = apply_strategy(base_split, SplitStrategy("odd-even", 35.0), seed=4,
                         dataset=dataset)
    assert DatasetSplit.from_dict(out.to_dict()) == out


def test_split_and_stats_files_round_trip_bit_exactly(dataset, base_split, tmp_path):
    import json

    out = apply_strategy(base_split, SplitStrategy("odd-even", 35.0), seed=4,
                         dataset=dataset)
    split_path = tmp_path / "split.json"
    split_path.write_text(json.dumps(out.to_dict(), sort_keys=True, separators=(",", ":")))
    reloaded = DatasetSplit.from_dict(json.loads(split_path.read_text()))
    again = tmp_path / "split2.json"
    again.write_text(json.dumps(reloaded.to_dict(), sort_keys=True, separators=(",", ":")))
    assert split_path.read_bytes() == again.read_bytes()

    stats = split_report(out, dataset)
    stats_path = tmp_path / "stats.json"
    stats_path.write_text(stats.to_json())
    rewritten = json.dumps(json.loads(stats_path.read_text()), sort_keys=True,
                           separators=(",", ":"))
    assert stats_path.read_text() == rewritten
