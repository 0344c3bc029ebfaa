import numpy as np
import pytest

from ganprop.datagen import (LabeledDataset, draw_with_property, largest_remainder, rebalance, split,
                             synth_domain)
from ganprop.errors import ClassDeficitError, ShapeError
from ganprop.schemas import AttributeSpec, PropertyDistribution, SplitPlan

BINARY = AttributeSpec(n_classes=2)


def test_largest_remainder_counts():
    assert largest_remainder(10, [0.3, 0.7]).tolist() == [3, 7]
    assert largest_remainder(10, [1 / 3, 1 / 3, 1 / 3]).tolist() == [4, 3, 3]
    assert largest_remainder(7, [0.25, 0.25, 0.5]).tolist() == [2, 2, 3]
    assert largest_remainder(0, [0.5, 0.5]).tolist() == [0, 0]


@pytest.mark.parametrize('domain, width', [('mixture2d', 2), ('digitlike', 64), ('tabular_onehot', 20)])
def test_synth_domain_exact_counts(domain, width):
    dataset = synth_domain(domain, 100, BINARY, PropertyDistribution.binary(0.3), seed=1)
    assert dataset.samples.shape == (100, width)
    assert dataset.class_counts().tolist() == [70, 30]
    assert dataset.empirical_property().proportion == pytest.approx(0.3)


def test_synth_domain_is_deterministic():
    first = synth_domain('mixture2d', 50, BINARY, PropertyDistribution.binary(0.5), seed=4)
    second = synth_domain('mixture2d', 50, BINARY, PropertyDistribution.binary(0.5), seed=4)
    np.testing.assert_array_equal(first.samples, second.samples)
    np.testing.assert_array_equal(first.labels, second.labels)


def test_tabular_rows_are_one_hot_per_field():
    dataset = synth_domain('tabular_onehot', 40, BINARY, PropertyDistribution.binary(0.5), seed=2)
    # five categorical fields, so every row has exactly five ones
    assert set(np.unique(dataset.samples)) <= {0.0, 1.0}
    assert (dataset.samples.sum(axis=1) == 5).all()


def test_synth_domain_rejects_bad_inputs():
    with pytest.raises(ShapeError):
        synth_domain('mixture2d', 10, BINARY, PropertyDistribution.uniform(3), seed=0)
    with pytest.raises(ValueError):
        synth_domain('images', 10, BINARY, PropertyDistribution.binary(0.5), seed=0)


def test_split_pools_are_disjoint_and_proportional():
    dataset = synth_domain('mixture2d', 1000, BINARY, PropertyDistribution.binary(0.4), seed=3)
    pools = split(dataset, SplitPlan(target=300, shadow=300, classifier=400, train_ratio=0.7), seed=5)
    assert [len(pool) for pool in pools] == [300, 300, 280, 120]
    all_ids = np.concatenate([pool.ids for pool in pools])
    assert len(np.unique(all_ids)) == len(all_ids)
    for pool in pools:
        assert abs(pool.empirical_property().proportion - 0.4) <= 1 / len(pool)


def test_split_reports_deficit():
    dataset = synth_domain('mixture2d', 100, BINARY, PropertyDistribution.binary(0.5), seed=3)
    with pytest.raises(ClassDeficitError):
        split(dataset, SplitPlan(target=60, shadow=60, classifier=10), seed=0)


def test_draw_with_property_exact_counts():
    pool = synth_domain('mixture2d', 400, BINARY, PropertyDistribution.binary(0.5), seed=6)
    drawn = draw_with_property(pool, 100, PropertyDistribution.binary(0.7), seed=7)
    assert drawn.class_counts().tolist() == [30, 70]
    assert len(np.unique(drawn.ids)) == 100


def test_draw_with_property_names_the_short_class():
    pool = synth_domain('mixture2d', 100, BINARY, PropertyDistribution.binary(0.2), seed=6)
    with pytest.raises(ClassDeficitError) as info:
        draw_with_property(pool, 50, PropertyDistribution.binary(0.8), seed=0)
    assert info.value.deficits == {1: 20}


def test_rebalance_reaches_fake_distribution():
    dataset = synth_domain('mixture2d', 100, BINARY, PropertyDistribution.binary(0.3), seed=8)
    reservoir = synth_domain('mixture2d', 200, BINARY, PropertyDistribution.binary(0.5), seed=9)
    reservoir.ids = reservoir.ids + 10_000
    balanced = rebalance(dataset, PropertyDistribution.binary(0.5), reservoir, seed=1)
    # only additions: 70 class-0 samples stay, 40 class-1 samples join
    assert balanced.class_counts().tolist() == [70, 70]
    np.testing.assert_array_equal(balanced.samples[:100], dataset.samples)


def test_rebalance_to_current_property_is_a_no_op():
    dataset = synth_domain('mixture2d', 100, BINARY, PropertyDistribution.binary(0.3), seed=8)
    reservoir = synth_domain('mixture2d', 50, BINARY, PropertyDistribution.binary(0.5), seed=9)
    reservoir.ids = reservoir.ids + 10_000
    assert rebalance(dataset, PropertyDistribution.binary(0.3), reservoir, seed=1) is dataset


def test_rebalance_ten_classes_to_uniform():
    attribute = AttributeSpec(n_classes=10)
    skewed = PropertyDistribution(probs=(0.19,) + (0.09,) * 9)
    dataset = synth_domain('digitlike', 100, attribute, skewed, seed=3)
    reservoir = synth_domain('digitlike', 300, attribute, PropertyDistribution.uniform(10), seed=4)
    reservoir.ids = reservoir.ids + 10_000
    balanced = rebalance(dataset, PropertyDistribution.uniform(10), reservoir, seed=5)
    counts = balanced.class_counts()
    assert counts.tolist() == [19] * 10
    assert np.all(counts >= dataset.class_counts())


def test_rebalance_does_not_reuse_dataset_samples():
    dataset = synth_domain('mixture2d', 100, BINARY, PropertyDistribution.binary(0.3), seed=8)
    with pytest.raises(ClassDeficitError):
        rebalance(dataset, PropertyDistribution.binary(0.5), dataset, seed=1)


def test_csv_round_trip(tmp_path):
    dataset = synth_domain('digitlike', 30, AttributeSpec(n_classes=3), PropertyDistribution.uniform(3), seed=2)
    loaded = LabeledDataset.from_csv(dataset.to_csv(tmp_path / 'pool.csv'))
    np.testing.assert_array_equal(loaded.samples, dataset.samples)
    np.testing.assert_array_equal(loaded.ids, dataset.ids)
    assert loaded.attribute == dataset.attribute
