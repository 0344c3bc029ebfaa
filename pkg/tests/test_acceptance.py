"""Desk-scale analogs of the headline results. Deselected by default; run with ``pytest -m slow``."""
import numpy as np
import pytest

from ganprop.attack import compare_modes
from ganprop.config import DomainDefaults
from ganprop.datagen import rebalance, split, synth_domain
from ganprop.harness import Experiment, run_figure_analog
from ganprop.property_classifier import classifier_spec, train_classifier
from ganprop.schemas import AttributeSpec, ExperimentConfig, OptimizerConfig, PropertyDistribution, SplitPlan
from ganprop.utils import worker_count

pytestmark = pytest.mark.slow


@pytest.fixture(scope='module')
def experiment(tmp_path_factory):
    config = ExperimentConfig(
        task='acceptance', domain='mixture2d', property_grid=(0.3, 0.5, 0.7), targets_per_property=3,
        shadows_per_property=7, train_steps=3000, sample_count_max_exponent=12, sample_count_trials=10,
        compare_counts=(100,), compare_trials=20, start_points=5, output_dir=str(tmp_path_factory.mktemp('run')),
        master_seed=1, workers=worker_count(),
    )
    return Experiment(config)


def test_classifier_separates_blobs(experiment):
    assert experiment.classifier.test_accuracy >= 0.98


def test_full_black_box_tracks_every_grid_point(experiment):
    summary = run_figure_analog('f4', experiment.config, experiment).plot
    assert sorted(summary['p_real'].round(2)) == [0.3, 0.5, 0.7]
    assert (summary['count'] == 3).all()
    assert (summary['mean_abs_diff'] <= 0.05).all()


def test_more_samples_are_more_accurate_and_stable(experiment):
    summary = run_figure_analog('f5', experiment.config, experiment).plot
    by_count = summary.groupby('sample_count')[['mean_abs_diff', 'var']].mean()
    assert by_count.loc[4096, 'mean_abs_diff'] <= by_count.loc[64, 'mean_abs_diff']
    assert by_count.loc[4096, 'var'] <= by_count.loc[64, 'var']


def test_optimized_codes_beat_random_draws_at_small_budgets(experiment):
    c = experiment.config
    targets = [model.as_target() for model in experiment.targets]
    opt = OptimizerConfig(kind='adam', learning_rate=c.opt_learning_rate, beta1=0.9, beta2=0.999)
    ratios, detail = compare_modes(targets, experiment.classifier, experiment.ensemble.subset(20), [100], trials=20,
                                   seed=experiment.seed('acceptance', 7), opt=opt, iters=c.opt_iterations)
    assert len(detail) == len(targets) * 20
    assert ratios['ratio'][0] > 0.5


def test_start_points_agree(experiment):
    per_start = run_figure_analog('f8', experiment.config, experiment).plot
    assert per_start['start_point'].nunique() == 5
    spans = per_start.groupby('p_real')['mean_p_infer'].agg(lambda s: s.max() - s.min())
    assert (spans <= 0.05).all()


def test_digitlike_classifier_accuracy(experiment):
    assert experiment.multiclass.classifier.test_accuracy >= 0.9


def test_multiclass_inference_and_rebalancing(experiment):
    multiclass = run_figure_analog('f14', experiment.config, experiment).table.frame()
    cosine = multiclass['cosine'].mean()
    assert cosine >= 0.95

    mitigation = run_figure_analog('f15', experiment.config, experiment).table.frame()
    rebalanced = mitigation[mitigation['variant'] == 'rebalance']['cosine'].mean()
    assert rebalanced < cosine


def test_enhanced_membership_beats_baseline(experiment):
    frame = run_figure_analog('f16', experiment.config, experiment).table.frame().set_index('mode')
    assert frame.loc['mia_enhanced', 'auc'] >= frame.loc['mia_baseline', 'auc'] + 0.02

    sweep = run_figure_analog('f17', experiment.config, experiment).plot
    uninformative = sweep[np.isclose(sweep['inferred_property'], 0.5)]
    assert len(uninformative) == 1
    assert uninformative['enhanced_auc'].iloc[0] == uninformative['baseline_auc'].iloc[0]


def test_untrained_classifier_is_at_chance():
    attribute = AttributeSpec(n_classes=10)
    pools = split(synth_domain('digitlike', 1000, attribute, PropertyDistribution.uniform(10), seed=2),
                  SplitPlan(target=0, shadow=0, classifier=1000), seed=3)
    optimizer = OptimizerConfig(kind='adam', learning_rate=0.01, beta1=0.9, beta2=0.999, batch_size=64)
    accuracies = [train_classifier(pools.classifier_train, pools.classifier_test, classifier_spec(64, 10),
                                   optimizer, epochs=0, seed=seed).test_accuracy for seed in range(30)]
    # binomial 3 sigma around 1/10 for the mean of 30 untrained initializations
    assert abs(np.mean(accuracies) - 0.1) <= 3 * np.sqrt(0.1 * 0.9 / 30)


def test_blob_means_match_configured_centers():
    n = 10_000
    dataset = synth_domain('mixture2d', n, AttributeSpec(n_classes=2), PropertyDistribution.binary(0.7), seed=5)
    ones = dataset.samples[dataset.labels == 1]
    # class 1 sits at angle pi on the configured radius
    center = np.array([-DomainDefaults.MIXTURE_RADIUS, 0.0])
    tolerance = 3 * DomainDefaults.MIXTURE_SIGMA / np.sqrt(len(ones))
    np.testing.assert_allclose(ones.mean(axis=0), center, atol=tolerance)


def test_rebalance_to_skewed_fixed_point_and_to_uniform():
    attribute = AttributeSpec(n_classes=10)
    skewed = PropertyDistribution(probs=tuple(k / 55 for k in range(1, 11)))
    dataset = synth_domain('digitlike', 550, attribute, skewed, seed=6)
    reservoir = synth_domain('digitlike', 2000, attribute, PropertyDistribution.uniform(10), seed=7)
    reservoir.ids = reservoir.ids + 10_000
    assert rebalance(dataset, skewed, reservoir, seed=8) is dataset

    balanced = rebalance(dataset, PropertyDistribution.uniform(10), reservoir, seed=8)
    assert balanced.class_counts().tolist() == [100] * 10
    assert np.all(balanced.class_counts() >= dataset.class_counts())
