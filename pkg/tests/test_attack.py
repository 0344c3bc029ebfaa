import numpy as np
import pytest

from ganprop.attack import (AttackReport, LatentCodeSet, ShadowEnsemble, ShadowMember, TargetModel, abs_diff,
                            attack_full_bb, attack_partial_bb, compare_modes, cosine_similarity, ensemble_loss,
                            optimize_latent_set, phi, win_ratio)
from ganprop.errors import ShapeError
from ganprop.nn_core import ValueGraph
from ganprop.schemas import LatentPrior, OptimizerConfig, PropertyDistribution


class ReplayGenerator:
    """Blind-sampling stub that hands back a stored dataset, cycling if asked for more."""

    def __init__(self, samples, model_id='replay'):
        self.samples = np.asarray(samples, dtype=np.float64)
        self.model_id = model_id

    def sample_blind(self, n, seed):
        return self.samples[np.arange(n) % len(self.samples)]


def test_phi_hard_and_soft():
    probs = [(0.1, 0.9), (0.8, 0.2), (0.3, 0.7), (0.4, 0.6)]
    assert phi(probs, 'hard').proportion == pytest.approx(0.75)
    assert phi([(1.0, 0.0), (0.0, 1.0)], 'soft').probs == pytest.approx((0.5, 0.5))
    with pytest.raises(ValueError):
        phi(np.zeros((0, 2)))


def test_phi_hard_matches_counting():
    probs = np.random.default_rng(0).dirichlet(np.ones(3), size=1000)
    counts = np.zeros(3)
    for row in probs:
        counts[int(np.argmax(row))] += 1
    np.testing.assert_allclose(phi(probs, 'hard').as_array(), counts / 1000)


def test_phi_hard_matches_counting_on_many_batches():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        n_classes = int(rng.integers(2, 6))
        probs = rng.dirichlet(np.ones(n_classes), size=int(rng.integers(1, 40)))
        counts = np.zeros(n_classes)
        for row in probs:
            counts[int(np.argmax(row))] += 1
        np.testing.assert_array_equal(phi(probs, 'hard').as_array(), counts / len(probs))


def test_abs_diff_and_cosine():
    assert abs_diff(0.48, 0.50) == pytest.approx(0.02)
    assert abs_diff(PropertyDistribution.binary(0.3), PropertyDistribution.binary(0.3)) == 0.0
    # total variation with more classes
    assert abs_diff([0.5, 0.3, 0.2], [0.2, 0.3, 0.5]) == pytest.approx(0.3)
    assert cosine_similarity([0.2, 0.8], [0.2, 0.8]) == pytest.approx(1.0)
    assert cosine_similarity([1.0, 0.0], [0.0, 1.0]) == 0.0
    with pytest.raises(ValueError):
        cosine_similarity([0.0, 0.0], [0.5, 0.5])
    with pytest.raises(ShapeError):
        abs_diff([0.5, 0.5], [0.2, 0.3, 0.5])


def test_full_bb_with_degenerate_classifier(make_generator, make_classifier):
    # scale 0 makes every logit tie, so every sample is class 1
    report = attack_full_bb(make_generator(), make_classifier(scale=0.0), n_samples=50, seed=1, ground_truth=0.3)
    assert report.inferred == (0.0, 1.0)
    assert report.abs_diff == pytest.approx(0.7)
    assert report.query_count == 50
    assert report.mode == 'full_bb'


def test_full_bb_replay_pipeline_is_exact(make_classifier):
    # perfect classifier for points at x0 = +1 (class 1) and x0 = -1 (class 0)
    labels = np.array([1] * 37 + [0] * 63)
    samples = np.column_stack([np.where(labels == 1, 1.0, -1.0), np.zeros(100)])
    report = attack_full_bb(ReplayGenerator(samples), make_classifier(), n_samples=100, seed=0,
                            ground_truth=PropertyDistribution.from_counts(np.bincount(labels)))
    assert report.inferred_property.proportion == pytest.approx(0.37)
    assert report.abs_diff == pytest.approx(0.0)

    # duplicating every sample leaves the estimate unchanged
    doubled = attack_full_bb(ReplayGenerator(samples), make_classifier(), n_samples=200, seed=0)
    assert doubled.inferred == pytest.approx(report.inferred)


def test_partial_bb_with_identity_generator(make_generator, make_classifier):
    codes = LatentCodeSet(np.array([[1.0, 0.0], [-1.0, 0.0], [2.0, 0.0], [0.0, 0.0]]))
    report = attack_partial_bb(make_generator(), make_classifier(), codes, ground_truth=0.5)
    assert report.inferred == (0.25, 0.75)
    assert report.query_count == 4
    assert report.mode == 'partial_bb'

    shuffled = LatentCodeSet(codes.codes[::-1])
    assert attack_partial_bb(make_generator(), make_classifier(), shuffled).inferred == report.inferred

    with pytest.raises(ShapeError):
        attack_partial_bb(make_generator(), make_classifier(), np.zeros((2, 3)))


def test_partial_bb_on_random_codes_equals_full_bb(make_generator, make_classifier):
    target = make_generator()
    full = attack_full_bb(target, make_classifier(), n_samples=30, seed=9)
    partial = attack_partial_bb(target, make_classifier(), target.draw_codes(30, 9))
    assert partial.inferred == full.inferred


def test_report_round_trips_as_json(make_generator, make_classifier):
    report = attack_full_bb(make_generator(), make_classifier(), n_samples=10, seed=2, ground_truth=0.5)
    assert AttackReport.model_validate_json(report.model_dump_json()) == report


def test_shadow_ensemble_requires_even_grid(make_generator):
    low, high = PropertyDistribution.binary(0.3), PropertyDistribution.binary(0.7)
    members = [ShadowMember(make_generator(model_id=f"s{i}"), prop) for i, prop in enumerate([low, low, low, high])]
    with pytest.raises(ValueError):
        ShadowEnsemble(members)
    with pytest.raises(ValueError):
        ShadowEnsemble([])


def test_shadow_subset_round_robin(make_generator):
    low, high = PropertyDistribution.binary(0.3), PropertyDistribution.binary(0.7)
    members = [ShadowMember(make_generator(model_id=f"s{i}"), prop) for i, prop in enumerate([low, high] * 3)]
    subset = ShadowEnsemble(members).subset(3)
    # grid points are visited in sorted order: (0.3, 0.7) before (0.7, 0.3)
    assert [member.model_id for member in subset.members] == ['s1', 's0', 's3']
    assert len(subset.grid) == 2


def test_zero_iterations_returns_init(make_generator, make_classifier):
    ensemble = ShadowEnsemble([ShadowMember(make_generator(), PropertyDistribution.binary(0.7))])
    init = LatentCodeSet.draw(LatentPrior(dim=2), 10, seed=3)
    assert optimize_latent_set(ensemble, make_classifier(), iters=0, init=init) is init


def test_optimization_matches_single_shadow(make_generator, make_classifier):
    # identity generator with a linear-logit classifier: soft phi is the mean sigmoid of x0
    ensemble = ShadowEnsemble([ShadowMember(make_generator(), PropertyDistribution.binary(0.7))])
    opt = OptimizerConfig(kind='adam', learning_rate=0.01, beta1=0.9, beta2=0.999)
    codes = optimize_latent_set(ensemble, make_classifier(), set_size=20, opt=opt, iters=500, seed=4)

    assert codes.origin == 'optimized'
    assert not codes.failed
    assert min(codes.trace) < 1e-4
    assert min(codes.trace) <= codes.trace[0]

    # the returned codes are the best ones seen
    graph = ValueGraph()
    loss = ensemble_loss(graph, graph.input(codes.codes), ensemble, make_classifier())
    assert float(loss.value) == pytest.approx(min(codes.trace))


def test_optimization_respects_init_dimension(make_generator, make_classifier):
    ensemble = ShadowEnsemble([ShadowMember(make_generator(), PropertyDistribution.binary(0.5))])
    with pytest.raises(ShapeError):
        optimize_latent_set(ensemble, make_classifier(), iters=5, init=LatentCodeSet(np.zeros((4, 3))))


def test_code_set_save_and_load(tmp_path):
    codes = LatentCodeSet(np.random.default_rng(5).normal(size=(6, 3)), 'optimized', [0.3, 0.2])
    loaded = LatentCodeSet.load(codes.save(tmp_path / 'codes.json'))
    np.testing.assert_array_equal(loaded.codes, codes.codes)
    assert loaded.trace == [0.3, 0.2]
    assert loaded.origin == 'optimized'


def test_win_ratio_counts_strict_wins():
    assert win_ratio([0.1, 0.2, 0.3], [0.2, 0.2, 0.1]) == pytest.approx(1 / 3)
    assert win_ratio([0.1, 0.1], [0.1, 0.1]) == 0.0


def test_compare_modes_with_constant_classifier(make_generator, make_classifier):
    clf = make_classifier(scale=0.0)
    ensemble = ShadowEnsemble([ShadowMember(make_generator(), PropertyDistribution.binary(0.5))])
    targets = [TargetModel(make_generator(model_id='t0'), PropertyDistribution.binary(0.4), 't0')]
    ratios, detail = compare_modes(targets, clf, ensemble, sample_counts=[4, 8], trials=3, seed=1, iters=2)

    # both arms always infer 1.0, so nobody wins
    assert ratios['ratio'].tolist() == [0.0, 0.0]
    assert ratios['comparisons'].tolist() == [3, 3]
    assert len(detail) == 6
    assert set(detail['target_id']) == {'t0'}


@pytest.mark.parametrize('seed', range(20))
def test_replay_pipeline_recovers_random_properties(seed, make_classifier):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(20, 300))
    labels = (rng.random(n) < rng.uniform(0.05, 0.95)).astype(int)
    labels[:2] = (0, 1)
    samples = np.column_stack([np.where(labels == 1, rng.uniform(0.1, 2.0, n), rng.uniform(-2.0, -0.1, n)),
                               rng.normal(size=n)])
    report = attack_full_bb(ReplayGenerator(samples), make_classifier(), n_samples=n, seed=seed)
    assert report.inferred_property.proportion == labels.sum() / n
