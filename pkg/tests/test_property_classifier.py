import numpy as np
import pytest

from ganprop.datagen import split, synth_domain
from ganprop.errors import ClassDeficitError, ProvenanceError
from ganprop.nn_core import DenseNetwork
from ganprop.property_classifier import (PropertyClassifier, accuracy, argmax_high, classifier_spec, gate_release,
                                         predict_hard, predict_proba, reported_property, train_classifier)
from ganprop.schemas import AttributeSpec, DenseNetworkSpec, OptimizerConfig, PropertyDistribution, SplitPlan

BINARY = AttributeSpec(n_classes=2)
OPTIMIZER = OptimizerConfig(kind='adam', learning_rate=0.01, beta1=0.9, beta2=0.999, batch_size=32)


@pytest.fixture
def blob_pools():
    dataset = synth_domain('mixture2d', 600, BINARY, PropertyDistribution.binary(0.5), seed=2)
    return split(dataset, SplitPlan(target=200, shadow=0, classifier=400, train_ratio=0.7), seed=3)


def test_argmax_ties_go_to_highest_class():
    probs = np.array([[0.2, 0.8], [0.5, 0.5], [0.9, 0.1]])
    assert argmax_high(probs).tolist() == [1, 1, 0]
    assert argmax_high(np.array([[0.4, 0.4, 0.2], [0.3, 0.3, 0.4]])).tolist() == [1, 2]


def test_argmax_agrees_with_numpy_without_ties():
    probs = np.random.default_rng(0).dirichlet(np.ones(5), size=200)
    np.testing.assert_array_equal(argmax_high(probs), np.argmax(probs, axis=1))


def test_zero_weight_softmax_is_uniform():
    spec = classifier_spec(2, 4, hidden=(3,))
    clf = PropertyClassifier(DenseNetwork(spec, [np.zeros((2, 3)), np.zeros((3, 4))], [np.zeros(3), np.zeros(4)]),
                             AttributeSpec(n_classes=4))
    np.testing.assert_allclose(predict_proba(clf, np.ones((3, 2))), 0.25)
    # every row is a four-way tie
    assert predict_hard(clf, np.ones((3, 2))).tolist() == [3, 3, 3]


def test_sigmoid_head_exposes_probability_vector():
    spec = DenseNetworkSpec(input_width=2, layer_widths=(1,), activations=('sigmoid',))
    clf = PropertyClassifier(DenseNetwork(spec, [np.array([[1.0], [0.0]])], [np.zeros(1)]), BINARY)
    probs = predict_proba(clf, np.array([[0.0, 5.0], [2.0, 0.0]]))
    np.testing.assert_allclose(probs.sum(axis=1), 1.0)
    np.testing.assert_allclose(probs[0], [0.5, 0.5])
    assert predict_hard(clf, np.array([[0.0, 5.0], [2.0, 0.0], [-2.0, 0.0]])).tolist() == [1, 1, 0]


def test_predict_proba_matches_single_sample_loop(make_classifier):
    clf = make_classifier(scale=3.0)
    samples = np.random.default_rng(1).normal(size=(20, 2))
    batched = predict_proba(clf, samples)
    looped = np.vstack([predict_proba(clf, sample) for sample in samples])
    np.testing.assert_allclose(batched, looped)
    np.testing.assert_allclose(predict_proba(clf, samples[::-1]), batched[::-1])


def test_classifier_separates_blobs(blob_pools):
    spec = classifier_spec(2, 2, hidden=(16,))
    clf = train_classifier(blob_pools.classifier_train, blob_pools.classifier_test, spec, OPTIMIZER, epochs=20, seed=4,
                           exclude=blob_pools.target, model_id='blobs')
    assert clf.test_accuracy >= 0.95
    assert clf.test_accuracy == accuracy(clf, blob_pools.classifier_test)
    assert len(clf.log) == 20
    assert not clf.failed


def test_training_is_deterministic(blob_pools):
    spec = classifier_spec(2, 2, hidden=(8,))
    first = train_classifier(blob_pools.classifier_train, blob_pools.classifier_test, spec, OPTIMIZER, 3, seed=5)
    second = train_classifier(blob_pools.classifier_train, blob_pools.classifier_test, spec, OPTIMIZER, 3, seed=5)
    for name, value in first.network.parameters().items():
        np.testing.assert_array_equal(value, second.network.parameters()[name])


def test_provenance_is_enforced(blob_pools):
    spec = classifier_spec(2, 2)
    train = blob_pools.classifier_train
    with pytest.raises(ProvenanceError):
        train_classifier(train, train, spec, OPTIMIZER, 1, seed=0)
    with pytest.raises(ProvenanceError):
        train_classifier(train, blob_pools.classifier_test, spec, OPTIMIZER, 1, seed=0, exclude=train.subset([0]))


def test_save_and_load(tmp_path, blob_pools):
    clf = train_classifier(blob_pools.classifier_train, blob_pools.classifier_test, classifier_spec(2, 2, (8,)),
                           OPTIMIZER, 2, seed=6, model_id='saved')
    loaded = PropertyClassifier.load(clf.save(tmp_path / 'clf'))
    assert loaded.model_id == 'saved'
    assert loaded.test_accuracy == clf.test_accuracy
    samples = blob_pools.classifier_test.samples
    np.testing.assert_array_equal(predict_proba(loaded, samples), predict_proba(clf, samples))


def test_reported_property(make_classifier):
    samples = np.array([[1.0, 0.0], [-1.0, 0.0], [2.0, 0.0], [0.0, 0.0]])
    dataset = synth_domain('mixture2d', 4, BINARY, PropertyDistribution.binary(0.5), seed=0)
    dataset.samples = samples
    assert reported_property(make_classifier(), dataset).probs == (0.25, 0.75)


def test_gate_release_70_30_to_half(make_classifier):
    # 70 samples predicted class 0 (x0 < 0), 30 predicted class 1
    x0 = np.concatenate([-np.arange(1, 71, dtype=np.float64), np.arange(1, 31, dtype=np.float64)])
    samples = np.column_stack([np.random.default_rng(3).permutation(x0), np.zeros(100)])
    released = gate_release(make_classifier(), samples, PropertyDistribution.binary(0.5))

    assert len(released.samples) == 60
    labels = predict_hard(make_classifier(), released.samples)
    assert np.bincount(labels).tolist() == [30, 30]
    # within a class the earliest samples are kept
    class0 = np.flatnonzero(samples[:, 0] < 0)[:30]
    assert set(class0) <= set(released.indices.tolist())
    assert np.all(np.diff(released.indices) > 0)


def test_gate_release_fixed_point(make_classifier):
    samples = np.column_stack([np.array([-1.0, 2.0, -3.0, 4.0]), np.zeros(4)])
    released = gate_release(make_classifier(), samples, PropertyDistribution.binary(0.5))
    assert released.indices.tolist() == [0, 1, 2, 3]


def test_gate_release_rejects_missing_class(make_classifier):
    samples = np.column_stack([-np.ones(10), np.zeros(10)])
    with pytest.raises(ClassDeficitError) as info:
        gate_release(make_classifier(), samples, PropertyDistribution.binary(0.5))
    assert 1 in info.value.deficits
