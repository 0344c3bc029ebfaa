import numpy as np
import pytest

from ganprop import create_app
from ganprop.gan_engine import BlackBoxGenerator
from ganprop.nn_core import DenseNetwork
from ganprop.property_classifier import PropertyClassifier
from ganprop.schemas import AttributeSpec, DenseNetworkSpec, ExperimentConfig, LatentPrior

# Stub models with closed-form behaviour, shared by the attack, membership and route tests.


@pytest.fixture
def make_generator():
    """Factory for linear generators: output = code + bias (identity weights)."""
    def build(dim=2, bias=None, model_id='identity'):
        spec = DenseNetworkSpec(input_width=dim, layer_widths=(dim,), activations=('identity',))
        bias = np.zeros(dim) if bias is None else np.asarray(bias, dtype=np.float64)
        return BlackBoxGenerator(DenseNetwork(spec, [np.eye(dim)], [bias]), LatentPrior(dim=dim), model_id)
    return build


@pytest.fixture
def make_classifier():
    """Factory for binary classifiers on 2-D inputs with logits [0, scale * x0]:
    class 1 iff scale * x0 >= 0 (ties go to class 1)."""
    def build(scale=1.0, model_id='threshold'):
        spec = DenseNetworkSpec(input_width=2, layer_widths=(2,), activations=('softmax',))
        network = DenseNetwork(spec, [np.array([[0.0, scale], [0.0, 0.0]])], [np.zeros(2)])
        return PropertyClassifier(network, AttributeSpec(n_classes=2), test_accuracy=1.0, model_id=model_id)
    return build


@pytest.fixture
def tiny_config(tmp_path):
    """An experiment small enough to train end to end in a few seconds."""
    return ExperimentConfig(
        task='tiny', domain='mixture2d', property_grid=(0.3, 0.7), targets_per_property=1, shadows_per_property=1,
        target_pool_size=120, shadow_pool_size=120, classifier_pool_size=120, target_size=40, shadow_size=40,
        latent_dim=4, generator_hidden=(8,), discriminator_hidden=(8,), train_steps=3, batch_size=16,
        classifier_hidden=(8,), classifier_epochs=2, full_bb_samples=64, set_size=8, opt_iterations=3,
        output_dir=str(tmp_path / 'run'), master_seed=11,
    )


@pytest.fixture
def client(make_generator):
    """
    Query server around an identity generator (samples equal their latent codes).
    """
    application = create_app(make_generator(model_id='target-test'))

    # Enable Testing Mode
    application.config['TESTING'] = True
    application.config['RATELIMIT_ENABLED'] = False  # We don't want rate limits during tests

    with application.test_client() as test_client:
        with application.app_context():
            yield test_client
