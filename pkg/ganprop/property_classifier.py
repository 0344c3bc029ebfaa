"""
The property classifier f_P: labels generated samples with respect to the
attribute under attack. Also hosts the classifier-gated release mitigation.
"""
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from ganprop.datagen import LabeledDataset, largest_remainder
from ganprop.errors import ClassDeficitError, NonFiniteError, ProvenanceError, ShapeError
from ganprop.nn_core import BoundNetwork, DenseNetwork, Node, Optimizer, ValueGraph
from ganprop.schemas import AttributeSpec, DenseNetworkSpec, OptimizerConfig, PropertyDistribution

logger = logging.getLogger(__name__)


def classifier_spec(input_width: int, n_classes: int, hidden: tuple[int, ...] = (32,), seed: int = 0) -> DenseNetworkSpec:
    """relu hidden stack with an n_classes-wide softmax head."""
    return DenseNetworkSpec(input_width=input_width, layer_widths=(*hidden, n_classes),
                            activations=(*(['relu'] * len(hidden)), 'softmax'), seed=seed)


def _check_head(spec: DenseNetworkSpec, n_classes: int):
    if spec.head == 'softmax' and spec.output_width == n_classes:
        return
    if spec.head == 'sigmoid' and spec.output_width == 1 and n_classes == 2:
        return
    raise ShapeError('classifier head', f"softmax[{n_classes}] or sigmoid[1]", f"{spec.head}[{spec.output_width}]")


@dataclass
class PropertyClassifier:
    network: DenseNetwork
    attribute: AttributeSpec
    test_accuracy: float = 0.0
    log: list[dict] = field(default_factory=list)
    failed: bool = False
    model_id: str = ''

    def __post_init__(self):
        _check_head(self.network.spec, self.attribute.n_classes)

    @property
    def n_classes(self) -> int:
        return self.attribute.n_classes

    def save(self, directory) -> Path:
        directory = Path(directory)
        self.network.save(directory / 'weights.json')
        sidecar = {
            'model_id': self.model_id,
            'attribute': self.attribute.model_dump(mode='json'),
            'test_accuracy': self.test_accuracy,
            'failed': self.failed,
            'log': self.log,
        }
        (directory / 'classifier.json').write_text(json.dumps(sidecar, indent=2))
        return directory

    @classmethod
    def load(cls, directory) -> 'PropertyClassifier':
        directory = Path(directory)
        sidecar = json.loads((directory / 'classifier.json').read_text())
        return cls(DenseNetwork.load(directory / 'weights.json'), AttributeSpec.model_validate(sidecar['attribute']),
                   sidecar['test_accuracy'], sidecar.get('log', []), sidecar.get('failed', False),
                   sidecar.get('model_id', ''))


def predict_proba(clf: PropertyClassifier, samples) -> np.ndarray:
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    out = clf.network.forward(samples)
    if clf.network.spec.head == 'sigmoid':
        return np.hstack([1.0 - out, out])
    return out


def argmax_high(probs: np.ndarray) -> np.ndarray:
    """Row argmax; ties go to the highest class index (a binary 0.5 is class 1)."""
    probs = np.atleast_2d(probs)
    return probs.shape[1] - 1 - np.argmax(probs[:, ::-1], axis=1)


def predict_hard(clf: PropertyClassifier, samples) -> np.ndarray:
    return argmax_high(predict_proba(clf, samples))


def proba_graph(bound: BoundNetwork, x: Node) -> Node:
    """Differentiable probability vectors for samples already living in ``bound``'s graph."""
    graph = bound.graph
    out = bound(x)
    if bound.network.spec.head == 'sigmoid':
        return graph.add(graph.mul(graph.constant(np.array([-1.0, 1.0])), out), graph.constant(np.array([1.0, 0.0])))
    return out


def accuracy(clf: PropertyClassifier, dataset: LabeledDataset) -> float:
    if len(dataset) == 0:
        raise ValueError('Cannot measure accuracy on an empty dataset')
    return float(np.mean(predict_hard(clf, dataset.samples) == dataset.labels))


def _batch_loss(graph: ValueGraph, bound: BoundNetwork, samples: np.ndarray, labels: np.ndarray) -> Node:
    logits = bound(graph.constant(samples), logits=True)
    if bound.network.spec.head == 'sigmoid':
        # binary cross-entropy on logits: softplus(a) - y * a
        y = labels.reshape(-1, 1).astype(np.float64)
        return graph.mean(graph.softplus(logits) - graph.mul(graph.constant(y), logits))
    one_hot = np.eye(bound.network.output_width)[labels]
    return -graph.mean(graph.sum(graph.mul(graph.constant(one_hot), graph.log_softmax(logits)), axis=1))


def train_classifier(train: LabeledDataset, test: LabeledDataset, spec: DenseNetworkSpec, optimizer: OptimizerConfig,
                     epochs: int, seed: int, exclude: LabeledDataset | None = None,
                     model_id: str = '') -> PropertyClassifier:
    """
    Minibatch cross-entropy training. ``exclude`` is a pool the classifier must never
    have seen (the target pool); any shared sample id raises ProvenanceError.
    """
    if len(train) == 0 or len(test) == 0:
        raise ValueError('Classifier train and test sets must be nonempty')
    if train.width != spec.input_width:
        raise ShapeError('classifier input', spec.input_width, train.width)
    guarded = [(test, 'test')] + ([(exclude, 'excluded')] if exclude is not None else [])
    for other, name in guarded:
        overlap = np.intersect1d(train.ids, other.ids)
        if overlap.size:
            raise ProvenanceError(f"Classifier training set shares {overlap.size} sample ids with the {name} pool")

    init_seq, order_seq = np.random.SeedSequence(seed).spawn(2)
    network = DenseNetwork.initialize(spec.model_copy(update={'seed': int(init_seq.generate_state(1, np.uint64)[0])}))
    clf = PropertyClassifier(network, train.attribute, model_id=model_id)
    opt = Optimizer(optimizer)
    rng = np.random.default_rng(order_seq)
    batch_size = min(optimizer.batch_size, len(train))

    for epoch in range(epochs):
        order = rng.permutation(len(train))
        losses = []
        try:
            for start in range(0, len(order), batch_size):
                index = order[start:start + batch_size]
                graph = ValueGraph()
                bound = network.bind(graph, trainable=True)
                loss = _batch_loss(graph, bound, train.samples[index], train.labels[index])
                if not np.isfinite(loss.value):
                    raise NonFiniteError(f"Non-finite classifier loss in epoch {epoch}")
                graph.backward(loss)
                opt.step(network.parameters(), bound.gradients())
                losses.append(float(loss.value))
        except NonFiniteError as error:
            logger.warning("Classifier %s diverged: %s", model_id, error)
            clf.failed = True
            break
        clf.log.append({'epoch': epoch, 'loss': float(np.mean(losses))})

    clf.test_accuracy = accuracy(clf, test)
    logger.info("Property classifier %s: %d epochs, test accuracy %.4f", model_id or '<unnamed>', epochs,
                clf.test_accuracy)
    return clf


def reported_property(clf: PropertyClassifier, dataset: LabeledDataset) -> PropertyDistribution:
    """What the classifier believes the class mix of ``dataset`` is (hard counts)."""
    labels = predict_hard(clf, dataset.samples)
    return PropertyDistribution.from_counts(np.bincount(labels, minlength=clf.n_classes))


class ReleasedSubset(NamedTuple):
    samples: np.ndarray
    indices: np.ndarray


def gate_release(clf: PropertyClassifier, samples, fake_property: PropertyDistribution) -> ReleasedSubset:
    """
    Keep the largest subset of ``samples`` whose predicted class mix matches
    ``fake_property``. A size N is usable only if every class holds ceil(q_c * N)
    predicted samples; within a class the first samples in original order are kept.
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    labels = predict_hard(clf, samples)
    if fake_property.n_classes != clf.n_classes:
        raise ShapeError('fake property', clf.n_classes, fake_property.n_classes)
    available = np.bincount(labels, minlength=clf.n_classes)
    fake = fake_property.as_array()

    missing = {c: 1 for c in range(len(fake)) if fake[c] > 0 and available[c] == 0}
    if missing:
        raise ClassDeficitError(f"No sample is predicted as class(es) {sorted(missing)}; predicted counts "
                                f"{available.tolist()} cannot realize {list(fake_property.probs)} at any size",
                                missing, {c: int(available[c]) for c in range(len(fake))})

    for size in range(len(samples), 0, -1):
        ceilings = np.ceil(fake * size - 1e-9)
        if np.all(ceilings <= available):
            break
    counts = largest_remainder(size, fake)
    keep = np.sort(np.concatenate([np.flatnonzero(labels == c)[:counts[c]] for c in range(len(fake))]))
    logger.info("Gated release keeps %d of %d samples (predicted %s, released %s)", len(keep), len(samples),
                available.tolist(), counts.tolist())
    return ReleasedSubset(samples[keep], keep)
