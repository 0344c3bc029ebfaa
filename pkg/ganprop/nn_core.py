"""
Small reverse-mode autodiff over numpy arrays, dense networks built on it, and
the SGD / Adam optimizers every trainer in the package uses.

A ValueGraph is a tape: nodes are appended in evaluation order, so the list is
already topologically sorted and backward is a single reversed sweep. Node values
may be scalars, vectors or (batch, width) matrices. All arithmetic is float64.
"""
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from ganprop.errors import NonFiniteError, ShapeError
from ganprop.schemas import DenseNetworkSpec, OptimizerConfig, parse_activation

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1

BackwardFn = Callable[[np.ndarray], tuple]


# --- element-wise activations shared by the plain and the recorded forward ---

def _sigmoid(a: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def _softmax(a: np.ndarray) -> np.ndarray:
    shifted = a - np.max(a, axis=-1, keepdims=True)
    exps = np.exp(shifted)
    return exps / np.sum(exps, axis=-1, keepdims=True)


def _log_softmax(a: np.ndarray) -> np.ndarray:
    shifted = a - np.max(a, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def apply_activation(name: str, slope: float, a: np.ndarray) -> np.ndarray:
    if name == 'relu':
        return np.maximum(a, 0.0)
    if name == 'leaky_relu':
        return np.where(a > 0, a, slope * a)
    if name == 'tanh':
        return np.tanh(a)
    if name == 'sigmoid':
        return _sigmoid(a)
    if name == 'softmax':
        return _softmax(a)
    return a


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    # sum a broadcast gradient back down to the operand's shape
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


@dataclass(eq=False)
class Node:
    graph: 'ValueGraph'
    id: int
    kind: str
    inputs: tuple[int, ...]
    value: np.ndarray
    requires_grad: bool
    backward_fn: BackwardFn | None = None
    grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __add__(self, other):
        return self.graph.add(self, other)

    def __radd__(self, other):
        return self.graph.add(other, self)

    def __sub__(self, other):
        return self.graph.sub(self, other)

    def __rsub__(self, other):
        return self.graph.sub(other, self)

    def __mul__(self, other):
        return self.graph.mul(self, other)

    def __rmul__(self, other):
        return self.graph.mul(other, self)

    def __neg__(self):
        return self.graph.mul(self, -1.0)

    def __matmul__(self, other):
        return self.graph.matmul(self, other)

    def __repr__(self) -> str:
        return f"Node(id={self.id}, kind={self.kind!r}, shape={self.shape})"


class ValueGraph:
    """Records operations so gradients can be pulled back from a scalar root."""

    def __init__(self):
        self.nodes: list[Node] = []

    # --- leaves ---

    def _leaf(self, kind: str, value, requires_grad: bool) -> Node:
        node = Node(self, len(self.nodes), kind, (), np.array(value, dtype=np.float64), requires_grad)
        self.nodes.append(node)
        return node

    def input(self, value) -> Node:
        return self._leaf('input', value, True)

    def param(self, value) -> Node:
        return self._leaf('param', value, True)

    def constant(self, value) -> Node:
        return self._leaf('constant', value, False)

    def _lift(self, value) -> Node:
        if isinstance(value, Node):
            if value.graph is not self:
                raise ValueError('Node belongs to a different graph')
            return value
        return self.constant(value)

    def _record(self, kind: str, inputs: tuple[Node, ...], value: np.ndarray, backward_fn: BackwardFn) -> Node:
        requires_grad = any(node.requires_grad for node in inputs)
        node = Node(self, len(self.nodes), kind, tuple(node.id for node in inputs), value, requires_grad,
                    backward_fn if requires_grad else None)
        self.nodes.append(node)
        return node

    # --- arithmetic ---

    def add(self, a, b) -> Node:
        a, b = self._lift(a), self._lift(b)
        return self._record('add', (a, b), a.value + b.value,
                            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))

    def sub(self, a, b) -> Node:
        a, b = self._lift(a), self._lift(b)
        return self._record('sub', (a, b), a.value - b.value,
                            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))

    def mul(self, a, b) -> Node:
        a, b = self._lift(a), self._lift(b)
        return self._record('mul', (a, b), a.value * b.value,
                            lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)))

    def matmul(self, a, b) -> Node:
        a, b = self._lift(a), self._lift(b)

        def backward(g):
            if a.value.ndim == 1:
                return g @ b.value.T, np.outer(a.value, g)
            return g @ b.value.T, a.value.T @ g

        if a.shape[-1] != b.shape[0]:
            raise ShapeError('matmul', (a.shape[-1], '*'), b.shape)
        return self._record('matmul', (a, b), a.value @ b.value, backward)

    def transpose(self, a) -> Node:
        a = self._lift(a)
        return self._record('transpose', (a,), a.value.T, lambda g: (g.T,))

    def square(self, a) -> Node:
        a = self._lift(a)
        return self._record('square', (a,), a.value * a.value, lambda g: (2.0 * a.value * g,))

    def sqrt(self, a) -> Node:
        a = self._lift(a)
        out = np.sqrt(a.value)
        return self._record('sqrt', (a,), out, lambda g: (0.5 * g / out,))

    def log(self, a) -> Node:
        a = self._lift(a)
        return self._record('log', (a,), np.log(a.value), lambda g: (g / a.value,))

    def sum(self, a, axis: int | None = None, keepdims: bool = False) -> Node:
        a = self._lift(a)

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape).copy(),)

        return self._record('sum', (a,), np.sum(a.value, axis=axis, keepdims=keepdims), backward)

    def mean(self, a, axis: int | None = None, keepdims: bool = False) -> Node:
        a = self._lift(a)
        count = a.value.size if axis is None else a.shape[axis]

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g / count, a.shape).copy(),)

        return self._record('mean', (a,), np.mean(a.value, axis=axis, keepdims=keepdims), backward)

    # --- activations and losses ---

    def relu(self, a) -> Node:
        a = self._lift(a)
        return self._record('relu', (a,), apply_activation('relu', 0.0, a.value), lambda g: (g * (a.value > 0),))

    def leaky_relu(self, a, slope: float) -> Node:
        a = self._lift(a)
        return self._record('leaky_relu', (a,), apply_activation('leaky_relu', slope, a.value),
                            lambda g: (g * np.where(a.value > 0, 1.0, slope),))

    def tanh(self, a) -> Node:
        a = self._lift(a)
        out = np.tanh(a.value)
        return self._record('tanh', (a,), out, lambda g: (g * (1.0 - out * out),))

    def sigmoid(self, a) -> Node:
        a = self._lift(a)
        out = _sigmoid(a.value)
        return self._record('sigmoid', (a,), out, lambda g: (g * out * (1.0 - out),))

    def softmax(self, a) -> Node:
        a = self._lift(a)
        out = _softmax(a.value)
        return self._record('softmax', (a,), out,
                            lambda g: (out * (g - np.sum(g * out, axis=-1, keepdims=True)),))

    def log_softmax(self, a) -> Node:
        a = self._lift(a)
        out = _log_softmax(a.value)
        return self._record('log_softmax', (a,), out,
                            lambda g: (g - np.exp(out) * np.sum(g, axis=-1, keepdims=True),))

    def softplus(self, a) -> Node:
        """log(1 + e^a), the stable building block of the sigmoid cross-entropy."""
        a = self._lift(a)
        return self._record('softplus', (a,), np.logaddexp(0.0, a.value), lambda g: (g * _sigmoid(a.value),))

    def activation(self, a, tag: str) -> Node:
        name, slope = parse_activation(tag)
        if name == 'relu':
            return self.relu(a)
        if name == 'leaky_relu':
            return self.leaky_relu(a, slope)
        if name == 'tanh':
            return self.tanh(a)
        if name == 'sigmoid':
            return self.sigmoid(a)
        if name == 'softmax':
            return self.softmax(a)
        return self._lift(a)

    # --- reverse sweep ---

    def backward(self, root: Node) -> dict[int, np.ndarray]:
        """
        Pull gradients back from a scalar root. Every gradient buffer is reset
        first, so calling backward twice never accumulates. Returns the gradients
        of all input and param leaves, keyed by node id.
        """
        if root.graph is not self:
            raise ValueError('Root belongs to a different graph')
        if root.value.size != 1:
            raise ShapeError('backward root', (), root.shape)

        for node in self.nodes:
            node.grad = np.zeros_like(node.value)
        root.grad = np.ones_like(root.value)

        for node in reversed(self.nodes[:root.id + 1]):
            if node.backward_fn is None or not np.any(node.grad):
                continue
            for input_id, input_grad in zip(node.inputs, node.backward_fn(node.grad)):
                target = self.nodes[input_id]
                if target.requires_grad:
                    target.grad = target.grad + np.reshape(input_grad, target.shape)

        return {node.id: node.grad for node in self.nodes if node.kind in ('input', 'param')}


# --- dense networks ---

class DenseNetwork:
    """Fully connected stack described by a DenseNetworkSpec. Weights are (in, out)."""

    def __init__(self, spec: DenseNetworkSpec, weights: list[np.ndarray], biases: list[np.ndarray]):
        widths = (spec.input_width, *spec.layer_widths)
        for index, (weight, bias) in enumerate(zip(weights, biases)):
            if weight.shape != (widths[index], widths[index + 1]) or bias.shape != (widths[index + 1],):
                raise ShapeError(f"layer {index} weights", (widths[index], widths[index + 1]), weight.shape)
        if len(weights) != len(spec.layer_widths):
            raise ShapeError('layer count', len(spec.layer_widths), len(weights))
        self.spec = spec
        self.weights = [np.asarray(weight, dtype=np.float64) for weight in weights]
        self.biases = [np.asarray(bias, dtype=np.float64) for bias in biases]
        self.activations = [parse_activation(tag) for tag in spec.activations]

    @classmethod
    def initialize(cls, spec: DenseNetworkSpec) -> 'DenseNetwork':
        # Glorot-uniform weights, zero biases, fully determined by spec.seed
        rng = np.random.default_rng(spec.seed)
        widths = (spec.input_width, *spec.layer_widths)
        weights, biases = [], []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(spec, weights, biases)

    @property
    def input_width(self) -> int:
        return self.spec.input_width

    @property
    def output_width(self) -> int:
        return self.spec.output_width

    def parameters(self) -> dict[str, np.ndarray]:
        params = {}
        for index, (weight, bias) in enumerate(zip(self.weights, self.biases)):
            params[f"W{index}"] = weight
            params[f"b{index}"] = bias
        return params

    def copy(self) -> 'DenseNetwork':
        return DenseNetwork(self.spec, [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def _check_input(self, x: np.ndarray):
        if x.ndim not in (1, 2) or x.shape[-1] != self.input_width:
            raise ShapeError('network input', ('batch', self.input_width) if x.ndim == 2 else (self.input_width,),
                             x.shape)

    def forward(self, x, logits: bool = False) -> np.ndarray:
        """Plain numpy forward for a single vector or a (batch, width) matrix."""
        h = np.asarray(x, dtype=np.float64)
        self._check_input(h)
        last = len(self.weights) - 1
        for index, (weight, bias) in enumerate(zip(self.weights, self.biases)):
            a = h @ weight + bias
            if index == last and logits:
                return a
            h = apply_activation(*self.activations[index], a)
        return h

    def bind(self, graph: ValueGraph, trainable: bool = True) -> 'BoundNetwork':
        return BoundNetwork(self, graph, trainable)

    # --- persistence ---

    def to_document(self) -> dict:
        return {
            'format_version': FORMAT_VERSION,
            'spec': self.spec.model_dump(mode='json'),
            'layers': [
                {'shape': list(weight.shape), 'weights': weight.ravel().tolist(), 'bias': bias.tolist()}
                for weight, bias in zip(self.weights, self.biases)
            ],
        }

    @classmethod
    def from_document(cls, document: dict) -> 'DenseNetwork':
        if document.get('format_version') != FORMAT_VERSION:
            raise ValueError(f"Unsupported weight format {document.get('format_version')!r}")
        spec = DenseNetworkSpec.model_validate(document['spec'])
        weights = [np.asarray(layer['weights'], dtype=np.float64).reshape(layer['shape'])
                   for layer in document['layers']]
        biases = [np.asarray(layer['bias'], dtype=np.float64) for layer in document['layers']]
        return cls(spec, weights, biases)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        # json writes floats with repr, which round-trips float64 exactly
        path.write_text(json.dumps(self.to_document()))
        return path

    @classmethod
    def load(cls, path) -> 'DenseNetwork':
        return cls.from_document(json.loads(Path(path).read_text()))


class BoundNetwork:
    """A DenseNetwork whose parameters live as nodes in one ValueGraph, so several
    forward passes through it share (and sum) parameter gradients."""

    def __init__(self, network: DenseNetwork, graph: ValueGraph, trainable: bool):
        self.network = network
        self.graph = graph
        make = graph.param if trainable else graph.constant
        self.weights = [make(weight) for weight in network.weights]
        self.biases = [make(bias) for bias in network.biases]

    def __call__(self, x: Node, logits: bool = False) -> Node:
        self.network._check_input(x.value)
        h = x
        last = len(self.weights) - 1
        for index, (weight, bias) in enumerate(zip(self.weights, self.biases)):
            a = h @ weight + bias
            if index == last and logits:
                return a
            h = self.graph.activation(a, self.network.spec.activations[index])
        return h

    def input_gradient(self, x: Node) -> Node:
        """
        Gradient of a single-output network w.r.t. each input row, built out of
        recorded ops so it can itself be differentiated (the critic penalty needs
        d/dθ of ||dD/dx||). Piecewise-linear activations contribute a constant mask.
        """
        if self.network.output_width != 1:
            raise ShapeError('input_gradient output', 1, self.network.output_width)
        graph = self.graph
        pre_activations, outputs = [], []
        h = x
        for index, (weight, bias) in enumerate(zip(self.weights, self.biases)):
            a = h @ weight + bias
            h = graph.activation(a, self.network.spec.activations[index])
            pre_activations.append(a)
            outputs.append(h)

        delta = graph.constant(np.ones_like(outputs[-1].value))
        for index in reversed(range(len(self.weights))):
            name, slope = self.network.activations[index]
            a, h = pre_activations[index], outputs[index]
            if name == 'relu':
                delta = delta * (a.value > 0).astype(np.float64)
            elif name == 'leaky_relu':
                delta = delta * np.where(a.value > 0, 1.0, slope)
            elif name == 'tanh':
                delta = delta * (1.0 - graph.square(h))
            elif name == 'sigmoid':
                delta = delta * (h * (1.0 - h))
            elif name == 'softmax':
                raise ValueError('input_gradient does not support a softmax head')
            delta = delta @ graph.transpose(self.weights[index])
        return delta

    def gradients(self) -> dict[str, np.ndarray]:
        grads = {}
        for index, (weight, bias) in enumerate(zip(self.weights, self.biases)):
            grads[f"W{index}"] = weight.grad
            grads[f"b{index}"] = bias.grad
        return grads


# --- optimizers ---

class Optimizer:
    """SGD or Adam over a dict of named numpy parameters, updated in place."""

    def __init__(self, config: OptimizerConfig):
        self.config = config
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        # validate everything before touching anything: a rejected step leaves params and state as they were
        if set(params) != set(grads):
            raise ShapeError('gradient keys', sorted(params), sorted(grads))
        for name, value in params.items():
            if grads[name] is None or grads[name].shape != value.shape:
                raise ShapeError(f"gradient of {name}", value.shape, getattr(grads[name], 'shape', None))
            if not np.all(np.isfinite(grads[name])):
                raise NonFiniteError(f"Non-finite gradient for {name}")

        config = self.config
        if config.kind == 'sgd':
            for name, value in params.items():
                value -= config.learning_rate * grads[name]
            return

        self.t += 1
        bias_correction1 = 1.0 - config.beta1 ** self.t
        bias_correction2 = 1.0 - config.beta2 ** self.t
        for name, value in params.items():
            grad = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(value)
                self.v[name] = np.zeros_like(value)
            self.m[name] = config.beta1 * self.m[name] + (1.0 - config.beta1) * grad
            self.v[name] = config.beta2 * self.v[name] + (1.0 - config.beta2) * (grad * grad)
            m_hat = self.m[name] / bias_correction1
            v_hat = self.v[name] / bias_correction2
            value -= config.learning_rate * m_hat / (np.sqrt(v_hat) + config.epsilon_stability)
