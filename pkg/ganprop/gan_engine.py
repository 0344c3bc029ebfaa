"""
GAN training (minimax or WGAN-GP) on dense generator/critic pairs, and the two
query surfaces an adversary gets: blind sampling and caller-chosen latent codes.
"""
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np
import pandas as pd

from ganprop.datagen import LabeledDataset
from ganprop.errors import NonFiniteError, ShapeError
from ganprop.nn_core import DenseNetwork, Node, Optimizer, ValueGraph
from ganprop.schemas import GanConfig, LatentPrior, PropertyDistribution

logger = logging.getLogger(__name__)


class BlindSampler(Protocol):
    def sample_blind(self, n: int, seed: int) -> np.ndarray: ...


class CodeAcceptingGenerator(Protocol):
    latent_dim: int

    def generate_from(self, codes) -> np.ndarray: ...


def as_code_array(codes) -> np.ndarray:
    # accepts a LatentCodeSet, an array or nested lists
    return np.atleast_2d(np.asarray(getattr(codes, 'codes', codes), dtype=np.float64))


class BlackBoxGenerator:
    """
    Generator-only view of a trained GAN. This is all an attack ever receives:
    the discriminator is dropped once training is over.
    """
    def __init__(self, network: DenseNetwork, prior: LatentPrior, model_id: str = ''):
        if prior.dim != network.input_width:
            raise ShapeError('latent prior', network.input_width, prior.dim)
        self.network = network
        self.prior = prior
        self.model_id = model_id

    @property
    def latent_dim(self) -> int:
        return self.prior.dim

    @property
    def sample_width(self) -> int:
        return self.network.output_width

    def draw_codes(self, n: int, seed: int) -> np.ndarray:
        return self.prior.draw(n, np.random.default_rng(seed))

    def generate_from(self, codes) -> np.ndarray:
        codes = as_code_array(codes)
        if codes.shape[1] != self.latent_dim:
            raise ShapeError('latent codes', ('n', self.latent_dim), codes.shape)
        return self.network.forward(codes)

    def sample_blind(self, n: int, seed: int) -> np.ndarray:
        if n < 1:
            raise ValueError('Need at least one sample')
        return self.generate_from(self.draw_codes(n, seed))

    def generate_graph(self, graph: ValueGraph, codes: Node) -> Node:
        """Differentiable path from codes to samples with frozen weights."""
        if codes.shape[-1] != self.latent_dim:
            raise ShapeError('latent codes', ('n', self.latent_dim), codes.shape)
        return self.network.bind(graph, trainable=False)(codes)

    @classmethod
    def load(cls, directory) -> 'BlackBoxGenerator':
        # reads only the generator half of a saved TrainedGan
        directory = Path(directory)
        meta = json.loads((directory / 'config.json').read_text())
        config = GanConfig.model_validate(meta['config'])
        return cls(DenseNetwork.load(directory / 'generator.json'), config.prior, meta.get('model_id', ''))


@dataclass
class TrainingLogEntry:
    step: int
    d_loss: float
    g_loss: float
    penalty: float


@dataclass
class TrainedGan:
    generator: DenseNetwork
    discriminator: DenseNetwork
    config: GanConfig
    log: list[TrainingLogEntry] = field(default_factory=list)
    failed: bool = False
    model_id: str = ''
    training_property: PropertyDistribution | None = None

    def black_box(self) -> BlackBoxGenerator:
        return BlackBoxGenerator(self.generator, self.config.prior, self.model_id)

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        self.generator.save(directory / 'generator.json')
        self.discriminator.save(directory / 'discriminator.json')
        meta = {
            'model_id': self.model_id,
            'failed': self.failed,
            'training_property': list(self.training_property.probs) if self.training_property else None,
            'config': self.config.model_dump(mode='json'),
        }
        (directory / 'config.json').write_text(json.dumps(meta, indent=2))
        frame = pd.DataFrame([asdict(entry) for entry in self.log], columns=['step', 'd_loss', 'g_loss', 'penalty'])
        frame.to_csv(directory / 'training_log.csv', index=False)
        return directory

    @classmethod
    def load(cls, directory) -> 'TrainedGan':
        directory = Path(directory)
        meta = json.loads((directory / 'config.json').read_text())
        frame = pd.read_csv(directory / 'training_log.csv', float_precision='round_trip')
        log = [TrainingLogEntry(int(row.step), float(row.d_loss), float(row.g_loss), float(row.penalty))
               for row in frame.itertuples(index=False)]
        prop = meta.get('training_property')
        return cls(DenseNetwork.load(directory / 'generator.json'),
                   DenseNetwork.load(directory / 'discriminator.json'),
                   GanConfig.model_validate(meta['config']), log, meta.get('failed', False),
                   meta.get('model_id', ''), PropertyDistribution(probs=tuple(prop)) if prop else None)


def saved_training_property(directory) -> PropertyDistribution | None:
    """Training property recorded with a saved TrainedGan (known to whoever trained it)."""
    meta = json.loads((Path(directory) / 'config.json').read_text())
    prop = meta.get('training_property')
    return PropertyDistribution(probs=tuple(prop)) if prop else None


def _surface(gan) -> BlackBoxGenerator:
    return gan.black_box() if isinstance(gan, TrainedGan) else gan


def sample_blind(gan, n: int, seed: int) -> np.ndarray:
    return _surface(gan).sample_blind(n, seed)


def generate_from(gan, codes) -> np.ndarray:
    return _surface(gan).generate_from(codes)


def initial_networks(config: GanConfig) -> tuple[DenseNetwork, DenseNetwork]:
    """Untrained generator and critic. Their init seeds come from config.seed."""
    init_seeds = np.random.SeedSequence(config.seed).spawn(2)
    generator_seed, critic_seed = (int(s.generate_state(1, dtype=np.uint64)[0]) for s in init_seeds)
    generator = DenseNetwork.initialize(config.generator.model_copy(update={'seed': generator_seed}))
    critic = DenseNetwork.initialize(config.discriminator.model_copy(update={'seed': critic_seed}))
    return generator, critic


def _critic_step(generator: DenseNetwork, critic: DenseNetwork, optimizer: Optimizer, real: np.ndarray,
                 codes: np.ndarray, config: GanConfig, mix_rng: np.random.Generator) -> tuple[float, float]:
    fake = generator.forward(codes)
    graph = ValueGraph()
    bound = critic.bind(graph, trainable=True)
    real_scores = bound(graph.constant(real), logits=True)
    fake_scores = bound(graph.constant(fake), logits=True)

    if config.loss == 'wgan_gp':
        # gradient penalty on uniform interpolates between paired real/fake rows
        mix = mix_rng.uniform(0.0, 1.0, size=(len(real), 1))
        interpolates = graph.constant(mix * real + (1.0 - mix) * fake)
        slopes = bound.input_gradient(interpolates)
        norms = graph.sqrt(graph.sum(graph.square(slopes), axis=1) + 1e-12)
        penalty = graph.mean(graph.square(norms - 1.0))
        loss = graph.mean(fake_scores) - graph.mean(real_scores) + config.gp_lambda * penalty
        penalty_value = float(penalty.value)
    else:
        # -log D(x) - log(1 - D(G(z))) written on logits
        loss = graph.mean(graph.softplus(-real_scores)) + graph.mean(graph.softplus(fake_scores))
        penalty_value = 0.0

    graph.backward(loss)
    optimizer.step(critic.parameters(), bound.gradients())
    return float(loss.value), penalty_value


def _generator_step(generator: DenseNetwork, critic: DenseNetwork, optimizer: Optimizer, codes: np.ndarray,
                    config: GanConfig) -> float:
    graph = ValueGraph()
    bound = generator.bind(graph, trainable=True)
    scores = critic.bind(graph, trainable=False)(bound(graph.constant(codes)), logits=True)
    if config.loss == 'wgan_gp':
        loss = -graph.mean(scores)
    else:
        # non-saturating generator objective, -log D(G(z))
        loss = graph.mean(graph.softplus(-scores))
    graph.backward(loss)
    optimizer.step(generator.parameters(), bound.gradients())
    return float(loss.value)


def train_gan(dataset: LabeledDataset, config: GanConfig, model_id: str = '') -> TrainedGan:
    """
    Run ``config.train_steps`` generator updates, each preceded by
    ``config.n_critic`` critic updates. Labels are ignored. A non-finite loss or
    gradient stops training; the partial log comes back with ``failed=True``.
    """
    if len(dataset) == 0:
        raise ValueError('Cannot train a GAN on an empty dataset')
    if dataset.width != config.generator.output_width:
        raise ShapeError('training samples', ('n', config.generator.output_width), dataset.samples.shape)

    generator, critic = initial_networks(config)
    batch_stream, latent_stream, mix_stream = np.random.SeedSequence(config.seed).spawn(5)[2:]
    batch_rng = np.random.default_rng(batch_stream)
    latent_rng = np.random.default_rng(latent_stream)
    mix_rng = np.random.default_rng(mix_stream)
    generator_optimizer = Optimizer(config.generator_optimizer)
    critic_optimizer = Optimizer(config.discriminator_optimizer)
    batch_size = min(config.batch_size, len(dataset))

    gan = TrainedGan(generator, critic, config, model_id=model_id, training_property=dataset.empirical_property())
    logger.info("Training GAN %s: %s loss, %d steps on %d samples", model_id or '<unnamed>', config.loss,
                config.train_steps, len(dataset))
    for step in range(config.train_steps):
        try:
            for _ in range(config.n_critic):
                real = dataset.samples[batch_rng.choice(len(dataset), size=batch_size, replace=False)]
                d_loss, penalty = _critic_step(generator, critic, critic_optimizer, real,
                                               config.prior.draw(batch_size, latent_rng), config, mix_rng)
            g_loss = _generator_step(generator, critic, generator_optimizer,
                                     config.prior.draw(batch_size, latent_rng), config)
        except NonFiniteError as error:
            logger.warning("GAN %s diverged at step %d: %s", model_id, step, error)
            gan.failed = True
            break
        if not np.isfinite([d_loss, g_loss, penalty]).all():
            logger.warning("GAN %s produced a non-finite loss at step %d", model_id, step)
            gan.failed = True
            break
        gan.log.append(TrainingLogEntry(step, d_loss, g_loss, penalty))
        if step % 100 == 0:
            logger.debug("step %d d_loss=%.5f g_loss=%.5f penalty=%.5f", step, d_loss, g_loss, penalty)
    return gan
