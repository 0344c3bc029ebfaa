"""
Property inference against a generator.

Full black-box: label blind samples with the property classifier and summarize.
Partial black-box: optimize one latent code set over a shadow ensemble of
generators with known properties, then feed those codes to the target.
"""
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, NamedTuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

from ganprop import gan_engine
from ganprop.config import AttackDefaults
from ganprop.errors import NonFiniteError, ShapeError
from ganprop.gan_engine import BlackBoxGenerator, TrainedGan
from ganprop.nn_core import Node, Optimizer, ValueGraph
from ganprop.property_classifier import PropertyClassifier, argmax_high, predict_proba, proba_graph
from ganprop.schemas import LatentPrior, OptimizerConfig, PropertyDistribution
from ganprop.utils import derive_seed

logger = logging.getLogger(__name__)

PhiMode = Literal['hard', 'soft']


@dataclass
class LatentCodeSet:
    codes: np.ndarray
    origin: Literal['random', 'optimized'] = 'random'
    trace: list[float] = field(default_factory=list)
    failed: bool = False

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.float64)
        if self.codes.ndim != 2 or len(self.codes) == 0:
            raise ShapeError('latent code set', ('n >= 1', 'dim'), self.codes.shape)

    def __len__(self) -> int:
        return len(self.codes)

    @property
    def dim(self) -> int:
        return self.codes.shape[1]

    def norm_stats(self) -> dict[str, float]:
        norms = np.linalg.norm(self.codes, axis=1)
        return {'mean_norm': float(norms.mean()), 'max_norm': float(norms.max())}

    @classmethod
    def draw(cls, prior: LatentPrior, n: int, seed: int) -> 'LatentCodeSet':
        return cls(prior.draw(n, np.random.default_rng(seed)), 'random')

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        document = {'origin': self.origin, 'failed': self.failed, 'trace': self.trace,
                    'codes': self.codes.tolist(), **self.norm_stats()}
        path.write_text(json.dumps(document))
        return path

    @classmethod
    def load(cls, path) -> 'LatentCodeSet':
        document = json.loads(Path(path).read_text())
        return cls(document['codes'], document['origin'], document.get('trace', []), document.get('failed', False))


class ShadowMember(NamedTuple):
    generator: BlackBoxGenerator
    prop: PropertyDistribution
    model_id: str = ''


class ShadowEnsemble:
    """
    Shadow generators G_k with known training properties P_k. The ensemble must
    cover its property grid evenly: member counts per grid point differ by at most one.
    """
    def __init__(self, members: list[ShadowMember]):
        if not members:
            raise ValueError('Shadow ensemble must not be empty')
        dims = {member.generator.latent_dim for member in members}
        if len(dims) != 1:
            raise ShapeError('shadow latent dims', 'one shared dim', sorted(dims))
        if len({member.prop.n_classes for member in members}) != 1:
            raise ValueError('All shadow properties must describe the same attribute')
        per_point = Counter(member.prop.probs for member in members)
        if max(per_point.values()) - min(per_point.values()) > 1:
            raise ValueError(f"Shadow properties are not uniformly spread over the grid: {dict(per_point)}")
        # an unnamed member takes its generator's id
        self.members = [member if member.model_id else member._replace(model_id=member.generator.model_id)
                        for member in members]

    @classmethod
    def from_gans(cls, gans: list[TrainedGan]) -> 'ShadowEnsemble':
        # keeps only the generator half of each shadow
        return cls([ShadowMember(gan.black_box(), gan.training_property, gan.model_id) for gan in gans])

    def __len__(self) -> int:
        return len(self.members)

    @property
    def latent_dim(self) -> int:
        return self.members[0].generator.latent_dim

    @property
    def prior(self) -> LatentPrior:
        return self.members[0].generator.prior

    @property
    def grid(self) -> list[tuple[float, ...]]:
        return sorted({member.prop.probs for member in self.members})

    def subset(self, count: int) -> 'ShadowEnsemble':
        """First ``count`` members taken round-robin across grid points, so the grid stays evenly covered."""
        if not 1 <= count <= len(self.members):
            raise ValueError(f"Subset size must lie in [1, {len(self.members)}]")
        by_point = {point: [m for m in self.members if m.prop.probs == point] for point in self.grid}
        chosen, depth = [], 0
        while len(chosen) < count:
            for point in self.grid:
                if depth < len(by_point[point]) and len(chosen) < count:
                    chosen.append(by_point[point][depth])
            depth += 1
        return ShadowEnsemble(chosen)


class AttackReport(BaseModel):
    inferred: tuple[float, ...]
    ground_truth: tuple[float, ...] | None = None
    abs_diff: float | None = Field(None, ge=0, le=1)
    cosine: float | None = None
    query_count: int = Field(..., ge=1)
    mode: Literal['full_bb', 'partial_bb']
    phi_mode: PhiMode = 'hard'
    seed: int | None = None
    target_id: str = ''
    classifier_id: str = ''

    @property
    def inferred_property(self) -> PropertyDistribution:
        return PropertyDistribution(probs=self.inferred)


# --- aggregation ---

def phi(label_probs, mode: PhiMode = 'hard') -> PropertyDistribution:
    """Summarize per-sample class probabilities into a class distribution."""
    probs = np.asarray(label_probs, dtype=np.float64)
    if probs.ndim != 2 or len(probs) == 0:
        raise ValueError('phi needs a nonempty batch of probability vectors')
    if mode == 'hard':
        counts = np.bincount(argmax_high(probs), minlength=probs.shape[1])
        return PropertyDistribution.from_counts(counts)
    if mode == 'soft':
        means = probs.mean(axis=0)
        return PropertyDistribution(probs=tuple(float(p) for p in means / means.sum()))
    raise ValueError(f"Unknown phi mode '{mode}'")


def phi_graph(graph: ValueGraph, probs: Node) -> Node:
    # soft phi, differentiable
    return graph.mean(probs, axis=0)


def _as_vector(value) -> np.ndarray:
    if isinstance(value, PropertyDistribution):
        return value.as_array()
    if np.isscalar(value):
        return np.array([1.0 - float(value), float(value)])
    return np.asarray(value, dtype=np.float64)


def abs_diff(inferred, real) -> float:
    """|p - q| on the class-1 share for binary properties, total variation otherwise."""
    p, q = _as_vector(inferred), _as_vector(real)
    if p.shape != q.shape:
        raise ShapeError('property length', q.shape, p.shape)
    if len(p) == 2:
        return float(abs(p[1] - q[1]))
    return float(0.5 * np.abs(p - q).sum())


def cosine_similarity(inferred, real) -> float:
    p, q = _as_vector(inferred), _as_vector(real)
    if p.shape != q.shape:
        raise ShapeError('property length', q.shape, p.shape)
    norm = np.linalg.norm(p) * np.linalg.norm(q)
    if norm == 0:
        raise ValueError('Cosine similarity is undefined for a zero vector')
    return float(np.clip(p @ q / norm, -1.0, 1.0))


# --- attacks ---

def report_from_samples(samples: np.ndarray, clf: PropertyClassifier, mode: str = 'full_bb',
                        phi_mode: PhiMode = 'hard', ground_truth=None, seed: int | None = None,
                        target_id: str = '') -> AttackReport:
    """Attack report for samples the attacker already holds."""
    inferred = phi(predict_proba(clf, samples), phi_mode)
    report = AttackReport(inferred=inferred.probs, query_count=len(samples), mode=mode, phi_mode=phi_mode,
                          seed=seed, target_id=target_id, classifier_id=clf.model_id)
    if ground_truth is not None:
        truth = PropertyDistribution.coerce(ground_truth, clf.n_classes)
        report = report.model_copy(update={
            'ground_truth': truth.probs,
            'abs_diff': abs_diff(inferred, truth),
            'cosine': cosine_similarity(inferred, truth),
        })
    return report


def attack_full_bb(target, clf: PropertyClassifier, n_samples: int = AttackDefaults.FULL_BB_SAMPLES, seed: int = 0,
                   ground_truth=None, phi_mode: PhiMode = 'hard') -> AttackReport:
    """Infer the target's training property from ``n_samples`` blind samples."""
    if n_samples < 1:
        raise ValueError('Need at least one sample')
    samples = gan_engine.sample_blind(target, n_samples, seed)
    report = report_from_samples(samples, clf, 'full_bb', phi_mode, ground_truth, seed,
                                 getattr(target, 'model_id', ''))
    logger.debug("full_bb %s: inferred %s from %d samples", report.target_id, report.inferred, n_samples)
    return report


def attack_partial_bb(target, clf: PropertyClassifier, codes, ground_truth=None,
                      phi_mode: PhiMode = 'hard') -> AttackReport:
    samples = gan_engine.generate_from(target, codes)
    return report_from_samples(samples, clf, 'partial_bb', phi_mode, ground_truth, None,
                               getattr(target, 'model_id', ''))


def ensemble_loss(graph: ValueGraph, codes: Node, ensemble: ShadowEnsemble, clf: PropertyClassifier) -> Node:
    """Sum over shadows of the squared distance between soft phi and the shadow's property."""
    classifier = clf.network.bind(graph, trainable=False)
    total = None
    for member in ensemble.members:
        probs = proba_graph(classifier, member.generator.generate_graph(graph, codes))
        gap = phi_graph(graph, probs) - graph.constant(member.prop.as_array())
        term = graph.sum(graph.square(gap))
        total = term if total is None else total + term
    return total


def optimize_latent_set(ensemble: ShadowEnsemble, clf: PropertyClassifier,
                        set_size: int = AttackDefaults.OPTIMIZED_SET_SIZE, opt: OptimizerConfig | None = None,
                        iters: int = AttackDefaults.OPTIMIZER_ITERATIONS, seed: int = 0,
                        init: LatentCodeSet | None = None, patience: int = AttackDefaults.EARLY_STOP_PATIENCE,
                        min_delta: float = AttackDefaults.EARLY_STOP_MIN_DELTA) -> LatentCodeSet:
    """
    Gradient descent on the latent codes with every generator and the classifier
    frozen. Returns the best codes seen, so the final loss never exceeds the
    initial one. Stops early when the best loss improved by less than
    ``min_delta`` over the last ``patience`` iterations.
    """
    if init is None:
        if set_size < 1:
            raise ValueError('set_size must be >= 1')
        init = LatentCodeSet.draw(ensemble.prior, set_size, seed)
    if init.dim != ensemble.latent_dim:
        raise ShapeError('initial codes', ('n', ensemble.latent_dim), init.codes.shape)
    if iters == 0:
        return init

    opt = opt or OptimizerConfig(kind='adam', learning_rate=AttackDefaults.OPTIMIZER_LEARNING_RATE,
                                 beta1=0.9, beta2=0.999)
    optimizer = Optimizer(opt)
    codes = init.codes.copy()
    best_codes, best_loss = codes.copy(), np.inf
    trace, best_history, failed = [], [], False

    for iteration in range(iters + 1):
        graph = ValueGraph()
        z = graph.input(codes)
        loss = ensemble_loss(graph, z, ensemble, clf)
        value = float(loss.value)
        if not np.isfinite(value):
            logger.warning("Latent set loss became non-finite at iteration %d; keeping best-so-far", iteration)
            failed = True
            break
        trace.append(value)
        if value < best_loss:
            best_codes, best_loss = codes.copy(), value
        best_history.append(best_loss)
        if iteration == iters:
            break
        if iteration >= patience and best_history[iteration - patience] - best_loss < min_delta:
            logger.info("Latent set optimization stalled at iteration %d (loss %.6g)", iteration, best_loss)
            break
        try:
            optimizer.step({'codes': codes}, {'codes': graph.backward(loss)[z.id]})
        except NonFiniteError:
            logger.warning("Non-finite code gradient at iteration %d; keeping best-so-far", iteration)
            failed = True
            break

    result = LatentCodeSet(best_codes, 'optimized', trace, failed)
    logger.info("Optimized %d codes over %d shadows: loss %.6g -> %.6g, %s", len(result), len(ensemble),
                trace[0] if trace else float('nan'), best_loss, result.norm_stats())
    return result


# --- optimized vs random ---

class TargetModel(NamedTuple):
    generator: BlackBoxGenerator
    prop: PropertyDistribution
    model_id: str = ''


def win_ratio(optimized_errors, random_errors) -> float:
    """Fraction of paired comparisons the optimized arm wins strictly."""
    optimized_errors = np.asarray(optimized_errors, dtype=np.float64)
    random_errors = np.asarray(random_errors, dtype=np.float64)
    if optimized_errors.shape != random_errors.shape or optimized_errors.size == 0:
        raise ShapeError('paired errors', optimized_errors.shape, random_errors.shape)
    return float(np.mean(optimized_errors < random_errors))


def compare_modes(targets: list[TargetModel], clf: PropertyClassifier, ensemble: ShadowEnsemble,
                  sample_counts, trials: int = AttackDefaults.COMPARE_TRIALS, seed: int = 0,
                  opt: OptimizerConfig | None = None, iters: int = AttackDefaults.OPTIMIZER_ITERATIONS,
                  ) -> tuple[pd.DataFrame, pd.DataFrame]:
    """
    For each sample count, one optimized code set is attacked against every target
    and compared with ``trials`` blind attacks of the same size. Returns the ratio
    table and the per-(target, trial) comparisons.
    """
    if trials < 1:
        raise ValueError('trials must be >= 1')
    ratios, comparisons = [], []
    for count in sample_counts:
        codes = optimize_latent_set(ensemble, clf, set_size=count, opt=opt, iters=iters,
                                    seed=derive_seed(seed, 'codes', count))
        optimized_errors, random_errors = [], []
        for target_index, target in enumerate(targets):
            optimized = attack_partial_bb(target.generator, clf, codes, ground_truth=target.prop)
            for trial in range(trials):
                trial_seed = derive_seed(seed, 'compare', count, target_index, trial)
                blind = attack_full_bb(target.generator, clf, count, trial_seed, ground_truth=target.prop)
                optimized_errors.append(optimized.abs_diff)
                random_errors.append(blind.abs_diff)
                comparisons.append({'sample_count': count, 'target_id': target.model_id, 'trial': trial,
                                    'seed': trial_seed, 'optimized_error': optimized.abs_diff,
                                    'random_error': blind.abs_diff, 'optimized_inferred': optimized.inferred,
                                    'random_inferred': blind.inferred, 'p_real': target.prop.probs})
        ratios.append({'sample_count': count, 'ratio': win_ratio(optimized_errors, random_errors),
                       'comparisons': len(optimized_errors),
                       'mean_optimized_error': float(np.mean(optimized_errors)),
                       'mean_random_error': float(np.mean(random_errors))})
        logger.info("compare_modes %d samples: optimized wins %.3f", count, ratios[-1]['ratio'])
    return pd.DataFrame(ratios), pd.DataFrame(comparisons)
