"""
Reconstruction-based membership inference against a generator, optionally
calibrated by a reference generator and shifted by an inferred training-set property.

A sample x is called a member when its calibrated reconstruction error
L_cal = L(x, R(x|G_target)) - L(x, R(x|G_reference)) falls below a threshold.
The enhanced attack raises that threshold by lambda_p * mean_i(2 * P_i - 1), where
P_i is the inferred share, in the target's training data, of the class x belongs to.
"""
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import pandas as pd
from sklearn.metrics import roc_auc_score, roc_curve
from sklearn.neighbors import NearestNeighbors
from tqdm import tqdm

from ganprop import gan_engine
from ganprop.errors import ShapeError
from ganprop.property_classifier import PropertyClassifier, predict_hard
from ganprop.schemas import MiaConfig, PropertyDistribution

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MiaScore:
    sample_id: int
    raw_error: float
    reference_error: float
    calibrated_error: float
    enhancement: float = 0.0
    member: bool = False
    attribute_classes: tuple[int, ...] = ()


def _distance(diff: np.ndarray, kind: str) -> np.ndarray:
    squared = np.sum(diff * diff, axis=-1)
    return squared if kind == 'sqeuclidean' else np.sqrt(squared)


def reconstruct(gan, x, k: int, seed: int, distance: str = 'sqeuclidean') -> tuple[np.ndarray, float]:
    """Nearest of ``k`` blind samples to ``x`` and its distance."""
    if k < 1:
        raise ValueError('Reconstruction budget k must be >= 1')
    x = np.asarray(x, dtype=np.float64)
    candidates = gan_engine.sample_blind(gan, k, seed)
    if x.shape != candidates.shape[1:]:
        raise ShapeError('query sample', candidates.shape[1:], x.shape)
    distances = _distance(candidates - x, distance)
    nearest = int(np.argmin(distances))
    return candidates[nearest], float(distances[nearest])


def calibrated_error(x, target, reference, k: int, seed: int, distance: str = 'sqeuclidean',
                     sample_id: int = 0, member: bool = False) -> MiaScore:
    # both reconstructions use the same k and seed
    _, raw = reconstruct(target, x, k, seed, distance)
    _, ref = reconstruct(reference, x, k, seed, distance)
    return MiaScore(sample_id, raw, ref, raw - ref, member=member)


def enhancement_term(attribute_classes, config: MiaConfig) -> float:
    """lambda_p * mean over attributes of (2 * P_i - 1), P_i picked by x's own class."""
    if config.n_attributes == 0:
        raise ValueError('Enhanced decision needs at least one attribute property')
    if len(attribute_classes) != config.n_attributes:
        raise ValueError(f"Expected {config.n_attributes} attribute classes, got {len(attribute_classes)}")
    shifts = [2.0 * prop.probs[int(cls)] - 1.0 for cls, prop in zip(attribute_classes, config.attribute_properties)]
    return config.lambda_p * float(np.mean(shifts))


def decide(score: MiaScore, config: MiaConfig, enhanced: bool = False) -> bool:
    if config.epsilon is None:
        raise ValueError('A decision needs a threshold epsilon')
    threshold = config.epsilon
    if enhanced:
        threshold += enhancement_term(score.attribute_classes, config)
    return score.calibrated_error < threshold


def decision_statistic(score: MiaScore, enhanced: bool = False) -> float:
    """Signed margin: member iff statistic > -epsilon, so sweeping epsilon traces the ROC."""
    return (score.enhancement if enhanced else 0.0) - score.calibrated_error


def _check_labels(members) -> np.ndarray:
    members = np.asarray(members, dtype=bool)
    if members.all() or not members.any():
        raise ValueError('AUC needs both members and non-members')
    return members


def auc(statistics, members) -> float:
    """Probability a random member's statistic exceeds a random non-member's, ties counted half."""
    return float(roc_auc_score(_check_labels(members), np.asarray(statistics, dtype=np.float64)))


def roc_points(statistics, members) -> pd.DataFrame:
    fpr, tpr, thresholds = roc_curve(_check_labels(members), np.asarray(statistics, dtype=np.float64))
    return pd.DataFrame({'fpr': fpr, 'tpr': tpr, 'threshold': thresholds})


def rescore(scores: list[MiaScore], config: MiaConfig) -> list[MiaScore]:
    """Recompute every enhancement term under ``config``'s attribute properties."""
    return [replace(score, enhancement=enhancement_term(score.attribute_classes, config)) for score in scores]


def score_population(target, reference, samples, members, config: MiaConfig, seed: int, labels=None,
                     clf: PropertyClassifier | None = None, sample_ids=None) -> list[MiaScore]:
    """
    Calibrated scores for a whole population. Each generator is queried once for
    ``config.k`` samples (same seed for both), so every score equals
    ``calibrated_error`` with that seed. Attribute classes come from ``labels``
    (one column per attribute) or, failing that, from the classifier.
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    members = np.asarray(members, dtype=bool)
    if len(members) != len(samples):
        raise ShapeError('member flags', len(samples), len(members))
    if labels is None and clf is not None:
        labels = predict_hard(clf, samples)
    classes = None if labels is None else np.asarray(labels, dtype=np.int64).reshape(len(samples), -1)
    sample_ids = np.arange(len(samples)) if sample_ids is None else np.asarray(sample_ids)

    errors = []
    for gan in (target, reference):
        pool = gan_engine.sample_blind(gan, config.k, seed)
        if pool.shape[1] != samples.shape[1]:
            raise ShapeError('generated sample width', samples.shape[1], pool.shape[1])
        index = NearestNeighbors(n_neighbors=1, algorithm='ball_tree').fit(pool).kneighbors(samples)[1][:, 0]
        # exact distance to the neighbour the tree found
        errors.append(_distance(pool[index] - samples, config.distance))
    raw, ref = errors

    scores = []
    for i in tqdm(range(len(samples)), desc='mia', disable=len(samples) < 1000, leave=False):
        attribute_classes = () if classes is None else tuple(int(c) for c in classes[i])
        enhancement = enhancement_term(attribute_classes, config) if config.n_attributes and classes is not None \
            else 0.0
        scores.append(MiaScore(int(sample_ids[i]), float(raw[i]), float(ref[i]), float(raw[i] - ref[i]),
                               enhancement, bool(members[i]), attribute_classes))
    return scores


def scores_frame(scores: list[MiaScore]) -> pd.DataFrame:
    return pd.DataFrame({
        'sample_id': [s.sample_id for s in scores],
        'raw_error': [s.raw_error for s in scores],
        'reference_error': [s.reference_error for s in scores],
        'calibrated_error': [s.calibrated_error for s in scores],
        'enhancement': [s.enhancement for s in scores],
        'margin': [decision_statistic(s, enhanced=True) for s in scores],
        'member': [s.member for s in scores],
    })


def evaluate(scores: list[MiaScore]) -> dict[str, float]:
    members = [s.member for s in scores]
    return {
        'baseline_auc': auc([decision_statistic(s) for s in scores], members),
        'enhanced_auc': auc([decision_statistic(s, enhanced=True) for s in scores], members),
    }


def sensitivity_sweep(scores: list[MiaScore], config: MiaConfig, base_property: float, deviations,
                      path=None) -> pd.DataFrame:
    """
    Enhanced AUC when the inferred (binary) property is off by each deviation.
    Every substituted value must lie in [0, 1]; a substituted 0.5 reproduces the baseline.
    """
    substituted = [float(base_property + deviation) for deviation in deviations]
    out_of_range = [value for value in substituted if not -1e-12 <= value <= 1.0 + 1e-12]
    if out_of_range:
        raise ValueError(f"Substituted properties {out_of_range} fall outside [0, 1]")
    members = [s.member for s in scores]
    baseline = auc([decision_statistic(s) for s in scores], members)
    rows = []
    for deviation, inferred in zip(deviations, substituted):
        inferred = min(max(inferred, 0.0), 1.0)
        swept = config.model_copy(update={'attribute_properties': (PropertyDistribution.binary(inferred),)})
        enhanced = auc([decision_statistic(s, enhanced=True) for s in rescore(scores, swept)], members)
        rows.append({'deviation': float(deviation), 'inferred_property': inferred,
                     'baseline_auc': baseline, 'enhanced_auc': enhanced})
    frame = pd.DataFrame(rows)
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False)
    return frame
