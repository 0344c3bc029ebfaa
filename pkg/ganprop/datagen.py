"""
Synthetic datasets with an exactly controlled attribute distribution, the
three-way target / shadow / classifier split, shadow-set draws, and the
rebalancing mitigation.
"""
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import pandas as pd

from ganprop.config import DomainDefaults
from ganprop.errors import ClassDeficitError, ShapeError
from ganprop.schemas import DOMAIN_TAGS, AttributeSpec, PropertyDistribution, SplitPlan

logger = logging.getLogger(__name__)

# 8x8 glyphs for the digit-like domain, '#' = ink
DIGIT_GLYPHS = (
    ("..####..", ".#....#.", "#......#", "#......#", "#......#", "#......#", ".#....#.", "..####.."),
    ("...##...", "..###...", ".#.##...", "...##...", "...##...", "...##...", "...##...", ".######."),
    ("..####..", ".#....#.", "......#.", ".....#..", "....#...", "...#....", "..#.....", ".######."),
    (".#####..", "......#.", "......#.", "..####..", "......#.", "......#.", "......#.", ".#####.."),
    ("....##..", "...#.#..", "..#..#..", ".#...#..", "########", ".....#..", ".....#..", ".....#.."),
    (".######.", ".#......", ".#......", ".#####..", "......#.", "......#.", ".#....#.", "..####.."),
    ("..####..", ".#......", "#.......", "#.####..", "##....#.", "#......#", ".#....#.", "..####.."),
    ("########", "......#.", ".....#..", "....#...", "...#....", "...#....", "...#....", "...#...."),
    ("..####..", ".#....#.", ".#....#.", "..####..", ".#....#.", "#......#", ".#....#.", "..####.."),
    ("..####..", ".#....#.", "#......#", ".#....##", "..####.#", ".......#", "......#.", "..####.."),
)


def digit_templates() -> np.ndarray:
    """(10, 64) array of 0/1 pixels."""
    return np.array([[1.0 if pixel == '#' else 0.0 for row in glyph for pixel in row] for glyph in DIGIT_GLYPHS])


def largest_remainder(total: int, probs) -> np.ndarray:
    """Integer class counts summing to ``total`` that follow ``probs`` as closely as
    possible. Leftover units go to the largest fractional parts, lower class first on ties."""
    quotas = np.asarray(probs, dtype=np.float64) * total
    counts = np.floor(quotas).astype(np.int64)
    remainder = int(total - counts.sum())
    if remainder > 0:
        order = sorted(range(len(quotas)), key=lambda c: (-(quotas[c] - counts[c]), c))
        for c in order[:remainder]:
            counts[c] += 1
    return counts


@dataclass
class LabeledDataset:
    samples: np.ndarray
    labels: np.ndarray
    domain: str
    attribute: AttributeSpec
    ids: np.ndarray

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim == 1:
            self.samples = self.samples.reshape(len(self.labels), -1)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if len(self.ids) != len(self.labels):
            raise ShapeError('dataset ids', len(self.labels), len(self.ids))

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def width(self) -> int:
        return self.samples.shape[1]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.attribute.n_classes)

    def empirical_property(self) -> PropertyDistribution:
        return PropertyDistribution.from_counts(self.class_counts())

    def subset(self, index) -> 'LabeledDataset':
        index = np.asarray(index, dtype=np.int64)
        return LabeledDataset(self.samples[index], self.labels[index], self.domain, self.attribute, self.ids[index])

    def concat(self, other: 'LabeledDataset') -> 'LabeledDataset':
        return LabeledDataset(np.vstack([self.samples, other.samples]),
                              np.concatenate([self.labels, other.labels]),
                              self.domain, self.attribute, np.concatenate([self.ids, other.ids]))

    def class_indices(self, label: int) -> np.ndarray:
        return np.flatnonzero(self.labels == label)

    # --- persistence ---

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        frame = pd.DataFrame(self.samples, columns=[f"x{i}" for i in range(self.width)])
        frame['label'] = self.labels
        frame.to_csv(path, index=False)
        sidecar = {
            'domain': self.domain,
            'attribute': self.attribute.model_dump(mode='json'),
            'empirical_property': list(self.empirical_property().probs) if len(self) else None,
            'ids': self.ids.tolist(),
        }
        path.with_suffix('.json').write_text(json.dumps(sidecar))
        return path

    @classmethod
    def from_csv(cls, path) -> 'LabeledDataset':
        path = Path(path)
        frame = pd.read_csv(path, float_precision='round_trip')
        sidecar = json.loads(path.with_suffix('.json').read_text())
        labels = frame.pop('label').to_numpy()
        return cls(frame.to_numpy(dtype=np.float64), labels, sidecar['domain'],
                   AttributeSpec.model_validate(sidecar['attribute']), sidecar['ids'])


def _check_property(attribute: AttributeSpec, prop: PropertyDistribution):
    if prop.n_classes != attribute.n_classes:
        raise ShapeError('property length', attribute.n_classes, prop.n_classes)


def _mixture_centers(n_classes: int, shift: float) -> np.ndarray:
    angles = 2.0 * np.pi * np.arange(n_classes) / n_classes + shift
    return DomainDefaults.MIXTURE_RADIUS * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def _tabular_tables(n_classes: int, shift: float) -> list[np.ndarray]:
    # Fixed class-conditional categorical tables; shift blends them toward uniform.
    rng = np.random.default_rng(DomainDefaults.TABULAR_TABLE_SEED)
    tables = []
    for cardinality in DomainDefaults.TABULAR_FIELDS:
        table = rng.dirichlet(np.full(cardinality, 0.7), size=n_classes)
        mix = min(shift, 1.0)
        tables.append((1.0 - mix) * table + mix / cardinality)
    return tables


def _synth_class(domain: str, label: int, count: int, n_classes: int, shift: float,
                 rng: np.random.Generator) -> np.ndarray:
    if domain == 'mixture2d':
        center = _mixture_centers(n_classes, shift)[label]
        sigma = DomainDefaults.MIXTURE_SIGMA * (1.0 + shift)
        return np.clip(center + sigma * rng.standard_normal((count, 2)), -1.0, 1.0)
    if domain == 'digitlike':
        template = digit_templates()[label]
        flip = min(DomainDefaults.DIGIT_FLIP_PROBABILITY * (1.0 + shift), 0.5)
        flips = rng.random((count, template.size)) < flip
        return 2.0 * np.where(flips, 1.0 - template, template) - 1.0
    columns = []
    for table in _tabular_tables(n_classes, shift):
        cardinality = table.shape[1]
        choices = rng.choice(cardinality, size=count, p=table[label])
        columns.append(np.eye(cardinality)[choices])
    return np.hstack(columns) if count else np.zeros((0, sum(DomainDefaults.TABULAR_FIELDS)))


def synth_domain(domain: str, n: int, attribute: AttributeSpec, prop: PropertyDistribution, seed: int,
                 shift: float = 0.0) -> LabeledDataset:
    """
    Draw ``n`` samples whose class counts realise ``prop`` exactly (largest
    remainder). ``shift`` > 0 perturbs the domain (rotated blob centres and wider
    noise, noisier glyphs, flattened tabular tables) to emulate a classifier
    trained on a different distribution.
    """
    if domain not in DOMAIN_TAGS:
        raise ValueError(f"Unknown domain '{domain}'")
    _check_property(attribute, prop)
    if n < attribute.n_classes:
        raise ValueError(f"Need at least {attribute.n_classes} samples, got {n}")
    if domain == 'digitlike' and attribute.n_classes > 10:
        raise ValueError('digitlike supports at most 10 classes')

    rng = np.random.default_rng(seed)
    counts = largest_remainder(n, prop.probs)
    samples = [_synth_class(domain, label, int(count), attribute.n_classes, shift, rng)
               for label, count in enumerate(counts)]
    labels = np.repeat(np.arange(attribute.n_classes), counts)
    order = rng.permutation(n)
    return LabeledDataset(np.vstack(samples)[order], labels[order], domain, attribute, np.arange(n))


class SplitResult(NamedTuple):
    target: LabeledDataset
    shadow: LabeledDataset
    classifier_train: LabeledDataset
    classifier_test: LabeledDataset


def split(dataset: LabeledDataset, plan: SplitPlan, seed: int) -> SplitResult:
    """Three disjoint pools (target, shadow, classifier), each keeping the dataset's
    class proportions to within one sample; the classifier pool is then split
    train:test by ``plan.train_ratio``."""
    if plan.total > len(dataset):
        raise ClassDeficitError(f"Split plan needs {plan.total} samples, dataset has {len(dataset)}",
                                {}, {})
    prop = dataset.empirical_property()
    pool_counts = [largest_remainder(size, prop.probs) for size in (plan.target, plan.shadow, plan.classifier)]
    required = np.sum(pool_counts, axis=0)
    available = dataset.class_counts()
    deficits = {c: int(required[c] - available[c]) for c in range(len(required)) if required[c] > available[c]}
    if deficits:
        raise ClassDeficitError('Split plan exceeds the dataset', deficits,
                                {c: int(required[c]) for c in range(len(required))})

    rng = np.random.default_rng(seed)
    pools = [[], [], []]
    for label in range(dataset.attribute.n_classes):
        shuffled = rng.permutation(dataset.class_indices(label))
        start = 0
        for pool, counts in zip(pools, pool_counts):
            pool.append(shuffled[start:start + counts[label]])
            start += counts[label]
    target, shadow, classifier = (dataset.subset(np.sort(np.concatenate(pool))) for pool in pools)

    n_train = int(round(plan.train_ratio * len(classifier)))
    train_counts = largest_remainder(n_train, classifier.empirical_property().probs) if len(classifier) else []
    train_index, test_index = [], []
    for label, count in enumerate(train_counts):
        shuffled = rng.permutation(classifier.class_indices(label))
        train_index.append(shuffled[:count])
        test_index.append(shuffled[count:])
    if len(classifier):
        train = classifier.subset(np.sort(np.concatenate(train_index)))
        test = classifier.subset(np.sort(np.concatenate(test_index)))
    else:
        train = test = classifier
    return SplitResult(target, shadow, train, test)


def draw_with_property(pool: LabeledDataset, size: int, prop: PropertyDistribution, seed: int) -> LabeledDataset:
    """Sample ``size`` items without replacement with exact class counts."""
    _check_property(pool.attribute, prop)
    counts = largest_remainder(size, prop.probs)
    available = pool.class_counts()
    deficits = {c: int(counts[c] - available[c]) for c in range(len(counts)) if counts[c] > available[c]}
    if deficits:
        raise ClassDeficitError(f"Pool cannot supply {size} samples at {list(prop.probs)}", deficits,
                                {c: int(counts[c]) for c in range(len(counts))})
    rng = np.random.default_rng(seed)
    chosen = [rng.choice(pool.class_indices(label), size=int(count), replace=False)
              for label, count in enumerate(counts)]
    index = np.concatenate(chosen)
    return pool.subset(index[rng.permutation(len(index))])


def rebalance(dataset: LabeledDataset, fake_property: PropertyDistribution, reservoir: LabeledDataset,
              seed: int) -> LabeledDataset:
    """
    Additive-only rebalancing: append the fewest reservoir samples that make the
    dataset's class distribution equal ``fake_property`` (within one per class).
    Reservoir samples already present in the dataset are never reused.
    """
    _check_property(dataset.attribute, fake_property)
    current = dataset.class_counts()
    fake = fake_property.as_array()
    if np.any((fake == 0) & (current > 0)):
        raise ClassDeficitError('Cannot remove samples to reach a zero-probability class', {})

    upper = int(np.ceil(max(current[c] / fake[c] for c in range(len(fake)) if fake[c] > 0))) + len(fake) + 1
    feasible = [total for total in range(len(dataset), max(upper, len(dataset)) + 1)
                if np.all(largest_remainder(total, fake) >= current)]
    if not feasible:
        raise ClassDeficitError('No additive rebalancing reaches the requested distribution', {})
    # within one sample per class of the first feasible size, an exact split wins
    window = [total for total in feasible if total <= feasible[0] + len(fake)]
    exact = [total for total in window if np.allclose(fake * total, np.round(fake * total))]
    target_counts = largest_remainder((exact or window)[0], fake)

    extra = target_counts - current
    if not extra.any():
        return dataset

    fresh = reservoir.subset(np.flatnonzero(~np.isin(reservoir.ids, dataset.ids)))
    available = fresh.class_counts()
    deficits = {c: int(extra[c] - available[c]) for c in range(len(extra)) if extra[c] > available[c]}
    if deficits:
        raise ClassDeficitError('Reservoir too small for rebalancing', deficits,
                                {c: int(extra[c]) for c in range(len(extra))})

    rng = np.random.default_rng(seed)
    added = np.concatenate([rng.choice(fresh.class_indices(label), size=int(count), replace=False)
                            for label, count in enumerate(extra)])
    logger.info("Rebalanced %d samples to %s by adding %s", len(dataset), list(fake_property.probs), extra.tolist())
    return dataset.concat(fresh.subset(added))
