"""
Experiment orchestration: configuration loading, the cached artifacts of a run
(data pools, property classifier, target and shadow GANs), the end-to-end attack
pipelines behind each figure analog, and tidy CSV result tables.

Every random stream is derived from the master seed with utils.derive_seed, and
job results are merged in submission order, so reruns are byte-identical.
"""
import hashlib
import logging
import os
import threading
from contextlib import contextmanager
from dataclasses import asdict, dataclass, fields, replace
from functools import cached_property
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np
import pandas as pd
from dotenv import dotenv_values

from ganprop import membership
from ganprop.attack import (AttackReport, LatentCodeSet, ShadowEnsemble, TargetModel, abs_diff, attack_full_bb,
                            attack_partial_bb, compare_modes, cosine_similarity, optimize_latent_set,
                            report_from_samples)
from ganprop.config import DomainDefaults, GanPresets
from ganprop.datagen import LabeledDataset, SplitResult, draw_with_property, rebalance, split, synth_domain
from ganprop.errors import StageError
from ganprop.gan_engine import TrainedGan, train_gan
from ganprop.property_classifier import (PropertyClassifier, classifier_spec, gate_release, reported_property,
                                         train_classifier)
from ganprop.schemas import (AttributeSpec, DenseNetworkSpec, ExperimentConfig, GanConfig, LatentPrior, MiaConfig,
                             OptimizerConfig, PropertyDistribution, SplitPlan)
from ganprop.utils import LocalJobPool, derive_seed, worker_count

logger = logging.getLogger(__name__)

# ids of samples synthesized outside the main dataset start here, so provenance checks stay meaningful
SHIFTED_ID_OFFSET = 10**9


# --- result tables ---

@dataclass(frozen=True)
class ResultRow:
    task: str
    figure: str
    mode: str
    target_id: str
    class_index: int
    p_real: float
    p_infer: float
    abs_diff: float = 0.0
    cosine: float = 0.0
    query_count: int = 0
    sample_count: int = 0
    shadow_count: int = 0
    set_size: int = 0
    start_point: int = 0
    trial: int = 0
    variant: str = ''
    auc: float = 0.0
    seed: int = 0


COLUMNS = [f.name for f in fields(ResultRow)]


class ResultTable:
    """Append-only rows of one run. Closing writes the CSV plus a sha256 checksum file."""

    def __init__(self, path=None):
        self.path = Path(path) if path is not None else None
        self.rows: list[ResultRow] = []
        self.digest: str | None = None
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self.rows)

    def append(self, *rows: ResultRow):
        with self._lock:
            if self.digest is not None:
                raise RuntimeError('ResultTable is closed')
            self.rows.extend(rows)

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(row) for row in self.rows], columns=COLUMNS)

    def close(self) -> str:
        with self._lock:
            if self.digest is not None:
                return self.digest
            payload = self.frame().to_csv(index=False).encode()
            self.digest = hashlib.sha256(payload).hexdigest()
            if self.path is not None:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                self.path.write_bytes(payload)
                self.path.with_name(self.path.name + '.sha256').write_text(f"{self.digest}  {self.path.name}\n")
            return self.digest


def vector_rows(task: str, figure: str, mode: str, target_id: str, p_real, p_infer, query_count: int, seed: int,
                **meta) -> list[ResultRow]:
    # binary properties are reported by their class-1 share, multi-class ones per class
    p_real, p_infer = np.asarray(p_real, dtype=np.float64), np.asarray(p_infer, dtype=np.float64)
    if 'abs_diff' not in meta:
        meta['abs_diff'] = abs_diff(p_infer, p_real)
    if 'cosine' not in meta:
        meta['cosine'] = cosine_similarity(p_infer, p_real)
    classes = [1] if len(p_infer) == 2 else range(len(p_infer))
    return [ResultRow(task, figure, mode, target_id, c, float(p_real[c]), float(p_infer[c]), query_count=query_count,
                      seed=int(seed), **meta) for c in classes]


def rows_from_report(report: AttackReport, task: str, figure: str, seed: int | None = None,
                     **meta) -> list[ResultRow]:
    return vector_rows(task, figure, report.mode, report.target_id, report.ground_truth, report.inferred,
                       report.query_count, report.seed if seed is None else seed, **meta)


# --- configuration ---

def parse_overrides(pairs) -> dict[str, str]:
    values = {}
    for pair in pairs:
        key, sep, value = pair.partition('=')
        if not sep or not key.strip():
            raise ValueError(f"Override '{pair}' is not of the form key=value")
        values[key.strip().lower()] = value.strip()
    return values


def load_experiment_config(path=None, overrides=()) -> ExperimentConfig:
    """
    Read a KEY=value experiment file (dotenv grammar, keys are case-insensitive
    ExperimentConfig fields, lists comma separated) and apply ``key=value`` overrides.
    """
    values = {}
    if path is not None:
        if not Path(path).is_file():
            raise FileNotFoundError(f"Experiment config {path} not found")
        for key, value in dotenv_values(path).items():
            if value is None:
                raise ValueError(f"Key '{key}' in {path} has no value")
            values[key.lower()] = value
    values.update(parse_overrides(overrides))
    if 'output_dir' not in values and os.environ.get('GANPROP_RUN_DIR'):
        values['output_dir'] = str(Path(os.environ['GANPROP_RUN_DIR']) / values.get('task', 'T1-analog'))
    if 'workers' not in values:
        values['workers'] = worker_count()
    return ExperimentConfig.model_validate(values)


def snapshot_config(config: ExperimentConfig, run_dir) -> Path:
    path = Path(run_dir) / 'config.json'
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(config.model_dump_json(indent=2))
    return path


def grid_point(config: ExperimentConfig, value: float) -> PropertyDistribution:
    """A grid value is the class-1 share for binary attributes. With more classes it
    is the share of class 0 and the rest is spread evenly."""
    if config.n_classes == 2:
        return PropertyDistribution.binary(value)
    rest = (1.0 - value) / (config.n_classes - 1)
    return PropertyDistribution(probs=(value, *([rest] * (config.n_classes - 1))))


def build_gan_config(config: ExperimentConfig, seed: int, generator_hidden=None) -> GanConfig:
    preset = GanPresets.SETTINGS[config.gan_preset]
    domain = DomainDefaults.SETTINGS[config.domain]
    leaky = f"leaky_relu({GanPresets.LEAKY_SLOPE})"
    hidden = tuple(generator_hidden or config.generator_hidden)
    hidden_activation = leaky if config.gan_preset == 'pggan' else 'relu'
    batch_size = config.batch_size or preset['batch_size']
    optimizer = OptimizerConfig(kind='adam', learning_rate=preset['learning_rate'], beta1=preset['beta1'],
                                beta2=preset['beta2'], batch_size=batch_size)
    return GanConfig(
        generator=DenseNetworkSpec(input_width=config.latent_dim, layer_widths=(*hidden, domain['sample_width']),
                                   activations=(*[hidden_activation] * len(hidden), domain['output_activation'])),
        discriminator=DenseNetworkSpec(input_width=domain['sample_width'],
                                       layer_widths=(*config.discriminator_hidden, 1),
                                       activations=(*[leaky] * len(config.discriminator_hidden),
                                                    'identity' if preset['loss'] == 'wgan_gp' else 'sigmoid')),
        prior=LatentPrior(kind=config.latent_prior, dim=config.latent_dim),
        loss=preset['loss'], gp_lambda=preset['gp_lambda'], n_critic=preset['n_critic'], batch_size=batch_size,
        generator_optimizer=optimizer, discriminator_optimizer=optimizer, train_steps=config.train_steps, seed=seed,
    )


@contextmanager
def stage(name: str):
    try:
        yield
    except StageError:
        raise
    except Exception as error:
        logger.error("Stage %s failed: %s", name, error)
        raise StageError(name, error) from error


# --- experiment workspace ---

class TrainedModel(NamedTuple):
    gan: TrainedGan
    data: LabeledDataset

    def as_target(self) -> TargetModel:
        return TargetModel(self.gan.black_box(), self.data.empirical_property(), self.gan.model_id)


class MiaRun(NamedTuple):
    scores: list[membership.MiaScore]
    config: MiaConfig
    inferred: PropertyDistribution
    true_property: PropertyDistribution


class Experiment:
    """Artifacts of one experiment, built on first use and shared by every figure."""

    def __init__(self, config: ExperimentConfig, run_dir=None, progress: bool = False):
        self.config = config
        self.run_dir = Path(run_dir or config.output_dir)
        self.progress = progress
        self.attribute = AttributeSpec(n_classes=config.n_classes)

    def seed(self, stage_name: str, *index: int) -> int:
        return derive_seed(self.config.master_seed, stage_name, *index)

    def _pool(self) -> LocalJobPool:
        return LocalJobPool(self.config.workers)

    def _label(self, text: str) -> str | None:
        return text if self.progress else None

    @cached_property
    def pools(self) -> SplitResult:
        c = self.config
        plan = SplitPlan(target=c.target_pool_size, shadow=c.shadow_pool_size, classifier=c.classifier_pool_size,
                         train_ratio=c.classifier_train_ratio)
        dataset = synth_domain(c.domain, plan.total, self.attribute, PropertyDistribution.uniform(c.n_classes),
                               self.seed('data'))
        pools = split(dataset, plan, self.seed('split'))
        for name, pool in zip(pools._fields, pools):
            pool.to_csv(self.run_dir / 'data' / f"{name}.csv")
        return pools

    def train_classifier(self, *seed_index: int, hidden=None, train: LabeledDataset | None = None,
                         test: LabeledDataset | None = None, model_id: str = 'classifier') -> PropertyClassifier:
        c = self.config
        train = self.pools.classifier_train if train is None else train
        test = self.pools.classifier_test if test is None else test
        spec = classifier_spec(train.width, c.n_classes, tuple(hidden or c.classifier_hidden))
        optimizer = OptimizerConfig(kind='adam', learning_rate=c.classifier_learning_rate, beta1=0.9, beta2=0.999,
                                    batch_size=c.classifier_batch_size)
        clf = train_classifier(train, test, spec, optimizer, c.classifier_epochs, self.seed('classifier', *seed_index),
                               exclude=self.pools.target, model_id=model_id)
        clf.save(self.run_dir / 'models' / model_id)
        return clf

    @cached_property
    def classifier(self) -> PropertyClassifier:
        return self.train_classifier(0)

    def _train_model(self, pool: LabeledDataset, size: int, prop: PropertyDistribution, draw_seed: int,
                     gan_seed: int, model_id: str, generator_hidden=None) -> TrainedModel:
        data = draw_with_property(pool, size, prop, draw_seed)
        gan = train_gan(data, build_gan_config(self.config, gan_seed, generator_hidden), model_id)
        if gan.failed:
            logger.warning("Model %s diverged after %d steps", model_id, len(gan.log))
        gan.save(self.run_dir / 'models' / model_id)
        return TrainedModel(gan, data)

    def train_models(self, kind: str, props: list[PropertyDistribution], per_property: int, tag: int,
                     generator_hidden=None, pool: LabeledDataset | None = None) -> list[TrainedModel]:
        """Train ``per_property`` GANs for each property. ``kind`` is 'target' or 'shadow'."""
        if pool is None:
            pool = self.pools.target if kind == 'target' else self.pools.shadow
        size = self.config.target_size if kind == 'target' else self.config.shadow_size
        jobs = [dict(pool=pool, size=size, prop=prop, draw_seed=self.seed(f"{kind}_draw", tag, i, j),
                     gan_seed=self.seed(f"{kind}_gan", tag, i, j), model_id=f"{kind}-{tag}-{i}-{j}",
                     generator_hidden=generator_hidden)
                for i, prop in enumerate(props) for j in range(per_property)]
        logger.info("Training %d %s GANs", len(jobs), kind)
        return self._pool().map(self._train_model, jobs, self._label(f"{kind} GANs"))

    @cached_property
    def grid(self) -> list[PropertyDistribution]:
        return [grid_point(self.config, value) for value in self.config.property_grid]

    @cached_property
    def targets(self) -> list[TrainedModel]:
        return self.train_models('target', self.grid, self.config.targets_per_property, 0)

    @cached_property
    def shadows(self) -> list[TrainedModel]:
        return self.train_models('shadow', self.grid, self.config.shadows_per_property, 0)

    @cached_property
    def ensemble(self) -> ShadowEnsemble:
        return ShadowEnsemble.from_gans([model.gan for model in self.shadows])

    def optimize_codes(self, ensemble: ShadowEnsemble, seed: int, init: LatentCodeSet | None = None,
                       name: str | None = None, set_size: int | None = None) -> LatentCodeSet:
        c = self.config
        opt = OptimizerConfig(kind='adam', learning_rate=c.opt_learning_rate, beta1=0.9, beta2=0.999)
        codes = optimize_latent_set(ensemble, self.classifier, set_size or c.set_size, opt, c.opt_iterations, seed,
                                    init)
        if codes.failed:
            logger.warning("Latent set optimization diverged; using best-so-far codes")
        if name:
            codes.save(self.run_dir / 'codes' / f"{name}.json")
        return codes

    @cached_property
    def main_codes(self) -> LatentCodeSet:
        return self.optimize_codes(self.ensemble, self.seed('codes', 0), name='main')

    @cached_property
    def multiclass(self) -> 'Experiment':
        """Companion 10-class digitlike experiment under the same master seed."""
        config = self.config.model_copy(update={'domain': 'digitlike', 'n_classes': 10})
        return Experiment(config, self.run_dir / 'multiclass', self.progress)

    @cached_property
    def multiclass_targets(self) -> list[TrainedModel]:
        multi = self.multiclass
        prop = PropertyDistribution(probs=multi.config.multiclass_property)
        return multi.train_models('target', [prop], multi.config.targets_per_property, 14)

    @cached_property
    def mia(self) -> MiaRun:
        c = self.config
        pools = self.pools
        uniform = PropertyDistribution.uniform(c.n_classes)
        members = draw_with_property(pools.target, c.mia_members, grid_point(c, c.mia_property), self.seed('mia', 0))
        rest = pools.target.subset(np.flatnonzero(~np.isin(pools.target.ids, members.ids)))
        # non-members come from the balanced population, not from the target's skewed distribution
        non_members = draw_with_property(rest, c.mia_nonmembers, uniform, self.seed('mia', 1))
        reference_data = draw_with_property(pools.shadow, c.mia_members, uniform, self.seed('reference_gan', 0))

        jobs = [dict(dataset=members, config=build_gan_config(c, self.seed('mia', 2)), model_id='mia-target'),
                dict(dataset=reference_data, config=build_gan_config(c, self.seed('reference_gan', 1)),
                     model_id='mia-reference')]
        target, reference = self._pool().map(train_gan, jobs, self._label('MIA GANs'))
        for gan in (target, reference):
            gan.save(self.run_dir / 'models' / gan.model_id)

        true_property = members.empirical_property()
        if c.mia_use_true_property:
            inferred = true_property
        else:
            inferred = attack_full_bb(target, self.classifier, c.full_bb_samples, self.seed('mia', 3)).inferred_property
        config = MiaConfig(k=c.mia_k, lambda_p=c.mia_lambda_p, attribute_properties=(inferred,))
        population = members.concat(non_members)
        flags = np.concatenate([np.ones(len(members), dtype=bool), np.zeros(len(non_members), dtype=bool)])
        scores = membership.score_population(target, reference, population.samples, flags, config,
                                             self.seed('mia', 4), labels=population.labels,
                                             sample_ids=population.ids)
        return MiaRun(scores, config, inferred, true_property)


# --- attack pipelines ---

def _full_bb_rows(exp: Experiment, table: ResultTable, figure: str, targets: list[TrainedModel] | None = None,
                  clf: PropertyClassifier | None = None, variant: str = '') -> list[AttackReport]:
    c = exp.config
    targets = exp.targets if targets is None else targets
    clf = clf or exp.classifier
    jobs = [dict(target=model.gan.black_box(), clf=clf, n_samples=c.full_bb_samples, seed=exp.seed('full_bb', index),
                 ground_truth=model.data.empirical_property(), phi_mode=c.phi_mode)
            for index, model in enumerate(targets)]
    reports = exp._pool().map(attack_full_bb, jobs, exp._label(f"{figure} full black-box"))
    for report in reports:
        table.append(*rows_from_report(report, c.task, figure, sample_count=report.query_count, variant=variant))
    return reports


def _partial_bb_rows(exp: Experiment, table: ResultTable, figure: str, codes: LatentCodeSet, codes_seed: int,
                     targets: list[TrainedModel] | None = None, **meta) -> list[AttackReport]:
    c = exp.config
    targets = exp.targets if targets is None else targets
    reports = []
    for model in targets:
        report = attack_partial_bb(model.gan.black_box(), exp.classifier, codes,
                                   ground_truth=model.data.empirical_property(), phi_mode=c.phi_mode)
        table.append(*rows_from_report(report, c.task, figure, seed=codes_seed, set_size=len(codes), **meta))
        reports.append(report)
    return reports


def _summary_of(table: ResultTable, figure: str) -> pd.DataFrame:
    frame = table.frame()
    return summarize([frame[frame['figure'] == figure]])


def run_task(config: ExperimentConfig, experiment: Experiment | None = None) -> ResultTable:
    """
    The standard protocol: pools, classifier, targets and shadows, then the full
    black-box attack on every target and the partial black-box attack with one
    optimized code set. A failing stage raises StageError after the rows gathered
    so far have been written.
    """
    exp = experiment or Experiment(config)
    snapshot_config(config, exp.run_dir)
    table = ResultTable(exp.run_dir / 'results.csv')
    try:
        with stage('data'):
            exp.pools
        with stage('classifier'):
            logger.info("Property classifier test accuracy %.4f", exp.classifier.test_accuracy)
        with stage('targets'):
            exp.targets
        with stage('shadows'):
            exp.ensemble
        with stage('full_bb'):
            _full_bb_rows(exp, table, 'run')
        with stage('optimize'):
            codes = exp.main_codes
        with stage('partial_bb'):
            _partial_bb_rows(exp, table, 'run', codes, exp.seed('codes', 0))
    finally:
        table.close()
    logger.info("Task %s finished with %d rows (sha256 %s)", config.task, len(table), table.digest)
    return table


def _figure_full_bb(exp: Experiment, table: ResultTable) -> pd.DataFrame:
    _full_bb_rows(exp, table, 'f4')
    return _summary_of(table, 'f4')


def _figure_sample_counts(exp: Experiment, table: ResultTable) -> pd.DataFrame:
    c = exp.config
    counts = [2 ** i for i in range(2, c.sample_count_max_exponent + 1)]
    jobs, meta = [], []
    for index, model in enumerate(exp.targets):
        for count in counts:
            for trial in range(c.sample_count_trials):
                jobs.append(dict(target=model.gan.black_box(), clf=exp.classifier, n_samples=count,
                                 seed=exp.seed('figure', 5, index, count, trial),
                                 ground_truth=model.data.empirical_property(), phi_mode=c.phi_mode))
                meta.append({'sample_count': count, 'trial': trial})
    reports = exp._pool().map(attack_full_bb, jobs, exp._label('f5 sample counts'))
    for report, extra in zip(reports, meta):
        table.append(*rows_from_report(report, c.task, 'f5', **extra))
    return _summary_of(table, 'f5')


def _figure_optimized(exp: Experiment, table: ResultTable) -> pd.DataFrame:
    _partial_bb_rows(exp, table, 'f6', exp.main_codes, exp.seed('codes', 0), shadow_count=len(exp.ensemble))
    return _summary_of(table, 'f6')


def _figure_set_sizes(exp: Experiment, table: ResultTable) -> pd.DataFrame:
    for size in exp.config.set_sizes:
        seed = exp.seed('figure', 6, size)
        codes = exp.optimize_codes(exp.ensemble, seed, name=f"f6-sizes-{size}", set_size=size)
        _partial_bb_rows(exp, table, 'f6-sizes', codes, seed, shadow_count=len(exp.ensemble))
    return _summary_of(table, 'f6-sizes')


def _figure_shadow_counts(exp: Experiment, table: ResultTable) -> pd.DataFrame:
    for count in exp.config.shadow_counts:
        if count > len(exp.ensemble):
            logger.warning("Only %d shadows trained, shadow count %d is capped", len(exp.ensemble), count)
        ensemble = exp.ensemble.subset(min(count, len(exp.ensemble)))
        seed = exp.seed('figure', 7, count)
        codes = exp.optimize_codes(ensemble, seed, name=f"f7-{count}")
        _partial_bb_rows(exp, table, 'f7', codes, seed, shadow_count=count)
    return _summary_of(table, 'f7')


def _figure_start_points(exp: Experiment, table: ResultTable) -> pd.DataFrame:
    for start in range(exp.config.start_points):
        seed = exp.seed('figure', 8, start)
        init = LatentCodeSet.draw(exp.ensemble.prior, exp.config.set_size, seed)
        codes = exp.optimize_codes(exp.ensemble, seed, init=init, name=f"f8-{start}")
        _partial_bb_rows(exp, table, 'f8', codes, seed, start_point=start)
    frame = table.frame()
    frame = frame[frame['figure'] == 'f8']
    per_start = frame.groupby(['start_point', 'p_real'], as_index=False)['p_infer'].mean()
    return per_start.rename(columns={'p_infer': 'mean_p_infer'})


def _figure_out_of_range(exp: Experiment, table: ResultTable) -> pd.DataFrame:
    c = exp.config
    outliers = exp.train_models('target', [grid_point(c, c.out_of_range_property)], c.out_of_range_targets, 9)
    _partial_bb_rows(exp, table, 'f9', exp.main_codes, exp.seed('codes', 0), targets=outliers)
    _full_bb_rows(exp, table, 'f9', targets=outliers)
    return _summary_of(table, 'f9')


def _figure_compare(exp: Experiment, table: ResultTable) -> pd.DataFrame:
    c = exp.config
    opt = OptimizerConfig(kind='adam', learning_rate=c.opt_learning_rate, beta1=0.9, beta2=0.999)
    targets = [model.as_target() for model in exp.targets]
    ratios, detail = compare_modes(targets, exp.classifier, exp.ensemble, c.compare_counts, c.compare_trials,
                                   exp.seed('figure', 10), opt, c.opt_iterations)
    for row in detail.itertuples(index=False):
        count, trial = int(row.sample_count), int(row.trial)
        table.append(*vector_rows(c.task, 'f10', 'full_bb', row.target_id, row.p_real, row.random_inferred, count,
                                  int(row.seed), sample_count=count, trial=trial))
        if trial == 0:
            codes_seed = derive_seed(exp.seed('figure', 10), 'codes', count)
            table.append(*vector_rows(c.task, 'f10', 'partial_bb', row.target_id, row.p_real, row.optimized_inferred,
                                      count, codes_seed, sample_count=count, set_size=count))
    return ratios


def _figure_shifted_classifier(exp: Experiment, table: ResultTable) -> pd.DataFrame:
    c = exp.config
    shifted = synth_domain(c.domain, c.classifier_pool_size, exp.attribute, PropertyDistribution.uniform(c.n_classes),
                           exp.seed('figure', 11), shift=c.classifier_shift)
    shifted = replace(shifted, ids=shifted.ids + SHIFTED_ID_OFFSET)
    halves = split(shifted, SplitPlan(target=0, shadow=0, classifier=len(shifted),
                                      train_ratio=c.classifier_train_ratio), exp.seed('figure', 11, 1))
    clf = exp.train_classifier(11, train=halves.classifier_train, test=halves.classifier_test,
                               model_id='classifier-shifted')
    _full_bb_rows(exp, table, 'f11', clf=clf, variant='shifted')
    # what each classifier reports when run directly on the target's own training data
    for variant, reporter in (('shifted', clf), ('reference', exp.classifier)):
        for model in exp.targets:
            reported = reported_property(reporter, model.data)
            table.append(*vector_rows(c.task, 'f11', 'reported', model.gan.model_id,
                                      model.data.empirical_property().probs, reported.probs, len(model.data), 0,
                                      variant=variant))
    return _summary_of(table, 'f11')


def _figure_classifier_variants(exp: Experiment, table: ResultTable) -> pd.DataFrame:
    for index, hidden in enumerate(exp.config.classifier_variants):
        name = '-'.join(str(width) for width in hidden)
        clf = exp.train_classifier(12, index, hidden=hidden, model_id=f"classifier-{name}")
        logger.info("Classifier variant %s: test accuracy %.4f", name, clf.test_accuracy)
        _full_bb_rows(exp, table, 'f12', clf=clf, variant=name)
    return _summary_of(table, 'f12')


def _figure_mismatched_shadows(exp: Experiment, table: ResultTable) -> pd.DataFrame:
    c = exp.config
    shadows = exp.train_models('shadow', exp.grid, c.shadows_per_property, 13,
                               generator_hidden=c.shadow_generator_hidden)
    ensemble = ShadowEnsemble.from_gans([model.gan for model in shadows])
    seed = exp.seed('figure', 13)
    codes = exp.optimize_codes(ensemble, seed, name='f13')
    _partial_bb_rows(exp, table, 'f13', codes, seed, shadow_count=len(ensemble), variant='mismatched')
    return _summary_of(table, 'f13')


def _figure_multiclass(exp: Experiment, table: ResultTable) -> pd.DataFrame:
    multi = exp.multiclass
    _full_bb_rows(multi, table, 'f14', targets=exp.multiclass_targets)
    return _summary_of(table, 'f14')


def _figure_mitigation(exp: Experiment, table: ResultTable) -> pd.DataFrame:
    multi = exp.multiclass
    c = multi.config
    uniform = PropertyDistribution.uniform(c.n_classes)
    targets = exp.multiclass_targets
    _full_bb_rows(multi, table, 'f15', targets=targets, variant='none')

    # the defender rebalances the training set with extra data, then retrains
    rebalanced = [rebalance(model.data, uniform, multi.pools.shadow, multi.seed('mitigation', index, 0))
                  for index, model in enumerate(targets)]
    jobs = [dict(dataset=data, config=build_gan_config(c, multi.seed('mitigation', index, 1)),
                 model_id=f"rebalanced-{index}") for index, data in enumerate(rebalanced)]
    retrained = multi._pool().map(train_gan, jobs, multi._label('rebalanced GANs'))
    for index, (model, gan) in enumerate(zip(targets, retrained)):
        gan.save(multi.run_dir / 'models' / gan.model_id)
        report = attack_full_bb(gan, multi.classifier, c.full_bb_samples, multi.seed('full_bb', index),
                                ground_truth=model.data.empirical_property(), phi_mode=c.phi_mode)
        table.append(*rows_from_report(report, c.task, 'f15', sample_count=report.query_count, variant='rebalance'))

    # the defender releases only a classifier-gated subset of its samples
    defender = multi.train_classifier(15, model_id='classifier-defender')
    for index, model in enumerate(targets):
        seed = multi.seed('mitigation', index, 2)
        released = gate_release(defender, model.gan.black_box().sample_blind(c.full_bb_samples, seed), uniform)
        report = report_from_samples(released.samples, multi.classifier, 'full_bb', c.phi_mode,
                                     model.data.empirical_property(), seed, model.gan.model_id)
        table.append(*rows_from_report(report, c.task, 'f15', sample_count=report.query_count, variant='gate'))
    return _summary_of(table, 'f15')


def _figure_membership(exp: Experiment, table: ResultTable) -> pd.DataFrame:
    c = exp.config
    run = exp.mia
    members = [score.member for score in run.scores]
    curves = []
    for enhanced, mode in ((False, 'mia_baseline'), (True, 'mia_enhanced')):
        statistics = [membership.decision_statistic(score, enhanced) for score in run.scores]
        value = membership.auc(statistics, members)
        table.append(*vector_rows(c.task, 'f16', mode, 'mia-target', run.true_property.probs, run.inferred.probs,
                                  run.config.k, exp.seed('mia', 4), auc=value))
        curve = membership.roc_points(statistics, members)
        curve.insert(0, 'curve', mode)
        curves.append(curve)
        logger.info("%s AUC %.4f", mode, value)
    membership.scores_frame(run.scores).to_csv(exp.run_dir / 'figures' / 'f16_scores.csv', index=False)
    return pd.concat(curves, ignore_index=True)


def _figure_sensitivity(exp: Experiment, table: ResultTable) -> pd.DataFrame:
    c = exp.config
    if c.n_classes != 2:
        raise ValueError('The sensitivity sweep is defined for binary attributes only')
    run = exp.mia
    base = run.inferred.proportion
    deviations = []
    for deviation in c.mia_sweep:
        if 0.0 <= base + deviation <= 1.0:
            deviations.append(deviation)
        else:
            logger.warning("Skipping deviation %g: inferred property %.3f would leave [0, 1]", deviation, base)
    # the uninformative 0.5 substitution always gets a row
    if not any(np.isclose(base + deviation, 0.5) for deviation in deviations):
        deviations.append(0.5 - base)
    sweep = membership.sensitivity_sweep(run.scores, run.config, base, deviations)
    for row in sweep.itertuples(index=False):
        table.append(*vector_rows(c.task, 'f17', 'mia_enhanced', 'mia-target', run.true_property.probs,
                                  PropertyDistribution.binary(row.inferred_property).probs, run.config.k,
                                  exp.seed('mia', 4), auc=row.enhanced_auc, variant=f"deviation={row.deviation:g}"))
    return sweep


FIGURES: dict[str, Callable[[Experiment, ResultTable], pd.DataFrame]] = {
    'f4': _figure_full_bb,
    'f5': _figure_sample_counts,
    'f6': _figure_optimized,
    'f6-sizes': _figure_set_sizes,
    'f7': _figure_shadow_counts,
    'f8': _figure_start_points,
    'f9': _figure_out_of_range,
    'f10': _figure_compare,
    'f11': _figure_shifted_classifier,
    'f12': _figure_classifier_variants,
    'f13': _figure_mismatched_shadows,
    'f14': _figure_multiclass,
    'f15': _figure_mitigation,
    'f16': _figure_membership,
    'f17': _figure_sensitivity,
}


class FigureOutput(NamedTuple):
    table: ResultTable
    plot: pd.DataFrame


def run_figure_analog(figure_id: str, config: ExperimentConfig, experiment: Experiment | None = None) -> FigureOutput:
    """Rows go to figures/<id>_rows.csv, the plot data to figures/<id>.csv."""
    if figure_id not in FIGURES:
        raise ValueError(f"Unknown figure '{figure_id}'; expected one of {', '.join(FIGURES)}")
    exp = experiment or Experiment(config)
    figures_dir = exp.run_dir / 'figures'
    figures_dir.mkdir(parents=True, exist_ok=True)
    snapshot_config(exp.config, exp.run_dir)
    table = ResultTable(figures_dir / f"{figure_id}_rows.csv")
    try:
        with stage(figure_id):
            plot = FIGURES[figure_id](exp, table)
            plot.to_csv(figures_dir / f"{figure_id}.csv", index=False)
    finally:
        table.close()
    return FigureOutput(table, plot)


# --- summaries ---

GROUP_KEYS = ['task', 'figure', 'mode', 'variant', 'sample_count', 'shadow_count', 'set_size', 'class_index', 'p_real']


def summarize(tables) -> pd.DataFrame:
    """
    Per-group mean, population variance and quartiles of the inferred property,
    plus the mean absolute difference and the deviation from the benchmark line
    (mean inferred minus real). Accepts ResultTables, DataFrames or CSV paths.
    """
    frames = []
    for table in tables:
        if isinstance(table, ResultTable):
            frame = table.frame()
        elif isinstance(table, (str, Path)):
            frame = pd.read_csv(table, float_precision='round_trip', keep_default_na=False,
                                dtype={'variant': str, 'target_id': str})
        else:
            frame = table
        if len(frame):
            frames.append(frame)
    if not frames:
        raise ValueError('Nothing to summarize: every table is empty')
    frame = pd.concat(frames, ignore_index=True)
    keys = [key for key in GROUP_KEYS if key in frame.columns]
    summary = frame.groupby(keys, dropna=False, sort=True).agg(
        count=('p_infer', 'count'),
        mean=('p_infer', 'mean'),
        var=('p_infer', lambda s: s.var(ddof=0)),
        q1=('p_infer', lambda s: s.quantile(0.25)),
        median=('p_infer', 'median'),
        q3=('p_infer', lambda s: s.quantile(0.75)),
        mean_abs_diff=('abs_diff', 'mean'),
    ).reset_index()
    summary['benchmark_deviation'] = summary['mean'] - summary['p_real']
    return summary
