"""
Command line entry point. Every subcommand reads the same experiment
configuration (``--config`` file plus ``--set key=value`` overrides), so a run can
be rebuilt stage by stage or all at once.

Exit codes: 0 success, 1 a stage failed, 2 bad usage or invalid input.
"""
import functools
import json
import logging
import os
import sys
from pathlib import Path

import click
from dotenv import load_dotenv
from pydantic import ValidationError

from ganprop import harness
from ganprop.attack import (LatentCodeSet, ShadowEnsemble, ShadowMember, attack_full_bb, attack_partial_bb,
                            optimize_latent_set)
from ganprop.datagen import LabeledDataset, split, synth_domain
from ganprop.errors import StageError
from ganprop.gan_engine import BlackBoxGenerator, saved_training_property, train_gan
from ganprop.property_classifier import PropertyClassifier, classifier_spec, train_classifier
from ganprop.schemas import AttributeSpec, OptimizerConfig, PropertyDistribution, SplitPlan

logger = logging.getLogger(__name__)


def handle_errors(command):
    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except StageError as error:
            click.echo(f"❌ {error}", err=True)
            sys.exit(1)
        except ValidationError as error:
            click.echo(f"❌ [config] {error.errors()[0]['loc']}: {error.errors()[0]['msg']}", err=True)
            sys.exit(2)
        except (ValueError, FileNotFoundError) as error:
            click.echo(f"❌ [{command.__name__.replace('_', '-')}] {error}", err=True)
            sys.exit(2)
    return wrapper


def config_options(command):
    command = click.option('--set', 'overrides', multiple=True, metavar='KEY=VALUE',
                           help='Override one experiment setting.')(command)
    command = click.option('--config', 'config_path', type=click.Path(dir_okay=False),
                           help='KEY=value experiment file.')(command)
    return command


def _property(text: str | None, n_classes: int) -> PropertyDistribution | None:
    if text is None:
        return None
    values = [float(item) for item in text.split(',')]
    return PropertyDistribution.coerce(values[0] if len(values) == 1 else values, n_classes)


def _write_json(path: str | None, document: dict):
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(document, indent=2))


@click.group()
def main():
    """Property inference experiments against GAN generators."""
    load_dotenv()
    logging.basicConfig(level=os.environ.get('GANPROP_LOG_LEVEL', 'INFO').upper(),
                        format='%(asctime)s %(levelname)s %(name)s: %(message)s')


@main.command()
@config_options
@click.option('--n', 'count', type=int, required=True, help='Number of samples.')
@click.option('--property', 'prop', required=True, help='Class-1 share, or comma separated class shares.')
@click.option('--seed', type=int, default=0)
@click.option('--shift', type=float, default=0.0, help='Distribution shift of the domain.')
@click.option('--out', required=True, type=click.Path(dir_okay=False))
@handle_errors
def synth(config_path, overrides, count, prop, seed, shift, out):
    """Synthesize a labeled dataset with exact class counts."""
    config = harness.load_experiment_config(config_path, overrides)
    attribute = AttributeSpec(n_classes=config.n_classes)
    dataset = synth_domain(config.domain, count, attribute, _property(prop, config.n_classes), seed, shift)
    dataset.to_csv(out)
    click.echo(f"✅ {len(dataset)} {config.domain} samples -> {out}")


@main.command('split')
@config_options
@click.option('--dataset', required=True, type=click.Path(exists=True, dir_okay=False))
@click.option('--seed', type=int, default=0)
@click.option('--out-dir', required=True, type=click.Path(file_okay=False))
@handle_errors
def split_command(config_path, overrides, dataset, seed, out_dir):
    """Split a dataset into target, shadow and classifier pools."""
    config = harness.load_experiment_config(config_path, overrides)
    plan = SplitPlan(target=config.target_pool_size, shadow=config.shadow_pool_size,
                     classifier=config.classifier_pool_size, train_ratio=config.classifier_train_ratio)
    pools = split(LabeledDataset.from_csv(dataset), plan, seed)
    for name, pool in zip(pools._fields, pools):
        pool.to_csv(Path(out_dir) / f"{name}.csv")
        click.echo(f"✅ {name}: {len(pool)} samples")


@main.command('train-gan')
@config_options
@click.option('--data', required=True, type=click.Path(exists=True, dir_okay=False))
@click.option('--seed', type=int, default=0)
@click.option('--model-id', default='')
@click.option('--out', required=True, type=click.Path(file_okay=False))
@handle_errors
def train_gan_command(config_path, overrides, data, seed, model_id, out):
    """Train one GAN with the configured preset."""
    config = harness.load_experiment_config(config_path, overrides)
    gan = train_gan(LabeledDataset.from_csv(data), harness.build_gan_config(config, seed), model_id or Path(out).name)
    gan.save(out)
    if gan.failed:
        click.echo(f"⚠️ Training diverged after {len(gan.log)} steps; partial model saved to {out}", err=True)
        sys.exit(1)
    click.echo(f"✅ GAN trained for {len(gan.log)} steps -> {out}")


@main.command('train-clf')
@config_options
@click.option('--train', 'train_path', required=True, type=click.Path(exists=True, dir_okay=False))
@click.option('--test', 'test_path', required=True, type=click.Path(exists=True, dir_okay=False))
@click.option('--exclude', 'exclude_path', type=click.Path(exists=True, dir_okay=False),
              help='Pool the classifier must not share samples with.')
@click.option('--seed', type=int, default=0)
@click.option('--out', required=True, type=click.Path(file_okay=False))
@handle_errors
def train_clf_command(config_path, overrides, train_path, test_path, exclude_path, seed, out):
    """Train the property classifier."""
    config = harness.load_experiment_config(config_path, overrides)
    train = LabeledDataset.from_csv(train_path)
    exclude = LabeledDataset.from_csv(exclude_path) if exclude_path else None
    optimizer = OptimizerConfig(kind='adam', learning_rate=config.classifier_learning_rate, beta1=0.9, beta2=0.999,
                                batch_size=config.classifier_batch_size)
    clf = train_classifier(train, LabeledDataset.from_csv(test_path),
                           classifier_spec(train.width, config.n_classes, config.classifier_hidden), optimizer,
                           config.classifier_epochs, seed, exclude=exclude, model_id=Path(out).name)
    clf.save(out)
    click.echo(f"✅ Classifier test accuracy {clf.test_accuracy:.4f} -> {out}")


@main.command('attack-full')
@config_options
@click.option('--target', required=True, type=click.Path(exists=True, file_okay=False))
@click.option('--classifier', required=True, type=click.Path(exists=True, file_okay=False))
@click.option('--samples', type=int, default=None, help='Blind samples to draw.')
@click.option('--seed', type=int, default=0)
@click.option('--truth', default=None, help='Known property, for the error report.')
@click.option('--out', type=click.Path(dir_okay=False))
@handle_errors
def attack_full(config_path, overrides, target, classifier, samples, seed, truth, out):
    """Full black-box attack from blind samples."""
    config = harness.load_experiment_config(config_path, overrides)
    clf = PropertyClassifier.load(classifier)
    report = attack_full_bb(BlackBoxGenerator.load(target), clf, samples or config.full_bb_samples, seed,
                            _property(truth, clf.n_classes), config.phi_mode)
    _write_json(out, report.model_dump(mode='json'))
    click.echo(report.model_dump_json(indent=2))


@main.command('attack-partial')
@config_options
@click.option('--target', required=True, type=click.Path(exists=True, file_okay=False))
@click.option('--classifier', required=True, type=click.Path(exists=True, file_okay=False))
@click.option('--codes', required=True, type=click.Path(exists=True, dir_okay=False))
@click.option('--truth', default=None)
@click.option('--out', type=click.Path(dir_okay=False))
@handle_errors
def attack_partial(config_path, overrides, target, classifier, codes, truth, out):
    """Partial black-box attack with a saved latent code set."""
    config = harness.load_experiment_config(config_path, overrides)
    clf = PropertyClassifier.load(classifier)
    report = attack_partial_bb(BlackBoxGenerator.load(target), clf, LatentCodeSet.load(codes),
                               _property(truth, clf.n_classes), config.phi_mode)
    _write_json(out, report.model_dump(mode='json'))
    click.echo(report.model_dump_json(indent=2))


@main.command('optimize-codes')
@config_options
@click.option('--shadow', 'shadow_dirs', multiple=True, required=True, type=click.Path(exists=True, file_okay=False))
@click.option('--classifier', required=True, type=click.Path(exists=True, file_okay=False))
@click.option('--seed', type=int, default=0)
@click.option('--out', required=True, type=click.Path(dir_okay=False))
@handle_errors
def optimize_codes(config_path, overrides, shadow_dirs, classifier, seed, out):
    """Optimize one latent code set over saved shadow GANs."""
    config = harness.load_experiment_config(config_path, overrides)
    members = []
    for directory in shadow_dirs:
        prop = saved_training_property(directory)
        if prop is None:
            raise ValueError(f"Shadow {directory} has no recorded training property")
        generator = BlackBoxGenerator.load(directory)
        members.append(ShadowMember(generator, prop, generator.model_id))
    opt = OptimizerConfig(kind='adam', learning_rate=config.opt_learning_rate, beta1=0.9, beta2=0.999)
    codes = optimize_latent_set(ShadowEnsemble(members), PropertyClassifier.load(classifier), config.set_size, opt,
                                config.opt_iterations, seed)
    codes.save(out)
    if codes.failed:
        click.echo("⚠️ Optimization diverged; best-so-far codes saved", err=True)
    if codes.trace:
        click.echo(f"✅ {len(codes)} codes, loss {codes.trace[0]:.6g} -> {min(codes.trace):.6g} -> {out}")
    else:
        click.echo(f"✅ {len(codes)} random codes (no iterations) -> {out}")


def _run_figures(config, figure_ids):
    experiment = harness.Experiment(config, progress=True)
    for figure_id in figure_ids:
        output = harness.run_figure_analog(figure_id, config, experiment)
        click.echo(f"✅ {figure_id}: {len(output.table)} rows -> {experiment.run_dir / 'figures'}")


@main.command()
@config_options
@handle_errors
def mia(config_path, overrides):
    """Baseline and property-enhanced membership inference (ROC data and sensitivity sweep)."""
    _run_figures(harness.load_experiment_config(config_path, overrides), ['f16', 'f17'])


@main.command()
@config_options
@handle_errors
def mitigate(config_path, overrides):
    """Rebalancing and classifier-gated release against the multi-class attack."""
    _run_figures(harness.load_experiment_config(config_path, overrides), ['f15'])


@main.command()
@config_options
@click.argument('figure_ids', nargs=-1, required=True)
@handle_errors
def figure(config_path, overrides, figure_ids):
    """Produce the data behind one or more figure analogs (f4 ... f17)."""
    unknown = [figure_id for figure_id in figure_ids if figure_id not in harness.FIGURES]
    if unknown:
        raise ValueError(f"Unknown figure id(s) {', '.join(unknown)}")
    _run_figures(harness.load_experiment_config(config_path, overrides), figure_ids)


@main.command()
@click.argument('tables', nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False))
@click.option('--out', type=click.Path(dir_okay=False))
@handle_errors
def summarize(tables, out):
    """Per-property means, variances and quartiles of result CSVs."""
    summary = harness.summarize(list(tables))
    if out:
        summary.to_csv(out, index=False)
        click.echo(f"✅ {len(summary)} groups -> {out}")
    else:
        click.echo(summary.to_string(index=False))


@main.command()
@config_options
@handle_errors
def run(config_path, overrides):
    """The full protocol: train everything, run both attacks, write results.csv."""
    config = harness.load_experiment_config(config_path, overrides)
    table = harness.run_task(config, harness.Experiment(config, progress=True))
    click.echo(f"✅ {len(table)} rows, sha256 {table.digest}")


@main.command()
@click.option('--target', type=click.Path(exists=True, file_okay=False), help='Saved TrainedGan directory.')
@click.option('--host', default='0.0.0.0')
@click.option('--port', type=int, default=lambda: int(os.environ.get('PORT', 5000)))
@handle_errors
def serve(target, host, port):
    """Serve a target generator's query surfaces under waitress."""
    from waitress import serve as waitress_serve

    from ganprop import create_app

    application = create_app(target)
    logger.info("Query server listening on %s:%d", host, port)
    waitress_serve(application, host=host, port=port)


if __name__ == '__main__':
    main()
