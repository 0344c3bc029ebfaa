import re
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from ganprop.config import AttackDefaults, DomainDefaults, GanPresets, MembershipDefaults, QueryServerConfig

DOMAIN_TAGS = ('mixture2d', 'digitlike', 'tabular_onehot')
ACTIVATION_PATTERN = re.compile(r"^(relu|tanh|sigmoid|identity|softmax|leaky_relu)(?:\((?P<slope>[0-9.eE+-]+)\))?$")


def parse_activation(tag: str) -> tuple[str, float]:
    """Split an activation tag such as ``leaky_relu(0.2)`` into (name, slope)."""
    match = ACTIVATION_PATTERN.match(tag.strip())
    if not match:
        raise ValueError(f"Unknown activation '{tag}'")
    name = match.group(1)
    slope = match.group('slope')
    if slope is not None and name != 'leaky_relu':
        raise ValueError(f"Activation '{name}' takes no parameter")
    return name, float(slope) if slope is not None else GanPresets.LEAKY_SLOPE


def _split_list(value):
    # "0.3, 0.4,0.5" -> ["0.3", "0.4", "0.5"] for values coming from key=value files
    if isinstance(value, str):
        return [item.strip() for item in value.split(',') if item.strip()]
    return value


# --- nn_core ---

class DenseNetworkSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    input_width: int = Field(..., ge=1)
    layer_widths: tuple[int, ...] = Field(..., min_length=1)
    activations: tuple[str, ...] = Field(..., min_length=1)
    seed: int = Field(0, ge=0, lt=2**64)

    @field_validator('layer_widths')
    @classmethod
    def validate_widths(cls, v):
        if any(width < 1 for width in v):
            raise ValueError('Layer widths must be positive')
        return v

    @field_validator('activations')
    @classmethod
    def validate_activations(cls, v):
        for tag in v:
            name, slope = parse_activation(tag)
            if name == 'leaky_relu' and not 0.0 < slope < 1.0:
                raise ValueError('Leaky slope must lie in (0, 1)')
        return v

    @model_validator(mode='after')
    def validate_layers(self):
        if len(self.activations) != len(self.layer_widths):
            raise ValueError('Need exactly one activation per layer')
        if any(parse_activation(tag)[0] == 'softmax' for tag in self.activations[:-1]):
            raise ValueError('softmax is only allowed as the final activation')
        return self

    @property
    def output_width(self) -> int:
        return self.layer_widths[-1]

    @property
    def head(self) -> str:
        return parse_activation(self.activations[-1])[0]


class OptimizerConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: Literal['sgd', 'adam'] = 'adam'
    learning_rate: float = Field(0.0002, gt=0)
    beta1: float = Field(0.5, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    epsilon_stability: float = Field(1e-8, gt=0)
    batch_size: int = Field(100, ge=1)

    @model_validator(mode='after')
    def validate_betas(self):
        if self.kind == 'adam' and not self.beta1 < self.beta2:
            raise ValueError('adam requires beta1 < beta2 < 1')
        return self


# --- datagen ---

class AttributeSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    n_classes: int = Field(2, ge=2)
    class_names: tuple[str, ...] = ()

    @model_validator(mode='before')
    @classmethod
    def fill_names(cls, data):
        if isinstance(data, dict) and not data.get('class_names'):
            n_classes = int(data.get('n_classes', 2))
            data = {**data, 'class_names': [f"class_{index}" for index in range(n_classes)]}
        return data

    @model_validator(mode='after')
    def validate_names(self):
        if len(self.class_names) != self.n_classes:
            raise ValueError('Need one class name per class')
        return self


class PropertyDistribution(BaseModel):
    """Proportion of each attribute class in a training set (P in the attack)."""
    model_config = ConfigDict(frozen=True)

    probs: tuple[float, ...] = Field(..., min_length=2)

    @field_validator('probs')
    @classmethod
    def validate_simplex(cls, v):
        if any(not 0.0 <= p <= 1.0 for p in v):
            raise ValueError('Probabilities must lie in [0, 1]')
        if abs(sum(v) - 1.0) > 1e-9:
            raise ValueError(f'Probabilities must sum to 1 (got {sum(v)!r})')
        return v

    @classmethod
    def binary(cls, proportion: float) -> 'PropertyDistribution':
        return cls(probs=(1.0 - proportion, proportion))

    @classmethod
    def uniform(cls, n_classes: int) -> 'PropertyDistribution':
        return cls(probs=tuple([1.0 / n_classes] * n_classes))

    @classmethod
    def from_counts(cls, counts) -> 'PropertyDistribution':
        counts = np.asarray(counts, dtype=np.float64)
        return cls(probs=tuple(float(c) for c in counts / counts.sum()))

    @classmethod
    def coerce(cls, value, n_classes: int = 2) -> 'PropertyDistribution':
        # accepts a distribution, a scalar class-1 proportion or a sequence of probabilities
        if isinstance(value, cls):
            return value
        if np.isscalar(value):
            if n_classes != 2:
                raise ValueError('A scalar property only describes a binary attribute')
            return cls.binary(float(value))
        return cls(probs=tuple(float(p) for p in value))

    @property
    def n_classes(self) -> int:
        return len(self.probs)

    @property
    def proportion(self) -> float:
        return self.probs[1]

    def as_array(self) -> np.ndarray:
        return np.asarray(self.probs, dtype=np.float64)


class SplitPlan(BaseModel):
    model_config = ConfigDict(frozen=True)

    target: int = Field(..., ge=0)
    shadow: int = Field(..., ge=0)
    classifier: int = Field(..., ge=0)
    train_ratio: float = Field(0.7, gt=0, lt=1)

    @property
    def total(self) -> int:
        return self.target + self.shadow + self.classifier


# --- gan_engine ---

class LatentPrior(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: Literal['gaussian_standard', 'uniform_pm1'] = 'gaussian_standard'
    dim: int = Field(GanPresets.LATENT_DIM, ge=1)

    def draw(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.kind == 'gaussian_standard':
            return rng.standard_normal((n, self.dim))
        return rng.uniform(-1.0, 1.0, size=(n, self.dim))


class GanConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    generator: DenseNetworkSpec
    discriminator: DenseNetworkSpec
    prior: LatentPrior = LatentPrior()
    loss: Literal['minimax', 'wgan_gp'] = 'wgan_gp'
    gp_lambda: float = Field(10.0, ge=0)
    n_critic: int = Field(3, ge=1)
    batch_size: int = Field(100, ge=1)
    generator_optimizer: OptimizerConfig = OptimizerConfig(learning_rate=0.0002, beta1=0.9, beta2=0.999)
    discriminator_optimizer: OptimizerConfig = OptimizerConfig(learning_rate=0.0002, beta1=0.9, beta2=0.999)
    train_steps: int = Field(1000, ge=0)
    seed: int = Field(0, ge=0, lt=2**64)

    @model_validator(mode='after')
    def validate_pair(self):
        if self.prior.dim != self.generator.input_width:
            raise ValueError('Latent dimension must match the generator input width')
        if self.discriminator.input_width != self.generator.output_width:
            raise ValueError('Discriminator input must match the generator output width')
        if self.discriminator.output_width != 1:
            raise ValueError('Discriminator must emit a single score')
        if self.loss == 'wgan_gp':
            if self.gp_lambda <= 0:
                raise ValueError('wgan_gp requires gp_lambda > 0')
            if self.discriminator.head != 'identity':
                raise ValueError('wgan_gp requires a linear (identity) critic head')
        elif self.discriminator.head != 'sigmoid':
            raise ValueError('minimax requires a sigmoid discriminator head')
        return self


# --- membership ---

class MiaConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    k: int = Field(MembershipDefaults.RECONSTRUCTION_BUDGET, ge=1)
    distance: Literal['sqeuclidean', 'euclidean'] = 'sqeuclidean'
    lambda_p: float = MembershipDefaults.LAMBDA_P
    # one distribution per considered attribute; the sample's own class picks P_i
    attribute_properties: tuple[PropertyDistribution, ...] = ()
    epsilon: float | None = None

    @property
    def n_attributes(self) -> int:
        return len(self.attribute_properties)


# --- cli_harness ---

class ExperimentConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra='forbid')

    task: str = 'T1-analog'
    domain: Literal['mixture2d', 'digitlike', 'tabular_onehot'] = 'mixture2d'
    n_classes: int = Field(2, ge=2)
    property_grid: tuple[float, ...] = (0.3, 0.4, 0.5, 0.6, 0.7)
    targets_per_property: int = Field(8, ge=1)
    shadows_per_property: int = Field(20, ge=1)

    # data pools (desk scale, roughly a tenth of the reference sizes)
    target_pool_size: int = Field(1500, ge=1)
    shadow_pool_size: int = Field(1500, ge=1)
    classifier_pool_size: int = Field(1500, ge=1)
    classifier_train_ratio: float = Field(0.7, gt=0, lt=1)
    target_size: int = Field(512, ge=1)
    shadow_size: int = Field(512, ge=1)

    # models
    gan_preset: Literal['dcgan', 'wgangp', 'pggan', 'tgan'] = 'wgangp'
    latent_dim: int = Field(GanPresets.LATENT_DIM, ge=1)
    latent_prior: Literal['gaussian_standard', 'uniform_pm1'] = 'gaussian_standard'
    generator_hidden: tuple[int, ...] = GanPresets.HIDDEN_WIDTHS
    discriminator_hidden: tuple[int, ...] = GanPresets.HIDDEN_WIDTHS
    train_steps: int = Field(1000, ge=0)
    batch_size: int | None = Field(None, ge=1)
    classifier_hidden: tuple[int, ...] = (32,)
    classifier_epochs: int = Field(30, ge=0)
    classifier_learning_rate: float = Field(0.01, gt=0)
    classifier_batch_size: int = Field(64, ge=1)

    # attacks
    phi_mode: Literal['hard', 'soft'] = 'hard'
    full_bb_samples: int = Field(AttackDefaults.FULL_BB_SAMPLES, ge=1)
    sample_count_max_exponent: int = Field(14, ge=2, le=16)
    sample_count_trials: int = Field(10, ge=1)
    set_size: int = Field(AttackDefaults.OPTIMIZED_SET_SIZE, ge=1)
    set_sizes: tuple[int, ...] = (25, 50, 100, 200)
    opt_iterations: int = Field(AttackDefaults.OPTIMIZER_ITERATIONS, ge=0)
    opt_learning_rate: float = Field(AttackDefaults.OPTIMIZER_LEARNING_RATE, gt=0)
    shadow_counts: tuple[int, ...] = (25, 50, 100)
    start_points: int = Field(5, ge=1)
    out_of_range_property: float = Field(0.2, ge=0, le=1)
    out_of_range_targets: int = Field(21, ge=1)
    compare_counts: tuple[int, ...] = (25, 50, 100, 150, 200)
    compare_trials: int = Field(AttackDefaults.COMPARE_TRIALS, ge=1)
    classifier_shift: float = Field(0.5, ge=0)
    classifier_variants: tuple[tuple[int, ...], ...] = ((16,), (32,), (64, 64), (32, 32, 32))
    shadow_generator_hidden: tuple[int, ...] = (32, 32, 32)
    multiclass_property: tuple[float, ...] = tuple(round(k / 55, 12) for k in range(1, 11))

    # membership inference
    mia_property: float = Field(0.3, ge=0, le=1)
    mia_members: int = Field(MembershipDefaults.MEMBERS, ge=1)
    mia_nonmembers: int = Field(MembershipDefaults.NON_MEMBERS, ge=1)
    mia_k: int = Field(MembershipDefaults.RECONSTRUCTION_BUDGET, ge=1)
    mia_lambda_p: float = MembershipDefaults.LAMBDA_P
    mia_use_true_property: bool = True
    mia_sweep: tuple[float, ...] = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)

    output_dir: str = 'runs/default'
    master_seed: int = Field(0, ge=0, lt=2**63)
    workers: int = Field(1, ge=1)

    @field_validator('property_grid', 'set_sizes', 'shadow_counts', 'compare_counts', 'mia_sweep',
                     'generator_hidden', 'discriminator_hidden', 'classifier_hidden',
                     'shadow_generator_hidden', 'multiclass_property', mode='before')
    @classmethod
    def split_lists(cls, v):
        return _split_list(v)

    @field_validator('classifier_variants', mode='before')
    @classmethod
    def split_variants(cls, v):
        # "16;32;64-64" -> [[16], [32], [64, 64]]
        if isinstance(v, str):
            return [[int(width) for width in chunk.split('-')] for chunk in v.split(';') if chunk.strip()]
        return v

    @field_validator('property_grid', 'mia_sweep')
    @classmethod
    def validate_grid(cls, v):
        if not v:
            raise ValueError('Grid must not be empty')
        if any(not 0.0 <= p <= 1.0 for p in v):
            raise ValueError('Grid values must lie in [0, 1]')
        return v

    @field_validator('set_sizes', 'shadow_counts', 'compare_counts')
    @classmethod
    def validate_counts(cls, v):
        if not v or any(count < 1 for count in v):
            raise ValueError('Counts must be >= 1')
        return v

    @model_validator(mode='after')
    def validate_domain(self):
        if self.n_classes > 10:
            raise ValueError('At most 10 attribute classes are supported')
        if len(self.multiclass_property) != 10:
            raise ValueError('multiclass_property needs one value per digit class')
        return self

    @property
    def sample_width(self) -> int:
        return DomainDefaults.SETTINGS[self.domain]['sample_width']


# --- query server ---

class SampleRequest(BaseModel):
    n: int = Field(..., ge=1, le=QueryServerConfig.MAX_BATCH)
    seed: int = Field(..., ge=0, lt=2**63)


class GenerateRequest(BaseModel):
    codes: list[list[float]] = Field(..., min_length=1, max_length=QueryServerConfig.MAX_BATCH)

    @field_validator('codes')
    @classmethod
    def validate_uniform(cls, v):
        if len({len(code) for code in v}) != 1:
            raise ValueError('All latent codes must have the same length')
        return v
