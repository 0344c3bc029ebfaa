class GanPresets:
    # Training hyper-parameters of the four reference GAN families. Network shapes
    # are desk-scale dense stacks, only the optimisation settings carry over.
    SETTINGS = {
        'dcgan':  {'loss': 'minimax', 'gp_lambda': 0.0,  'n_critic': 1, 'batch_size': 100,
                   'learning_rate': 0.0002, 'beta1': 0.5, 'beta2': 0.999},
        'wgangp': {'loss': 'wgan_gp', 'gp_lambda': 10.0, 'n_critic': 3, 'batch_size': 100,
                   'learning_rate': 0.0002, 'beta1': 0.9, 'beta2': 0.999},
        'pggan':  {'loss': 'wgan_gp', 'gp_lambda': 10.0, 'n_critic': 1, 'batch_size': 36,
                   'learning_rate': 0.001,  'beta1': 0.0, 'beta2': 0.99},
        'tgan':   {'loss': 'minimax', 'gp_lambda': 0.0,  'n_critic': 1, 'batch_size': 200,
                   'learning_rate': 0.001,  'beta1': 0.5, 'beta2': 0.99},
    }

    LEAKY_SLOPE = 0.2
    LATENT_DIM = 16
    HIDDEN_WIDTHS = (64, 64)


class DomainDefaults:
    # what the generator has to emit for each synthetic domain
    SETTINGS = {
        'mixture2d':      {'sample_width': 2,  'n_classes': 2,  'output_activation': 'tanh'},
        'digitlike':      {'sample_width': 64, 'n_classes': 10, 'output_activation': 'tanh'},
        'tabular_onehot': {'sample_width': 20, 'n_classes': 2,  'output_activation': 'sigmoid'},
    }

    MIXTURE_RADIUS = 0.5
    MIXTURE_SIGMA = 0.1
    DIGIT_FLIP_PROBABILITY = 0.1
    TABULAR_FIELDS = (4, 3, 5, 2, 6)
    TABULAR_TABLE_SEED = 20210601


class AttackDefaults:
    FULL_BB_SAMPLES = 20000
    OPTIMIZED_SET_SIZE = 100
    OPTIMIZER_LEARNING_RATE = 0.01
    OPTIMIZER_ITERATIONS = 500
    EARLY_STOP_PATIENCE = 50
    EARLY_STOP_MIN_DELTA = 1e-6
    COMPARE_TRIALS = 80


class MembershipDefaults:
    RECONSTRUCTION_BUDGET = 4096
    LAMBDA_P = 2.0
    MEMBERS = 256
    NON_MEMBERS = 768


class QueryServerConfig:
    MAX_BATCH = 20000
    DEFAULT_LIMIT = "600 per minute"
