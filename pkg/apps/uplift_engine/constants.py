"""
Uplift Engine Constants
=======================
Constants and configuration values for the uplift engine.
"""

from django.conf import settings


# =============================================================================
# TRAINING DEFAULTS
# =============================================================================

DEFAULT_LEARNING_RATE = getattr(settings, 'UPLIFT_DEFAULT_LEARNING_RATE', 0.001)
DEFAULT_WEIGHT_DECAY = getattr(settings, 'UPLIFT_DEFAULT_WEIGHT_DECAY', 0.01)
DEFAULT_BATCH_SIZE = getattr(settings, 'UPLIFT_DEFAULT_BATCH_SIZE', 1024)
DEFAULT_MAX_EPOCHS = getattr(settings, 'UPLIFT_DEFAULT_MAX_EPOCHS', 50)
DEFAULT_INCREMENTAL_PENALTY = getattr(settings, 'UPLIFT_DEFAULT_INCREMENTAL_PENALTY', 1.0)

DEFAULT_SPLIT = (0.8, 0.2)
DEFAULT_LIFT_FRACTION = 0.30


# =============================================================================
# ESTIMATION METHODS
# =============================================================================

class Method:
    """Estimators that can be trained, checkpointed and scored."""

    MTMT = 'mtmt'
    S_LEARNER = 's-learner'
    T_LEARNER = 't-learner'

    CHOICES = [
        (MTMT, 'Multi-treatment multi-task network'),
        (S_LEARNER, 'S-Learner'),
        (T_LEARNER, 'T-Learner'),
    ]

    ALL = [choice[0] for choice in CHOICES]


class ReferenceScorer:
    """Pseudo-methods used as ranking references during evaluation."""

    ORACLE = 'oracle'
    RANDOM = 'random'


# =============================================================================
# MODEL VARIANTS
# =============================================================================

class InteractionMode:
    """How a treatment embedding is combined with user tokens."""

    ATTENTION = 'attention'
    MATMUL = 'matmul'

    CHOICES = [
        (ATTENTION, 'Scaled dot-product attention'),
        (MATMUL, 'Mean-pooled matrix multiplication'),
    ]


class AblationVariant:
    """Named model variants trained by the ablate command."""

    FULL = 'full'
    MATMUL_INTERACTION = 'matmul_interaction'
    NO_ENHANCER = 'no_enhancer'
    UNTIERED = 'untiered'
    JOINT_TASK = 'joint_task'

    ORDER = [FULL, MATMUL_INTERACTION, NO_ENHANCER, UNTIERED, JOINT_TASK]

    # variant -> (flag, value) that differs from the full configuration
    OVERRIDES = {
        MATMUL_INTERACTION: ('interaction_mode', InteractionMode.MATMUL),
        NO_ENHANCER: ('use_enhancer', False),
        UNTIERED: ('tiered', False),
        JOINT_TASK: ('per_task_heads', False),
    }


# =============================================================================
# SYNTHETIC DATA
# =============================================================================

class EffectFunction:
    """Shapes of planted treatment effects."""

    CONSTANT = 'constant'
    LINEAR = 'linear'
    SIGN_SWITCH = 'sign_switch'

    ALL = [CONSTANT, LINEAR, SIGN_SWITCH]


class NaturalFunction:
    """Shapes of the untreated (control) response."""

    CONSTANT = 'constant'
    LOGISTIC = 'logistic'

    ALL = [CONSTANT, LOGISTIC]


class OutcomeKind:
    BINARY = 'binary'
    CONTINUOUS = 'continuous'

    ALL = [BINARY, CONTINUOUS]


class FeatureKind:
    CONTINUOUS = 'continuous'
    DISCRETE = 'discrete'

    ALL = [CONTINUOUS, DISCRETE]


class RowErrorPolicy:
    """What to do with an unparseable CSV row."""

    SKIP = 'skip'
    ABORT = 'abort'

    ALL = [SKIP, ABORT]


# =============================================================================
# FILE LAYOUT
# =============================================================================

DATASET_FILENAME = 'dataset.csv'
ORACLE_FILENAME = 'oracle.csv'
MANIFEST_FILENAME = 'manifest.json'
CHECKPOINT_FILENAME = 'checkpoint.json'
TRAIN_SUMMARY_FILENAME = 'train_summary.json'
TRAIN_LOG_FILENAME = 'train.log'
RESOLVED_CONFIG_FILENAME = 'resolved_config.yaml'
REPORT_CSV_FILENAME = 'report.csv'
REPORT_TEXT_FILENAME = 'report.txt'
CURVES_DIRNAME = 'curves'
EFFECTS_SUMMARY_FILENAME = 'effects_summary.csv'
EFFECTS_RAW_FILENAME = 'effects_raw.csv'
ATTENTION_FILENAME = 'attention.csv'
SCORES_FILENAME = 'scores.csv'
ABLATION_SUMMARY_FILENAME = 'ablation_summary.csv'

# Column names used when writing datasets
ROW_ID_COLUMN = 'row_id'
BASE_TREATMENT_COLUMN = 'treatment'
SECONDARY_TREATMENT_COLUMN = 'secondary_treatment'


# =============================================================================
# EXIT CODES
# =============================================================================

class ExitCode:
    SUCCESS = 0
    USAGE = 2
    DATA = 3
    RUNTIME = 4
