"""Consent-masked dataset dissolution simulator.

Builds successor datasets from a firm's user data under per-user,
per-task consent, trains small feedforward models under several regimes
(original, retrain from scratch, retrain from pretrained, fine-tune,
gradient-ascent unlearning), and measures forget/retain rates to study
catastrophic forgetting as a natural unlearning mechanism.
"""

from .consent import (
    AllowClasses,
    AllowLabelGroup,
    ConsentMatrix,
    ConsentRule,
    ExplicitConsent,
    FirmDataset,
    LabelSpace,
    PerUserRandom,
    SuccessorDataset,
    TaskBlockSpec,
    UserRecord,
    build_cdc_dataset,
    build_cdc_vector,
    complement_dataset,
    consent_from_rule,
    feature_matrix,
    labels_array,
    load_dataset,
    save_dataset,
    successor_as_firm,
    with_consent,
)
from .datagen import (
    GaussianClasses,
    GeneratorConfig,
    MultiLabelSkills,
    MultiTask,
    SkillGroup,
    TaskBlock,
    bayes_accuracy_estimate,
    default_image_analog_config,
    default_skills_config,
    generate,
)
from .errors import (
    CheckpointError,
    ConfigurationError,
    DissolveSimError,
    DivergenceSignal,
    MetricUndefinedError,
    ProvenanceError,
    ValidationError,
)
from .experiment import (
    ExperimentConfig,
    ExperimentResult,
    ExperimentSummary,
    OptimizerSettings,
    RegimeSpec,
    bundled_config_path,
    load_experiment_config,
    run_experiment,
)
from .metrics import MetricRow, accuracy, forget_rate, micro_f1, retain_rate
from .nn import (
    AdamState,
    ModelArchitecture,
    ModelCheckpoint,
    SigmoidBinaryCrossEntropy,
    SoftmaxCrossEntropy,
    TrainingProvenance,
    adam_step,
    forward,
    initialize_checkpoint,
    load_checkpoint,
    loss_and_gradients,
    predict,
    save_checkpoint,
    train_epochs,
)
from .regimes import (
    DivergenceReport,
    EvalSuite,
    PretrainSpec,
    RegimeResult,
    TrainingTrace,
    run_fine_tune,
    run_gradient_ascent_unlearn,
    run_original,
    run_retrain_pretrained,
    run_retrain_scratch,
)

__version__ = "0.1.0"
