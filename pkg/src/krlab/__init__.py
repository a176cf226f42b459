"""krlab: train classifiers purely on generator output.

A conditional GAN and a teacher classifier are fit on real data; synthetic
datasets labelled with the teacher's softmax outputs train student
classifiers, with generator checkpoints and sampling parameters selected by
validation accuracy on real data. Students are then scored for resistance
to shadow-model membership inference.
"""

from .augment import AugmentConfig
from .clf_training import ClfTrainConfig, compute_cas, evaluate_accuracy, lr_at, train_classifier
from .config import RunConfig, make_config
from .datasets import DatasetSpec, LabeledDataset, load_dataset, make_shadow_split, register_toy_dataset
from .gan_training import GanTrainConfig, hinge_losses, logistic_d_loss, logistic_g_loss, train_gan
from .nets import ClassifierConfig, DiscriminatorConfig, GeneratorConfig, ema_update
from .pipeline import CheckpointCurve, checkpoint_optimisation, run_full_pipeline
from .privacy import MiaReport, aop, auc
from .synthesis import (
    GenerationParams,
    RegeneratingSource,
    SoftLabeledDataset,
    generate_baseline,
    generate_filtered,
    generate_gkd,
    sample_latents,
    should_regenerate,
)
from .tuning import TunerConfig, hyperband_prune, tpe_suggest, tune

__version__ = "0.1.0"
