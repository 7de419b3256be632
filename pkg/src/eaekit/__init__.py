"""Logit-space adversarial training (EAE) with baseline attacks and instrumented benchmarks."""

from .attacks import AttackSpec, PerturbedBatch, bim, fast_step, fgsm, pgd, rfgsm, run_attack
from .data import BatchPlan, Dataset, batches, load_cifar10_binary, make_image_surrogate, make_synthetic
from .eae import (
    LdStats,
    LogitDelta,
    LogitDifference,
    SeedPartition,
    eae_delta,
    eae_perturb_batch,
    ld_stats,
    logit_difference,
    partition_seeds,
    threshold_from_partition,
)
from .estimators import AdversarialTrainingClassifier, LogitPerturber, SeedThresholdSelector
from .nn import CyclicLrSchedule, Model, build_model, cross_entropy, load_checkpoint, save_checkpoint, sgd_step, softmax
from .tensor import COUNTERS, Tape, Tensor, backward, grad
from .train import Instrumentation, TrainSpec, train, train_time_benchmark

__version__ = "0.1.0"
