"""Desk-scale densely connected CNN pipeline for periprosthetic lucency detection.

Submodules:
    tensor     float32 tensors with reverse-mode autodiff
    model      mini-DenseNet, classifier head, checkpoints
    train      Adam, the training loop, pretext pretraining
    data       synthetic radiographs, augmentation, PGM/PPM, manifests
    evaluate   k-fold cross-validation, confusion metrics, ROC/AUC, reports
    interpret  saliency maps, activation maximisation, rendering
    config     flat key=value run configuration
    cli        command-line pipeline driver
"""

from .data import AugmentParams, SampleImage, SynthParams, augment, generate_dataset
from .evaluate import (ConfusionCounts, FoldReport, RocCurve, accuracy,
                       cross_validate, make_folds, roc_curve, sensitivity,
                       specificity)
from .interpret import AscentConfig, SaliencyMap, maximize_filter, saliency
from .model import (DenseNetConfig, Model, build, build_from_checkpoint,
                    describe, forward, freeze_backbone, load_checkpoint,
                    save_checkpoint, unfreeze_all)
from .tensor import Tape, Tensor, backward, grad_check
from .train import AdamState, PretextConfig, TrainConfig, adam_step, fit, \
    pretext_pretrain

__version__ = "0.1.0"
