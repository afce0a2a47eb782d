"""Anchor-guided domain adaptation on synthetic segmentation grids.

The package is a small, fully deterministic testbed: a tape-based autodiff
core, a per-pixel segmentation model, synthetic shifted-domain data, and a
stagewise trainer that builds per-category anchors on the labeled side and
pseudo-labels confident pixels on the unlabeled side.
"""

from .anchors import (ActivationResult, AnchorSet, StageSnapshot,
                      construct_anchors, anchor_distances, identify_active,
                      identify_active_by_probability, load_snapshot,
                      margin_threshold_for_coverage, save_snapshot)
from .config import (ABLATION_VARIANTS, DataConfig, ExperimentConfig,
                     ModelConfig, build_datasets, default_config, load_config,
                     save_config)
from .domains import (Dataset, DomainSpec, LabeledGrid, class_pixel_counts,
                      default_prototypes, domain_shift_proxy, generate, load,
                      make_rng, paired_rotation, save)
from .metrics import (ConfusionMatrix, EvalReport, confusion, evaluate_model,
                      feature_alignment_distance, iou, pixel_accuracy,
                      pseudo_label_audit)
from .model import Discriminator, SegModel, load_model, save_model
from .objectives import (LossBreakdown, LossTerms, adversarial_losses,
                         ce_loss, combine, dis_loss)
from .tensor import Tape, Tensor, backward, no_grad
from .trainer import (GridSampler, MetricsLogger, SGD, StageState, TrainConfig,
                      adapt, begin_stage, poly_lr, pretrain, run_pipeline,
                      run_stage, train_source_only, warmup)

__version__ = "0.1.0"
