"""Compact saliency estimation via two-phase teacher-student distillation."""

from .tensor import (NumericError, ShapeError, Tensor, concat_channels, conv2d,
                     deconv2d, maxpool2, mse_normalized, relu, resize_area,
                     tensor_sum)
from .optim import Adam
from .networks import (LayerTable, NetworkSpec, WeightStore,
                       build_spatial_student, build_spatiotemporal,
                       build_temporal_student, forward, init_from_students,
                       init_weights, param_count)
from .distill import (ClipSample, ConfigurationError, DistillConfig,
                      loss_spatial, loss_spatiotemporal, loss_temporal,
                      make_samples, mean_nss, run_two_phase, split_clips,
                      sweep_mu, train_fusion, train_student)
from .data import (FormatError, degrade, generate_synthetic_corpus, load_clip,
                   load_corpus, load_map, load_weights, save_map, save_weights)
from .metrics import MetricReport, auc, cc, nss, roc_export, sauc, sim

__version__ = "0.1.0"
