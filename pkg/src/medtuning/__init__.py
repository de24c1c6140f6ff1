"""Parameter-efficient adapter tuning for volumetric segmentation.

A self-contained stack: float32 tensors with reverse-mode autodiff, DFT/FFT
kernels and a learnable spectral filter, factorized depthwise 3D
convolutions, the Med-Adapter block, a small 2D transformer backbone with
volume-to-slice plumbing, frozen-backbone fine-tuning, segmentation
metrics, and an analytic parameter planner.
"""

from .adapter import (AdapterConfig, AdapterParams, StageState, adapter_param_count,
                      build_adapter_params, inter_fi, intra_fe, med_adapter_forward,
                      project_down, vanilla_adapter)
from .checkpoint import (apply_checkpoint, graph_table, load_checkpoint,
                         load_volume_set, save_checkpoint, save_volume_set)
from .errors import (ConfigError, ContractError, DataError, FormatError,
                     GeometryError, MedtuningError, ShapeError, TapeError,
                     TrainingError)
from .estimators import ShapeClassifier, VolumeSegmenter
from .model import (BackboneConfig, ModelGraph, ParamReport, build_model,
                    classify_forward, load_backbone, param_report, plan_params,
                    segment_forward, slices_to_volume, volume_to_slices)
from .ops import (AttentionBlockParams, DepthwiseKernelPair, attention_block,
                  conv3d_pointwise, dwconv3d_single, dwconv_cascade, linear,
                  patch_embed2d, patch_merge)
from .rng import Rng
from .spectral import (ComplexField, SpectralWeights, dft1d_reference, fft1d, fft3d,
                       idft1d_reference, ifft1d, ifft3d, spectral_filter)
from .tensor import Tape, Tensor, backward, forward_primitive, grad_check, tensor_new
from .training import (Adam, MetricsRecord, TrainConfig, adam_step, composite_loss,
                       cross_entropy_loss, dice_score, evaluate_segmentation,
                       finetune_loop, hausdorff95, predict_labels, pretrain_loop,
                       soft_dice_loss, synth_classification_set, synth_volume_set)

__version__ = "0.1.0"
