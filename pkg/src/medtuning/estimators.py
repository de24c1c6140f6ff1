"""Scikit-learn style estimators wrapping the training pipeline.

Both classes follow the sklearn contract: constructor arguments are stored
verbatim (``get_params``/``set_params``/``clone`` work), all state learned
in ``fit`` lands in trailing-underscore attributes, and inputs are
validated by small helpers rather than mutated.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .adapter import AdapterConfig
from .errors import DataError, ShapeError
from .model import BackboneConfig, build_model, load_backbone, param_report
from .rng import Rng
from .tensor import Tensor
from .training import (SyntheticVolumeSample, TrainConfig, dice_score,
                       evaluate_segmentation, finetune_loop, predict_labels,
                       pretrain_loop, synth_classification_set)


def _check_images(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4 or X.shape[1] != 1:
        raise ShapeError(f"expected images [n, H, W] or [n, 1, H, W], got {X.shape}")
    return X


def _check_volumes(X, y=None):
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 4:
        X = X[:, None]
    if X.ndim != 5 or X.shape[1] != 1:
        raise ShapeError(f"expected volumes [n, D, H, W] or [n, 1, D, H, W], got {X.shape}")
    if y is None:
        return X, None
    y = np.asarray(y)
    if y.shape != (X.shape[0],) + X.shape[2:]:
        raise ShapeError(f"labels {y.shape} do not match volumes {X.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        raise DataError(f"labels must be integer, got {y.dtype}")
    return X, y.astype(np.int64)


class ShapeClassifier(BaseEstimator):
    """Image classifier on the small transformer backbone.

    Primarily the pre-training stage of the pipeline: a fitted instance can
    be passed to :class:`VolumeSegmenter` as the pretrained backbone.
    """

    def __init__(self, width=48, depths=(1, 1, 1, 1), patch=4, heads=4,
                 image_size=32, num_classes=4, epochs=6, lr=0.002,
                 batch_size=32, weight_decay=1e-5, seed=0):
        self.width = width
        self.depths = depths
        self.patch = patch
        self.heads = heads
        self.image_size = image_size
        self.num_classes = num_classes
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.seed = seed

    def _backbone_config(self) -> BackboneConfig:
        return BackboneConfig(layout="flat",
                              stage_dims=(self.width,) * len(self.depths),
                              stage_depths=tuple(self.depths),
                              patch=self.patch, heads=self.heads,
                              image_size=self.image_size)

    def fit(self, X, y):
        X = _check_images(X)
        y = np.asarray(y).astype(np.int64)
        if y.shape != (X.shape[0],):
            raise ShapeError(f"labels {y.shape} do not match images {X.shape}")
        graph = build_model(self._backbone_config(), None, "pretrain",
                            Rng(self.seed).derive("pretrain.model"),
                            num_classes=self.num_classes)
        cfg = TrainConfig(lr=self.lr, weight_decay=self.weight_decay,
                          epochs=self.epochs, batch_size=self.batch_size,
                          seed=self.seed, mode="pretrain", target_accuracy=0.0)
        self.table_, self.history_ = pretrain_loop(graph, X, y, cfg)
        self.graph_ = graph
        self.train_accuracy_ = self.history_[-1].accuracy
        return self

    def _logits(self, X) -> np.ndarray:
        from .model import classify_forward
        X = _check_images(X)
        return classify_forward(self.graph_, Tensor(X)).data

    def predict(self, X):
        if not hasattr(self, "graph_"):
            raise NotFittedError("ShapeClassifier is not fitted")
        return np.argmax(self._logits(X), axis=1)

    def score(self, X, y):
        return float(np.mean(self.predict(X) == np.asarray(y)))


class VolumeSegmenter(BaseEstimator):
    """Volumetric segmenter fine-tuned in one of the tuning modes.

    ``pretrained`` may be a fitted :class:`ShapeClassifier`, a checkpoint
    table (dict of arrays), or None — in which case a backbone is
    pre-trained on the synthetic shape-classification task first (except in
    scratch mode, which starts from random weights).
    """

    def __init__(self, mode="med_tuning", alpha=6, branches=("conv3", "conv5", "fft", "mix"),
                 inter="add", fft_bias=False, width=48, depths=(1, 1, 1, 1), patch=4,
                 heads=4, num_classes=4, epochs=12, lr=0.002, batch_size=4,
                 weight_decay=1e-5, seed=0, pretrained=None, pretrain_images=512,
                 pretrain_epochs=6):
        self.mode = mode
        self.alpha = alpha
        self.branches = branches
        self.inter = inter
        self.fft_bias = fft_bias
        self.width = width
        self.depths = depths
        self.patch = patch
        self.heads = heads
        self.num_classes = num_classes
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.seed = seed
        self.pretrained = pretrained
        self.pretrain_images = pretrain_images
        self.pretrain_epochs = pretrain_epochs

    def _adapter_config(self, image_size: int) -> AdapterConfig | None:
        if self.mode not in ("vanilla_adapter", "med_tuning"):
            return None
        branches = set(self.branches)
        return AdapterConfig(c=self.width, alpha=self.alpha,
                             conv3="conv3" in branches, conv5="conv5" in branches,
                             fft="fft" in branches, channel_mix="mix" in branches,
                             fft_bias=self.fft_bias, inter_mode=self.inter)

    def _backbone_table(self, image_size: int) -> dict | None:
        if self.mode == "scratch":
            return None
        if isinstance(self.pretrained, ShapeClassifier):
            return self.pretrained.table_
        if isinstance(self.pretrained, dict):
            return self.pretrained
        clf = ShapeClassifier(width=self.width, depths=self.depths, patch=self.patch,
                              heads=self.heads, image_size=image_size,
                              epochs=self.pretrain_epochs, seed=self.seed)
        images, labels = synth_classification_set(
            Rng(self.seed).derive("pretrain.data"), self.pretrain_images, image_size)
        clf.fit(images, labels)
        return clf.table_

    def fit(self, X, y):
        X, y = _check_volumes(X, y)
        image_size = X.shape[-1]
        if X.shape[-2] != image_size:
            raise ShapeError(f"expected square slices, got {X.shape[-2]}x{image_size}")
        bc = BackboneConfig(layout="flat", stage_dims=(self.width,) * len(self.depths),
                            stage_depths=tuple(self.depths), patch=self.patch,
                            heads=self.heads, image_size=image_size)
        graph = build_model(bc, self._adapter_config(image_size), self.mode,
                            Rng(self.seed).derive("segment.model"),
                            num_classes=self.num_classes)
        table = self._backbone_table(image_size)
        if table is not None and self.mode != "scratch":
            load_backbone(graph, table)
        cfg = TrainConfig(lr=self.lr, weight_decay=self.weight_decay,
                          epochs=self.epochs, batch_size=self.batch_size,
                          seed=self.seed, mode=self.mode)
        samples = [SyntheticVolumeSample(volume=X[i], labels=y[i])
                   for i in range(X.shape[0])]
        self.table_, metrics, self.history_ = finetune_loop(graph, samples, samples[:1], cfg)
        self.graph_ = graph
        self.param_report_ = param_report(graph)
        return self

    def predict(self, X):
        if not hasattr(self, "graph_"):
            raise NotFittedError("VolumeSegmenter is not fitted")
        X, _ = _check_volumes(X)
        return np.stack([predict_labels(self.graph_, X[i]) for i in range(X.shape[0])])

    def score(self, X, y):
        """Mean foreground Dice over the given volumes."""
        if not hasattr(self, "graph_"):
            raise NotFittedError("VolumeSegmenter is not fitted")
        X, y = _check_volumes(X, y)
        rec = evaluate_segmentation(self.graph_, [(X[i], y[i]) for i in range(X.shape[0])],
                                    self.num_classes, with_hd95=False)
        return rec.mean_dice

    def dice_per_class(self, X, y) -> list[float]:
        if not hasattr(self, "graph_"):
            raise NotFittedError("VolumeSegmenter is not fitted")
        X, y = _check_volumes(X, y)
        preds = self.predict(X)
        return [float(np.mean([dice_score(preds[i], y[i], k) for i in range(len(preds))]))
                for k in range(self.num_classes)]
