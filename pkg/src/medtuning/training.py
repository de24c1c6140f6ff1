"""Losses, segmentation metrics, optimizer, synthetic data and loops.

The composite training loss is 0.5 * cross-entropy + 0.5 * soft Dice over
class probabilities; both are fused primitives with analytic gradients
(the generic primitive catalog has no log/divide, and the fused forms are
cheaper and exactly checkable with grad_check).

The synthetic volumes are built so that two of the foreground classes
share an intensity band and differ only in their extent along the slice
axis. A per-slice model (frozen 2D backbone plus decoder, or a token-space
vanilla adapter) has no path for information to cross slices, so those two
classes are only separable by modules that look along D — which is exactly
what the inserted adapters add.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .checkpoint import graph_table
from .errors import ConfigError, ContractError, DataError, ShapeError, TrainingError
from .model import ModelGraph, classify_forward, param_report, segment_forward
from .rng import Rng
from .tensor import (Tape, Tensor, add, backward, forward_primitive,
                     register_primitive, scale)

# --------------------------------------------------------------------------
# Configuration
# --------------------------------------------------------------------------

@dataclass
class TrainConfig:
    lr: float = 0.002
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-5
    epochs: int = 10
    batch_size: int = 4
    seed: int = 0
    loss_weights: tuple[float, float] = (0.5, 0.5)  # (ce, dice)
    mode: str = "med_tuning"
    target_accuracy: float = 0.9

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        ce, dice = self.loss_weights
        if ce < 0 or dice < 0 or (ce == 0 and dice == 0):
            raise ConfigError(f"bad loss weights {self.loss_weights}")


# --------------------------------------------------------------------------
# Losses (fused primitives)
# --------------------------------------------------------------------------

def _check_labels(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    k = logits.shape[1]
    expected = logits.shape[:1] + logits.shape[2:]
    if labels.shape != expected:
        raise ShapeError(f"labels {labels.shape} do not match logits {logits.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise DataError(f"labels must be integer, got {labels.dtype}")
    if labels.min() < 0 or labels.max() >= k:
        raise DataError(f"labels out of range [0, {k})")
    return labels.astype(np.int64)


def _softmax_channels(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1, keepdims=True)
    e = np.exp((z - m).astype(np.float64))
    return e / e.sum(axis=1, keepdims=True)


def _onehot(labels: np.ndarray, k: int) -> np.ndarray:
    oh = np.zeros((labels.size, k), dtype=np.float64)
    oh[np.arange(labels.size), labels.reshape(-1)] = 1.0
    return oh.reshape(labels.shape + (k,))


def _fw_cross_entropy(arrays, attrs):
    (z,) = arrays
    labels = _check_labels(z, attrs["labels"])
    p = _softmax_channels(z)
    # gather p at the true class: move class axis last
    pm = np.moveaxis(p, 1, -1).reshape(-1, z.shape[1])
    idx = labels.reshape(-1)
    nll = -np.log(np.maximum(pm[np.arange(idx.size), idx], 1e-30))
    loss = np.float32(nll.mean())
    return np.array([loss], dtype=np.float32), (p, labels, idx.size)


def _vjp_cross_entropy(g, ctx, needs):
    p, labels, m = ctx
    k = p.shape[1]
    oh = np.moveaxis(_onehot(labels, k), -1, 1)
    gz = (p - oh) * (float(g.reshape(-1)[0]) / m)
    return (gz.astype(np.float32),)


def _fw_soft_dice(arrays, attrs):
    (z,) = arrays
    labels = _check_labels(z, attrs["labels"])
    smooth = float(attrs.get("smooth", 1.0))
    k = z.shape[1]
    p = _softmax_channels(z)
    oh = np.moveaxis(_onehot(labels, k), -1, 1)
    axes = (0,) + tuple(range(2, z.ndim))
    inter = (p * oh).sum(axis=axes)
    num = 2.0 * inter + smooth
    den = p.sum(axis=axes) + oh.sum(axis=axes) + smooth
    loss = np.float32(1.0 - (num / den).mean())
    return np.array([loss], dtype=np.float32), (p, oh, num, den, k)


def _vjp_soft_dice(g, ctx, needs):
    p, oh, num, den, k = ctx
    shape = [1] * p.ndim
    shape[1] = k
    num_b = num.reshape(shape)
    den_b = den.reshape(shape)
    # d(loss)/dp = -(1/K) * (2*y*den - num) / den^2
    dldp = -(2.0 * oh * den_b - num_b) / (k * den_b * den_b)
    inner = (dldp * p).sum(axis=1, keepdims=True)
    gz = p * (dldp - inner) * float(g.reshape(-1)[0])
    return (gz.astype(np.float32),)


register_primitive("cross_entropy", _fw_cross_entropy, _vjp_cross_entropy)
register_primitive("soft_dice", _fw_soft_dice, _vjp_soft_dice)


def cross_entropy_loss(logits: Tensor, labels) -> Tensor:
    """Mean voxel negative log-likelihood, max-subtracted for stability."""
    return forward_primitive("cross_entropy", [logits], {"labels": np.asarray(labels)})


def soft_dice_loss(logits: Tensor, labels, smooth: float = 1.0) -> Tensor:
    """1 - mean over classes of the smoothed soft Dice coefficient."""
    return forward_primitive("soft_dice", [logits],
                             {"labels": np.asarray(labels), "smooth": smooth})


def composite_loss(logits: Tensor, labels, weights=(0.5, 0.5)) -> Tensor:
    ce_w, dice_w = weights
    ce = scale(cross_entropy_loss(logits, labels), ce_w)
    dc = scale(soft_dice_loss(logits, labels), dice_w)
    return add(ce, dc)


# --------------------------------------------------------------------------
# Metrics
# --------------------------------------------------------------------------

def dice_score(pred_labels, true_labels, k: int) -> float:
    """Overlap 2|A&B| / (|A|+|B|) for class k; empty-empty counts as 1.0."""
    a = np.asarray(pred_labels)
    b = np.asarray(true_labels)
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes {a.shape} and {b.shape} differ")
    am = a == k
    bm = b == k
    sa, sb = int(am.sum()), int(bm.sum())
    if sa + sb == 0:
        return 1.0
    return 2.0 * int((am & bm).sum()) / (sa + sb)


def boundary_voxels(mask: np.ndarray) -> np.ndarray:
    """Coordinates of foreground voxels with a background 6-neighbor or on the border."""
    m = np.asarray(mask, dtype=bool)
    if m.ndim != 3:
        raise ShapeError(f"mask must be 3D, got {m.shape}")
    inner = np.pad(m, 1, constant_values=False)
    core = m.copy()
    for axis in range(3):
        lo = np.take(inner, range(0, m.shape[axis]), axis=axis)
        hi = np.take(inner, range(2, m.shape[axis] + 2), axis=axis)
        # trim the pad on the other two axes
        sl = [slice(1, -1)] * 3
        sl[axis] = slice(None)
        core &= lo[tuple(sl)] & hi[tuple(sl)]
    boundary = m & ~core
    return np.argwhere(boundary).astype(np.float64)


def percentile_linear(values: np.ndarray, q: float) -> float:
    """Inclusive linear interpolation between order statistics."""
    s = np.sort(np.asarray(values, dtype=np.float64))
    if s.size == 0:
        raise ContractError("percentile of empty multiset")
    pos = (q / 100.0) * (s.size - 1)
    lo = int(np.floor(pos))
    hi = min(lo + 1, s.size - 1)
    frac = pos - lo
    return float(s[lo] + (s[hi] - s[lo]) * frac)


def _directed_min_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Min Euclidean distance from each point of a to the set b (squared math
    in float64, chunked over rows; sqrt applied after the min)."""
    out = np.empty(a.shape[0], dtype=np.float64)
    chunk = 512
    for i in range(0, a.shape[0], chunk):
        diff = a[i:i + chunk, None, :] - b[None, :, :]
        d2 = (diff * diff).sum(axis=-1)
        out[i:i + chunk] = d2.min(axis=1)
    return np.sqrt(out)


def hausdorff95(mask_a, mask_b) -> float | None:
    """95th percentile of pooled symmetric nearest-surface distances.

    Boundaries use 6-connectivity (volume border counts). Returns None
    (the "undefined" sentinel) when either mask is empty.
    """
    a = np.asarray(mask_a, dtype=bool)
    b = np.asarray(mask_b, dtype=bool)
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes {a.shape} and {b.shape} differ")
    if not a.any() or not b.any():
        return None
    pa = boundary_voxels(a)
    pb = boundary_voxels(b)
    pooled = np.concatenate([_directed_min_dists(pa, pb), _directed_min_dists(pb, pa)])
    return percentile_linear(pooled, 95.0)


@dataclass
class MetricsRecord:
    """Per-class evaluation plus the parameter ledger of the evaluated model."""

    dice: list[float]
    hausdorff95: list[float | None]
    mean_dice: float
    tuned: int = 0
    inserted: int = 0

    def to_dict(self) -> dict:
        return {"dice": [round(d, 6) for d in self.dice],
                "hd95": [None if h is None else round(h, 6) for h in self.hausdorff95],
                "mean_dice": round(self.mean_dice, 6),
                "tuned": self.tuned, "inserted": self.inserted}


def evaluate_segmentation(graph: ModelGraph, samples, num_classes: int,
                          with_hd95: bool = True) -> MetricsRecord:
    """Mean per-class Dice / HD95 over a sample set.

    Dice is averaged per class over samples; mean_dice averages the
    foreground classes (1..K-1). HD95 "undefined" cases are excluded from
    the per-class mean; an all-undefined class reports None.
    """
    k = num_classes
    dices = np.zeros((len(samples), k))
    hds: list[list[float | None]] = [[] for _ in range(k)]
    for i, (vol, lab) in enumerate(samples):
        pred = predict_labels(graph, vol)
        for c in range(k):
            dices[i, c] = dice_score(pred, lab, c)
            if with_hd95 and c > 0:
                hds[c].append(hausdorff95(pred == c, lab == c))
    per_class = dices.mean(axis=0).tolist()
    hd_out: list[float | None] = [None]
    for c in range(1, k):
        vals = [h for h in hds[c] if h is not None]
        hd_out.append(float(np.mean(vals)) if vals else None)
    mean_fg = float(np.mean(per_class[1:])) if k > 1 else float(per_class[0])
    return MetricsRecord(dice=per_class, hausdorff95=hd_out, mean_dice=mean_fg)


def predict_labels(graph: ModelGraph, volume: np.ndarray) -> np.ndarray:
    """Argmax class volume for one [1, D, H, W] or [B, 1, D, H, W] input."""
    v = np.asarray(volume, dtype=np.float32)
    single = v.ndim == 4
    if single:
        v = v[None]
    logits = segment_forward(graph, Tensor(v))
    pred = np.argmax(logits.data, axis=1)
    return pred[0] if single else pred


# --------------------------------------------------------------------------
# Optimizer
# --------------------------------------------------------------------------

class Adam:
    """Adam with bias correction and decoupled multiplicative weight decay.

    The decay ``p *= 1 - lr*wd`` is applied before the Adam delta. Frozen
    parameters are never touched; gradients are cleared after the step.
    """

    def __init__(self, params: list[Tensor], config: TrainConfig):
        self.params = [p for p in params if p.trainable]
        self.config = config
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        cfg = self.config
        self.t += 1
        b1, b2 = cfg.betas
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise ContractError(f"missing gradient on trainable parameter "
                                    f"{p.name or p.shape}")
            g = p.grad
            if cfg.weight_decay:
                p.data *= np.float32(1.0 - cfg.lr * cfg.weight_decay)
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * (g * g)
            mhat = self.m[i] / bc1
            vhat = self.v[i] / bc2
            p.data -= (cfg.lr * mhat / (np.sqrt(vhat) + cfg.eps)).astype(np.float32)
            p.grad = None


def adam_step(optimizer: Adam) -> None:
    """Single optimizer step (moment state lives on the Adam object)."""
    optimizer.step()


# --------------------------------------------------------------------------
# Synthetic data
# --------------------------------------------------------------------------

SHAPE_CLASSES = ("disk", "square", "cross", "stripes")


def _worker_count() -> int:
    raw = os.environ.get("MEDTUNE_THREADS", "1")
    try:
        return max(1, min(int(raw), 16))
    except ValueError:
        return 1


def _render_shape(rng: Rng, kind: int, size: int) -> np.ndarray:
    img = np.zeros((size, size), dtype=np.float32)
    yy, xx = np.mgrid[0:size, 0:size]
    c = size // 2
    jitter = rng.integers(2, -size // 8, size // 8 + 1)
    cy, cx = c + int(jitter[0]), c + int(jitter[1])
    r = size // 4 + int(rng.integers(1, -size // 16, size // 16 + 1)[0])
    r = max(3, r)
    if kind == 0:    # disk (filled)
        img[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = 1.0
    elif kind == 1:  # square (outline, so it is not confusable with the disk blob)
        t = max(2, r // 3)
        img[max(0, cy - r):cy + r, max(0, cx - r):cx + r] = 1.0
        img[max(0, cy - r + t):cy + r - t, max(0, cx - r + t):cx + r - t] = 0.0
    elif kind == 2:  # cross (long thin arms, reaching much further out than a disk)
        arm = min(size // 2 - 2, r + size // 4)
        t = max(1, r // 4)
        img[max(0, cy - arm):cy + arm, max(0, cx - t):cx + t] = 1.0
        img[max(0, cy - t):cy + t, max(0, cx - arm):cx + arm] = 1.0
    else:            # stripes
        period = max(2, r // 2)
        phase = int(rng.integers(1, 0, period)[0])
        img[((yy + phase) // period) % 2 == 0] = 1.0
    img = 0.2 + 0.6 * img
    noise = rng.normal((size, size), 0.0, 0.08)
    return np.clip(img + noise, 0.0, 1.0).astype(np.float32)


def synth_classification_set(rng: Rng, n: int, image_size: int = 32):
    """n grayscale images of one shape each; label = shape class (round-robin)."""
    if n < 1:
        raise ConfigError("need at least one sample")
    images = np.zeros((n, 1, image_size, image_size), dtype=np.float32)
    labels = np.zeros(n, dtype=np.int64)

    def render(i: int) -> None:
        kind = i % len(SHAPE_CLASSES)
        images[i, 0] = _render_shape(rng.derive("cls", i), kind, image_size)
        labels[i] = kind

    workers = _worker_count()
    if workers > 1 and n > 64:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(render, range(n)))
    else:
        for i in range(n):
            render(i)
    return images, labels


# Intensity bands per label class, before noise. Classes 1 and 2 share a
# band on purpose: their bodies differ only in extent along D.
INTENSITY_BANDS = {0: (0.05, 0.15), 1: (0.40, 0.50), 2: (0.40, 0.50), 3: (0.75, 0.85)}
VOLUME_NOISE_STD = 0.06


@dataclass
class SyntheticVolumeSample:
    volume: np.ndarray  # [1, D, H, W] float32 in [0, 1]
    labels: np.ndarray  # [D, H, W] int64


def _paint_ellipsoid(labels: np.ndarray, center, radii, value: int) -> None:
    d, h, w = labels.shape
    zz, yy, xx = np.mgrid[0:d, 0:h, 0:w].astype(np.float64)
    cz, cy, cx = center
    rz, ry, rx = radii
    mask = (((zz - cz) / rz) ** 2 + ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2) <= 1.0
    labels[mask] = value


def _make_volume(rng: Rng, index: int, dims, num_classes: int) -> SyntheticVolumeSample:
    d, h, w = dims
    labels = np.zeros((d, h, w), dtype=np.int64)
    n_bodies = 1 + int(rng.integers(1, 0, 3)[0])
    for body in range(n_bodies):
        # class 1 bodies are elongated along D, class 2 bodies are flat;
        # the first body alternates deterministically so both appear often
        if body == 0:
            elongated = index % 2 == 0
        else:
            elongated = bool(int(rng.integers(1, 0, 2)[0]))
        shell = 1 if elongated else 2
        ry = h / 5.0 + float(rng.uniform((1,), 0, h / 10.0)[0])
        rx = w / 5.0 + float(rng.uniform((1,), 0, w / 10.0)[0])
        rz = d * 0.38 if elongated else max(1.2, d * 0.08)
        cz = float(rng.uniform((1,), d * 0.3, d * 0.7)[0])
        cy = float(rng.uniform((1,), ry, h - ry)[0])
        cx = float(rng.uniform((1,), rx, w - rx)[0])
        _paint_ellipsoid(labels, (cz, cy, cx), (rz, ry, rx), shell)
        if num_classes > 3:
            _paint_ellipsoid(labels, (cz, cy, cx), (max(1.0, rz * 0.5), ry * 0.45, rx * 0.45), 3)
    vol = np.zeros((d, h, w), dtype=np.float32)
    for cls in range(num_classes):
        lo, hi = INTENSITY_BANDS[min(cls, 3)]
        band = rng.uniform((1,), lo, hi)[0]
        vol[labels == cls] = band
    vol = vol + rng.normal((d, h, w), 0.0, VOLUME_NOISE_STD)
    vol = np.clip(vol, 0.0, 1.0).astype(np.float32)
    return SyntheticVolumeSample(volume=vol[None], labels=labels)


def synth_volume_set(rng: Rng, n: int, dims: tuple[int, int, int],
                     num_classes: int = 4) -> list[SyntheticVolumeSample]:
    """n volumes of nested ellipsoidal bodies with exact labels.

    Label semantics: 0 background, 1 D-elongated shell, 2 D-flat shell
    (same intensity band as 1), 3 bright core nested in every shell.
    """
    if n < 1:
        raise ConfigError("need at least one sample")
    if num_classes < 2 or num_classes > 4:
        raise ConfigError(f"num_classes must be in [2, 4], got {num_classes}")
    d, h, w = dims
    if d < 4 or h < 10 or w < 10:
        raise ConfigError(f"volume {dims} too small for the ellipsoid geometry")
    out: list[SyntheticVolumeSample | None] = [None] * n

    def render(i: int) -> None:
        out[i] = _make_volume(rng.derive("vol", i), i, dims, num_classes)

    workers = _worker_count()
    if workers > 1 and n > 8:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(render, range(n)))
    else:
        for i in range(n):
            render(i)
    return out  # type: ignore[return-value]


# --------------------------------------------------------------------------
# Loops
# --------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    loss: float
    accuracy: float | None = None
    metrics: MetricsRecord | None = None

    def to_dict(self) -> dict:
        rec = {"epoch": self.epoch, "loss": round(self.loss, 6)}
        if self.accuracy is not None:
            rec["accuracy"] = round(self.accuracy, 6)
        if self.metrics is not None:
            rec.update(self.metrics.to_dict())
        return rec


def _check_finite(loss: float, where: str) -> None:
    if not np.isfinite(loss):
        raise TrainingError(f"loss diverged ({loss}) during {where}")


def pretrain_loop(graph: ModelGraph, images: np.ndarray, labels: np.ndarray,
                  config: TrainConfig):
    """Train the classifier on all parameters; returns (table, history).

    The surrogate must actually learn: final training accuracy at or below
    ``config.target_accuracy`` raises TrainingError (set it to 0 to skip).
    """
    if graph.head_w is None:
        raise ConfigError("pretrain_loop needs a model built in pretrain mode")
    rng = Rng(config.seed).derive("pretrain.shuffle")
    opt = Adam(graph.parameters(trainable_only=True), config)
    n = images.shape[0]
    history: list[EpochRecord] = []
    accuracy = 0.0
    for epoch in range(config.epochs):
        order = rng.shuffled(n)
        losses = []
        correct = 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            x = Tensor(images[idx])
            y = labels[idx]
            with Tape() as tape:
                logits = classify_forward(graph, x)
                loss = cross_entropy_loss(logits, y)
            backward(loss, tape)
            opt.step()
            losses.append(loss.item())
            _check_finite(losses[-1], "pretraining")
            correct += int((np.argmax(logits.data, axis=1) == y).sum())
        accuracy = correct / n
        history.append(EpochRecord(epoch=epoch, loss=float(np.mean(losses)),
                                   accuracy=accuracy))
    if config.target_accuracy and accuracy <= config.target_accuracy:
        raise TrainingError(f"pretraining reached accuracy {accuracy:.3f} <= "
                            f"target {config.target_accuracy}")
    return graph_table(graph), history


def finetune_loop(graph: ModelGraph, train_set, eval_set, config: TrainConfig):
    """Optimize CE+Dice on the train split; evaluate Dice/HD95 per epoch.

    Returns (table, final MetricsRecord, history). The freeze mask of the
    graph decides what moves; the returned metrics carry the tuned and
    inserted counts from param_report.
    """
    if graph.decoder_w is None:
        raise ConfigError("finetune_loop needs a segmentation model")
    rng = Rng(config.seed).derive("finetune.shuffle")
    opt = Adam(graph.parameters(trainable_only=True), config)
    report = param_report(graph)
    n = len(train_set)
    history: list[EpochRecord] = []
    record = None
    for epoch in range(config.epochs):
        order = rng.shuffled(n)
        losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            vols = np.stack([train_set[i].volume for i in idx])
            labs = np.stack([train_set[i].labels for i in idx])
            with Tape() as tape:
                logits = segment_forward(graph, Tensor(vols))
                loss = composite_loss(logits, labs, config.loss_weights)
            backward(loss, tape)
            opt.step()
            losses.append(loss.item())
            _check_finite(losses[-1], "fine-tuning")
        record = evaluate_segmentation(
            graph, [(s.volume, s.labels) for s in eval_set], graph.num_classes)
        record.tuned = report.tuned
        record.inserted = report.inserted
        history.append(EpochRecord(epoch=epoch, loss=float(np.mean(losses)),
                                   metrics=record))
    return graph_table(graph), record, history
