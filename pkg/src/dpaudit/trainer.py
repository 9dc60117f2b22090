"""Desk-scale training with and without DP-SGD.

The DP path computes one gradient per sample (augmentation multiplicity is
averaged per sample *before* clipping, preserving sensitivity), clips the
global l2 norm of each contribution, adds Gaussian noise scaled by
``noise_multiplier * clip_norm``, and averages. Batches are Poisson-sampled
whenever noise is on, matching the accountant's subsampling assumption;
non-private runs use fixed shuffled batches. With ``noise_multiplier == 0``
and an effectively infinite clip norm the loop reproduces plain mini-batch
training bit for bit, since it is the same code path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy import stats as _scipy_stats

from . import accountant, models
from .accountant import OVERFLOW, PrivacyParams, PrivacySpent
from .datagen import Dataset
from .errors import ParameterError, TrainingError
from .numerics import Rng

NADAM_BETA1 = 0.9
NADAM_BETA2 = 0.999
NADAM_EPS = 1e-8

#: Default per-class loss weights for the weighted segmentation mode
#: (background, organ, tumour).
SEGMENTATION_WEIGHTS = (0.1, 0.4, 0.5)


@dataclass(frozen=True)
class Augment:
    h_flip: float = 0.0
    v_flip: float = 0.0
    multiplicity: int = 1


@dataclass(frozen=True)
class EarlyStop:
    patience: int = 5
    min_improvement: float = 1e-3  # relative improvement on the epoch loss


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "nadam"  # "sgd" | "nadam"
    learning_rate: float = 2e-3
    batch_size: int = 64
    epochs: int = 10
    early_stop: EarlyStop | None = None
    clip_norm: float | None = None
    noise_multiplier: float = 0.0
    augment: Augment = field(default_factory=Augment)
    loss: str = "cross_entropy"  # "cross_entropy" | "weighted_cross_entropy"
    class_weights: tuple[float, ...] | None = None
    delta: float = 8e-7
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ParameterError("learning rate must be positive")
        if self.optimizer not in ("sgd", "nadam"):
            raise ParameterError(f"unknown optimizer {self.optimizer!r}")
        if self.noise_multiplier < 0:
            raise ParameterError("noise multiplier must be nonnegative")
        if self.noise_multiplier > 0 and (self.clip_norm is None or self.clip_norm <= 0):
            raise ParameterError("a positive clip norm is required when noise is on")
        if self.augment.multiplicity < 1:
            raise ParameterError("augmentation multiplicity must be >= 1")


class MetricValue(NamedTuple):
    value: float
    flagged: bool  # degenerate marginals (MCC) or empty class (Dice)


@dataclass
class MetricsReport:
    task: str
    mcc: MetricValue | None = None
    dice: dict[int, MetricValue] | None = None
    loss_trace: list[float] = field(default_factory=list)
    epochs_run: int = 0


@dataclass
class TrainResult:
    weights: dict
    report: MetricsReport
    privacy: PrivacySpent
    steps: int
    batch_mode: str  # "poisson" | "shuffled"


# --- losses ----------------------------------------------------------------

def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Per-sample CE loss and its gradient w.r.t. the logits."""
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    b = len(labels)
    losses = -logp[np.arange(b), labels]
    dlogits = np.exp(logp)
    dlogits[np.arange(b), labels] -= 1.0
    return losses, dlogits


def weighted_pixel_cross_entropy(logits: np.ndarray, masks: np.ndarray,
                                 class_weights: Sequence[float]):
    """Per-sample weighted-mean pixel CE for (B, H, W, K) logits."""
    w = np.asarray(class_weights, dtype=np.float64)
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    onehot = np.eye(logits.shape[-1])[masks]
    pix_w = w[masks]  # (B, H, W)
    w_sum = pix_w.sum(axis=(1, 2), keepdims=True)
    pix_ce = -(onehot * logp).sum(axis=-1)
    losses = (pix_w * pix_ce).sum(axis=(1, 2)) / w_sum[:, 0, 0]
    dlogits = (np.exp(logp) - onehot) * (pix_w / w_sum)[..., None]
    return losses, dlogits


def _loss_grad(spec, weights, x, y, loss_kind, class_weights):
    out, cache = models.forward(spec, weights, x)
    if loss_kind == "cross_entropy":
        losses, dout = softmax_cross_entropy(out, y)
    elif loss_kind == "weighted_cross_entropy":
        cw = class_weights if class_weights is not None else SEGMENTATION_WEIGHTS
        losses, dout = weighted_pixel_cross_entropy(out, y, cw)
    else:
        raise ParameterError(f"unknown loss {loss_kind!r}")
    grads = models.backward_per_sample(spec, weights, cache, dout)
    return losses, grads


class PerSampleGradients(Sequence):
    """Per-sample gradient sets; indexable like a list of dicts."""

    def __init__(self, stacked: dict[str, np.ndarray]):
        self.stacked = stacked
        self._n = len(next(iter(stacked.values()))) if stacked else 0

    def __len__(self) -> int:
        return self._n

    def __getitem__(self, s) -> dict[str, np.ndarray]:
        return {k: v[s] for k, v in self.stacked.items()}

    def norms(self) -> np.ndarray:
        """Global (all-parameter) l2 norm per sample."""
        sq = np.zeros(self._n)
        for v in self.stacked.values():
            sq += (v.reshape(self._n, -1) ** 2).sum(axis=1)
        return np.sqrt(sq)


def per_sample_gradients(model: models.ModelSpec, weights: dict, x: np.ndarray,
                         y: np.ndarray, loss: str = "cross_entropy",
                         class_weights=None) -> PerSampleGradients:
    """One gradient set per sample; their mean equals the batch gradient."""
    _, grads = _loss_grad(model, weights, x, y, loss, class_weights)
    return PerSampleGradients(grads)


def batch_loss(model, weights, x, y, loss: str = "cross_entropy", class_weights=None):
    out, _ = models.forward(model, weights, x)
    if loss == "cross_entropy":
        losses, _ = softmax_cross_entropy(out, y)
    else:
        cw = class_weights if class_weights is not None else SEGMENTATION_WEIGHTS
        losses, _ = weighted_pixel_cross_entropy(out, y, cw)
    return float(losses.mean())


# --- DP aggregation --------------------------------------------------------

def clip_per_sample(grads: PerSampleGradients, clip_norm: float) -> PerSampleGradients:
    """Rescale each sample's gradient set to global l2 norm <= clip_norm."""
    norms = grads.norms()
    factors = np.minimum(1.0, clip_norm / np.maximum(norms, 1e-300))
    clipped = {}
    for k, v in grads.stacked.items():
        shape = (len(factors),) + (1,) * (v.ndim - 1)
        clipped[k] = v * factors.reshape(shape)
    return PerSampleGradients(clipped)


def clip_and_noise(grads: PerSampleGradients, clip_norm: float,
                   noise_multiplier: float, rng: Rng) -> dict[str, np.ndarray]:
    """Clipped, noised, batch-averaged gradient (the DP-SGD release)."""
    if clip_norm <= 0:
        raise ParameterError("clip norm must be positive")
    if noise_multiplier < 0:
        raise ParameterError("noise multiplier must be nonnegative")
    clipped = clip_per_sample(grads, clip_norm)
    b = max(len(grads), 1)
    out = {}
    for k in sorted(clipped.stacked):
        total = clipped.stacked[k].sum(axis=0)
        if noise_multiplier > 0:
            total = total + rng.normal(total.shape, std=noise_multiplier * clip_norm)
        out[k] = total / b
    return out


# --- optimizers -------------------------------------------------------------

@dataclass
class OptimizerState:
    step: int = 0
    m: dict | None = None
    v: dict | None = None


def optimizer_step(weights: dict, gradient: dict, state: OptimizerState,
                   config: TrainConfig) -> tuple[dict, OptimizerState]:
    """One optimizer update; returns new weights and state.

    SGD: ``w - lr * g``. NADAM (Nesterov-accelerated Adam) with
    ``(b1, b2, eps) = (0.9, 0.999, 1e-8)``:

        m <- b1 m + (1 - b1) g          v <- b2 v + (1 - b2) g^2
        m_hat = m / (1 - b1^(t+1))      g_hat = g / (1 - b1^t)
        m_bar = b1 m_hat + (1 - b1) g_hat
        w <- w - lr * m_bar / (sqrt(v / (1 - b2^t)) + eps)
    """
    lr = config.learning_rate
    if config.optimizer == "sgd":
        new_w = {k: weights[k] - lr * gradient[k] for k in weights}
        new_state = OptimizerState(state.step + 1)
    else:
        t = state.step + 1
        m = state.m or {k: np.zeros_like(v) for k, v in weights.items()}
        v = state.v or {k: np.zeros_like(w) for k, w in weights.items()}
        new_w, new_m, new_v = {}, {}, {}
        b1, b2 = NADAM_BETA1, NADAM_BETA2
        for k in weights:
            g = gradient[k]
            new_m[k] = b1 * m[k] + (1 - b1) * g
            new_v[k] = b2 * v[k] + (1 - b2) * g * g
            m_hat = new_m[k] / (1 - b1 ** (t + 1))
            g_hat = g / (1 - b1**t)
            m_bar = b1 * m_hat + (1 - b1) * g_hat
            v_hat = new_v[k] / (1 - b2**t)
            new_w[k] = weights[k] - lr * m_bar / (np.sqrt(v_hat) + NADAM_EPS)
        new_state = OptimizerState(t, new_m, new_v)
    for k, w in new_w.items():
        if not np.isfinite(w).all():
            raise TrainingError(f"non-finite update for parameter {k}")
    return new_w, new_state


def tune_clip_norm(model, weights, x, y, loss: str = "cross_entropy",
                   class_weights=None) -> float:
    """Median per-sample gradient norm on a probe batch (clip-norm heuristic)."""
    grads = per_sample_gradients(model, weights, x, y, loss, class_weights)
    return float(np.median(grads.norms()))


# --- training loop ----------------------------------------------------------

def _poisson_batches(n: int, batch_size: int, rng: Rng, steps: int):
    q = batch_size / n
    for _ in range(steps):
        mask = rng.uniform(n) < q
        yield np.flatnonzero(mask)


def _shuffled_batches(n: int, batch_size: int, rng: Rng):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _augmented_per_sample_grads(model, weights, x, y, config, aug_rng,
                                segmentation: bool):
    aug = config.augment
    losses_acc, stacked_acc = None, None
    for _ in range(aug.multiplicity):
        xa, ya = x, y
        if aug.h_flip > 0 or aug.v_flip > 0:
            xa = x.copy()
            ya = y.copy() if segmentation else y
            flip_h = aug_rng.uniform(len(x)) < aug.h_flip
            flip_v = aug_rng.uniform(len(x)) < aug.v_flip
            xa[flip_h] = xa[flip_h, :, ::-1]
            xa[flip_v] = xa[flip_v, ::-1]
            if segmentation:
                ya[flip_h] = ya[flip_h, :, ::-1]
                ya[flip_v] = ya[flip_v, ::-1]
        losses, grads = _loss_grad(model, weights, xa, ya, config.loss,
                                   config.class_weights)
        if stacked_acc is None:
            losses_acc = losses
            stacked_acc = grads
        else:
            losses_acc = losses_acc + losses
            stacked_acc = {k: stacked_acc[k] + grads[k] for k in stacked_acc}
    k = aug.multiplicity
    return (losses_acc / k,
            PerSampleGradients({key: v / k for key, v in stacked_acc.items()}))


def train(model: models.ModelSpec, dataset: Dataset,
          config: TrainConfig) -> TrainResult:
    """Train ``model`` on the dataset's train split; evaluate on its test split.

    Deterministic for a fixed config seed. Privacy spend is accounted with
    Poisson sampling at rate ``batch_size / n_train`` over the steps actually
    taken.

    Raises:
        TrainingError: on divergence, carrying the epoch index.
    """
    segmentation = dataset.spec.kind == "segmentation"
    rng = Rng(config.seed)
    init_rng, batch_rng = rng.split("init"), rng.split("batches")
    noise_rng, aug_rng = rng.split("noise"), rng.split("augment")

    weights = models.init_weights(model, init_rng)
    opt_state = OptimizerState()
    dp = config.noise_multiplier > 0
    clip = config.clip_norm if config.clip_norm is not None else math.inf
    n = dataset.n_train
    x_all, y_all = dataset.train_images, dataset.train_labels
    steps_per_epoch = max(1, math.ceil(n / config.batch_size))

    loss_trace: list[float] = []
    best = math.inf
    stall = 0
    steps = 0
    epochs_run = 0
    for epoch in range(1, config.epochs + 1):
        if dp:
            batches = _poisson_batches(n, config.batch_size, batch_rng, steps_per_epoch)
        else:
            batches = _shuffled_batches(n, config.batch_size, batch_rng)
        batch_losses = []
        for idx in batches:
            if len(idx) == 0:
                continue
            losses, grads = _augmented_per_sample_grads(
                model, weights, x_all[idx], y_all[idx], config, aug_rng, segmentation)
            gradient = clip_and_noise(grads, clip, config.noise_multiplier, noise_rng)
            weights, opt_state = optimizer_step(weights, gradient, opt_state, config)
            steps += 1
            batch_losses.append(float(losses.mean()))
        epoch_loss = float(np.mean(batch_losses)) if batch_losses else math.inf
        if not math.isfinite(epoch_loss):
            raise TrainingError(f"training diverged at epoch {epoch}")
        loss_trace.append(epoch_loss)
        epochs_run = epoch
        if config.early_stop is not None:
            if epoch_loss < best * (1 - config.early_stop.min_improvement):
                best = epoch_loss
                stall = 0
            else:
                stall += 1
                if stall >= config.early_stop.patience:
                    break

    report = evaluate(model, weights, dataset)
    report.loss_trace = loss_trace
    report.epochs_run = epochs_run

    if dp:
        params = PrivacyParams(config.noise_multiplier, clip, config.batch_size / n,
                               steps, config.delta)
        privacy = accountant.spend(params)
    else:
        privacy = PrivacySpent(OVERFLOW, config.delta, None)
    return TrainResult(weights, report, privacy, steps,
                       "poisson" if dp else "shuffled")


def evaluate(model: models.ModelSpec, weights: dict, dataset: Dataset,
             batch: int = 256) -> MetricsReport:
    """Test-split metrics: MCC for classification, per-class Dice otherwise."""
    segmentation = dataset.spec.kind == "segmentation"
    x, y = dataset.test_images, dataset.test_labels
    preds = []
    for start in range(0, len(x), batch):
        out, _ = models.forward(model, weights, x[start:start + batch])
        preds.append(out.argmax(axis=-1))
    pred = np.concatenate(preds) if preds else np.zeros(0, dtype=int)
    if segmentation:
        n_classes = model.output_shape[-1]
        dice_scores = {}
        for cls in range(n_classes):
            per_sample = [dice(pred[i], y[i], cls) for i in range(len(y))]
            values = [d.value for d in per_sample]
            flagged = any(d.flagged for d in per_sample)
            dice_scores[cls] = MetricValue(float(np.mean(values)) if values else 0.0,
                                           flagged)
        return MetricsReport(task="segmentation", dice=dice_scores)
    n_classes = model.output_shape[-1]
    cm = confusion_matrix(y, pred, n_classes)
    return MetricsReport(task="classification", mcc=mcc(cm))


# --- metrics ----------------------------------------------------------------

def confusion_matrix(true_labels, pred_labels, n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(true_labels), np.asarray(pred_labels)), 1)
    return cm


def mcc(confusion: np.ndarray) -> MetricValue:
    """Multi-class Matthews correlation (Gorodkin form).

    0 for random predictions, 1 for perfect ones; degenerate marginals
    (an all-zero row or column pair) return 0 with the flag set. The binary
    case reduces to the classical TP/TN/FP/FN formula.
    """
    cm = np.asarray(confusion, dtype=np.float64)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ParameterError("confusion matrix must be square")
    if (cm < 0).any():
        raise ParameterError("confusion matrix must be nonnegative")
    s = cm.sum()
    c = np.trace(cm)
    t = cm.sum(axis=1)  # true counts
    p = cm.sum(axis=0)  # predicted counts
    cov_tp = c * s - t @ p
    denom_sq = (s * s - p @ p) * (s * s - t @ t)
    if denom_sq <= 0:
        return MetricValue(0.0, True)
    return MetricValue(float(cov_tp / math.sqrt(denom_sq)), False)


def dice(pred_mask: np.ndarray, true_mask: np.ndarray, class_id: int) -> MetricValue:
    """Dice overlap 2|A&B| / (|A| + |B|); both-empty counts as 1, flagged."""
    a = np.asarray(pred_mask) == class_id
    b = np.asarray(true_mask) == class_id
    if a.shape != b.shape:
        raise ParameterError("masks must have the same shape")
    na, nb = int(a.sum()), int(b.sum())
    if na + nb == 0:
        return MetricValue(1.0, True)
    return MetricValue(2.0 * int((a & b).sum()) / (na + nb), False)


def welch_t_test(sample_a, sample_b) -> float:
    """Two-sided Welch t-test p-value between two seed groups.

    Identical samples give exactly 1; two zero-variance samples give 1 when
    the means agree and a denormal-small p otherwise.
    """
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise ParameterError("each sample needs at least two observations")
    if len(a) == len(b) and np.array_equal(a, b):
        return 1.0
    va, vb = a.var(ddof=1), b.var(ddof=1)
    if va == 0 and vb == 0:
        return 1.0 if a.mean() == b.mean() else 5e-324
    se_sq = va / len(a) + vb / len(b)
    t = (a.mean() - b.mean()) / math.sqrt(se_sq)
    df = se_sq**2 / ((va / len(a)) ** 2 / (len(a) - 1) + (vb / len(b)) ** 2 / (len(b) - 1))
    return float(2.0 * _scipy_stats.t.sf(abs(t), df))
