"""Analytic gradient-inversion attack by a malicious federated server.

The server grafts a two-dense-layer "imprint" block in front of an arbitrary
network. The first layer probes average brightness against a ladder of bin
thresholds; whenever a sample activates bin ``i``, the flattened input is
recoverable from that round's gradients as

    x = (gradient of the first layer's weight row i) / (bias gradient i),

elementwise. The server dictates hyperparameters (batch size 1 makes the
recovery exact); the client may clip and noise its gradients before
transmission, which is exactly what degrades the attack. The exchange is
simulated as plain call/return carrying explicit payloads, so runs stay
deterministic.
"""

from __future__ import annotations

import dataclasses
import math
import statistics
from dataclasses import dataclass

import numpy as np

from . import trainer
from .accountant import PrivacyParams
from .container import read_container, write_container
from .datagen import Dataset, normalize
from .errors import DimensionError, ParameterError
from .models import (AddMeanSkip, ConcatSkip, Dense, Flatten, ModelSpec, Relu,
                     Reshape, init_weights)
from .numerics import Rng

DEFAULT_BINS = 10
PRELUDE_LENGTH = 6  # flatten, dense, relu, dense, add-mean, reshape

#: Stand-in for the minus-infinity lower edge of the first brightness bin;
#: ten standard deviations below the mean catches every realistic input.
CATCH_ALL_THRESHOLD = -10.0


@dataclass(frozen=True)
class ImprintBlock:
    """Parameters of the grafted block."""

    w1: np.ndarray  # (bins, pixels) averaging probes
    b1: np.ndarray  # (bins,) negated brightness thresholds, descending
    w2: np.ndarray  # (pixels, bins) shape-restoring projection (bias-free)

    @property
    def bins(self) -> int:
        return len(self.b1)


@dataclass(frozen=True)
class AttackScenario:
    """Server-dictated round settings."""

    batch_size: int = 1
    dp_on_client: PrivacyParams | None = None
    rounds: int | None = None  # dictated batches; None = one pass over the data
    bins: int = DEFAULT_BINS

    def __post_init__(self):
        if self.batch_size < 1:
            raise ParameterError("batch size must be >= 1")


@dataclass
class GradientPacket:
    """What the client transmits for one round."""

    grads: dict[str, np.ndarray]
    model: ModelSpec
    batch_size: int
    clipped: bool = False
    noised: bool = False
    sigma: float = 0.0
    clip_norm: float | None = None


@dataclass
class ReconstructionSet:
    """Candidate images recovered from one packet (M <= bins)."""

    images: np.ndarray  # (M, H, W, C), de-normalized
    source_bins: list[int]
    skipped_bins: int
    threshold: float


def bin_thresholds(bins: int) -> np.ndarray:
    """Brightness thresholds under a standard-normal input prior.

    A single bin probes the distribution median; multi-bin ladders use the
    equal-mass quantiles ``Phi^-1(k / bins)`` with a catch-all lowest bin so
    that every in-range input activates at least one bin.
    """
    if bins < 1:
        raise ParameterError("need at least one bin")
    if bins == 1:
        return np.array([statistics.NormalDist().inv_cdf(0.5)])
    quantiles = [statistics.NormalDist().inv_cdf(k / bins) for k in range(1, bins)]
    return np.array([CATCH_ALL_THRESHOLD] + quantiles)


def init_imprint(bins: int, pixels: int,
                 distribution: str = "standard_normal") -> ImprintBlock:
    """Imprint parameters for a flattened input of ``pixels`` coordinates.

    Every first-layer row is the same 1/pixels averaging probe; biases are the
    negated thresholds (descending). The second layer spreads every bin evenly
    back over the pixels, so together with the mean connection the block's
    output rises monotonically with the input's brightness and every active
    bin keeps a live gradient path (a bin whose combined output coefficient
    vanished would leave no bias gradient to divide by).
    """
    if distribution != "standard_normal":
        raise ParameterError(f"unsupported input distribution {distribution!r}")
    thresholds = bin_thresholds(bins)
    w1 = np.full((bins, pixels), 1.0 / pixels)
    b1 = -thresholds
    w2 = np.full((pixels, bins), 1.0 / bins)
    return ImprintBlock(w1=w1, b1=b1, w2=w2)


def _shift_sources(layer, offset: int):
    if isinstance(layer, (AddMeanSkip, ConcatSkip)):
        return dataclasses.replace(layer, source=layer.source + offset)
    return layer


def surgery_prepend(model: ModelSpec, input_shape=None,
                    bins: int = DEFAULT_BINS) -> ModelSpec:
    """Model with the imprint block grafted in front; original layers untouched."""
    shape = tuple(input_shape) if input_shape is not None else model.input_shape
    if shape != model.input_shape:
        raise DimensionError(f"input shape {shape} != model input {model.input_shape}")
    pixels = int(np.prod(shape))
    prelude = (Flatten(), Dense(pixels, bins), Relu(),
               Dense(bins, pixels, bias=False), AddMeanSkip(source=2),
               Reshape(shape))
    shifted = tuple(_shift_sources(layer, PRELUDE_LENGTH) for layer in model.layers)
    return ModelSpec(prelude + shifted, shape)


def imprint_parameter_count(pixels: int, bins: int) -> int:
    """Parameters added by the surgery: two bias-free-by-half dense layers."""
    return pixels * bins + bins + bins * pixels


def surgery_weights(modified: ModelSpec, block: ImprintBlock,
                    original_weights: dict | None = None,
                    rng: Rng | None = None) -> dict[str, np.ndarray]:
    """Weights for a surgically modified model.

    Downstream weights are re-keyed from ``original_weights`` if given,
    otherwise freshly initialized from ``rng``.
    """
    if original_weights is not None:
        weights = {}
        for key, value in original_weights.items():
            idx, name = key.split(".", 1)
            weights[f"{int(idx) + PRELUDE_LENGTH}.{name}"] = value
    elif rng is not None:
        weights = {k: v for k, v in init_weights(modified, rng).items()
                   if int(k.split(".")[0]) >= PRELUDE_LENGTH}
    else:
        raise ParameterError("need original weights or an rng for downstream init")
    weights["1.W"] = block.w1.copy()
    weights["1.b"] = block.b1.copy()
    weights["3.W"] = block.w2.copy()
    return weights


def find_imprint(model: ModelSpec) -> int | None:
    """Index of the imprint block's first dense layer, or None."""
    layers = model.layers
    start = 1 if layers and isinstance(layers[0], Flatten) else 0
    if len(layers) < start + 4:
        return None
    first, second, third, fourth = layers[start:start + 4]
    if not (isinstance(first, Dense) and isinstance(second, Relu)
            and isinstance(third, Dense) and isinstance(fourth, AddMeanSkip)):
        return None
    bins, pixels = first.out_features, first.in_features
    if not (third.in_features == bins and third.out_features == pixels):
        return None
    if fourth.source != start + 1:
        return None
    if 2 * bins > pixels:  # a genuine bottleneck probe, not a hidden layer
        return None
    return start


def detect_imprint(model: ModelSpec, weights: dict | None = None) -> bool:
    """Client-side check for a grafted imprint block.

    The signature is structural (dense -> relu -> dense -> add-mean with a
    bins << pixels bottleneck); when weights are supplied, the first layer's
    rows must additionally be constant-valued probes.
    """
    loc = find_imprint(model)
    if loc is None:
        return False
    if weights is not None:
        w1 = weights.get(f"{loc}.W")
        if w1 is None or np.ptp(w1, axis=1).max() > 1e-9:
            return False
    return True


def client_round(model: ModelSpec, weights: dict, x: np.ndarray, y: np.ndarray,
                 loss: str, dp: PrivacyParams | None, rng: Rng,
                 class_weights=None) -> GradientPacket:
    """The client's reply to a dictated round: (possibly DP) batch gradients."""
    grads = trainer.per_sample_gradients(model, weights, x, y, loss, class_weights)
    if dp is not None:
        released = trainer.clip_and_noise(grads, dp.clip_norm, dp.noise_multiplier, rng)
        return GradientPacket(released, model, len(x), clipped=True,
                              noised=dp.noise_multiplier > 0,
                              sigma=dp.noise_multiplier, clip_norm=dp.clip_norm)
    averaged = {k: v.mean(axis=0) for k, v in grads.stacked.items()}
    return GradientPacket(averaged, model, len(x))


def activity_threshold(packet: GradientPacket) -> float:
    """Bias gradients below this are noise-floor artifacts, not active bins."""
    if packet.noised and packet.sigma > 0 and packet.clip_norm is not None:
        return 10.0 * packet.sigma * packet.clip_norm / packet.batch_size
    return 1e-12


def recover(packet: GradientPacket, mean: np.ndarray, std: np.ndarray,
            threshold: float | None = None) -> ReconstructionSet:
    """Analytic recovery from one packet, de-normalized to image range.

    Every bin with a bias gradient above the activity threshold yields one
    candidate; inactive bins are skipped and counted. An empty result is a
    diagnostic, not an error. ``threshold`` overrides the flag-derived
    default of :func:`activity_threshold`.
    """
    loc = find_imprint(packet.model)
    if loc is None:
        raise ParameterError("packet carries no imprint-layer gradients")
    gw = packet.grads[f"{loc}.W"]
    gb = packet.grads[f"{loc}.b"]
    shape = packet.model.input_shape
    tau = activity_threshold(packet) if threshold is None else threshold
    images, used = [], []
    for i in range(len(gb)):
        if abs(gb[i]) > tau:
            flat = gw[i] / gb[i]
            images.append(flat.reshape(shape) * std + mean)
            used.append(i)
    stacked = (np.stack(images) if images
               else np.zeros((0,) + tuple(shape)))
    return ReconstructionSet(stacked, used, len(gb) - len(used), tau)


def run_campaign(dataset: Dataset, scenario: AttackScenario, model: ModelSpec,
                 seed: int = 0) -> list[ReconstructionSet]:
    """Simulate the malicious-server protocol over the training split.

    The server performs the surgery, dictates batch size and round count, and
    recovers candidates from each reply. The client computes the ordinary
    training loss on its true labels, applying DP processing first when
    ``scenario.dp_on_client`` is set. Deterministic for a fixed seed.
    """
    if not dataset.normalized:
        dataset = normalize(dataset)
    rng = Rng(seed)
    pixels = int(np.prod(model.input_shape))
    modified = surgery_prepend(model, model.input_shape, scenario.bins)
    block = init_imprint(scenario.bins, pixels)
    weights = surgery_weights(modified, block, rng=rng.split("downstream"))
    noise_rng = rng.split("client")
    loss = ("weighted_cross_entropy" if dataset.spec.kind == "segmentation"
            else "cross_entropy")

    x, y = dataset.train_images, dataset.train_labels
    n_batches = math.ceil(len(x) / scenario.batch_size)
    if scenario.rounds is not None:
        n_batches = min(n_batches, scenario.rounds)
    results = []
    for r in range(n_batches):
        lo = r * scenario.batch_size
        hi = min(lo + scenario.batch_size, len(x))
        packet = client_round(modified, weights, x[lo:hi], y[lo:hi], loss,
                              scenario.dp_on_client, noise_rng)
        results.append(recover(packet, dataset.mean, dataset.std))
    return results


def campaign_pool(results: list[ReconstructionSet]) -> np.ndarray:
    """All candidate images from a campaign, stacked."""
    images = [r.images for r in results if len(r.images)]
    if not images:
        return np.zeros((0,))
    return np.concatenate(images)


def save_campaign(path, dataset_samples: np.ndarray,
                  results: list[ReconstructionSet], meta: dict) -> None:
    pool = campaign_pool(results)
    packet_index = np.concatenate(
        [np.full(len(r.images), i, dtype=np.int64) for i, r in enumerate(results)]
    ) if len(pool) else np.zeros(0, dtype=np.int64)
    source_bins = np.concatenate(
        [np.asarray(r.source_bins, dtype=np.int64) for r in results if len(r.images)]
    ) if len(pool) else np.zeros(0, dtype=np.int64)
    info = dict(meta)
    info["skipped_bins"] = [r.skipped_bins for r in results]
    info["threshold"] = results[0].threshold if results else None
    tensors = {"samples": dataset_samples, "reconstructions": pool,
               "packet_index": packet_index, "source_bins": source_bins}
    write_container(path, tensors, info)


def load_campaign(path) -> tuple[np.ndarray, np.ndarray, dict]:
    """Returns (samples, reconstruction pool, metadata)."""
    tensors, meta = read_container(path)
    return tensors["samples"], tensors["reconstructions"], meta
