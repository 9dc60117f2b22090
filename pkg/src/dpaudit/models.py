"""Small layer-graph neural networks with per-sample backpropagation.

Layers are declarative dataclasses; a :class:`ModelSpec` is an ordered layer
tuple plus the input shape, validated so adjacent shapes compose. The
backward pass returns parameter gradients with a leading batch axis, which
is what per-sample clipping needs. Skip-style layers (``AddMeanSkip``,
``ConcatSkip``) reference the output of an earlier layer by index; the
backward sweep accumulates their gradients at the source.

Everything runs in float64 on channels-last arrays ``(B, H, W, C)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .container import read_container, write_container
from .errors import DimensionError, TrainingError
from .numerics import Rng, contains_non_finite


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int
    bias: bool = True
    kind: str = "dense"


@dataclass(frozen=True)
class Conv3x3:
    in_channels: int
    out_channels: int
    kind: str = "conv3x3"


@dataclass(frozen=True)
class Relu:
    kind: str = "relu"


@dataclass(frozen=True)
class MaxPool2:
    kind: str = "maxpool2"


@dataclass(frozen=True)
class Flatten:
    kind: str = "flatten"


@dataclass(frozen=True)
class ScaleNorm:
    eps: float = 1e-5
    kind: str = "scale_norm"


@dataclass(frozen=True)
class Reshape:
    shape: tuple[int, ...]
    kind: str = "reshape"


@dataclass(frozen=True)
class AddMeanSkip:
    """Adds the mean of an earlier layer's output to every coordinate."""

    source: int
    kind: str = "add_mean_skip"


@dataclass(frozen=True)
class Upsample2:
    kind: str = "upsample2"


@dataclass(frozen=True)
class ConcatSkip:
    """Concatenates an earlier layer's output along the channel axis."""

    source: int
    kind: str = "concat_skip"


def _infer_shapes(layers, input_shape) -> list[tuple[int, ...]]:
    """Shape (without batch axis) of the input to each layer plus the output."""
    shapes = [tuple(input_shape)]
    for i, layer in enumerate(layers):
        s = shapes[-1]
        if isinstance(layer, Dense):
            if len(s) != 1 or s[0] != layer.in_features:
                raise DimensionError(f"layer {i}: dense expects ({layer.in_features},), got {s}")
            out = (layer.out_features,)
        elif isinstance(layer, Conv3x3):
            if len(s) != 3 or s[2] != layer.in_channels:
                raise DimensionError(f"layer {i}: conv expects (H, W, {layer.in_channels}), got {s}")
            out = (s[0], s[1], layer.out_channels)
        elif isinstance(layer, (Relu, ScaleNorm)):
            out = s
        elif isinstance(layer, MaxPool2):
            if len(s) != 3 or s[0] % 2 or s[1] % 2:
                raise DimensionError(f"layer {i}: maxpool2 needs even (H, W, C), got {s}")
            out = (s[0] // 2, s[1] // 2, s[2])
        elif isinstance(layer, Flatten):
            out = (int(np.prod(s)),)
        elif isinstance(layer, Reshape):
            if int(np.prod(s)) != int(np.prod(layer.shape)):
                raise DimensionError(f"layer {i}: cannot reshape {s} to {layer.shape}")
            out = tuple(layer.shape)
        elif isinstance(layer, AddMeanSkip):
            if not 0 <= layer.source < i:
                raise DimensionError(f"layer {i}: skip source {layer.source} out of range")
            if len(s) != 1 or len(shapes[layer.source + 1]) != 1:
                raise DimensionError(f"layer {i}: add_mean_skip needs flat tensors")
            out = s
        elif isinstance(layer, Upsample2):
            if len(s) != 3:
                raise DimensionError(f"layer {i}: upsample2 needs (H, W, C), got {s}")
            out = (2 * s[0], 2 * s[1], s[2])
        elif isinstance(layer, ConcatSkip):
            if not 0 <= layer.source < i:
                raise DimensionError(f"layer {i}: skip source {layer.source} out of range")
            src = shapes[layer.source + 1]
            if len(s) != 3 or len(src) != 3 or src[:2] != s[:2]:
                raise DimensionError(f"layer {i}: concat_skip shapes {s} vs {src}")
            out = (s[0], s[1], s[2] + src[2])
        else:
            raise DimensionError(f"layer {i}: unknown layer {layer!r}")
        shapes.append(out)
    return shapes


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple
    input_shape: tuple[int, ...]

    def __post_init__(self):
        _infer_shapes(self.layers, self.input_shape)

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        return _infer_shapes(self.layers, self.input_shape)

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.shapes[-1]

    def to_json(self) -> dict:
        out = []
        for layer in self.layers:
            if isinstance(layer, Dense):
                out.append({"kind": "dense", "in": layer.in_features,
                            "out": layer.out_features, "bias": layer.bias})
            elif isinstance(layer, Conv3x3):
                out.append({"kind": "conv3x3", "in": layer.in_channels,
                            "out": layer.out_channels})
            elif isinstance(layer, ScaleNorm):
                out.append({"kind": "scale_norm", "eps": layer.eps})
            elif isinstance(layer, Reshape):
                out.append({"kind": "reshape", "shape": list(layer.shape)})
            elif isinstance(layer, (AddMeanSkip, ConcatSkip)):
                out.append({"kind": layer.kind, "source": layer.source})
            else:
                out.append({"kind": layer.kind})
        return {"layers": out, "input_shape": list(self.input_shape)}

    @staticmethod
    def from_json(d: dict) -> "ModelSpec":
        layers = []
        for item in d["layers"]:
            kind = item["kind"]
            if kind == "dense":
                layers.append(Dense(item["in"], item["out"], item.get("bias", True)))
            elif kind == "conv3x3":
                layers.append(Conv3x3(item["in"], item["out"]))
            elif kind == "relu":
                layers.append(Relu())
            elif kind == "maxpool2":
                layers.append(MaxPool2())
            elif kind == "flatten":
                layers.append(Flatten())
            elif kind == "scale_norm":
                layers.append(ScaleNorm(item.get("eps", 1e-5)))
            elif kind == "reshape":
                layers.append(Reshape(tuple(item["shape"])))
            elif kind == "add_mean_skip":
                layers.append(AddMeanSkip(item["source"]))
            elif kind == "upsample2":
                layers.append(Upsample2())
            elif kind == "concat_skip":
                layers.append(ConcatSkip(item["source"]))
            else:
                raise DimensionError(f"unknown layer kind {kind!r}")
        return ModelSpec(tuple(layers), tuple(d["input_shape"]))


def init_weights(spec: ModelSpec, rng: Rng) -> dict[str, np.ndarray]:
    """He-normal initialization keyed by ``"<layer index>.<param>"``."""
    weights = {}
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Dense):
            scale = math.sqrt(2.0 / layer.in_features)
            weights[f"{i}.W"] = rng.normal((layer.out_features, layer.in_features), std=scale)
            if layer.bias:
                weights[f"{i}.b"] = np.zeros(layer.out_features)
        elif isinstance(layer, Conv3x3):
            scale = math.sqrt(2.0 / (9 * layer.in_channels))
            weights[f"{i}.W"] = rng.normal((3, 3, layer.in_channels, layer.out_channels),
                                           std=scale)
            weights[f"{i}.b"] = np.zeros(layer.out_channels)
        elif isinstance(layer, ScaleNorm):
            weights[f"{i}.g"] = np.array(1.0)
    return weights


def _conv_patches(x: np.ndarray) -> np.ndarray:
    """(B, H, W, C) -> contiguous (B, H*W, C*9) patch matrix, zero padding."""
    b, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(1, 2))
    # win: (B, H, W, C, 3, 3)
    return np.ascontiguousarray(win).reshape(b, h * w, c * 9)


def _layer_forward(layer, i, x, weights, cache):
    if isinstance(layer, Dense):
        y = x @ weights[f"{i}.W"].T
        if layer.bias:
            y = y + weights[f"{i}.b"]
        return y
    if isinstance(layer, Conv3x3):
        b, h, w, _ = x.shape
        patches = _conv_patches(x)
        wf = weights[f"{i}.W"].transpose(2, 0, 1, 3).reshape(-1, layer.out_channels)
        y = patches @ wf + weights[f"{i}.b"]
        return y.reshape(b, h, w, layer.out_channels)
    if isinstance(layer, Relu):
        return np.maximum(x, 0.0)
    if isinstance(layer, MaxPool2):
        b, h, w, c = x.shape
        blocks = x.reshape(b, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4)
        return blocks.reshape(b, h // 2, w // 2, c, 4).max(axis=-1)
    if isinstance(layer, Flatten):
        return x.reshape(x.shape[0], -1)
    if isinstance(layer, Reshape):
        return x.reshape(x.shape[0], *layer.shape)
    if isinstance(layer, ScaleNorm):
        flat = x.reshape(x.shape[0], -1)
        n = np.linalg.norm(flat, axis=1).reshape((-1,) + (1,) * (x.ndim - 1))
        return weights[f"{i}.g"] * x / (n + layer.eps)
    if isinstance(layer, AddMeanSkip):
        h = cache[layer.source + 1]
        return x + h.mean(axis=1, keepdims=True)
    if isinstance(layer, Upsample2):
        return x.repeat(2, axis=1).repeat(2, axis=2)
    if isinstance(layer, ConcatSkip):
        return np.concatenate([x, cache[layer.source + 1]], axis=-1)
    raise DimensionError(f"unknown layer {layer!r}")


def forward(spec: ModelSpec, weights: dict, batch: np.ndarray,
            check_finite: bool = True):
    """Run the network; returns (predictions, activation cache).

    The cache holds the input to every layer plus the final output and is
    sufficient for :func:`backward_per_sample`.

    Raises:
        TrainingError: if any activation turns non-finite (names the layer).
    """
    x = np.asarray(batch, dtype=np.float64)
    if x.shape[1:] != tuple(spec.input_shape):
        raise DimensionError(f"batch shape {x.shape[1:]} != model input {spec.input_shape}")
    cache = [x]
    for i, layer in enumerate(spec.layers):
        x = _layer_forward(layer, i, x, weights, cache)
        if check_finite and contains_non_finite(x):
            raise TrainingError(f"non-finite activation at layer {i} ({layer.kind})")
        cache.append(x)
    return x, cache


def _layer_backward(layer, i, x, g, weights, grads, pending):
    if isinstance(layer, Dense):
        grads[f"{i}.W"] = np.einsum("bo,bi->boi", g, x)
        if layer.bias:
            grads[f"{i}.b"] = g.copy()
        return g @ weights[f"{i}.W"]
    if isinstance(layer, Conv3x3):
        b, h, w, cin = x.shape
        gf = g.reshape(b, h * w, layer.out_channels)
        patches = _conv_patches(x)
        dwf = np.einsum("bpk,bpo->bko", patches, gf, optimize=True)
        grads[f"{i}.W"] = dwf.reshape(b, cin, 3, 3, layer.out_channels).transpose(0, 2, 3, 1, 4)
        grads[f"{i}.b"] = g.sum(axis=(1, 2))
        wf = weights[f"{i}.W"].transpose(2, 0, 1, 3).reshape(-1, layer.out_channels)
        dpatches = (gf @ wf.T).reshape(b, h, w, cin, 3, 3)
        dxp = np.zeros((b, h + 2, w + 2, cin))
        for di in range(3):
            for dj in range(3):
                dxp[:, di:di + h, dj:dj + w, :] += dpatches[:, :, :, :, di, dj]
        return dxp[:, 1:h + 1, 1:w + 1, :]
    if isinstance(layer, Relu):
        return g * (x > 0)
    if isinstance(layer, MaxPool2):
        b, h, w, c = x.shape
        blocks = x.reshape(b, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4)
        flat = blocks.reshape(b, h // 2, w // 2, c, 4)
        idx = flat.argmax(axis=-1)
        dflat = np.zeros_like(flat)
        np.put_along_axis(dflat, idx[..., None], g[..., None], axis=-1)
        return (dflat.reshape(b, h // 2, w // 2, c, 2, 2)
                .transpose(0, 1, 4, 2, 5, 3).reshape(b, h, w, c))
    if isinstance(layer, (Flatten, Reshape)):
        return g.reshape(x.shape)
    if isinstance(layer, ScaleNorm):
        gain = weights[f"{i}.g"]
        flat_x = x.reshape(x.shape[0], -1)
        flat_g = g.reshape(x.shape[0], -1)
        n = np.linalg.norm(flat_x, axis=1, keepdims=True)
        denom = n + layer.eps
        grads[f"{i}.g"] = (flat_g * flat_x).sum(axis=1) / denom[:, 0]
        inner = (flat_g * flat_x).sum(axis=1, keepdims=True)
        dx = gain / denom * flat_g - gain * inner / (np.maximum(n, 1e-300) * denom**2) * flat_x
        return dx.reshape(x.shape)
    if isinstance(layer, AddMeanSkip):
        # y = x + mean(h); the 1/N factor is applied when the sweep reaches
        # the source activation, whose width is only known there
        pending.setdefault(layer.source + 1, []).append(("mean", g.sum(axis=1, keepdims=True)))
        return g
    if isinstance(layer, Upsample2):
        b, h, w, c = g.shape
        return g.reshape(b, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))
    if isinstance(layer, ConcatSkip):
        cx = x.shape[-1]
        pending.setdefault(layer.source + 1, []).append(("direct", g[..., cx:]))
        return g[..., :cx].copy()
    raise DimensionError(f"unknown layer {layer!r}")


def backward_per_sample(spec: ModelSpec, weights: dict, cache: list,
                        dloss_dout: np.ndarray) -> dict[str, np.ndarray]:
    """Per-sample parameter gradients from the loss gradient at the output.

    Returns a dict keyed like the weights, each array carrying a leading
    batch axis.
    """
    grads: dict[str, np.ndarray] = {}
    pending: dict[int, list] = {}
    g = dloss_dout
    for i in range(len(spec.layers) - 1, -1, -1):
        extra = pending.pop(i + 1, [])
        for tag, value in extra:
            if tag == "direct":
                g = g + value
            else:  # mean-distributed: value is (B, 1) summed downstream grad
                n_bins = cache[i + 1].shape[1]
                g = g + value / n_bins
        g = _layer_backward(spec.layers[i], i, cache[i], g, weights, grads, pending)
    return grads


def average_gradients(per_sample: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: v.mean(axis=0) for k, v in per_sample.items()}


# --- model builders -------------------------------------------------------

def dense_classifier(input_shape, n_classes: int, hidden: int = 32) -> ModelSpec:
    d = int(np.prod(input_shape))
    return ModelSpec((Flatten(), Dense(d, hidden), Relu(),
                      Dense(hidden, n_classes)), tuple(input_shape))


def conv_classifier(input_shape, n_classes: int, widths=(6, 12),
                    hidden: int = 32, scale_norm: bool = False) -> ModelSpec:
    h, w, c = input_shape
    layers = [Conv3x3(c, widths[0]), Relu(), MaxPool2(),
              Conv3x3(widths[0], widths[1]), Relu(), MaxPool2(), Flatten()]
    flat = (h // 4) * (w // 4) * widths[1]
    if scale_norm:
        layers.append(ScaleNorm())
    layers += [Dense(flat, hidden), Relu(), Dense(hidden, n_classes)]
    return ModelSpec(tuple(layers), tuple(input_shape))


def unet_lite(input_shape, channels: int = 8, n_classes: int = 3) -> ModelSpec:
    """One-down, one-up segmentation net with a single skip concatenation."""
    h, w, c = input_shape
    layers = (
        Conv3x3(c, channels), Relu(),          # skip source: layer 1 output
        MaxPool2(),
        Conv3x3(channels, 2 * channels), Relu(),
        Upsample2(),
        ConcatSkip(source=1),
        Conv3x3(3 * channels, channels), Relu(),
        Conv3x3(channels, n_classes),
    )
    return ModelSpec(layers, tuple(input_shape))


def model_zoo(input_shape=(16, 16, 1), n_classes: int = 2) -> dict[str, ModelSpec]:
    """Clean reference models covering every layer type (tests, detection)."""
    seg_shape = (32, 32, 1)
    return {
        "dense": dense_classifier(input_shape, n_classes),
        "conv": conv_classifier(input_shape, n_classes),
        "conv_scale_norm": conv_classifier(input_shape, n_classes, scale_norm=True),
        "unet_lite": unet_lite(seg_shape),
    }


def save_model(path, spec: ModelSpec, weights: dict, meta: dict | None = None) -> None:
    info = {"model": spec.to_json()}
    if meta:
        info.update(meta)
    write_container(path, weights, info)


def load_model(path) -> tuple[ModelSpec, dict, dict]:
    tensors, meta = read_container(path)
    return ModelSpec.from_json(meta["model"]), tensors, meta
