"""Dense float64 tensor helpers and deterministic random number generation.

Tensors are plain C-order ``numpy.ndarray`` objects in double precision;
the functions here wrap the numpy kernels with the shape/domain checks the
rest of the toolkit relies on. Double precision is mandatory: the gradient
inversion path divides very small gradients and loses exactness in float32.

Randomness comes from :class:`Rng`, a thin facade over numpy's Philox
counter-based bit generator. Parallel work derives disjoint child streams
from ``(seed, stream id)`` without any coordination between workers.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .errors import DimensionError, ParameterError

Tensor = np.ndarray


def as_tensor(data, shape=None) -> Tensor:
    """Coerce ``data`` to a float64 array, optionally reshaped."""
    arr = np.asarray(data, dtype=np.float64)
    if shape is not None:
        arr = arr.reshape(shape)
    return arr


def contains_non_finite(x: Tensor) -> bool:
    """True if ``x`` holds any NaN or infinity. Callers use this as a guard."""
    return not bool(np.isfinite(x).all())


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-D tensors.

    Raises:
        DimensionError: if the operands are not 2-D or inner dims disagree.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions disagree: {a.shape} x {b.shape}")
    return a @ b


def conv2d(x: Tensor, kernel: Tensor) -> Tensor:
    """Stride-1 zero-padded ("same") 2-D convolution of a single image.

    Args:
        x: image of shape (H, W) or (H, W, Cin).
        kernel: filter of shape (k, k) or (k, k, Cin, Cout), k odd.

    Returns:
        Array of shape (H, W) respectively (H, W, Cout).
    """
    x = np.asarray(x, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    squeeze_channels = x.ndim == 2
    if squeeze_channels:
        x = x[:, :, None]
        if kernel.ndim != 2:
            raise DimensionError("2-D image requires a 2-D kernel")
        kernel = kernel[:, :, None, None]
    if x.ndim != 3 or kernel.ndim != 4:
        raise DimensionError(f"bad conv2d shapes: {x.shape}, {kernel.shape}")
    k = kernel.shape[0]
    if kernel.shape[1] != k or k % 2 != 1:
        raise DimensionError("kernel must be square with odd side")
    if kernel.shape[2] != x.shape[2]:
        raise DimensionError("kernel input channels do not match image")
    h, w, cin = x.shape
    pad = k // 2
    xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(0, 1))
    # windows: (H, W, Cin, k, k); contract against kernel (k, k, Cin, Cout)
    out = np.einsum("hwcij,ijco->hwo", windows, kernel, optimize=True)
    return out[:, :, 0] if squeeze_channels else out


def _derive_key(seed: int, stream: int) -> int:
    # stable 128-bit Philox key from (seed, stream); independent of PYTHONHASHSEED
    raw = f"{seed}:{stream}".encode()
    return int.from_bytes(hashlib.blake2s(raw, digest_size=16).digest(), "little")


class Rng:
    """Deterministic counter-based random generator.

    The same ``(seed, stream)`` pair and call sequence always reproduces the
    same outputs. ``split`` derives an independent child stream, so parallel
    runs can partition randomness by run id without sharing state.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed)
        self.stream = int(stream)
        self._gen = np.random.Generator(np.random.Philox(key=_derive_key(self.seed, self.stream)))

    def split(self, label) -> "Rng":
        """Child generator for ``label`` (int or string), independent of self."""
        if isinstance(label, str):
            sub = int.from_bytes(hashlib.blake2s(label.encode(), digest_size=8).digest(), "little")
        else:
            sub = int(label)
        return Rng(self.seed, (self.stream * 0x9E3779B97F4A7C15 + sub + 1) % (1 << 63))

    def normal(self, shape=(), std: float = 1.0) -> Tensor:
        if std < 0:
            raise ParameterError(f"std must be nonnegative, got {std}")
        if std == 0:
            # degenerate draw: exact zeros, consumes no stream state
            return np.zeros(shape, dtype=np.float64)
        return self._gen.normal(0.0, std, size=shape)

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> Tensor:
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def gaussian(rng: Rng, shape, std: float) -> Tensor:
    """I.i.d. zero-mean normal tensor with standard deviation ``std``.

    ``std == 0`` returns an exact zero tensor; negative ``std`` raises
    :class:`ParameterError`.
    """
    return rng.normal(shape, std)
