"""Deterministic numeric core.

Seeded randomness, affine layers with hand-derived backpropagation, Adam and
a central-difference gradient checker. Everything is float64 and
single-threaded; arrays are plain ``numpy.ndarray`` objects.

Batched inputs are row-major: a batch of ``n`` vectors of length ``d`` is an
``(n, d)`` array, and layer gradients are summed over the batch.
"""

from __future__ import annotations

import enum
import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import NumericError, ShapeError

_MASK64 = (1 << 64) - 1
_GOLDEN_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def _splitmix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


class RandomSource:
    """Counter-based SplitMix64 generator.

    The ``i``-th 64-bit output (``i = 1, 2, ...``) is
    ``splitmix64_finalizer(seed + i * 0x9E3779B97F4A7C15 mod 2**64)``, so the
    stream depends only on the seed and is identical on every platform.

    Uniform doubles take the top 53 bits: ``(x >> 11) * 2**-53`` in ``[0, 1)``.

    Normals use Box-Muller on consecutive uniform pairs ``(u1, u2)``:
    ``r = sqrt(-2 ln(1 - u1))``, emitting ``r cos(2 pi u2)`` then
    ``r sin(2 pi u2)``. A request for an odd count discards the final sine, so
    every call consumes an even number of uniforms.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self.counter = 0

    def __repr__(self) -> str:
        return f"RandomSource(seed={self.seed}, counter={self.counter})"

    def _raw(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        return _splitmix64(np.uint64(self.seed) + idx * _GOLDEN_GAMMA)

    def next_u64(self) -> int:
        return int(self._raw(1)[0])

    def uniform(self, size: int | tuple[int, ...] | None = None):
        shape = () if size is None else np.atleast_1d(size).astype(int)
        n = int(np.prod(shape))
        u = (self._raw(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        if size is None:
            return float(u[0])
        return u.reshape(tuple(shape))

    def standard_normal(self, size: int | tuple[int, ...] | None = None):
        shape = () if size is None else np.atleast_1d(size).astype(int)
        n = int(np.prod(shape))
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs) if pairs else np.zeros(0)
        r = np.sqrt(-2.0 * np.log1p(-u[0::2]))
        theta = 2.0 * math.pi * u[1::2]
        z = np.empty(2 * pairs)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        if size is None:
            return float(z[0])
        return z[:n].reshape(tuple(shape))

    def permutation(self, n: int) -> np.ndarray:
        """Uniform random permutation: stable argsort of ``n`` fresh uniforms."""
        return np.argsort(self.uniform(n), kind="stable")

    def categorical(self, probs: Sequence[float]) -> int:
        """Inverse-CDF draw of an index from (possibly unnormalized) weights."""
        p = np.asarray(probs, dtype=np.float64)
        cdf = np.cumsum(p)
        u = self.uniform() * cdf[-1]
        return min(int(np.searchsorted(cdf, u, side="right")), len(p) - 1)


def seeded_rng(seed: int) -> RandomSource:
    return RandomSource(seed)


def derive_child_seed(master_seed: int, label: str) -> int:
    """Mix a master seed with a label into an independent 64-bit seed.

    The label is hashed with SHA-256 (first 8 bytes, big-endian), XORed with
    the master seed, and passed once through the SplitMix64 finalizer.
    """
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    h = int.from_bytes(digest[:8], "big")
    mixed = np.array([(int(master_seed) ^ h) & _MASK64], dtype=np.uint64)
    return int(_splitmix64(mixed + _GOLDEN_GAMMA)[0])


# -- activations --------------------------------------------------------------


class Activation(str, enum.Enum):
    IDENTITY = "identity"
    RELU = "relu"
    TANH = "tanh"
    SIGMOID = "sigmoid"


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=np.float64)))


def softmax(z, axis: int = -1) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - np.max(z, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)


def activate(kind, z) -> np.ndarray:
    kind = Activation(kind)
    z = np.asarray(z, dtype=np.float64)
    if kind is Activation.IDENTITY:
        return z.copy()
    if kind is Activation.RELU:
        return np.maximum(z, 0.0)
    if kind is Activation.TANH:
        return np.tanh(z)
    return sigmoid(z)


def activation_grad(kind, pre_activation) -> np.ndarray:
    """Element-wise derivative; relu'(0) is taken to be 0."""
    kind = Activation(kind)
    z = np.asarray(pre_activation, dtype=np.float64)
    if kind is Activation.IDENTITY:
        return np.ones_like(z)
    if kind is Activation.RELU:
        return (z > 0.0).astype(np.float64)
    if kind is Activation.TANH:
        return 1.0 - np.tanh(z) ** 2
    s = sigmoid(z)
    return s * (1.0 - s)


def check_finite(values, what: str = "array") -> None:
    if not np.all(np.isfinite(values)):
        raise NumericError(f"non-finite values in {what}")


# -- affine layers ------------------------------------------------------------


@dataclass
class AffineLayer:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: Activation = Activation.IDENTITY

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        self.activation = Activation(self.activation)
        if self.weights.ndim != 2:
            raise ShapeError(f"weights must be 2-D, got shape {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(
                f"bias length {self.bias.shape} does not match weights rows {self.weights.shape[0]}"
            )

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    def copy(self) -> "AffineLayer":
        return AffineLayer(self.weights.copy(), self.bias.copy(), self.activation)


@dataclass
class LayerGrad:
    weights: np.ndarray
    bias: np.ndarray


@dataclass
class ForwardCache:
    inputs: np.ndarray
    pre_activation: np.ndarray


def affine_forward(layer: AffineLayer, x) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != layer.in_dim:
        raise ShapeError(f"input has dimension {x.shape[-1]}, layer expects {layer.in_dim}")
    pre = x @ layer.weights.T + layer.bias
    return pre, activate(layer.activation, pre)


def mlp_forward(layers: Sequence[AffineLayer], x) -> tuple[np.ndarray, list[ForwardCache]]:
    cache = []
    out = np.asarray(x, dtype=np.float64)
    for layer in layers:
        pre, nxt = affine_forward(layer, out)
        cache.append(ForwardCache(out, pre))
        out = nxt
    return out, cache


def mlp_backward(
    layers: Sequence[AffineLayer], cache: Sequence[ForwardCache], output_grad
) -> tuple[list[LayerGrad], np.ndarray]:
    """Backpropagate ``d loss / d output`` through the layers.

    Returns per-layer gradients (summed over the batch when inputs are 2-D)
    and ``d loss / d input``.
    """
    if len(layers) != len(cache):
        raise ShapeError(f"{len(layers)} layers but {len(cache)} cached forward entries")
    delta = np.asarray(output_grad, dtype=np.float64)
    grads: list[LayerGrad] = []
    for layer, entry in zip(reversed(layers), reversed(cache)):
        if delta.shape != entry.pre_activation.shape:
            raise ShapeError(
                f"gradient shape {delta.shape} does not match layer output {entry.pre_activation.shape}"
            )
        dpre = delta * activation_grad(layer.activation, entry.pre_activation)
        if dpre.ndim == 1:
            gw = np.outer(dpre, entry.inputs)
            gb = dpre.copy()
        else:
            gw = dpre.T @ entry.inputs
            gb = dpre.sum(axis=0)
        grads.append(LayerGrad(gw, gb))
        delta = dpre @ layer.weights
    grads.reverse()
    return grads, delta


# -- Adam ---------------------------------------------------------------------


@dataclass
class AdamState:
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    timestep: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray], **hyper) -> "AdamState":
        return cls(
            [np.zeros_like(p, dtype=np.float64) for p in params],
            [np.zeros_like(p, dtype=np.float64) for p in params],
            **hyper,
        )


def adam_step(
    params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState
) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected Adam update. Inputs are not mutated."""
    if not (len(params) == len(grads) == len(state.first_moment) == len(state.second_moment)):
        raise ShapeError("params, grads and optimizer state have different lengths")
    t = state.timestep + 1
    b1, b2 = state.beta1, state.beta2
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != np.shape(p) or m.shape != g.shape or v.shape != g.shape:
            raise ShapeError(f"shape mismatch in Adam step: param {np.shape(p)}, grad {g.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient passed to Adam")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        new_params.append(p - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps))
        new_m.append(m)
        new_v.append(v)
    new_state = AdamState(new_m, new_v, t, state.learning_rate, b1, b2, state.eps)
    return new_params, new_state


# -- gradient checking --------------------------------------------------------


@dataclass
class GradCheckReport:
    worst_relative_error: float
    worst_location: tuple[int, tuple[int, ...]] | None
    passed: bool
    checked: int = 0
    numeric_grads: list[np.ndarray] = field(default_factory=list, repr=False)


def relative_error(a, n) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    return np.abs(a - n) / np.maximum(1e-12, np.abs(a) + np.abs(n))


def gradient_check(
    loss_fn: Callable[[list[np.ndarray]], float],
    params: Sequence[np.ndarray],
    analytic_grads: Sequence[np.ndarray],
    h: float = 1e-5,
    tol: float = 1e-6,
) -> GradCheckReport:
    """Compare analytic gradients with central differences coordinate by coordinate."""
    work = [np.array(p, dtype=np.float64, copy=True) for p in params]
    worst, where, checked = 0.0, None, 0
    numeric = []
    for i, p in enumerate(work):
        num = np.zeros_like(p)
        flat = p.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            f_plus = float(loss_fn(work))
            flat[j] = orig - h
            f_minus = float(loss_fn(work))
            flat[j] = orig
            num.reshape(-1)[j] = (f_plus - f_minus) / (2.0 * h)
        err = relative_error(analytic_grads[i], num)
        checked += err.size
        if err.size and err.max() > worst:
            worst = float(err.max())
            where = (i, np.unravel_index(int(err.argmax()), err.shape))
        numeric.append(num)
    return GradCheckReport(worst, where, worst < tol, checked, numeric)
