"""Dense-matrix helpers, seeded RNG streams, gradient checking and optimizers.

Matrices are plain ``float64`` numpy arrays. Every differentiable operation
used by the model has a hand-written backward function next to its forward.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class ProbeError(ArithmeticError):
    """Raised when a finite-difference probe produces a non-finite value."""


class TrainingDivergence(ArithmeticError):
    """Raised when an optimizer receives a non-finite gradient."""


def _tag_hash(tag: str) -> int:
    return int.from_bytes(hashlib.blake2b(tag.encode("utf-8"), digest_size=8).digest(), "little")


class Rng:
    """Seeded random stream.

    Sub-streams for distinct purposes are derived as ``seed XOR hash(tag)``
    where the hash is the first 8 bytes of BLAKE2b over the UTF-8 tag, so
    that adding a new consumer never shifts the draws of existing ones.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.gen = np.random.Generator(np.random.PCG64(self.seed))

    def sub(self, tag: str) -> "Rng":
        return Rng(self.seed ^ _tag_hash(tag))

    def normal(self, size=None, scale: float = 1.0) -> np.ndarray:
        return self.gen.normal(0.0, scale, size=size)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self.gen.uniform(low, high, size=size)

    def integers(self, low: int, high: int | None = None, size=None):
        return self.gen.integers(low, high, size=size)

    def choice(self, seq, size=None, replace: bool = True, p=None):
        return self.gen.choice(seq, size=size, replace=replace, p=p)

    def permutation(self, x):
        return self.gen.permutation(x)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed})"


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def softmax_rows(m: np.ndarray) -> np.ndarray:
    z = m - m.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows_backward(s: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the logits given the softmax output ``s``."""
    return s * (grad - (grad * s).sum(axis=-1, keepdims=True))


def log_softmax_rows(m: np.ndarray) -> np.ndarray:
    z = m - m.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def sigmoid(x):
    """Logistic function, stable for large ``|x|``; accepts scalars or arrays."""
    if np.isscalar(x):
        if x >= 0:
            return 1.0 / (1.0 + math.exp(-x))
        e = math.exp(x)
        return e / (1.0 + e)
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def log_sigmoid(x):
    """``log(sigmoid(x))`` without overflow."""
    if np.isscalar(x):
        return -math.log1p(math.exp(-x)) if x >= 0 else x - math.log1p(math.exp(x))
    x = np.asarray(x, dtype=np.float64)
    return np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))


def grad_check(
    f: Callable[[Sequence[np.ndarray]], tuple[float, Sequence[np.ndarray]]],
    params: Sequence[np.ndarray],
    eps: float = 1e-5,
    max_coords: int | None = None,
    rng: Rng | None = None,
) -> float:
    """Compare analytic gradients against central differences.

    ``f(params)`` must return ``(value, grads)`` with one gradient array per
    parameter. Parameters are perturbed in place and restored. When
    ``max_coords`` is given, that many coordinates per parameter are probed
    (chosen with ``rng``) instead of all of them.

    Returns the max over probed coordinates of
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    value, grads = f(params)
    if not np.isfinite(value):
        raise ProbeError(f"non-finite value {value} at the base point")
    rng = rng or Rng(0)
    worst = 0.0
    for p, g in zip(params, grads):
        flat = p.reshape(-1)
        gflat = np.asarray(g, dtype=np.float64).reshape(-1)
        if flat.size != gflat.size:
            raise DimensionError(f"gradient shape {np.shape(g)} does not match parameter {p.shape}")
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            up = f(params)[0]
            flat[i] = orig - eps
            down = f(params)[0]
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise ProbeError(f"non-finite value while probing coordinate {i}")
            numeric = (up - down) / (2.0 * eps)
            analytic = gflat[i]
            err = abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))
            worst = max(worst, err)
    return worst


@dataclass
class Optimizer:
    """First-order optimizer over a dict of named parameter arrays.

    ``kind`` is ``"adam"`` or ``"sgd-momentum"``. State slots are created
    lazily on the first step, shaped like their parameters.
    """

    kind: str = "adam"
    learning_rate: float = 1e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    state: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("adam", "sgd-momentum"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        """Update ``params`` in place using ``grads`` (a subset of keys is allowed)."""
        for name, g in grads.items():
            if name not in params:
                raise KeyError(f"gradient for unknown parameter {name!r}")
            if params[name].shape != g.shape:
                raise DimensionError(f"{name}: parameter {params[name].shape} vs gradient {g.shape}")
            if not np.all(np.isfinite(g)):
                raise TrainingDivergence(f"non-finite gradient for {name}")
        self.step_count += 1
        t = self.step_count
        for name in sorted(grads):
            g = grads[name]
            p = params[name]
            if self.kind == "sgd-momentum":
                v = self.state.setdefault(name, np.zeros_like(p))
                v *= self.momentum
                v += g
                p -= self.learning_rate * v
            else:
                m, v = self.state.setdefault(name, (np.zeros_like(p), np.zeros_like(p)))
                m *= self.beta1
                m += (1.0 - self.beta1) * g
                v *= self.beta2
                v += (1.0 - self.beta2) * g * g
                m_hat = m / (1.0 - self.beta1**t)
                v_hat = v / (1.0 - self.beta2**t)
                p -= self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)


def optimizer_step(opt: Optimizer, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
    opt.step(params, grads)
    return params
