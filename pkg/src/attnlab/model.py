"""One-layer softmax self-attention with a value vector.

``f(Z) = v^T Z S 1`` where column ``j`` of ``S`` is the softmax over ``j'``
of ``z_{j'}^T W z_j``. All arrays are float64. Functions accept a single
input ``Z`` of shape (d+D, D) or a stack of shape (n, d+D, D).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datagen import as_batch


class NumericalOverflowError(FloatingPointError):
    """Non-finite value during evaluation; carries the iteration if known."""

    def __init__(self, message, iteration=None):
        if iteration is not None:
            message = f"{message} (iteration {iteration})"
        super().__init__(message)
        self.iteration = iteration


class ModelParams:
    """Trainable pair (v, W) with block views.

    ``v1``/``v2`` and ``W11``/``W12``/``W21``/``W22`` are numpy views into
    ``v`` and ``W``; writing to a block writes to the full array.
    """

    def __init__(self, v, W, d):
        self.v = np.asarray(v, dtype=np.float64)
        self.W = np.asarray(W, dtype=np.float64)
        self.d = int(d)
        m = self.v.shape[0]
        if self.W.shape != (m, m) or not 0 < self.d < m:
            raise ValueError(f"inconsistent shapes: v {self.v.shape}, W {self.W.shape}, d={d}")

    @classmethod
    def zeros(cls, d, D):
        return cls(np.zeros(d + D), np.zeros((d + D, d + D)), d)

    @property
    def D(self):
        return self.v.shape[0] - self.d

    @property
    def v1(self):
        return self.v[: self.d]

    @property
    def v2(self):
        return self.v[self.d:]

    @property
    def W11(self):
        return self.W[: self.d, : self.d]

    @property
    def W12(self):
        return self.W[: self.d, self.d:]

    @property
    def W21(self):
        return self.W[self.d:, : self.d]

    @property
    def W22(self):
        return self.W[self.d:, self.d:]

    def copy(self):
        return ModelParams(self.v.copy(), self.W.copy(), self.d)

    def is_finite(self):
        return bool(np.all(np.isfinite(self.v)) and np.all(np.isfinite(self.W)))

    def __eq__(self, other):
        if not isinstance(other, ModelParams):
            return NotImplemented
        return (self.d == other.d and np.array_equal(self.v, other.v)
                and np.array_equal(self.W, other.W))

    def __repr__(self):
        return f"ModelParams(d={self.d}, D={self.D}, |v|={np.linalg.norm(self.v):.4g}, |W|={np.linalg.norm(self.W):.4g})"


@dataclass(frozen=True)
class AttentionOutput:
    S: np.ndarray
    f: float | np.ndarray


def logits(Z, W):
    """``H[j', j] = z_{j'}^T W z_j``."""
    with np.errstate(invalid="ignore", over="ignore"):
        return np.swapaxes(Z, -1, -2) @ (W @ Z)


def softmax_columns(H, iteration=None):
    if not np.all(np.isfinite(H)):
        raise NumericalOverflowError("non-finite attention logits", iteration)
    E = np.exp(H - H.max(axis=-2, keepdims=True))
    return E / E.sum(axis=-2, keepdims=True)


def attention_matrix(Z, W, iteration=None):
    """Column-stochastic score matrix for one input or a stack of inputs."""
    Z = np.asarray(Z, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    if Z.shape[-2] != W.shape[0]:
        raise ValueError(f"Z has {Z.shape[-2]} rows but W is {W.shape}")
    return softmax_columns(logits(Z, W), iteration)


def forward(Z, params: ModelParams, iteration=None) -> AttentionOutput:
    Z = np.asarray(Z, dtype=np.float64)
    S = attention_matrix(Z, params.W, iteration)
    # v^T Z S 1 = (Z^T v) . (S 1)
    c = np.swapaxes(Z, -1, -2) @ params.v
    f = np.sum(c * S.sum(axis=-1), axis=-1)
    if Z.ndim == 2:
        f = float(f)
    return AttentionOutput(S, f)


def logistic_loss(a):
    """``log(1 + exp(-a))`` without overflow."""
    a = np.asarray(a, dtype=np.float64)
    out = np.maximum(0.0, -a) + np.log1p(np.exp(-np.abs(a)))
    return float(out) if out.ndim == 0 else out


def lprime(a):
    """Derivative of the logistic loss, ``-1 / (1 + exp(a))``."""
    a = np.asarray(a, dtype=np.float64)
    e = np.exp(-np.abs(a))
    out = np.where(a >= 0, -e / (1.0 + e), -1.0 / (1.0 + e))
    return float(out) if out.ndim == 0 else out


def margins(params: ModelParams, samples, iteration=None):
    b = as_batch(samples)
    return b.y * forward(b.Z, params, iteration).f


def loss_on_dataset(params: ModelParams, samples, iteration=None) -> float:
    b = as_batch(samples)
    if len(b) == 0:
        raise ValueError("loss over an empty dataset")
    return float(np.mean(logistic_loss(margins(params, b, iteration))))
