"""Hand-derived gradients of the logistic loss of the attention model.

For one sample with ``c = Z^T v`` and ``g = l'(y f) y``::

    grad_v = g Z S 1
    grad_W = g Z (diag(c) S - S diag(S^T c)) Z^T

The second line is the factored form of the triple sum over (j, j', j'')
in :func:`grad_W_triple_sum`, which is kept as an independent oracle.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .datagen import antithetic_expand, as_batch, sample_pretrain_batch
from .model import ModelParams, NumericalOverflowError, forward, lprime, logistic_loss, loss_on_dataset

CHUNK = 1024


@dataclass
class GradPair:
    gv: np.ndarray
    gW: np.ndarray

    def __post_init__(self):
        if not (np.all(np.isfinite(self.gv)) and np.all(np.isfinite(self.gW))):
            raise NumericalOverflowError("non-finite gradient")

    def blocks(self, d):
        """(gv1, gv2, gW11, gW12, gW21, gW22)"""
        return (self.gv[:d], self.gv[d:], self.gW[:d, :d], self.gW[:d, d:],
                self.gW[d:, :d], self.gW[d:, d:])


@dataclass
class BatchStats:
    """By-products of a gradient pass, reused for logging."""

    loss: float
    S_sum: np.ndarray
    max_abs_f: float
    n: int


def tree_sum(a: np.ndarray) -> np.ndarray:
    """Sum along axis 0 by repeatedly adding adjacent pairs.

    The order is fixed by index alone, and adjacent antithetic partners are
    combined first, so their odd-symmetric parts cancel to exactly zero.
    """
    a = np.asarray(a)
    if a.shape[0] == 0:
        raise ValueError("empty reduction")
    while a.shape[0] > 1:
        if a.shape[0] % 2:
            head = a[0:-1:2] + a[1::2]
            a = np.concatenate([head, a[-1:]])
        else:
            a = a[0::2] + a[1::2]
    return a[0]


def per_sample_grads(Z, y, params: ModelParams, iteration=None):
    """Per-sample (gv, gW, f, S) for a stack of inputs."""
    Z = np.asarray(Z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    out = forward(Z, params, iteration)
    S, f = out.S, np.asarray(out.f)
    g = lprime(y * f) * y
    Zt = np.swapaxes(Z, -1, -2)
    c = Zt @ params.v
    gv = g[:, None] * (Z @ S.sum(axis=-1)[..., None])[..., 0]
    M = c[:, :, None] * S - S * (c[:, None, :] @ S)
    gW = g[:, None, None] * (Z @ M @ Zt)
    return gv, gW, f, S


def grad_sample(Z, y, params: ModelParams, iteration=None) -> GradPair:
    gv, gW, _, _ = per_sample_grads(np.asarray(Z)[None], np.array([y], dtype=np.float64), params, iteration)
    return GradPair(gv[0], gW[0])


def grad_W_triple_sum(Z, y, params: ModelParams) -> np.ndarray:
    """Reference gradient in W written as the explicit triple sum (O(D^3))."""
    Z = np.asarray(Z, dtype=np.float64)
    out = forward(Z, params)
    S, f = out.S, out.f
    D = Z.shape[1]
    g = lprime(y * f) * y
    G = np.zeros_like(params.W)
    for j in range(D):
        zj = Z[:, j]
        for jp in range(D):
            vz = params.v @ Z[:, jp]
            for jpp in range(D):
                if jpp == jp:
                    continue
                G += S[jp, j] * S[jpp, j] * vz * np.outer(Z[:, jp] - Z[:, jpp], zj)
    return g * G


def _threads():
    n = os.environ.get("ATTNLAB_THREADS")
    return max(1, int(n)) if n else (os.cpu_count() or 1)


def _chunk_sums(b, params, iteration, lo, hi):
    gv, gW, f, S = per_sample_grads(b.Z[lo:hi], b.y[lo:hi], params, iteration)
    loss = logistic_loss(b.y[lo:hi] * f)
    return tree_sum(gv), tree_sum(gW), tree_sum(np.atleast_1d(loss)), tree_sum(S), float(np.max(np.abs(f)))


def grad_batch_with_stats(samples, params: ModelParams, iteration=None, parallel=False,
                          chunk=CHUNK) -> tuple[GradPair, BatchStats]:
    b = as_batch(samples)
    n = len(b)
    if n == 0:
        raise ValueError("gradient of an empty batch")
    bounds = [(lo, min(n, lo + chunk)) for lo in range(0, n, chunk)]
    if parallel and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=_threads()) as ex:
            parts = list(ex.map(lambda lh: _chunk_sums(b, params, iteration, *lh), bounds))
    else:
        parts = [_chunk_sums(b, params, iteration, lo, hi) for lo, hi in bounds]
    gv = tree_sum(np.stack([p[0] for p in parts])) / n
    gW = tree_sum(np.stack([p[1] for p in parts])) / n
    loss = float(tree_sum(np.stack([p[2] for p in parts]))) / n
    S_sum = tree_sum(np.stack([p[3] for p in parts]))
    max_f = max(p[4] for p in parts)
    return GradPair(gv, gW), BatchStats(loss, S_sum, max_f, n)


def grad_batch(samples, params: ModelParams, iteration=None, parallel=False) -> GradPair:
    """Mean per-sample gradient, reduced in a fixed order."""
    return grad_batch_with_stats(samples, params, iteration, parallel)[0]


def population_grad_mc(task, params: ModelParams, B: int, rng, antithetic=True) -> GradPair:
    """Monte-Carlo estimate of the population gradient from B fresh draws."""
    if B < 1:
        raise ValueError("B must be >= 1")
    b = sample_pretrain_batch(task, B, rng)
    if antithetic:
        b = antithetic_expand(b)
    return grad_batch(b, params)


def fd_grad(samples, params: ModelParams, h=1e-5) -> GradPair:
    """Central finite differences of the mean loss, step ``h * (1 + |theta|)``."""
    if not h > 0:
        raise ValueError("h must be positive")
    b = as_batch(samples)
    p = params.copy()

    def partials(arr):
        out = np.zeros_like(arr)
        flat, res = arr.reshape(-1), out.reshape(-1)
        for k in range(flat.size):
            x0 = flat[k]
            step = h * (1.0 + abs(x0))
            flat[k] = x0 + step
            up = loss_on_dataset(p, b)
            flat[k] = x0 - step
            down = loss_on_dataset(p, b)
            flat[k] = x0
            res[k] = (up - down) / (2 * step)
        return out

    return GradPair(partials(p.v), partials(p.W))
