"""Data generation for group-sparse classification.

Pretraining data: every group of ``d`` features is i.i.d. Gaussian and the
label is the sign of one group's projection onto a fixed unit direction.
Downstream data: same layout, a fresh direction, and a hard margin.

Inputs to the model are assembled as ``Z = [X; P]`` where ``P`` holds the
sine positional encodings, one column per group.
"""

from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

STREAMS = ("pretrain-data", "downstream-data", "v-star", "v-tilde", "eval", "theory-eval", "shuffle", "test")


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent named random stream derived from a root seed.

    Streams are keyed by name rather than spawn order, so adding a consumer
    never shifts the draws of another one.
    """
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))


def sign(a):
    """Elementwise sign with sign(0) = +1."""
    return np.where(np.asarray(a) >= 0, 1.0, -1.0)


def random_unit_vector(d: int, rng: np.random.Generator) -> np.ndarray:
    v = rng.standard_normal(d)
    return v / np.linalg.norm(v)


@dataclass(frozen=True)
class PositionalEncodingSet:
    D: int
    P: np.ndarray

    @property
    def gram(self) -> np.ndarray:
        return self.P.T @ self.P


def make_positional_encodings(D: int) -> PositionalEncodingSet:
    """Sine encodings ``P[k-1, j-1] = sin(k * j * pi / (D + 1))``.

    Columns are orthogonal with squared norm ``(D + 1) / 2``.
    """
    if not isinstance(D, (int, np.integer)) or D < 1:
        raise ValueError(f"D must be a positive integer, got {D!r}")
    k = np.arange(1, D + 1, dtype=np.float64)
    P = np.sin(np.outer(k, k) * (np.pi / (D + 1)))
    P.setflags(write=False)
    return PositionalEncodingSet(D=int(D), P=P)


def _check_unit(v: np.ndarray, name: str) -> None:
    if abs(np.linalg.norm(v) - 1.0) > 1e-12:
        raise ValueError(f"{name} must have unit norm, got {np.linalg.norm(v)!r}")


@dataclass(frozen=True)
class GroupSparseTask:
    d: int
    D: int
    j_star: int  # 1-based
    v_star: np.ndarray
    sigma_x: float = 0.25

    def __post_init__(self):
        v = np.asarray(self.v_star, dtype=np.float64)
        object.__setattr__(self, "v_star", v)
        if v.shape != (self.d,):
            raise ValueError(f"v_star must have shape ({self.d},), got {v.shape}")
        _check_unit(v, "v_star")
        if not 1 <= self.j_star <= self.D:
            raise ValueError(f"j_star must lie in [1, {self.D}], got {self.j_star}")
        if not self.sigma_x > 0:
            raise ValueError("sigma_x must be positive")

    @classmethod
    def random(cls, d, D, j_star, sigma_x=0.25, rng=None, seed=0):
        rng = rng if rng is not None else stream(seed, "v-star")
        return cls(d=d, D=D, j_star=j_star, v_star=random_unit_vector(d, rng), sigma_x=sigma_x)


@dataclass(frozen=True)
class DownstreamTask:
    d: int
    D: int
    j_star: int  # 1-based
    v_tilde: np.ndarray
    gamma: float = 1.0
    sigma_tilde: float = 1.0
    noise: str = "gaussian"

    def __post_init__(self):
        v = np.asarray(self.v_tilde, dtype=np.float64)
        object.__setattr__(self, "v_tilde", v)
        if v.shape != (self.d,):
            raise ValueError(f"v_tilde must have shape ({self.d},), got {v.shape}")
        _check_unit(v, "v_tilde")
        if not 1 <= self.j_star <= self.D:
            raise ValueError(f"j_star must lie in [1, {self.D}], got {self.j_star}")
        if not (self.gamma > 0 and self.sigma_tilde > 0):
            raise ValueError("gamma and sigma_tilde must be positive")
        if self.noise not in ("gaussian", "uniform"):
            raise ValueError(f"unknown noise model {self.noise!r}")

    @classmethod
    def random(cls, d, D, j_star, gamma=1.0, sigma_tilde=1.0, rng=None, seed=0):
        rng = rng if rng is not None else stream(seed, "v-tilde")
        return cls(d=d, D=D, j_star=j_star, v_tilde=random_unit_vector(d, rng),
                   gamma=gamma, sigma_tilde=sigma_tilde)


def assemble(X: np.ndarray, P: np.ndarray) -> np.ndarray:
    """Stack features over positional encodings; works on one X or a stack."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        return np.vstack([X, P])
    return np.concatenate([X, np.broadcast_to(P, (X.shape[0],) + P.shape)], axis=1)


@dataclass(frozen=True)
class Sample:
    X: np.ndarray
    y: float
    Z: np.ndarray


@dataclass
class Batch:
    """A stack of samples sharing one positional block.

    ``X`` has shape (n, d, D), ``y`` has shape (n,). ``Z`` is built lazily.
    """

    X: np.ndarray
    y: np.ndarray
    P: np.ndarray
    _Z: np.ndarray | None = field(default=None, repr=False)

    def __len__(self):
        return len(self.y)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return Batch(self.X[i], self.y[i], self.P)
        return Sample(self.X[i], float(self.y[i]), assemble(self.X[i], self.P))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def Z(self) -> np.ndarray:
        if self._Z is None:
            self._Z = assemble(self.X, self.P)
        return self._Z

    def take(self, idx) -> "Batch":
        return Batch(self.X[idx], self.y[idx], self.P)

    @classmethod
    def from_samples(cls, samples: Sequence[Sample], P: np.ndarray | None = None) -> "Batch":
        samples = list(samples)
        if not samples:
            raise ValueError("empty sample list")
        d = samples[0].X.shape[0]
        if P is None:
            P = samples[0].Z[d:]
        X = np.stack([s.X for s in samples])
        y = np.array([s.y for s in samples], dtype=np.float64)
        return cls(X, y, P)


def as_batch(samples) -> Batch:
    if isinstance(samples, Batch):
        return samples
    if isinstance(samples, Sample):
        return Batch.from_samples([samples])
    return Batch.from_samples(samples)


def pretrain_labels(task: GroupSparseTask, X: np.ndarray) -> np.ndarray:
    return sign(X[..., task.j_star - 1] @ task.v_star)


def sample_pretrain_batch(task: GroupSparseTask, n: int, rng: np.random.Generator) -> Batch:
    X = task.sigma_x * rng.standard_normal((n, task.d, task.D))
    P = make_positional_encodings(task.D).P
    return Batch(X, pretrain_labels(task, X), P)


def sample_pretrain(task: GroupSparseTask, rng: np.random.Generator) -> Sample:
    return sample_pretrain_batch(task, 1, rng)[0]


def antithetic_expand(samples) -> Batch:
    """Pair every (X, y) with (-X, -y), interleaved as s1, -s1, s2, -s2, ...

    Interleaving keeps each pair adjacent so a pairwise reduction cancels the
    odd-symmetric gradient blocks exactly.
    """
    b = as_batch(samples)
    n = len(b)
    X = np.empty((2 * n,) + b.X.shape[1:])
    y = np.empty(2 * n)
    X[0::2], X[1::2] = b.X, -b.X
    y[0::2], y[1::2] = b.y, -b.y
    return Batch(X, y, b.P)


def enforce_margin(x: np.ndarray, y, v: np.ndarray, gamma: float) -> np.ndarray:
    """Shift ``x`` along ``y * v`` by the least amount giving ``y <x, v> >= gamma``.

    Shifted points land a rounding-error bound above ``gamma`` so the margin
    survives any summation order of the dot product. Vectorized over a
    leading axis.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    proj = y * (x @ v)
    slack = 4 * v.size * np.finfo(np.float64).eps * (gamma + np.sum(np.abs(x * v), axis=-1))
    shift = np.where(proj < gamma, gamma - proj + slack, 0.0)
    out = x + (shift * y)[..., None] * v
    short = y * (out @ v) < gamma
    while np.any(short):
        out = np.where(short[..., None], out + (y * slack)[..., None] * v, out)
        short = y * (out @ v) < gamma
    return out


def sample_downstream_batch(task: DownstreamTask, n: int, rng: np.random.Generator) -> Batch:
    shape = (n, task.d, task.D)
    if task.noise == "gaussian":
        X = task.sigma_tilde * rng.standard_normal(shape)
    else:
        a = np.sqrt(3.0) * task.sigma_tilde
        X = rng.uniform(-a, a, shape)
    j = task.j_star - 1
    y = sign(X[:, :, j] @ task.v_tilde)
    X[:, :, j] = enforce_margin(X[:, :, j], y, task.v_tilde, task.gamma)
    return Batch(X, y, make_positional_encodings(task.D).P)


def sample_downstream(task: DownstreamTask, rng: np.random.Generator) -> Sample:
    return sample_downstream_batch(task, 1, rng)[0]


def export_csv(samples, path: str | Path) -> None:
    """One row per sample: y, then X flattened column-major."""
    b = as_batch(samples)
    n, d, D = b.X.shape
    header = ["y"] + [f"x_{j},{k}" for j in range(1, D + 1) for k in range(1, d + 1)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for X, y in zip(b.X, b.y):
            w.writerow([repr(float(y))] + [repr(float(a)) for a in X.ravel(order="F")])


def load_csv(path: str | Path, P: np.ndarray | None = None) -> Batch:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        rows = [list(map(float, row)) for row in r]
    last = header[-1][2:].split(",")
    D, d = int(last[0]), int(last[1])
    arr = np.array(rows, dtype=np.float64).reshape(-1, 1 + d * D)
    X = arr[:, 1:].reshape(-1, D, d).transpose(0, 2, 1).copy()
    P = make_positional_encodings(D).P if P is None else P
    return Batch(X, arr[:, 0].copy(), P)
