"""Gradient-descent pretraining and online-SGD fine-tuning."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .checkpoint import Checkpoint
from .datagen import (
    Batch, DownstreamTask, GroupSparseTask, antithetic_expand, as_batch,
    sample_downstream_batch, sample_pretrain_batch, stream,
)
from .diagnostics import param_metrics
from .gradients import GradPair, grad_batch_with_stats
from .model import ModelParams, NumericalOverflowError, forward, logistic_loss

log = logging.getLogger(__name__)

MAX_ABS_F = 1e6
MODES = ("empirical", "population-mc")


class DimensionMismatchError(ValueError):
    pass


@dataclass
class TrainConfig:
    d: int = 4
    D: int = 6
    n: int = 500
    sigma_x: float = 0.25
    eta: float = 0.5
    iters: int = 400
    seed: int = 0
    mode: str = "empirical"
    antithetic: bool = False
    log_every: int = 1
    j_star: int = 2
    batch_size: int | None = None  # minibatch SGD; one iteration is then one epoch
    eval_n: int | None = None  # metric set size in population-mc mode, defaults to n
    parallel: bool = False

    def validate(self):
        if not self.eta > 0:
            raise ValueError(f"eta must be positive, got {self.eta}")
        if self.iters < 1:
            raise ValueError(f"iters must be >= 1, got {self.iters}")
        if self.n < 1:
            raise ValueError(f"n must be >= 1, got {self.n}")
        if self.d < 1 or self.D < 1:
            raise ValueError("d and D must be positive")
        if not 1 <= self.j_star <= self.D:
            raise ValueError(f"j_star must lie in [1, {self.D}]")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.log_every < 1:
            raise ValueError("log_every must be >= 1")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.sigma_x > 0:
            raise ValueError("sigma_x must be positive")
        return self

    def to_dict(self):
        return asdict(self)


@dataclass
class MetricsRow:
    iter: int
    loss: float
    alpha: float
    v1_err_norm: float
    cos_sim: float
    norm_v1: float
    norm_v2: float
    norm_W12: float
    norm_W21: float
    mean_attn_jstar: float
    min_attn_jstar: float
    beta1: float
    beta2: float
    w11_resid: float
    w22_resid: float
    ratio_v2_v1: float


METRIC_FIELDS = [f.name for f in fields(MetricsRow)]


def metrics_row(t, params: ModelParams, task: GroupSparseTask, metric_set: Batch) -> MetricsRow:
    out = forward(metric_set.Z, params, t)
    loss = float(np.mean(logistic_loss(metric_set.y * out.f)))
    Sj = out.S[:, task.j_star - 1, :].mean(axis=0)
    pm = param_metrics(params, task.v_star, task.j_star)
    return MetricsRow(
        iter=t, loss=loss, mean_attn_jstar=float(Sj.mean()), min_attn_jstar=float(Sj.min()),
        ratio_v2_v1=pm["norm_v2"] / pm["norm_v1"] if pm["norm_v1"] > 0 else 0.0,
        **{k: pm[k] for k in ("alpha", "v1_err_norm", "cos_sim", "norm_v1", "norm_v2", "norm_W12",
                              "norm_W21", "beta1", "beta2", "w11_resid", "w22_resid")},
    )


def write_metrics_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_FIELDS)
        for r in rows:
            w.writerow([repr(getattr(r, k)) for k in METRIC_FIELDS])


def read_metrics_csv(path):
    with open(path, newline="") as fh:
        r = csv.DictReader(fh)
        return [MetricsRow(**{k: (int(v) if k == "iter" else float(v)) for k, v in row.items()}) for row in r]


def gd_step(params: ModelParams, grad: GradPair, eta: float) -> ModelParams:
    return ModelParams(params.v - eta * grad.gv, params.W - eta * grad.gW, params.d)


def _guard(stats, t):
    if not math.isfinite(stats.loss):
        raise NumericalOverflowError("non-finite loss", t)
    if stats.max_abs_f > MAX_ABS_F:
        raise NumericalOverflowError(f"|f| = {stats.max_abs_f:.3g} exceeds {MAX_ABS_F:g}", t)


def make_task(config: TrainConfig) -> GroupSparseTask:
    return GroupSparseTask.random(config.d, config.D, config.j_star, config.sigma_x,
                                  rng=stream(config.seed, "v-star"))


def _expand(b, config):
    return antithetic_expand(b) if config.antithetic else b


def train(config: TrainConfig, task: GroupSparseTask | None = None, callback=None):
    """Run gradient descent from zero initialization.

    Returns the logged metric rows and the final checkpoint. Row ``t``
    describes the parameters after ``t`` updates.
    """
    config.validate()
    task = task or make_task(config)
    if (task.d, task.D, task.j_star) != (config.d, config.D, config.j_star):
        raise DimensionMismatchError("task does not match the configuration")
    data_rng = stream(config.seed, "pretrain-data")
    params = ModelParams.zeros(config.d, config.D)

    if config.mode == "empirical":
        base = sample_pretrain_batch(task, config.n, data_rng)
        data = _expand(base, config)
        metric_set = data
    else:
        eval_n = config.eval_n or config.n
        metric_set = _expand(sample_pretrain_batch(task, eval_n, stream(config.seed, "eval")), config)
    shuffle_rng = stream(config.seed, "shuffle")

    rows = []
    for t in range(1, config.iters + 1):
        if config.mode == "population-mc":
            batches = [_expand(sample_pretrain_batch(task, config.n, data_rng), config)]
        elif config.batch_size is None:
            batches = [data]
        else:
            order = shuffle_rng.permutation(config.n)
            batches = [_expand(base.take(order[i:i + config.batch_size]), config)
                       for i in range(0, config.n, config.batch_size)]
        for b in batches:
            grad, stats = grad_batch_with_stats(b, params, iteration=t, parallel=config.parallel)
            _guard(stats, t)
            params = gd_step(params, grad, config.eta)
        if t % config.log_every == 0 or t == config.iters:
            row = metrics_row(t, params, task, metric_set)
            rows.append(row)
            if callback is not None:
                callback(row)
            log.debug("iter %d loss %.6g alpha %.6g", t, row.loss, row.alpha)
    provenance = {"config": config.to_dict(), "v_star": task.v_star.tolist()}
    return rows, Checkpoint.from_params(params, config.j_star, provenance)


def evaluate_accuracy(params: ModelParams, samples) -> float:
    """Fraction of samples with y f > 0; a zero margin is an error."""
    b = as_batch(samples)
    if len(b) == 0:
        raise ValueError("accuracy over an empty set")
    return float(np.mean(b.y * forward(b.Z, params).f > 0))


@dataclass
class FinetuneRow:
    step: int
    train_loss: float
    test_accuracy: float
    avg_test_accuracy: float


FINETUNE_FIELDS = [f.name for f in fields(FinetuneRow)]


def finetune_online_sgd(checkpoint: Checkpoint, task: DownstreamTask, n: int, eta_tilde: float,
                        rng, test_set, log_every=1):
    """Online SGD on the downstream task from (v = 0, W = pretrained W).

    Each step consumes one fresh sample. ``train_loss`` is the loss on that
    sample before the update; ``avg_test_accuracy`` is the running mean of
    the per-step test accuracies, i.e. one minus the averaged-iterate error.
    """
    if (checkpoint.d, checkpoint.D) != (task.d, task.D):
        raise DimensionMismatchError(
            f"checkpoint has (d, D) = ({checkpoint.d}, {checkpoint.D}) but the task has ({task.d}, {task.D})")
    if not eta_tilde >= 0:
        raise ValueError("eta_tilde must be non-negative")
    test = as_batch(test_set)
    params = ModelParams(np.zeros(task.d + task.D), checkpoint.W.copy(), task.d)
    rows, acc_sum = [], 0.0
    for i in range(1, n + 1):
        b = sample_downstream_batch(task, 1, rng)
        grad, stats = grad_batch_with_stats(b, params, iteration=i)
        _guard(stats, i)
        params = gd_step(params, grad, eta_tilde)
        acc = evaluate_accuracy(params, test)
        acc_sum += acc
        if i % log_every == 0 or i == n:
            rows.append(FinetuneRow(i, stats.loss, acc, acc_sum / i))
    return rows, params


def write_finetune_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(FINETUNE_FIELDS)
        for r in rows:
            w.writerow([repr(getattr(r, k)) for k in FINETUNE_FIELDS])
