"""Structural diagnostics of trained parameters.

Everything here is a pure function of its inputs. The quantities mirror the
predicted structure of a trained model: zero cross blocks, a value vector
aligned with the ground truth, rank-one leading parts of W11 and W22, and
attention concentrated on the label-relevant group.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .datagen import GroupSparseTask, as_batch, make_positional_encodings, sample_pretrain_batch
from .gradients import per_sample_grads
from .model import ModelParams, forward


def spectral_norm(A) -> float:
    """Largest singular value."""
    A = np.asarray(A, dtype=np.float64)
    if A.size == 0:
        return 0.0
    return float(np.linalg.norm(A, 2))


def alpha_decomposition(v1, v_star):
    """Split v1 into its component along v_star and the orthogonal rest."""
    v1 = np.asarray(v1, dtype=np.float64)
    alpha = float(v1 @ v_star)
    err = v1 - alpha * v_star
    return alpha, float(np.linalg.norm(err))


def alpha_error_vector(v1, v_star):
    alpha = float(np.asarray(v1) @ v_star)
    return np.asarray(v1) - alpha * v_star


def cosine(a, b) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))


def w11_projection(W11, v_star):
    """Best multiple of v* v*^T in Frobenius norm and the spectral residual."""
    beta1 = float(v_star @ W11 @ v_star)
    return beta1, spectral_norm(W11 - beta1 * np.outer(v_star, v_star))


@dataclass(frozen=True)
class ProjectionBasis:
    u: np.ndarray
    q: np.ndarray

    @classmethod
    def from_encodings(cls, P, j_star):
        P = np.asarray(P)
        D = P.shape[1]
        if D < 2:
            raise ValueError("the W22 basis needs D >= 2")
        pj = P[:, j_star - 1]
        u = (D - 1) * pj - (P.sum(axis=1) - pj)
        return cls(u=u, q=P.sum(axis=1))

    @property
    def direction(self):
        return np.outer(self.u, self.q)


def w22_projection(W22, basis: ProjectionBasis):
    if len(basis.u) < 2:
        raise ValueError("the W22 basis needs D >= 2")
    uq = basis.direction
    beta2 = float(np.sum(W22 * uq) / ((basis.u @ basis.u) * (basis.q @ basis.q)))
    return beta2, spectral_norm(W22 - beta2 * uq)


def attention_concentration(S, j_star):
    """(min_j S[j*, j], max over off-target rows of S)."""
    S = np.asarray(S)
    j = j_star - 1
    off = np.delete(S, j, axis=0)
    return float(S[j].min()), float(off.max()) if off.size else 0.0


def growth_fit(t, alpha, window=(1e2, 1e4)) -> float:
    """Least-squares slope of log(alpha) against log(t) inside ``window``."""
    t = np.asarray(t, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    lo, hi = window
    sel = (t >= lo) & (t <= hi)
    t, alpha = t[sel], alpha[sel]
    if len(t) < 10:
        raise ValueError(f"need at least 10 points in the window, got {len(t)}")
    if t.max() < 10 * t.min():
        raise ValueError("the window must span at least one decade of t")
    if np.any(alpha <= 0):
        raise ValueError("alpha must be positive inside the fit window")
    slope, _ = np.polyfit(np.log(t), np.log(alpha), 1)
    return float(slope)


class Sandwich(enum.Enum):
    PASS = "pass"
    FAIL = "fail"
    NOT_APPLICABLE = "n/a"


def _sandwich_arrays(b, params: ModelParams, alpha, v_star, j_star):
    out = forward(b.Z, params)
    S = out.S
    D = S.shape[-1]
    yf = b.y * np.asarray(out.f)
    m = b.y * (b.X[:, :, j_star - 1] @ v_star)
    applicable = np.all(S[:, j_star - 1, :] >= 1.0 - 1.0 / D, axis=-1)
    ok = (D * alpha / 2 * m - 1 <= yf) & (yf <= D * alpha * m + 1)
    return yf, applicable, ok


def sandwich_check(sample, params: ModelParams, alpha, v_star, j_star) -> Sandwich:
    """Two-sided bound on y f for one sample with concentrated attention."""
    _, applicable, ok = _sandwich_arrays(as_batch(sample), params, alpha, v_star, j_star)
    if not applicable[0]:
        return Sandwich.NOT_APPLICABLE
    return Sandwich.PASS if ok[0] else Sandwich.FAIL


def cs_lower_bound(samples, params: ModelParams, v_star):
    """Per-sample worst-case lower bound on y f and whether it holds.

    Holds whenever v2 = 0, since each row sum of S is at most D.
    """
    b = as_batch(samples)
    alpha = float(params.v1 @ v_star)
    err = params.v1 - alpha * v_star
    en = np.linalg.norm(err)
    D = b.X.shape[-1]
    a = np.sqrt(np.sum((v_star @ b.X) ** 2, axis=-1))
    e = np.sqrt(np.sum(((err / en) @ b.X) ** 2, axis=-1)) if en > 0 else np.zeros(len(b))
    bound = -D * abs(alpha) * a - D * en * e
    yf = b.y * np.asarray(forward(b.Z, params).f)
    return bound, yf >= bound


@dataclass
class SandwichSummary:
    n: int
    n_applicable: int
    pass_rate: float
    cs_pass_rate: float


def sandwich_sweep(samples, params: ModelParams, v_star, j_star) -> SandwichSummary:
    b = as_batch(samples)
    alpha = float(params.v1 @ v_star)
    _, applicable, ok = _sandwich_arrays(b, params, alpha, v_star, j_star)
    na = int(applicable.sum())
    rate = float(ok[applicable].mean()) if na else float("nan")
    _, cs_ok = cs_lower_bound(b, params, v_star)
    return SandwichSummary(len(b), na, rate, float(cs_ok.mean()))


@dataclass
class FirstStepEstimate:
    estimate: np.ndarray
    target: np.ndarray
    stderr: np.ndarray

    @property
    def z(self):
        return (self.estimate - self.target) / self.stderr


def first_step_oracle(task: GroupSparseTask, N: int, rng) -> FirstStepEstimate:
    """Monte-Carlo mean of the negative v1-gradient at zero parameters.

    The closed form is ``sigma_x / sqrt(2 pi) * v_star``.
    """
    if N < 1000:
        raise ValueError("N must be at least 1000")
    params = ModelParams.zeros(task.d, task.D)
    b = sample_pretrain_batch(task, N, rng)
    gv, _, _, _ = per_sample_grads(b.Z, b.y, params)
    g1 = -gv[:, : task.d]
    return FirstStepEstimate(
        estimate=g1.mean(axis=0),
        target=task.sigma_x / math.sqrt(2 * math.pi) * task.v_star,
        stderr=g1.std(axis=0, ddof=1) / math.sqrt(N),
    )


def mean_attention(samples, params: ModelParams) -> np.ndarray:
    return forward(as_batch(samples).Z, params).S.mean(axis=0)


@dataclass
class TheoryReport:
    norm_v2: float
    norm_W12: float
    norm_W21: float
    alpha: float
    v1_err_norm: float
    cos_sim: float
    beta1: float
    w11_resid: float
    beta2: float
    beta2_D2: float
    w22_resid: float
    attn_min_jstar: float
    attn_max_offtarget: float
    growth_slope: float | None = None
    sandwich_pass_rate: float | None = None
    sandwich_applicable: int = 0
    cs_pass_rate: float | None = None
    eval_n: int = 0

    @property
    def prop1(self):
        return (self.norm_v2, self.norm_W12, self.norm_W21)

    def to_json(self, path=None, **kw) -> str:
        def clean(x):
            if isinstance(x, float) and not math.isfinite(x):
                return None
            return x

        text = json.dumps({k: clean(v) for k, v in asdict(self).items()}, indent=2, sort_keys=True, **kw)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text


def param_metrics(params: ModelParams, v_star, j_star) -> dict:
    """Metrics that depend on the parameters alone."""
    d = params.d
    alpha, err = alpha_decomposition(params.v1, v_star)
    beta1, r1 = w11_projection(params.W11, v_star)
    P = make_positional_encodings(params.D).P
    if params.D >= 2:
        beta2, r2 = w22_projection(params.W22, ProjectionBasis.from_encodings(P, j_star))
    else:
        beta2, r2 = 0.0, spectral_norm(params.W22)
    return dict(
        alpha=alpha, v1_err_norm=err, cos_sim=cosine(params.v1, v_star),
        norm_v1=float(np.linalg.norm(params.v1)), norm_v2=float(np.linalg.norm(params.v[d:])),
        norm_W12=float(np.linalg.norm(params.W12)), norm_W21=float(np.linalg.norm(params.W21)),
        beta1=beta1, w11_resid=r1, beta2=beta2, w22_resid=r2,
    )


def theory_report(params: ModelParams, task: GroupSparseTask, eval_samples, growth=None) -> tuple[TheoryReport, np.ndarray]:
    """Full report on ``eval_samples``; returns it with the mean attention matrix.

    ``growth`` is an optional (t, alpha) trajectory for the log-log fit.
    """
    b = as_batch(eval_samples)
    pm = param_metrics(params, task.v_star, task.j_star)
    S_mean = mean_attention(b, params)
    amin, amax = attention_concentration(S_mean, task.j_star)
    sw = sandwich_sweep(b, params, task.v_star, task.j_star)
    slope = None
    if growth is not None:
        try:
            slope = growth_fit(*growth)
        except ValueError:
            slope = None
    report = TheoryReport(
        norm_v2=pm["norm_v2"], norm_W12=pm["norm_W12"], norm_W21=pm["norm_W21"],
        alpha=pm["alpha"], v1_err_norm=pm["v1_err_norm"], cos_sim=pm["cos_sim"],
        beta1=pm["beta1"], w11_resid=pm["w11_resid"], beta2=pm["beta2"],
        beta2_D2=pm["beta2"] * params.D ** 2, w22_resid=pm["w22_resid"],
        attn_min_jstar=amin, attn_max_offtarget=amax, growth_slope=slope,
        sandwich_pass_rate=sw.pass_rate, sandwich_applicable=sw.n_applicable,
        cs_pass_rate=sw.cs_pass_rate, eval_n=len(b),
    )
    return report, S_mean
