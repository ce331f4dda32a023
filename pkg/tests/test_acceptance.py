"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``CRITERION k: PASS|FAIL ...`` line (also collected
into the terminal summary) and asserts the criterion at its fixed tolerance,
including the runtime budget.
"""

import math
import time

import numpy as np
import pytest

from attnlab.checkpoint import (
    BadMagicError, TruncatedCheckpointError, VersionMismatchError, from_bytes, load_checkpoint,
    save_checkpoint, to_bytes,
)
from attnlab.cli import main
from attnlab.datagen import (
    GroupSparseTask, antithetic_expand, make_positional_encodings, sample_pretrain_batch, stream,
)
from attnlab.diagnostics import attention_concentration, growth_fit, mean_attention, sandwich_sweep
from attnlab.gradients import fd_grad, grad_W_triple_sum, grad_batch, per_sample_grads
from attnlab.model import ModelParams
from attnlab.training import TrainConfig, make_task, read_metrics_csv, train

RESULTS = []


def report(k, ok, detail, elapsed, budget):
    ok = bool(ok) and elapsed < budget
    line = f"CRITERION {k:>2}: {'PASS' if ok else 'FAIL'}  {detail}  [{elapsed:.1f}s / {budget:g}s]"
    RESULTS.append(line)
    print(line)
    return ok


def pretrain(out, preset, *extra):
    code = main(["pretrain", "--preset", preset, "--out", str(out), *map(str, extra)])
    assert code == 0
    return read_metrics_csv(out / "metrics.csv"), load_checkpoint(out / "checkpoint.gsat")


@pytest.fixture(scope="module")
def fig1_top(tmp_path_factory):
    out = tmp_path_factory.mktemp("fig1-top")
    t0 = time.perf_counter()
    rows, ck = pretrain(out, "fig1-top")
    return out, rows, ck, time.perf_counter() - t0


def test_criterion_01_gradients():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst_fd, worst_dual = 0.0, 0.0
    for _ in range(50):
        d, D = int(rng.integers(1, 5)), int(rng.integers(1, 7))
        scale = float(rng.uniform(0.1, 1.0))
        task = GroupSparseTask.random(d, D, int(rng.integers(1, D + 1)), float(rng.uniform(0.25, 1.0)), rng=rng)
        b = sample_pretrain_batch(task, 3, rng)
        m = d + D
        p = ModelParams(scale * rng.standard_normal(m), scale * rng.standard_normal((m, m)), d)
        g, fd = grad_batch(b, p), fd_grad(b, p, 1e-5)
        for a, f in ((g.gv, fd.gv), (g.gW, fd.gW)):
            worst_fd = max(worst_fd, np.linalg.norm(a - f) / max(np.linalg.norm(f), 1e-12))
        for s in b:
            gap = np.max(np.abs(grad_W_triple_sum(s.Z, s.y, p) - grad_batch([s], p).gW))
            worst_dual = max(worst_dual, float(gap))
    ok = report(1, worst_fd <= 1e-6 and worst_dual <= 1e-10,
                f"max FD rel err {worst_fd:.2e} (<= 1e-6), triple-sum gap {worst_dual:.2e} (<= 1e-10)",
                time.perf_counter() - t0, 5)
    assert ok


def test_criterion_02_positional_gram():
    t0 = time.perf_counter()
    worst = 0.0
    for D in range(1, 65):
        G = make_positional_encodings(D).gram
        worst = max(worst, float(np.max(np.abs(G - (D + 1) / 2 * np.eye(D)))))
    ok = report(2, worst <= 1e-9, f"max |Gram - (D+1)/2 I| over D=1..64: {worst:.2e} (<= 1e-9)",
                time.perf_counter() - t0, 1)
    assert ok


def test_criterion_03_first_iterate():
    t0 = time.perf_counter()
    cfg = TrainConfig(d=4, D=6, n=100_000, sigma_x=0.25, eta=0.5, iters=1, mode="population-mc",
                      antithetic=True, seed=0)
    _, ck = train(cfg)
    task = make_task(cfg)
    # rebuild the same draw to get the Monte-Carlo standard error; antithetic
    # partners give identical v1-gradients, so the independent units are pairs
    b = antithetic_expand(sample_pretrain_batch(task, cfg.n, stream(cfg.seed, "pretrain-data")))
    gv, _, _, _ = per_sample_grads(b.Z, b.y, ModelParams.zeros(4, 6))
    pair = (gv[0::2, :4] + gv[1::2, :4]) / 2
    se = cfg.eta * pair.std(axis=0, ddof=1) / math.sqrt(cfg.n)
    target = cfg.eta * cfg.sigma_x / math.sqrt(2 * math.pi) * task.v_star
    p = ck.params()
    z = np.abs(p.v1 - target) / se
    ok = report(3, np.all(p.W == 0) and np.all(p.v2 == 0) and np.all(z <= 3),
                f"W==0: {bool(np.all(p.W == 0))}, v2==0: {bool(np.all(p.v2 == 0))}, "
                f"max |v1 - target| / SE = {z.max():.2f} (<= 3)",
                time.perf_counter() - t0, 30)
    assert ok


def test_criterion_04_cross_blocks(tmp_path):
    t0 = time.perf_counter()
    rows, ck = pretrain(tmp_path, "prop1")
    worst = max(max(r.norm_v2, r.norm_W12, r.norm_W21) for r in rows)
    ok = report(4, len(rows) == 400 and worst <= 1e-10,
                f"max over {len(rows)} iterations of (|v2|, |W12|_F, |W21|_F) = {worst:.2e} (<= 1e-10)",
                time.perf_counter() - t0, 120)
    assert ok


def test_criterion_05_fig1_trends(fig1_top):
    _, rows, _, elapsed = fig1_top
    last = rows[-1]
    ok = report(5, last.loss <= 0.05 and last.cos_sim >= 0.99 and last.ratio_v2_v1 <= 0.05,
                f"loss {last.loss:.4f} (<= 0.05), cos {last.cos_sim:.5f} (>= 0.99), "
                f"|v2|/|v1| {last.ratio_v2_v1:.4f} (<= 0.05)", elapsed, 120)
    assert ok


def test_criterion_06_attention(fig1_top):
    _, _, ck, _ = fig1_top
    t0 = time.perf_counter()
    task = GroupSparseTask(ck.d, ck.D, ck.j_star, ck.v_star, 0.25)
    fresh = sample_pretrain_batch(task, 500, stream(1, "eval"))
    S = mean_attention(fresh, ck.params())
    lo, hi = attention_concentration(S, ck.j_star)
    ok = report(6, lo >= 0.9 and hi <= 0.1,
                f"min_j S[j*, j] = {lo:.4f} (>= 0.9), max off-target = {hi:.4f} (<= 0.1)",
                time.perf_counter() - t0, 30)
    assert ok


@pytest.mark.slow
def test_criterion_07_growth_exponent(tmp_path):
    t0 = time.perf_counter()
    rows, _ = pretrain(tmp_path, "growth")
    slope = growth_fit([r.iter for r in rows], [r.alpha for r in rows], window=(1e2, 1e4))
    ok = report(7, 0.25 <= slope <= 0.45, f"log-log slope of alpha on [1e2, 1e4] = {slope:.4f} (in [0.25, 0.45])",
                time.perf_counter() - t0, 900)
    assert ok


def test_criterion_08_sandwich(fig1_top):
    _, _, ck, _ = fig1_top
    t0 = time.perf_counter()
    task = GroupSparseTask(ck.d, ck.D, ck.j_star, ck.v_star, 0.25)
    fresh = sample_pretrain_batch(task, 1000, stream(2, "eval"))
    s = sandwich_sweep(fresh, ck.params(), task.v_star, task.j_star)
    ok = report(8, s.n_applicable > 0 and s.pass_rate >= 0.99 and s.cs_pass_rate == 1.0,
                f"two-sided pass rate {s.pass_rate:.4f} on {s.n_applicable}/1000 applicable (>= 0.99), "
                f"Cauchy-Schwarz pass rate {s.cs_pass_rate:.4f} (== 1)",
                time.perf_counter() - t0, 30)
    assert ok


def test_criterion_09_downstream(fig1_top, tmp_path):
    top_dir, _, _, _ = fig1_top
    t0 = time.perf_counter()
    pretrain(tmp_path / "bottom", "fig1-bottom")
    accs = {}
    for dims, ck_path in (((4, 6), top_dir / "checkpoint.gsat"), ((2, 4), tmp_path / "bottom" / "checkpoint.gsat")):
        out = tmp_path / f"ft-{dims[0]}-{dims[1]}"
        assert main(["finetune", "--preset", "fig4", "--checkpoint", str(ck_path), "--out", str(out)]) == 0
        last = (out / "finetune.csv").read_text().strip().splitlines()[-1].split(",")
        accs[dims] = float(last[2])
    ok = report(9, all(a >= 0.95 for a in accs.values()),
                "final test accuracy " + ", ".join(f"{k}: {v:.3f}" for k, v in accs.items()) + " (>= 0.95)",
                time.perf_counter() - t0, 120)
    assert ok


def test_criterion_10_persistence(tmp_path):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    _, ck = train(TrainConfig(iters=3, n=50))
    path = tmp_path / "c.gsat"
    save_checkpoint(ck, path)
    back = load_checkpoint(path)
    same = back == ck and to_bytes(back) == path.read_bytes()
    buf = path.read_bytes()
    errors = []
    bad_magic = b"XXXX" + buf[4:]
    bad_version = buf[:4] + (7).to_bytes(4, "little") + buf[8:]
    cut = int(rng.integers(21, len(buf)))
    for blob, cls in ((bad_magic, BadMagicError), (bad_version, VersionMismatchError),
                      (buf[:cut], TruncatedCheckpointError)):
        try:
            from_bytes(blob)
            errors.append(f"{cls.__name__} not raised")
        except cls:
            pass
    ok = report(10, same and not errors,
                f"round trip bitwise: {same}; corruption errors: {'ok' if not errors else errors}",
                time.perf_counter() - t0, 1)
    assert ok


@pytest.mark.parametrize("preset", ["fig1-top", "fig1-bottom", "prop1"])
def test_criterion_11_determinism(preset, tmp_path):
    t0 = time.perf_counter()
    pretrain(tmp_path / "a", preset)
    single = time.perf_counter() - t0
    pretrain(tmp_path / "b", preset)
    a = (tmp_path / "a" / "metrics.csv").read_bytes()
    b = (tmp_path / "b" / "metrics.csv").read_bytes()
    # budget: each run within the preset's own limit
    ok = report(11, a == b, f"[{preset}] metrics.csv byte-identical across reruns: {a == b}",
                (time.perf_counter() - t0) / 2, max(120, 2 * single))
    assert ok
