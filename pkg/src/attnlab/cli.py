"""Command-line entry point: ``attnlab {pretrain,finetune,theory,gradcheck}``.

Settings are resolved as preset < JSON config file < command-line flags.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import svg
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .datagen import DownstreamTask, GroupSparseTask, sample_downstream_batch, sample_pretrain_batch, stream
from .diagnostics import theory_report
from .gradients import fd_grad, grad_batch, grad_W_triple_sum, GradPair
from .model import ModelParams, NumericalOverflowError
from .training import (
    DimensionMismatchError, TrainConfig, finetune_online_sgd, read_metrics_csv, train,
    write_finetune_csv, write_metrics_csv,
)

log = logging.getLogger("attnlab")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_NOFILE, EXIT_BADFILE, EXIT_NUMERIC = 0, 1, 2, 3, 4, 5

PRETRAIN_PRESETS = {
    "fig1-top": dict(n=500, d=4, D=6, sigma_x=0.25, j_star=2, eta=0.5, iters=400),
    "fig1-bottom": dict(n=200, d=2, D=4, sigma_x=0.25, j_star=2, eta=0.5, iters=400),
    "prop1": dict(n=500, d=4, D=6, sigma_x=0.25, j_star=2, eta=0.5, iters=400, antithetic=True),
    "growth": dict(n=1024, d=4, D=16, sigma_x=0.25, j_star=2, eta=0.5, iters=10_000,
                   mode="population-mc", antithetic=True, log_every=50, eval_n=1024),
    # iters counts epochs when batch_size is set
    "appendix-large": dict(n=10_000, d=100, D=100, sigma_x=0.25, j_star=30, eta=0.01, iters=100,
                           batch_size=64),
    "appendix-large-j70": dict(n=10_000, d=100, D=100, sigma_x=0.25, j_star=70, eta=0.01, iters=100,
                               batch_size=64),
}

FINETUNE_PRESETS = {
    "fig4": dict(sigma_tilde=1.0, gamma=1.0, steps=400, eta_tilde=1e-3, test_n=1000),
    "fig4-a": dict(d=4, D=6, sigma_tilde=1.0, gamma=1.0, steps=400, eta_tilde=1e-3, test_n=1000),
    "fig4-b": dict(d=2, D=4, sigma_tilde=1.0, gamma=1.0, steps=400, eta_tilde=1e-3, test_n=1000),
}

FINETUNE_DEFAULTS = dict(sigma_tilde=1.0, gamma=1.0, steps=400, eta_tilde=1e-3, test_n=1000, log_every=1)


class UsageError(Exception):
    pass


def _positive_int(s):
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {s}")
    return v


def _positive_float(s):
    v = float(s)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {s}")
    return v


def _nonneg_float(s):
    v = float(s)
    if not v >= 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative number, got {s}")
    return v


def _bool(s):
    if s.lower() in ("1", "true", "yes", "on"):
        return True
    if s.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {s}")


def build_parser():
    p = argparse.ArgumentParser(prog="attnlab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    pt = sub.add_parser("pretrain", help="train from zero initialization")
    pt.add_argument("--preset", choices=sorted(PRETRAIN_PRESETS))
    pt.add_argument("--config", type=Path, help="JSON file of TrainConfig fields")
    pt.add_argument("--d", type=_positive_int)
    pt.add_argument("--D", type=_positive_int)
    pt.add_argument("--n", type=_positive_int)
    pt.add_argument("--sigma-x", dest="sigma_x", type=_positive_float)
    pt.add_argument("--eta", type=_positive_float)
    pt.add_argument("--iters", type=_positive_int)
    pt.add_argument("--jstar", dest="j_star", type=_positive_int)
    pt.add_argument("--seed", type=int)
    pt.add_argument("--mode", choices=["empirical", "population-mc"])
    pt.add_argument("--antithetic", type=_bool, nargs="?", const=True)
    pt.add_argument("--log-every", dest="log_every", type=_positive_int)
    pt.add_argument("--batch-size", dest="batch_size", type=_positive_int)
    pt.add_argument("--eval-n", dest="eval_n", type=_positive_int)
    pt.add_argument("--parallel", type=_bool, nargs="?", const=True)
    pt.add_argument("--report-n", type=_positive_int, default=500,
                    help="fresh samples for report.json and heatmap.csv")
    pt.add_argument("--svg", action="store_true")
    pt.add_argument("--out", type=Path, required=True)

    ft = sub.add_parser("finetune", help="online SGD on a downstream task")
    ft.add_argument("--preset", choices=sorted(FINETUNE_PRESETS))
    ft.add_argument("--config", type=Path)
    ft.add_argument("--checkpoint", type=Path, required=True)
    ft.add_argument("--sigma-tilde", dest="sigma_tilde", type=_positive_float)
    ft.add_argument("--gamma", type=_positive_float)
    ft.add_argument("--steps", type=_positive_int)
    ft.add_argument("--eta-tilde", dest="eta_tilde", type=_nonneg_float)
    ft.add_argument("--test-n", dest="test_n", type=_positive_int)
    ft.add_argument("--log-every", dest="log_every", type=_positive_int)
    ft.add_argument("--seed", type=int, default=0)
    ft.add_argument("--svg", action="store_true")
    ft.add_argument("--out", type=Path, required=True)

    th = sub.add_parser("theory", help="structural diagnostics of a checkpoint")
    th.add_argument("--checkpoint", type=Path, required=True)
    th.add_argument("--eval-n", dest="eval_n", type=_positive_int, default=500)
    th.add_argument("--metrics", type=Path, help="metrics.csv for the growth fit")
    th.add_argument("--seed", type=int, default=0)
    th.add_argument("--sigma-x", dest="sigma_x", type=_positive_float)
    th.add_argument("--svg", action="store_true")
    th.add_argument("--out", type=Path, required=True)

    gc = sub.add_parser("gradcheck", help="analytic gradients against finite differences")
    gc.add_argument("--trials", type=_positive_int, default=20)
    gc.add_argument("--d", type=_positive_int, default=3)
    gc.add_argument("--D", type=_positive_int, default=4)
    gc.add_argument("--n", type=_positive_int, default=3, help="samples per trial")
    gc.add_argument("--scale", type=_positive_float, default=0.5)
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--inject-sign-flip", action="store_true", help=argparse.SUPPRESS)
    return p


def _load_json(path):
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as e:
        raise UsageError(f"invalid JSON in {path}: {e}")


def resolve(preset: dict, config_file: dict, flags: dict, allowed) -> dict:
    merged = dict(preset)
    for source in (config_file, {k: v for k, v in flags.items() if v is not None}):
        unknown = set(source) - set(allowed)
        if unknown:
            raise UsageError(f"unknown settings: {sorted(unknown)}")
        merged.update(source)
    return merged


def _write_grid(M, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for row in M:
            w.writerow([repr(float(x)) for x in row])


def _task_from_checkpoint(ck, seed, sigma_x=None):
    cfg = ck.provenance.get("config", {})
    sx = sigma_x or cfg.get("sigma_x", 0.25)
    if ck.v_star is not None:
        return GroupSparseTask(ck.d, ck.D, ck.j_star, ck.v_star, sx)
    log.warning("checkpoint has no v_star; regenerating it from seed %d", cfg.get("seed", seed))
    return GroupSparseTask.random(ck.d, ck.D, ck.j_star, sx, rng=stream(cfg.get("seed", seed), "v-star"))


def _report(params, task, seed, eval_n, out, growth=None, with_svg=False):
    ev = sample_pretrain_batch(task, eval_n, stream(seed, "theory-eval"))
    report, S = theory_report(params, task, ev, growth=growth)
    report.to_json(out / "report.json")
    _write_grid(S, out / "heatmap.csv")
    if with_svg:
        svg.heatmap(S, "mean attention", out / "heatmap.svg")
    return report, S


def cmd_pretrain(args) -> int:
    preset = PRETRAIN_PRESETS.get(args.preset, {})
    allowed = [f.name for f in fields(TrainConfig)]
    flags = {k: getattr(args, k, None) for k in allowed}
    settings = resolve(preset, _load_json(args.config), flags, allowed)
    try:
        config = TrainConfig(**settings).validate()
    except (TypeError, ValueError) as e:
        raise UsageError(str(e))
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    rows, ck = train(config, callback=lambda r: log.info("iter %d loss %.5g cos %.4f", r.iter, r.loss, r.cos_sim))
    write_metrics_csv(rows, out / "metrics.csv")
    save_checkpoint(ck, out / "checkpoint.gsat")
    task = GroupSparseTask(config.d, config.D, config.j_star, ck.v_star, config.sigma_x)
    growth = ([r.iter for r in rows], [r.alpha for r in rows])
    report, _ = _report(ck.params(), task, config.seed, args.report_n, out, growth, args.svg)
    if args.svg:
        it = [r.iter for r in rows]
        svg.line_chart(it, {"loss": [r.loss for r in rows]}, "training loss", "iteration", out / "loss.svg")
        svg.line_chart(it, {"cos": [r.cos_sim for r in rows]}, "cos(v1, v*)", "iteration", out / "cos.svg")
        svg.line_chart(it, {"|v2|/|v1|": [r.ratio_v2_v1 for r in rows]}, "norm ratio", "iteration",
                       out / "ratio.svg")
    last = rows[-1]
    print(f"iters={last.iter} loss={last.loss:.6g} cos={last.cos_sim:.6f} "
          f"|v2|/|v1|={last.ratio_v2_v1:.3g} attn_min_jstar={report.attn_min_jstar:.4f}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    preset = FINETUNE_PRESETS.get(args.preset, {})
    allowed = list(FINETUNE_DEFAULTS) + ["d", "D"]
    flags = {k: getattr(args, k, None) for k in FINETUNE_DEFAULTS}
    s = {**FINETUNE_DEFAULTS, **resolve(preset, _load_json(args.config), flags, allowed)}
    d, D = s.pop("d", ck.d), s.pop("D", ck.D)
    if (d, D) != (ck.d, ck.D):
        raise DimensionMismatchError(
            f"preset expects (d, D) = ({d}, {D}) but the checkpoint has ({ck.d}, {ck.D})")
    task = DownstreamTask.random(d, D, ck.j_star, s["gamma"], s["sigma_tilde"], rng=stream(args.seed, "v-tilde"))
    test = sample_downstream_batch(task, s["test_n"], stream(args.seed, "test"))
    rows, _ = finetune_online_sgd(ck, task, s["steps"], s["eta_tilde"], stream(args.seed, "downstream-data"),
                                  test, log_every=s["log_every"])
    args.out.mkdir(parents=True, exist_ok=True)
    write_finetune_csv(rows, args.out / "finetune.csv")
    if args.svg:
        svg.line_chart([r.step for r in rows], {"test accuracy": [r.test_accuracy for r in rows]},
                       "downstream test accuracy", "step", args.out / "finetune.svg")
    print(f"steps={rows[-1].step} test_accuracy={rows[-1].test_accuracy:.4f}")
    return EXIT_OK


def cmd_theory(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    task = _task_from_checkpoint(ck, args.seed, args.sigma_x)
    growth = None
    if args.metrics is not None:
        rows = read_metrics_csv(args.metrics)
        growth = ([r.iter for r in rows], [r.alpha for r in rows])
    args.out.mkdir(parents=True, exist_ok=True)
    report, S = _report(ck.params(), task, args.seed, args.eval_n, args.out, growth, args.svg)
    col = S.sum(axis=0)
    if np.max(np.abs(col - 1)) > 1e-9:
        print(f"invariant violated: heatmap column sums deviate by {np.max(np.abs(col - 1)):.3g}")
        return EXIT_FAIL
    print(report.to_json())
    return EXIT_OK


def gradcheck(trials=20, d=3, D=4, n=3, scale=0.5, seed=0, sign_flip=False):
    """Max errors over random instances: (FD relative error, triple-sum gap)."""
    rng = np.random.default_rng(seed)
    worst_fd, worst_dual = 0.0, 0.0
    for _ in range(trials):
        task = GroupSparseTask.random(d, D, int(rng.integers(1, D + 1)), float(rng.uniform(0.2, 1.0)), rng=rng)
        b = sample_pretrain_batch(task, n, rng)
        m = d + D
        params = ModelParams(scale * rng.standard_normal(m), scale * rng.standard_normal((m, m)), d)
        g = grad_batch(b, params)
        if sign_flip:
            g = GradPair(g.gv, -g.gW)
        fd = fd_grad(b, params, 1e-5)
        for a, f in ((g.gv, fd.gv), (g.gW, fd.gW)):
            worst_fd = max(worst_fd, np.linalg.norm(a - f) / (1 + np.linalg.norm(a)))
        for s in b:
            triple = grad_W_triple_sum(s.Z, s.y, params)
            factored = grad_batch([s], params).gW
            worst_dual = max(worst_dual, float(np.max(np.abs(triple - factored))))
    return worst_fd, worst_dual


def cmd_gradcheck(args) -> int:
    fd_err, dual = gradcheck(args.trials, args.d, args.D, args.n, args.scale, args.seed, args.inject_sign_flip)
    print(f"max relative error (analytic vs finite differences): {fd_err:.3e}")
    print(f"max entrywise gap (triple sum vs factored grad_W): {dual:.3e}")
    ok = fd_err <= 1e-6 and dual <= 1e-10
    if not ok:
        print("invariant violated: analytic gradient disagrees with the finite-difference oracle"
              if fd_err > 1e-6 else "invariant violated: grad_W forms disagree")
    return EXIT_OK if ok else EXIT_FAIL


COMMANDS = {"pretrain": cmd_pretrain, "finetune": cmd_finetune, "theory": cmd_theory, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"attnlab: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as e:
        print(f"attnlab: file not found: {e.filename or e}", file=sys.stderr)
        return EXIT_NOFILE
    except (CheckpointError, DimensionMismatchError) as e:
        print(f"attnlab: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_BADFILE
    except NumericalOverflowError as e:
        print(f"attnlab: numerical overflow: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
