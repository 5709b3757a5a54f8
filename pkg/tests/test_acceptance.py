"""Acceptance criteria 1-10, one test each.

Every test records a PASS/FAIL line through the ``verdict`` fixture; the
lines are printed together in the terminal summary. The experiment
criteria (5-7) run the shipped configs under ``configs/``.
"""

import functools
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from distill_lab import losses
from distill_lab.biasvar import clamp_log_probs, decompose, geo_mean
from distill_lab.datasets import BlobSpec, gen_blobs
from distill_lab.network import MlpSpec, backward, forward, init
from distill_lab.numkit import make_rng, softmax_t
from distill_lab.regsample import classify
from distill_lab.xlab import load_config, parse_resemblance_csv, repeat_path, resemblance, run
from fdcheck import numeric_grad, rel_error, rel_error_norm

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
WORKERS = min(4, os.cpu_count() or 1)
CASES = 100
ELAPSED = {}

E1 = 1 - math.exp(-1)


def timed(number):
    def wrap(fn):
        @functools.wraps(fn)
        def inner(*args, **kwargs):
            t0 = time.perf_counter()
            try:
                return fn(*args, **kwargs)
            finally:
                ELAPSED[number] = time.perf_counter() - t0

        return inner

    return wrap


def experiment(name, tmp_path, **overrides):
    cfg = load_config(CONFIGS / f"{name}.json").override(out=str(tmp_path), workers=WORKERS, **overrides)
    return cfg, run(cfg)


# --------------------------------------------------------------- 1


GRAD_MODES = [("ce", 1.0), ("kd", 1.0), ("kd", 2.0), ("kd", 4.0), ("masked-kd", 4.0), ("wsl", 4.0), ("sigmoid-wsl", 4.0)]


def objective(mode, z, y, zt, tau, coef, w):
    """Scalar objective with the sample weight ``w`` held constant."""
    ce, _ = losses.ce_loss(z, y)
    if mode == "ce":
        return ce.sum()
    if mode == "masked-kd":
        kd, _ = losses.masked_kd(z, zt, y, tau, loss_form=True)
    else:
        kd, _ = losses.kd_loss(z, zt, tau)
    return (ce + coef * w * kd).sum()


def relu_clear_of_kinks(model, x, margin=1e-3):
    _, trace = forward(model, x)
    return all(np.min(np.abs(p)) > margin for p in trace.pre[:-1])


def gradient_errors(mode, tau, rng):
    """Worst case-wise logit and parameter relative errors over CASES random
    cases, plus the worst elementwise error for reference."""
    worst_logit = worst_param = worst_elem = 0.0
    case = 0
    while case < CASES:
        k = int(rng.integers(2, 6))
        n = int(rng.integers(1, 5))
        activation = "tanh" if case % 2 else "relu"
        model = init(MlpSpec((3, 4, k), activation=activation, seed=int(rng.integers(2**31))))
        x = rng.standard_normal((n, 3))
        if activation == "relu" and not relu_clear_of_kinks(model, x):
            continue
        y = rng.integers(0, k, size=n)
        zt = rng.standard_normal((n, k)) * 2
        coef = float(rng.uniform(0.5, 3.0))

        z, trace = forward(model, x)
        bundle = losses.loss_bundle(mode, z, y, teacher_logits=zt, tau=tau, coef=coef, masked_loss_form=True)
        w = bundle.weight.copy() if mode in ("wsl", "sigmoid-wsl") else 1.0

        zl = rng.standard_normal((n, k)) * 2
        b2 = losses.loss_bundle(mode, zl, y, teacher_logits=zt, tau=tau, coef=coef, masked_loss_form=True)
        wl = b2.weight.copy() if mode in ("wsl", "sigmoid-wsl") else 1.0
        num = numeric_grad(lambda v: objective(mode, v, y, zt, tau, coef, wl), zl.copy())
        worst_logit = max(worst_logit, rel_error_norm(b2.grad, num))
        worst_elem = max(worst_elem, rel_error(b2.grad, num))

        grads = backward(model, trace, bundle.grad)
        flat = model.flat_params()

        def total(theta):
            model.set_flat_params(theta)
            zz, _ = forward(model, x, trace=False)
            return objective(mode, zz, y, zt, tau, coef, w)

        num = numeric_grad(total, flat.copy())
        model.set_flat_params(flat)
        analytic = np.concatenate([g.ravel() for g in grads])
        worst_param = max(worst_param, rel_error_norm(analytic, num))
        worst_elem = max(worst_elem, rel_error(analytic, num))
        case += 1
    return worst_logit, worst_param, worst_elem


def test_criterion_01_gradient_oracle(verdict):
    t0 = time.perf_counter()
    rng = make_rng(2024)
    parts, ok, elem = [], True, 0.0
    for mode, tau in GRAD_MODES:
        lg, pg, el = gradient_errors(mode, tau, rng)
        ok &= lg < 1e-4 and pg < 1e-4
        elem = max(elem, el)
        parts.append(f"{mode}@{tau:g}={max(lg, pg):.1e}")
    dt = time.perf_counter() - t0
    ELAPSED[1] = dt
    verdict(
        1,
        ok and dt < 30,
        f"max rel err {', '.join(parts)} over {CASES} cases each "
        f"(worst single component {elem:.1e}); {dt:.1f}s",
    )


# --------------------------------------------------------------- 2


def test_criterion_02_decomposition_identity(verdict):
    t0 = time.perf_counter()
    rng = make_rng(7)
    worst = 0.0
    for _ in range(1000):
        m, n, k = int(rng.integers(1, 9)), int(rng.integers(1, 6)), int(rng.integers(2, 8))
        logits = rng.standard_normal((m, n, k)) * 3
        lp = clamp_log_probs(logits - np.log(np.exp(logits).sum(-1, keepdims=True)))
        y = np.eye(k)[rng.integers(0, k, n)] if rng.random() < 0.5 else rng.dirichlet(np.ones(k), n)
        d = decompose(y, geo_mean(lp), np.exp(lp))
        worst = max(worst, float(np.max(np.abs(d.residual))))
    runs = np.array([[0.8, 0.2], [0.6, 0.4]])
    d = decompose(np.array([1.0, 0.0]), geo_mean(np.log(runs)), runs)
    example = abs(d.bias - 0.3423) < 1e-3 and abs(d.variance - 0.0247) < 1e-3 and abs(d.error - 0.3670) < 1e-3
    dt = time.perf_counter() - t0
    ELAPSED[2] = dt
    verdict(
        2,
        worst < 1e-10 and example and dt < 10,
        f"max residual {worst:.1e} on 1000 ensembles; example bias {d.bias:.4f} var {d.variance:.4f} "
        f"sum {d.error:.4f}; {dt:.1f}s",
    )


# --------------------------------------------------------------- 3


@timed(3)
def test_criterion_03_tau_one_identity(verdict):
    rng = make_rng(11)
    worst, mismatches = 0.0, 0
    for _ in range(10_000):
        k = int(rng.integers(2, 10))
        zs, zt = rng.standard_normal(k) * 3, rng.standard_normal(k) * 3
        i = int(rng.integers(0, k))
        b = losses.variance_grad_b(zs, zt, i, 1.0)
        worst = max(worst, abs(b - (1.0 - softmax_t(zt)[i])))
        _, flag = classify(zs, zt, i, 1.0)
        mismatches += int(flag != (softmax_t(zs)[i] > softmax_t(zt)[i]))
    verdict(3, worst < 1e-12 and mismatches == 0, f"max |b - (y - p_t)| {worst:.1e}; classify mismatches {mismatches}/10000")


# --------------------------------------------------------------- 4


@timed(4)
def test_criterion_04_weight_contract(verdict):
    rng = make_rng(13)
    ps, pt = rng.uniform(1e-6, 1.0, 10_000), rng.uniform(1e-6, 1.0, 10_000)
    w = losses.wsl_weight(np.stack([ps, 1 - ps], 1), np.stack([pt, 1 - pt], 1), np.zeros(10_000, int))
    in_range = bool(np.all((w >= 0) & (w < 1)))
    equal = max(abs(losses.weight_from_ce(v, v) - E1) for v in rng.uniform(0.01, 20, 1000))
    # monotone in L_s at fixed L_t; probabilities in [0.1, 0.9] keep w clear of 1
    lt = -np.log(rng.uniform(0.1, 0.9, 1000))
    l1, l2 = np.sort(-np.log(rng.uniform(0.1, 0.9, (2, 1000))), axis=0)
    l2 = np.where(l2 == l1, l2 + 1e-3, l2)
    monotone = bool(np.all(losses.weight_from_ce(l1, lt) < losses.weight_from_ce(l2, lt)))
    iff = bool(np.all((w < E1) == (ps > pt)))
    verdict(
        4,
        in_range and equal < 1e-12 and monotone and iff,
        f"range ok={in_range}; |w(Ls=Lt) - (1-1/e)| {equal:.1e}; strictly monotone={monotone}; iff={iff}",
    )


# --------------------------------------------------------------- 5


@timed(5)
def test_criterion_05_label_smoothing_trend(verdict, tmp_path):
    t0 = time.perf_counter()
    cfg, result = experiment("rs-count", tmp_path)
    dt = time.perf_counter() - t0
    m = result.aggregate["metrics"]
    ok, parts = True, []
    for tau in cfg.option("taus"):
        t = f"tau={tau!r}"
        ls_rs, plain_rs = m[f"{t}/teacher=ls/rs_count"]["values"], m[f"{t}/teacher=plain/rs_count"]["values"]
        more = sum(a > b for a, b in zip(ls_rs, plain_rs))
        ls_acc, plain_acc = m[f"{t}/teacher=ls/test_acc"]["mean"], m[f"{t}/teacher=plain/test_acc"]["mean"]
        ok &= more >= 4 and ls_acc <= plain_acc
        parts.append(
            f"tau {tau:g}: rs ls>plain {more}/5 ({np.mean(ls_rs):.0f} vs {np.mean(plain_rs):.0f}), "
            f"acc ls {ls_acc:.4f} vs plain {plain_acc:.4f}"
        )
    verdict(5, ok and dt < 300, "; ".join(parts) + f"; {dt:.0f}s")


# --------------------------------------------------------------- 6


@timed(6)
def test_criterion_06_subset_ordering(verdict, tmp_path):
    t0 = time.perf_counter()
    _, result = experiment("subsets", tmp_path)
    dt = time.perf_counter() - t0
    acc = {k.split("=")[1].split("/")[0]: v["mean"] for k, v in result.aggregate["metrics"].items()}
    checks = {
        "direct < only-rs": acc["direct"] < acc["only-rs"],
        "exclude-rs < kd": acc["exclude-rs"] < acc["kd"],
        "kd <= wsl": acc["kd"] <= acc["wsl"],
    }
    means = ", ".join(f"{k} {v:.4f}" for k, v in acc.items())
    failed = [k for k, v in checks.items() if not v]
    verdict(6, not failed and dt < 300, f"{means}; failed: {failed or 'none'}; {dt:.0f}s")


# --------------------------------------------------------------- 7


@timed(7)
def test_criterion_07_variance_assumption(verdict, tmp_path):
    t0 = time.perf_counter()
    below, gaps = 0, []
    for meta_seed in range(5):
        _, result = experiment("biasvar", tmp_path, meta_seed=meta_seed, repeats=1)
        m = result.aggregate["metrics"]
        below += m["mode=kd/variance"]["mean"] <= m["mode=ce/variance"]["mean"]
        gaps.append(m["mode=kd/bias_gap_vs_ce"]["mean"])
    dt = time.perf_counter() - t0
    nonneg = sum(g >= 0 for g in gaps)
    verdict(
        7,
        below >= 4 and nonneg >= 3 and dt < 300,
        f"variance kd<=ce in {below}/5 meta-seeds; bias gap >= 0 in {nonneg}/5 "
        f"(gaps {', '.join(f'{g:+.4f}' for g in gaps)}); {dt:.0f}s",
    )


# --------------------------------------------------------------- 8


@timed(8)
def test_criterion_08_resemblance_columns(verdict, tmp_path):
    cfg, _ = experiment("resemblance", tmp_path)
    exported = [parse_resemblance_csv(repeat_path(cfg, r).read_text()) for r in range(cfg.repeats)]
    rng = make_rng(17)
    for i in range(20):
        k = int(rng.integers(2, 8))
        ds = gen_blobs(BlobSpec(num_classes=k, per_class=15, dim=5, seed=i))
        s = init(MlpSpec((5, 8, k), seed=2 * i))
        t = init(MlpSpec((5, 16, k), seed=2 * i + 1))
        text = resemblance(s, t, ds, float(rng.uniform(0.5, 8))).to_csv()
        exported.append(parse_resemblance_csv(text))
    worst = max(m.max_abs_column_sum() for m in exported)
    verdict(8, worst < 1e-8, f"max |column sum| {worst:.1e} over {len(exported)} exported matrices")


# --------------------------------------------------------------- 9


@timed(9)
def test_criterion_09_determinism(verdict, tmp_path):
    kinds = ["train", "rs-count", "subsets", "intermediate", "biasvar", "resemblance", "alpha-sweep", "weight-variant"]
    differing = []
    for kind in kinds:
        bodies = []
        for attempt, workers in enumerate((1, WORKERS)):
            cfg = load_config(CONFIGS / f"{kind}.json")
            cfg = cfg.override(out=str(tmp_path / f"a{attempt}"), workers=workers, repeats=2)
            cfg = cfg.override(
                student=cfg.student.replace(epochs=4, lr_decay_epochs=(2,)),
                teacher=cfg.teacher.replace(epochs=4, lr_decay_epochs=(2,)),
            )
            if kind == "biasvar":
                cfg = cfg.override(runs=2, teachers=1)
            run(cfg)
            bodies.append([repeat_path(cfg, r).read_bytes() for r in range(2)])
        if bodies[0] != bodies[1]:
            differing.append(kind)
    verdict(9, not differing, f"reran {len(kinds)} kinds x 2 repeats; differing CSV bodies: {differing or 'none'}")


# --------------------------------------------------------------- 10


def test_criterion_10_total_runtime(verdict):
    missing = [n for n in range(1, 10) if n not in ELAPSED]
    if missing:
        pytest.skip(f"criteria {missing} did not run in this session")
    total = sum(ELAPSED.values())
    verdict(10, total < 900, f"criteria 1-9 took {total:.0f}s on {os.cpu_count()} core(s)")
