"""Acceptance criteria, one PASS/FAIL line each at the contract tolerances.

The toy transfer runs behind criteria 4-6 are shared through a module cache
(4 variants x 5 seeds, roughly half a minute per run on one core).
"""
import re
import time
import warnings
from pathlib import Path

import numpy as np
import pytest

from rgal import autodiff as ad
from rgal import data as data_module
from rgal import losses as L
from rgal.autodiff import check_grad
from rgal.data import AccessAudit, make_toy_dataset, pretrain_teacher
from rgal.experiments import toy_config, toy_run
from rgal.io import csv_text
from rgal.metrics import MetricsReport, global_diversity, inter_class_confusion, intra_class_diversity
from rgal.models import conv_classifier, conv_generator, mlp_classifier, mlp_generator
from rgal.sampling import (SamplingConfig, draw_triplets, focal_weighted_probs, focal_weights, negative_probs,
                           pairwise_distances)
from rgal.training import run_rgal
from test_losses import LOSS_CASES

SEEDS = range(5)
VARIANTS = {
    "full": {},
    "no_tri": {"w_tri": 0.0},
    "no_ntri": {"beta": 0.0},
    "distance_weighted": {"synthesis_strategy": "distance_weighted"},
}


def report(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
    assert ok, detail


# 1. gradients

def _worst(fn, make, trials=100, redraw_kinks=False):
    rng = np.random.default_rng(0)
    worst, done = 0.0, 0
    while done < trials:
        rep = check_grad(fn, make(rng), seed=done, max_coords=40)
        if redraw_kinks and rep.kink_margin < 1e-3:
            continue
        worst = max(worst, rep.max_rel_error)
        done += 1
    return worst


def _forward_cases():
    mlp = mlp_classifier(0, hidden=(6,), embedding_dim=5)
    conv = conv_classifier(0, widths=(2, 3), size=4)
    gen = mlp_generator(0, latent_dim=4, hidden=(6,))
    cgen = conv_generator(0, latent_dim=4, width=4, height=4)

    def cls_fn(model):
        def fn(x):
            w = ad.Tensor(np.arange(1.0, 4.0)[None].repeat(x.shape[0], 0))
            return ad.reduce_sum(ad.mul(model.forward(x, train=True).probs, w))
        return fn

    return {
        "mlp_classifier": (cls_fn(mlp), lambda r: [r.standard_normal((6, 2))]),
        "conv_classifier": (cls_fn(conv), lambda r: [r.random((3, 3, 4, 4))]),
        "mlp_generator": (lambda z: ad.reduce_sum(gen.forward(z)), lambda r: [r.standard_normal((5, 4))]),
        "conv_generator": (lambda z: ad.reduce_sum(ad.mul(cgen.forward(z), cgen.forward(z))),
                           lambda r: [r.standard_normal((3, 4))]),
    }


def test_criterion_1_gradients(capsys):
    t0 = time.perf_counter()
    worst = {}
    for name, (make, fn) in LOSS_CASES.items():
        worst[name] = _worst(fn, make)
    for name, (fn, make) in _forward_cases().items():
        worst[name] = _worst(fn, make, redraw_kinks=True)
    dt = time.perf_counter() - t0
    top = max(worst, key=worst.get)
    ok = all(v <= 1e-4 for v in worst.values()) and dt <= 60
    report(capsys, 1, ok, f"{len(worst)} gradient checks x 100 trials, worst {top} {worst[top]:.2e} "
                          f"(<= 1e-4), {dt:.1f}s (<= 60s)")


# 2. sampling law

def test_criterion_2_sampling_law(capsys):
    worst = 0.0
    for strategy in ("distance_weighted", "focal_weighted"):
        for trial in range(3):
            rng = np.random.default_rng(100 + trial)
            cfg = SamplingConfig(lambda_clip=float(rng.uniform(0.5, 2.0)))
            probs = rng.dirichlet(np.ones(4) * 0.7, size=9)
            probs = np.vstack([probs[:1], probs])  # two identical anchors, 8 negatives each
            labels = np.array([0, 0, 1, 2, 3, 4, 5, 6, 7, 8])
            trip = draw_triplets(labels, probs, cfg, strategy, np.random.default_rng(trial), n_triplets=100_000)
            emp = np.bincount(trip.negatives, minlength=10)[2:] / 100_000
            closed = negative_probs(pairwise_distances(probs)[0, 2:], strategy, cfg, c=4)
            worst = max(worst, 0.5 * np.abs(emp - closed).sum())
    w = focal_weights(np.array([0.3, 0.7, 1.2]), 0.4, 1.0)
    # c=3 gives 1/f(d) = 1/d, so 1.2 is also reachable from a real distance
    p = focal_weighted_probs([1 / 1.2, 1 / 0.7], SamplingConfig(lambda_l=0.4, lambda_u=1.0), c=3)
    zeros = w[0] == 0.0 and w[2] == 0.0 and p[0] == 0.0
    report(capsys, 2, worst <= 0.01 and zeros,
           f"max TVD {worst:.4f} (<= 0.01) over 6 randomized 8-candidate sets; "
           f"focal mass at 1/f=0.3 and 1.2 is {w[0]}, {w[2]}")


# 3. brute force

def test_criterion_3_brute_force(capsys):
    rng = np.random.default_rng(3)
    worst = 0.0
    for n in (2, 5, 17, 33, 64):
        a, p, ng = (rng.standard_normal((n, 4)) for _ in range(3))
        tau = float(rng.uniform(0, 2))
        loop_ntri = sum(max(sum((a[i] - ng[i]) ** 2) - sum((a[i] - p[i]) ** 2) + tau, 0) for i in range(n)) / n
        loop_tri = sum(max(sum((a[i] - p[i]) ** 2) - sum((a[i] - ng[i]) ** 2) + tau, 0) for i in range(n)) / n
        worst = max(worst, abs(L.triplet_negative(a, p, ng, tau).item() - loop_ntri),
                    abs(L.triplet_positive(a, p, ng, tau).item() - loop_tri))
        x, y = rng.standard_normal((n, 3)), rng.integers(0, 3, n)
        pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
        dist = {(i, j): float(np.sum(np.abs(x[i] - x[j]))) for i, j in pairs}
        same = [dist[q] for q in pairs if y[q[0]] == y[q[1]]]
        cross = [dist[q] for q in pairs if y[q[0]] != y[q[1]]]
        worst = max(worst, abs(global_diversity(x) - np.mean([dist[q] for q in pairs])))
        if same:
            worst = max(worst, abs(intra_class_diversity(x, y) - np.mean(same)))
        if cross:
            worst = max(worst, abs(inter_class_confusion(x, y) - (1 - np.mean(cross))))
    report(capsys, 3, worst <= 1e-10, f"max |batched - loop| {worst:.2e} (<= 1e-10), batches up to 64")


# 4-6. toy transfer

@pytest.fixture(scope="module")
def toy_runs():
    cache = {}

    def get(variant, seed):
        if (variant, seed) not in cache:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                cache[variant, seed] = toy_run(seed, **VARIANTS[variant])
        return cache[variant, seed]

    return get


def test_criterion_4_toy_transfer(capsys, toy_runs):
    runs = [toy_runs("full", s) for s in SEEDS]
    good = [r.teacher_accuracy >= 0.98 and r.agreement >= 0.90 and r.seconds <= 300 for r in runs]
    detail = ", ".join(f"s{r.seed}: teacher {r.teacher_accuracy:.3f} agree {r.agreement:.4f} {r.seconds:.0f}s"
                       for r in runs)
    report(capsys, 4, sum(good) >= 4, f"{sum(good)}/5 seeds meet teacher >= 0.98, agreement >= 0.90, "
                                      f"<= 300s [{detail}]")


def test_criterion_5_diversity(capsys, toy_runs):
    def mean(variant, attr):
        return float(np.mean([getattr(toy_runs(variant, s), attr) for s in SEEDS]))

    intra1, intra0 = mean("full", "intra"), mean("no_ntri", "intra")
    inter1, inter0 = mean("full", "inter_distance"), mean("no_ntri", "inter_distance")
    glob_f, glob_d = mean("full", "global_div"), mean("distance_weighted", "global_div")
    a, b, c = intra1 > intra0, inter1 < inter0, glob_f >= glob_d
    report(capsys, 5, a and b and c,
           f"(a) intra beta=1 {intra1:.4f} > beta=0 {intra0:.4f}: {a}; "
           f"(b) inter beta=1 {inter1:.4f} < beta=0 {inter0:.4f}: {b}; "
           f"(c) global focal {glob_f:.4f} >= distance-weighted {glob_d:.4f}: {c}")


def test_criterion_6_ablation(capsys, toy_runs):
    def mean(variant):
        return float(np.mean([toy_runs(variant, s).agreement for s in SEEDS]))

    full, no_tri, no_ntri = mean("full"), mean("no_tri"), mean("no_ntri")
    ok = full >= no_tri and full >= no_ntri
    report(capsys, 6, ok, f"mean agreement full {full:.4f} vs without L_tri {no_tri:.4f}, "
                          f"without L_ntri {no_ntri:.4f}")


# 7. determinism and data freedom

def test_criterion_7_determinism_and_data_free(capsys, monkeypatch):
    audit = AccessAudit(make_toy_dataset(100, seed=0))
    teacher = pretrain_teacher(audit, epochs=200, seed=0)
    reads = audit.reads

    def forbidden(*a, **k):
        raise AssertionError("real data loader called during distillation")

    for name in ("make_toy_dataset", "load_dataset_csv"):
        monkeypatch.setattr(data_module, name, forbidden)
    cfg = toy_config(seed=11, epochs=5)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        texts = [csv_text(MetricsReport.HEADER, [m.row() for m in run_rgal(teacher, cfg).history])
                 for _ in range(2)]
    same = texts[0].encode() == texts[1].encode()
    report(capsys, 7, same and audit.reads == reads,
           f"metrics CSV byte-identical across runs: {same}; training-set reads during distillation: "
           f"{audit.reads - reads}")


# 8. scope statement

def test_criterion_8_scope_statement(capsys):
    root = Path(__file__).resolve().parents[1]
    readme = (root / "README.md").read_text()
    stated = "not reproducible at desk scale" in readme
    accuracy_literal = re.compile(r"\b\d{2}\.\d{1,2}\s*%")
    hits = [p.name for p in (root / "tests").glob("*.py") if accuracy_literal.search(p.read_text())]
    report(capsys, 8, stated and not hits,
           f"README states large-benchmark accuracies are out of scope: {stated}; "
           f"test files quoting benchmark accuracies: {hits or 'none'}")
