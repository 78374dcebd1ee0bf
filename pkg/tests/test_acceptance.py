"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The lines are collected in ``VERDICTS`` and echoed again in the terminal
summary by ``conftest.py``, so they are visible without ``-s``.
"""

import time

import numpy as np
import pytest

from atlas_cl.charts import Chart, build_atlas, chart_score
from atlas_cl.cli import main
from atlas_cl.experiment import ExperimentConfig, collect_results, ReportTable
from atlas_cl.metrics import distance_correlation, forgetting, harmonic_mean, linear_cka, support_inclusion
from atlas_cl.model import finetune, train_teacher
from atlas_cl.objective import METHODS, RETENTION_TERMS, ObjectiveConfig, loss_geo, loss_smooth, make_anchor_context
from atlas_cl.synthetic import make_benchmark

from oracles import central_difference, dense_chart_score, hsic_cka
from test_model import objective_and_grad, reduced_problem

VERDICTS = []


def verdict(n, name, ok, detail):
    line = f"criterion {n} [{'PASS' if ok else 'FAIL'}] {name}: {detail}"
    VERDICTS.append(line)
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def default_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run_a")
    start = time.perf_counter()
    code = main(["run", "--out", str(out)])
    elapsed = time.perf_counter() - start
    root = ExperimentConfig.from_dict({}).with_overrides(out=out).root
    return code, root, elapsed


def test_criterion_1_table_ordering(default_run):
    code, root, elapsed = default_run
    table = ReportTable(tuple(collect_results(root, seeds=(7, 8, 9))))
    mean = {m: table.mean(m) for m in METHODS}
    plain, replay, spma = mean["PlainFT"], mean["ER"], mean["SPMA-OG"]
    checks = {
        "exit code 0": code == 0,
        "plain forgets >= 0.10": plain["old_after"] <= plain["old_before"] - 0.10,
        "plain new >= 0.85": plain["new_after"] >= 0.85,
        "replay repairs >= 0.10": replay["old_after"] >= plain["old_after"] + 0.10,
        "hm(SPMA-OG) > hm(replay)": spma["harmonic_mean"] > replay["harmonic_mean"],
        "hm(SPMA-OG) > hm(plain)": spma["harmonic_mean"] > plain["harmonic_mean"],
        "cka >= 0.99": spma["cka"] >= 0.99,
        "dist corr >= 0.99": spma["dist_corr"] >= 0.99,
        "cka above replay": spma["cka"] > replay["cka"],
        "dist corr above replay": spma["dist_corr"] > replay["dist_corr"],
        "runtime <= 600 s": elapsed <= 600,
    }
    failed = [k for k, v in checks.items() if not v]
    detail = (
        f"old plain/replay/spma {plain['old_after']:.4f}/{replay['old_after']:.4f}/{spma['old_after']:.4f} "
        f"(before {plain['old_before']:.4f}), new plain {plain['new_after']:.4f}, "
        f"hm plain/replay/spma {plain['harmonic_mean']:.4f}/{replay['harmonic_mean']:.4f}/{spma['harmonic_mean']:.4f}, "
        f"cka {spma['cka']:.4f} vs {replay['cka']:.4f}, dc {spma['dist_corr']:.4f} vs {replay['dist_corr']:.4f}, "
        f"{elapsed:.0f}s" + (f"; failed: {', '.join(failed)}" if failed else "")
    )
    verdict(1, "synthetic table ordering", not failed, detail)


def test_criterion_2_metric_vectors():
    cases = [
        (harmonic_mean(0.9269, 0.8875), 0.9068),
        (harmonic_mean(0.5800, 0.8994), 0.7052),
        (harmonic_mean(0.8195, 0.7906), 0.8048),
        (forgetting(0.3482, 0.3059), 0.0423),
        (forgetting(0.3482, 0.0838), 0.2644),
    ]
    worst = max(abs(a - b) for a, b in cases)
    verdict(2, "metric test vectors", worst <= 5e-4, f"max abs err {worst:.1e} (tol 5e-4)")


def test_criterion_3_woodbury_oracle():
    rng = np.random.default_rng(2024)
    shapes = [(d, r) for d in (4, 16, 64) for r in (1, 2, 5) if r < d]
    worst = 0.0
    for i in range(100):
        d, r = shapes[i % len(shapes)]
        U, _ = np.linalg.qr(rng.standard_normal((d, r)))
        chart = Chart(rng.standard_normal(d), U, np.sort(rng.uniform(0.05, 4.0, r))[::-1], rng.uniform(0.01, 1.0))
        z = chart.mu + rng.standard_normal(d) * rng.uniform(0.1, 3.0)
        dense = dense_chart_score(chart, z)
        worst = max(worst, abs(chart_score(chart, z) - dense) / abs(dense))
    verdict(3, "woodbury score oracle", worst <= 1e-8, f"max rel err {worst:.2e} over 100 pairs (tol 1e-8)")


def test_criterion_4_cka_oracle():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(50):
        n = int(rng.integers(5, 40))
        X, Y = rng.standard_normal((n, int(rng.integers(1, 9)))), rng.standard_normal((n, int(rng.integers(1, 9))))
        worst = max(worst, abs(linear_cka(X, Y) - hsic_cka(X - X.mean(0), Y - Y.mean(0))))
    X, Y = rng.standard_normal((30, 6)), rng.standard_normal((30, 4))
    Q, _ = np.linalg.qr(rng.standard_normal((6, 6)))
    base = linear_cka(X, Y)
    inv = max(
        abs(linear_cka(X @ Q, Y) - base),
        abs(linear_cka(7.5 * X, 0.2 * Y) - base),
        abs(linear_cka(X + rng.standard_normal(6), Y - 3.0) - base),
    )
    ok = worst <= 1e-8 and inv <= 1e-8
    verdict(4, "cka oracle and invariances", ok, f"oracle err {worst:.2e}, invariance err {inv:.2e} (tol 1e-8)")


def test_criterion_5_gradient_suite():
    cfg = ObjectiveConfig(k_nn=3)
    worst = {}
    for method in METHODS:
        for point in range(3):
            dims, teacher, anchor, new, atlas, theta = reduced_problem(point)
            g = objective_and_grad(dims, teacher, anchor, new, atlas, cfg, method, theta, True)
            num = central_difference(
                lambda th: objective_and_grad(dims, teacher, anchor, new, atlas, cfg, method, th, False), theta, 1e-4
            )
            rel = np.abs(g - num) / np.maximum(np.maximum(np.abs(g), np.abs(num)), 1e-8)
            worst[method] = max(worst.get(method, 0.0), float(rel.max()))
    ok = max(worst.values()) <= 1e-4
    verdict(5, "gradient suite", ok, ", ".join(f"{m} {v:.1e}" for m, v in worst.items()) + " (tol 1e-4)")


@pytest.fixture(scope="module")
def seed7():
    cfg = ExperimentConfig.from_dict({})
    bundle = make_benchmark(cfg.benchmark, 7)
    teacher = train_teacher(bundle, cfg.teacher, cfg.hidden_dims)
    fit = build_atlas(teacher.anchor_features, cfg.chart.n_charts, cfg.chart.rank, cfg.chart.tau_c, 7)
    return cfg, bundle, teacher, fit


def test_criterion_6_zero_at_initialization(seed7):
    from dataclasses import replace

    cfg, bundle, teacher, fit = seed7
    _, rows = finetune(teacher, bundle, fit, cfg.objective, replace(cfg.finetune, epochs=1), "SPMA-OG")
    worst = max(abs(rows[0][t]) for t in RETENTION_TERMS)
    verdict(6, "zero at initialization", worst <= 1e-10, f"max |retention term| at step 0 = {worst:.1e} (tol 1e-10)")


def test_criterion_7_isometry_invariance():
    rng = np.random.default_rng(7)
    cfg = ObjectiveConfig()
    worst = 0.0
    for _ in range(10):
        m, d = 16, 8
        z0 = rng.standard_normal((m, d))
        z = z0 + 0.3 * rng.standard_normal((m, d))
        Q, _ = np.linalg.qr(rng.standard_normal((d, d)))
        moved = rng.uniform(0.1, 10.0) * z @ Q + 5 * rng.standard_normal(d)
        logits, labels = np.zeros((m, 3)), np.zeros(m, dtype=int)
        a = make_anchor_context(z, z0, logits, logits, labels, cfg)
        b = make_anchor_context(moved, z0, logits, logits, labels, cfg)
        worst = max(worst, abs(loss_geo(a) - loss_geo(b)), abs(loss_smooth(a, cfg.tau_s) - loss_smooth(b, cfg.tau_s)),
                    abs(distance_correlation(z, z0) - distance_correlation(moved, z0)))
    verdict(7, "isometry invariance", worst <= 1e-9, f"max change {worst:.1e} (tol 1e-9)")


def test_criterion_8_determinism(default_run, tmp_path):
    _, root_a, _ = default_run
    assert main(["run", "--out", str(tmp_path)]) == 0
    root_b = ExperimentConfig.from_dict({}).with_overrides(out=tmp_path).root
    files = sorted(p.relative_to(root_a) for p in root_a.glob("*/*/result.json"))
    same = [(root_a / f).read_bytes() == (root_b / f).read_bytes() for f in files]
    ok = len(files) == 15 and all(same)
    verdict(8, "determinism", ok, f"{sum(same)}/{len(files)} result.json files byte-identical")


def test_criterion_9_support_calibration(seed7):
    _, _, teacher, fit = seed7
    z0 = teacher.anchor_features
    n = z0.shape[0]
    self_rate = support_inclusion(fit.atlas, z0, z0, 0.95)
    far = support_inclusion(fit.atlas, z0, z0 + 1e3, 0.95)
    ok = abs(self_rate - 0.95) <= 1 / n and far == 0.0
    verdict(9, "support calibration", ok, f"anchors {self_rate:.4f} (0.95 +/- {1 / n:.4f}), far probes {far:.1f}")
