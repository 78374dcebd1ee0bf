"""Quick numerical self-checks, run by ``atlas-cl selftest``.

Each check compares a production routine with a slower dense reference
built from plain numpy, or asserts an invariant that must hold exactly.
"""

from __future__ import annotations

from typing import Callable, NamedTuple

import numpy as np

from .charts import Chart, build_atlas, chart_score
from .linalg import top_r_eigen
from .metrics import distance_correlation, forgetting, harmonic_mean, linear_cka
from .model import MlpModel
from .objective import (
    METHODS,
    ObjectiveConfig,
    RETENTION_TERMS,
    loss_geo,
    loss_smooth,
    make_anchor_context,
    total_loss,
)


class Check(NamedTuple):
    name: str
    passed: bool
    detail: str


def _random_chart(rng, d, r) -> Chart:
    U, _ = np.linalg.qr(rng.standard_normal((d, r)))
    lam = np.sort(rng.uniform(0.1, 3.0, r))[::-1]
    return Chart(rng.standard_normal(d), U, lam, rng.uniform(0.05, 0.5))


def check_woodbury(seed=0) -> Check:
    rng = np.random.default_rng(seed)
    worst = 0.0
    shapes = [(d, r) for d in (4, 16, 64) for r in (1, 2, 5) if r < d]
    for i in range(100):
        d, r = shapes[i % len(shapes)]
        c = _random_chart(rng, d, r)
        z = c.mu + rng.standard_normal(d)
        cov = c.covariance()
        diff = z - c.mu
        dense = (diff @ np.linalg.solve(cov, diff) + np.linalg.slogdet(cov)[1]) / d
        worst = max(worst, abs(chart_score(c, z) - dense) / max(abs(dense), 1e-300))
    return Check("woodbury-score", worst <= 1e-8, f"max rel err {worst:.2e}")


def check_eigen(seed=1) -> Check:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for d, r in ((6, 3), (16, 2), (32, 5)):
        A = rng.standard_normal((d + 3, d))
        S = A.T @ A
        res = top_r_eigen(S, r)
        ref = np.linalg.eigvalsh(S)[::-1][:r]
        worst = max(worst, np.max(np.abs(res.values - ref)) / ref[0])
    return Check("top-r-eigen", worst <= 1e-8, f"max rel err {worst:.2e}")


def check_cka(seed=2) -> Check:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(50):
        X, Y = rng.standard_normal((20, 5)), rng.standard_normal((20, 7))
        n = X.shape[0]
        H = np.eye(n) - 1.0 / n
        K, L = H @ X @ X.T @ H, H @ Y @ Y.T @ H
        gram = np.sum(K * L) / np.sqrt(np.sum(K * K) * np.sum(L * L))
        worst = max(worst, abs(linear_cka(X, Y) - gram))
    return Check("cka-gram-form", worst <= 1e-8, f"max abs err {worst:.2e}")


def _reduced_problem(seed):
    rng = np.random.default_rng(seed)
    dims = (4, 6, 5, 3)
    teacher = MlpModel(dims, seed=seed + 100)
    Xa, Xn = rng.standard_normal((8, 4)), rng.standard_normal((8, 4))
    ya, yn = rng.integers(0, 3, 8), rng.integers(0, 3, 8)
    t_logits, z0 = teacher.forward(Xa)
    atlas = build_atlas(np.vstack([z0, teacher.features(rng.standard_normal((16, 4)))]), 2, 1, 1.0, seed).atlas
    theta = teacher.params + 0.3 * rng.standard_normal(teacher.n_params)
    return teacher, (Xa, ya, z0, t_logits), (Xn, yn), atlas, theta


def _objective(teacher, anchor, new, atlas, cfg, method, theta, grad):
    Xa, ya, z0, t_logits = anchor
    st = MlpModel(teacher.layer_dims, theta)
    ln, _, acts_n = st.forward(new[0], keep=True)
    la, za, acts_a = st.forward(Xa, keep=True)
    ctx = make_anchor_context(za, z0, la, t_logits, ya, cfg, atlas=atlas)
    res = total_loss(ln, new[1], ctx, atlas, cfg, theta, teacher.params, 4, 10, method, grad=grad)
    if not grad:
        return res.total
    g = st.backward(acts_n, res.d_new_logits)
    if res.d_anchor_logits is not None:
        g = g + st.backward(acts_a, res.d_anchor_logits, res.d_anchor_features)
    if res.d_theta is not None:
        g = g + res.d_theta
    return g


def check_gradients(h=1e-4) -> Check:
    cfg = ObjectiveConfig(k_nn=3)
    worst = 0.0
    for point in range(3):
        teacher, anchor, new, atlas, theta = _reduced_problem(point)
        for method in METHODS:
            g = _objective(teacher, anchor, new, atlas, cfg, method, theta, True)
            num = np.empty_like(theta)
            for i in range(theta.size):
                e = np.zeros_like(theta)
                e[i] = h
                f_plus = _objective(teacher, anchor, new, atlas, cfg, method, theta + e, False)
                f_minus = _objective(teacher, anchor, new, atlas, cfg, method, theta - e, False)
                num[i] = (f_plus - f_minus) / (2 * h)
            rel = np.abs(g - num) / np.maximum(np.maximum(np.abs(g), np.abs(num)), 1e-8)
            worst = max(worst, float(rel.max()))
    return Check("gradients", worst <= 1e-4, f"max rel err {worst:.2e}")


def check_zero_at_init(seed=3) -> Check:
    teacher, anchor, new, atlas, _ = _reduced_problem(seed)
    Xa, ya, _, _ = anchor
    logits, z = teacher.forward(Xa)
    cfg = ObjectiveConfig(k_nn=3)
    ctx = make_anchor_context(z, z, logits, logits, ya, cfg, atlas=atlas)
    ln = teacher.forward(new[0])[0]
    res = total_loss(ln, new[1], ctx, atlas, cfg, teacher.params, teacher.params, 0, 10, "SPMA-OG")
    worst = max(abs(res.breakdown[t]) for t in RETENTION_TERMS)
    return Check("zero-at-init", worst <= 1e-10, f"max |term| {worst:.2e}")


def check_isometry(seed=4) -> Check:
    rng = np.random.default_rng(seed)
    z0 = rng.standard_normal((12, 5))
    z = z0 + 0.2 * rng.standard_normal((12, 5))
    Q, _ = np.linalg.qr(rng.standard_normal((5, 5)))
    moved = 3.7 * z @ Q + rng.standard_normal(5)
    cfg = ObjectiveConfig(k_nn=3)
    logits = np.zeros((12, 2))
    labels = np.zeros(12, dtype=int)
    a = make_anchor_context(z, z0, logits, logits, labels, cfg)
    b = make_anchor_context(moved, z0, logits, logits, labels, cfg)
    gaps = [
        abs(loss_geo(a) - loss_geo(b)),
        abs(loss_smooth(a, cfg.tau_s) - loss_smooth(b, cfg.tau_s)),
        abs(distance_correlation(z, z0) - distance_correlation(moved, z0)),
    ]
    return Check("isometry-invariance", max(gaps) <= 1e-9, f"max gap {max(gaps):.2e}")


def check_metric_vectors() -> Check:
    cases = [
        (harmonic_mean(0.9269, 0.8875), 0.9068),
        (harmonic_mean(0.5800, 0.8994), 0.7052),
        (harmonic_mean(0.8195, 0.7906), 0.8048),
        (forgetting(0.3482, 0.3059), 0.0423),
        (forgetting(0.3482, 0.0838), 0.2644),
    ]
    worst = max(abs(a - b) for a, b in cases)
    return Check("metric-vectors", worst <= 5e-4, f"max abs err {worst:.1e}")


CHECKS: tuple[Callable[[], Check], ...] = (
    check_woodbury,
    check_eigen,
    check_cka,
    check_gradients,
    check_zero_at_init,
    check_isometry,
    check_metric_vectors,
)


def run_selftest(echo=print) -> bool:
    ok = True
    for fn in CHECKS:
        try:
            c = fn()
        except Exception as exc:  # a crashing check is a failing check
            c = Check(fn.__name__.removeprefix("check_"), False, f"{type(exc).__name__}: {exc}")
        ok &= c.passed
        echo(f"{'PASS' if c.passed else 'FAIL'}  {c.name:22s} {c.detail}")
    return ok
