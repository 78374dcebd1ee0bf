"""Loss terms, retention schedules and the per-method composite objective.

Every loss can return its gradient with respect to the student-side
quantities it reads (logits or latent features). Teacher-side inputs are
plain arrays and never receive a gradient.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, fields

import numpy as np

from .charts import ChartAtlas, chart_score_grads
from .errors import DegenerateError, ValidationError
from .linalg import _pairwise, log_softmax

TERMS = ("new", "anchor", "kd", "geo", "smooth", "chart", "reg")
RETENTION_TERMS = ("kd", "geo", "smooth", "chart", "reg")


@dataclass(frozen=True)
class ScheduleConfig:
    alpha_start: float = 1.0
    alpha_end: float = 0.0
    beta_start: float = 1.0
    beta_end: float = 0.5

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{f.name} must lie in [0, 1], got {v}")


@dataclass(frozen=True)
class ObjectiveConfig:
    lambda_kd: float = 1.0
    lambda_anchor: float = 1.0
    lambda_geo: float = 5.0
    lambda_smooth: float = 5.0
    lambda_chart: float = 1.0
    lambda_reg: float = 0.1
    # Reserved for the new-sample continuation/support terms; no formula exists.
    lambda_cont: float = 0.0
    lambda_support: float = 0.0
    temperature: float = 2.0
    tau_s: float = 1.0
    k_nn: int = 5
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)

    def __post_init__(self):
        if isinstance(self.schedule, dict):
            object.__setattr__(self, "schedule", ScheduleConfig(**self.schedule))
        for name in ("lambda_kd", "lambda_anchor", "lambda_geo", "lambda_smooth", "lambda_chart", "lambda_reg"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")
        if self.lambda_cont or self.lambda_support:
            raise ValidationError("lambda_cont / lambda_support are reserved and must stay 0")
        if not self.temperature > 0 or not self.tau_s > 0:
            raise ValidationError("temperature and tau_s must be > 0")
        if self.k_nn < 1:
            raise ValidationError("k_nn must be >= 1")

    def weight(self, term: str) -> float:
        return getattr(self, f"lambda_{term}")


# -- methods ---------------------------------------------------------------

@dataclass(frozen=True)
class MethodPreset:
    name: str
    terms: frozenset        # loss terms kept besides "new"
    scheduled: bool         # False: beta fixed at 1 and alpha unused
    replay_fraction: float  # share of the configured replay batch


METHOD_PRESETS = {
    "PlainFT": MethodPreset("PlainFT", frozenset(), False, 0.0),
    "AnchorCE": MethodPreset("AnchorCE", frozenset({"anchor"}), False, 0.5),
    "ER": MethodPreset("ER", frozenset({"anchor"}), False, 1.0),
    "OldGeometry": MethodPreset("OldGeometry", frozenset({"anchor", "geo", "smooth"}), True, 1.0),
    "SPMA-OG": MethodPreset("SPMA-OG", frozenset({"anchor", *RETENTION_TERMS}), True, 1.0),
}
METHODS = tuple(METHOD_PRESETS)


def get_preset(method: str) -> MethodPreset:
    try:
        return METHOD_PRESETS[method]
    except KeyError:
        raise ValidationError(f"unknown method {method!r}; choose from {METHODS}") from None


def schedule_value(start: float, end: float, t: float, total: float) -> float:
    """Linear ramp from ``start`` at ``t = 0`` to ``end`` at ``t = total``."""
    if total == 0:
        return float(start)
    if not 0 <= t <= total:
        raise ValidationError(f"t={t} outside [0, {total}]")
    frac = t / total
    return float(start * (1.0 - frac) + end * frac)


def effective_weights(cfg: ObjectiveConfig, method: str, t: int, total: int) -> dict:
    """Multiplier applied to each raw term at step ``t``."""
    preset = get_preset(method)
    if preset.scheduled:
        alpha = schedule_value(cfg.schedule.alpha_start, cfg.schedule.alpha_end, t, total)
        beta = schedule_value(cfg.schedule.beta_start, cfg.schedule.beta_end, t, total)
    else:
        alpha, beta = 0.0, 1.0
    w = {"new": 1.0}
    for term in TERMS[1:]:
        if term not in preset.terms:
            w[term] = 0.0
        elif term == "anchor":
            w[term] = beta * cfg.lambda_anchor
        else:
            w[term] = alpha * cfg.weight(term)
    return w


# -- classification terms --------------------------------------------------

def loss_ce(logits, labels, grad=False):
    """Mean cross-entropy of integer ``labels`` under ``logits``."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    m, C = logits.shape
    if labels.shape != (m,) or labels.min() < 0 or labels.max() >= C:
        raise ValidationError("labels out of range or wrong length")
    logp = log_softmax(logits)
    rows = np.arange(m)
    value = float(-logp[rows, labels].mean())
    if not grad:
        return value
    g = np.exp(logp)
    g[rows, labels] -= 1.0
    return value, g / m


def loss_kd(student_logits, teacher_logits, T: float, grad=False):
    """``T^2``-scaled mean KL(teacher || student) of tempered softmaxes."""
    s = np.asarray(student_logits, dtype=np.float64)
    t = np.asarray(teacher_logits, dtype=np.float64)
    if s.shape != t.shape:
        raise ValidationError("student and teacher logits differ in shape")
    m = s.shape[0]
    log_pt = log_softmax(t / T)
    log_ps = log_softmax(s / T)
    pt = np.exp(log_pt)
    value = float(T * T * np.sum(pt * (log_pt - log_ps)) / m)
    if not grad:
        return value
    return value, T * (np.exp(log_ps) - pt) / m


# -- geometry terms --------------------------------------------------------

@dataclass(frozen=True)
class NormalizedDistanceMatrix:
    values: np.ndarray
    mean_offdiag: float
    raw: np.ndarray = field(repr=False)


def normalized_distances(Z) -> NormalizedDistanceMatrix:
    """Pairwise distances divided by their mean off-diagonal value."""
    Z = np.asarray(Z, dtype=np.float64)
    m = Z.shape[0]
    if m < 2:
        raise ValidationError("need at least two points")
    D = _pairwise(Z)
    mean = D.sum() / (m * (m - 1))
    if not mean > 0:
        raise DegenerateError("all anchor features coincide; normalized distances undefined")
    return NormalizedDistanceMatrix(D / mean, float(mean), D)


def _normdist_backward(Z, nd: NormalizedDistanceMatrix, G):
    """Pull ``dL/dD~`` (zero diagonal) back to ``dL/dZ``."""
    m = Z.shape[0]
    D, mean = nd.raw, nd.mean_offdiag
    H = G / mean - np.sum(G * D) / (mean * mean * m * (m - 1))
    np.fill_diagonal(H, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        U = np.where(D > 0, (H + H.T) / D, 0.0)
    return U.sum(axis=1)[:, None] * Z - U @ Z


@dataclass(frozen=True)
class AnchorBatchContext:
    """Student and (constant) teacher quantities for one anchor batch."""

    student_features: np.ndarray
    teacher_features: np.ndarray
    student_logits: np.ndarray
    teacher_logits: np.ndarray
    labels: np.ndarray
    teacher_dist: NormalizedDistanceMatrix | None = None
    teacher_log_assign: np.ndarray | None = None
    knn_mask: np.ndarray | None = None

    @property
    def size(self) -> int:
        return self.student_features.shape[0]


def make_anchor_context(z, z0, logits, teacher_logits, labels, cfg: ObjectiveConfig,
                        atlas: ChartAtlas | None = None, need_geometry=True) -> AnchorBatchContext:
    """Bundle a batch and precompute the teacher-only pieces it needs."""
    z0 = np.asarray(z0, dtype=np.float64)
    m = z0.shape[0]
    dist0 = mask = p0 = None
    if need_geometry and m >= 2:
        dist0 = normalized_distances(z0)
        mask = teacher_knn_mask(dist0, min(cfg.k_nn, m - 1))
    if atlas is not None:
        p0 = _log_assign(atlas, z0)
    return AnchorBatchContext(np.asarray(z, dtype=np.float64), z0, np.asarray(logits, dtype=np.float64),
                              np.asarray(teacher_logits, dtype=np.float64), np.asarray(labels),
                              dist0, p0, mask)


def _log_assign(atlas: ChartAtlas, Z) -> np.ndarray:
    return log_softmax(-atlas.scores(Z) / atlas.tau_c)


def loss_geo(ctx: AnchorBatchContext, grad=False):
    """Mean squared gap between student and teacher normalized distances."""
    m = ctx.size
    if m < 2:
        raise ValidationError("geometry loss needs m >= 2")
    d0 = ctx.teacher_dist or normalized_distances(ctx.teacher_features)
    nd = normalized_distances(ctx.student_features)
    diff = nd.values - d0.values
    value = float(np.sum(diff * diff) / (m * (m - 1)))
    if not grad:
        return value
    return value, _normdist_backward(ctx.student_features, nd, 2.0 * diff / (m * (m - 1)))


def teacher_knn_mask(dist0, k_nn: int) -> np.ndarray:
    """Union-symmetrized k-nearest-neighbour mask from teacher distances."""
    D = dist0.values if isinstance(dist0, NormalizedDistanceMatrix) else np.asarray(dist0)
    m = D.shape[0]
    if not 1 <= k_nn < m:
        raise ValidationError(f"need 1 <= k_nn < m, got k_nn={k_nn}, m={m}")
    keyed = D.copy()
    np.fill_diagonal(keyed, np.inf)
    nn = np.argsort(keyed, axis=1, kind="stable")[:, :k_nn]
    mask = np.zeros((m, m), dtype=bool)
    mask[np.repeat(np.arange(m), k_nn), nn.reshape(-1)] = True
    mask |= mask.T
    np.fill_diagonal(mask, False)
    return mask


def smooth_weights(dist0: NormalizedDistanceMatrix, mask: np.ndarray, tau_s: float) -> np.ndarray:
    return np.where(mask, np.exp(-dist0.values / tau_s), 0.0)


def loss_smooth(ctx: AnchorBatchContext, tau_s: float, mask=None, grad=False):
    """Teacher-kNN, distance-weighted mean of squared normalized-distance gaps."""
    d0 = ctx.teacher_dist or normalized_distances(ctx.teacher_features)
    mask = ctx.knn_mask if mask is None else np.asarray(mask, dtype=bool)
    if mask is None or not mask.any():
        raise DegenerateError("smoothing mask selects no pairs")
    W = smooth_weights(d0, mask, tau_s)
    total_w = W.sum()
    nd = normalized_distances(ctx.student_features)
    diff = nd.values - d0.values
    value = float(np.sum(W * diff * diff) / total_w)
    if not grad:
        return value
    return value, _normdist_backward(ctx.student_features, nd, 2.0 * W * diff / total_w)


def loss_chart(ctx: AnchorBatchContext, atlas: ChartAtlas, grad=False):
    """``tau_c^2`` times mean KL between teacher and student chart assignments."""
    z = ctx.student_features
    if z.shape[1] != atlas.feature_dim:
        raise ValidationError("feature dim does not match atlas")
    log_p0 = ctx.teacher_log_assign
    if log_p0 is None:
        log_p0 = _log_assign(atlas, ctx.teacher_features)
    p0 = np.exp(log_p0)
    m, tau = z.shape[0], atlas.tau_c
    log_p = _log_assign(atlas, z)
    value = float(tau * tau * np.sum(p0 * (log_p0 - log_p)) / m)
    if not grad:
        return value
    dscores = -tau * (np.exp(log_p) - p0) / m
    g = np.einsum("nk,nkd->nd", dscores, chart_score_grads(atlas.charts, z))
    return value, g


def loss_reg(theta, theta0, grad=False):
    """Mean squared parameter drift."""
    theta = np.asarray(theta, dtype=np.float64).reshape(-1)
    theta0 = np.asarray(theta0, dtype=np.float64).reshape(-1)
    if theta.shape != theta0.shape:
        raise ValidationError("parameter vectors differ in size")
    diff = theta - theta0
    value = float(diff @ diff / diff.size)
    if not grad:
        return value
    return value, 2.0 * diff / diff.size


# -- composite -------------------------------------------------------------

@dataclass
class LossResult:
    total: float
    breakdown: dict        # raw (unweighted) term values; inactive terms absent
    weights: dict          # effective multipliers at this step
    d_new_logits: np.ndarray | None = None
    d_anchor_logits: np.ndarray | None = None
    d_anchor_features: np.ndarray | None = None
    d_theta: np.ndarray | None = None


def anchor_terms_active(weights: dict) -> bool:
    return any(weights[t] != 0.0 for t in ("anchor", "kd", "geo", "smooth", "chart"))


def total_loss(new_logits, new_labels, anchor_ctx, atlas, cfg: ObjectiveConfig, theta, theta0,
               t: int, total_steps: int, method: str, grad=False) -> LossResult:
    """Compose the per-method objective at fine-tuning step ``t``.

    Terms whose effective weight is zero are neither computed nor reported.
    """
    w = effective_weights(cfg, method, t, total_steps)
    out = LossResult(0.0, {}, w)

    value = loss_ce(new_logits, new_labels, grad)
    if grad:
        value, out.d_new_logits = value
    out.breakdown["new"] = value
    parts = [value]

    if anchor_terms_active(w):
        if anchor_ctx is None:
            raise ValidationError(f"method {method} needs an anchor batch")
        d_logits = np.zeros_like(anchor_ctx.student_logits)
        d_feat = np.zeros_like(anchor_ctx.student_features)
        for term in ("anchor", "kd", "geo", "smooth", "chart"):
            if w[term] == 0.0:
                continue
            if term == "anchor":
                res = loss_ce(anchor_ctx.student_logits, anchor_ctx.labels, grad)
            elif term == "kd":
                res = loss_kd(anchor_ctx.student_logits, anchor_ctx.teacher_logits, cfg.temperature, grad)
            elif term == "geo":
                res = loss_geo(anchor_ctx, grad)
            elif term == "smooth":
                res = loss_smooth(anchor_ctx, cfg.tau_s, grad=grad)
            else:
                res = loss_chart(anchor_ctx, atlas, grad)
            if grad:
                res, g = res
                if term in ("anchor", "kd"):
                    d_logits += w[term] * g
                else:
                    d_feat += w[term] * g
            out.breakdown[term] = res
            parts.append(w[term] * res)
        if grad:
            out.d_anchor_logits, out.d_anchor_features = d_logits, d_feat

    if w["reg"] != 0.0:
        res = loss_reg(theta, theta0, grad)
        if grad:
            res, g = res
            out.d_theta = w["reg"] * g
        out.breakdown["reg"] = res
        parts.append(w["reg"] * res)

    out.total = float(sum(parts))
    return out


LOG_COLUMNS = ("step", "alpha", "beta", *TERMS, "total")


def log_row(step: int, cfg: ObjectiveConfig, method: str, total_steps: int, result: LossResult) -> dict:
    preset = get_preset(method)
    sched = cfg.schedule
    if preset.scheduled:
        alpha = schedule_value(sched.alpha_start, sched.alpha_end, step, total_steps)
        beta = schedule_value(sched.beta_start, sched.beta_end, step, total_steps)
    else:
        alpha, beta = 0.0, 1.0
    row = {"step": step, "alpha": alpha, "beta": beta, "total": result.total}
    for term in TERMS:
        row[term] = result.breakdown.get(term, 0.0)
    return row


def format_log_csv(rows, config_hash: str = "") -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([*LOG_COLUMNS, "config_hash"])
    for row in rows:
        writer.writerow([row["step"], *(repr(float(row[c])) for c in LOG_COLUMNS[1:]), config_hash])
    return buf.getvalue()
