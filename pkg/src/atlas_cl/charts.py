"""Chart memory: local low-rank Gaussian factor models over teacher features."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateError, ValidationError
from .linalg import as_matrix, kmeans, softmax_temp, top_r_eigen

VAR_FLOOR = 1e-6


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Chart:
    """``z ~ N(mu, U diag(factor_vars) U^T + resid_var I)``."""

    mu: np.ndarray
    basis: np.ndarray
    factor_vars: np.ndarray
    resid_var: float

    def __post_init__(self):
        object.__setattr__(self, "mu", _frozen(self.mu))
        object.__setattr__(self, "basis", _frozen(self.basis))
        object.__setattr__(self, "factor_vars", _frozen(self.factor_vars))
        object.__setattr__(self, "resid_var", float(self.resid_var))

    @property
    def rank(self) -> int:
        return self.basis.shape[1]

    @property
    def dim(self) -> int:
        return self.mu.shape[0]

    @property
    def logdet(self) -> float:
        d, r = self.dim, self.rank
        return float(np.log(self.factor_vars + self.resid_var).sum() + (d - r) * np.log(self.resid_var))

    def covariance(self) -> np.ndarray:
        U = self.basis
        return (U * self.factor_vars) @ U.T + self.resid_var * np.eye(self.dim)

    def to_dict(self) -> dict:
        return {
            "mu": self.mu.tolist(),
            "basis": self.basis.reshape(-1).tolist(),
            "factor_vars": self.factor_vars.tolist(),
            "resid_var": self.resid_var,
            "rank": self.rank,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "Chart":
        mu = np.asarray(obj["mu"], dtype=np.float64)
        basis = np.asarray(obj["basis"], dtype=np.float64).reshape(mu.shape[0], obj["rank"])
        return cls(mu, basis, np.asarray(obj["factor_vars"]), obj["resid_var"])


def fit_chart(Z, rank: int, var_floor: float = VAR_FLOOR) -> Chart:
    """Fit one chart to the rows of ``Z`` (probabilistic-PCA closed form).

    The residual variance is the mean trailing eigenvalue, taken from the
    trace so only the leading ``rank`` eigenpairs are ever computed.
    """
    Z = as_matrix(Z, "Z")
    n, d = Z.shape
    if n < 2:
        raise DegenerateError(f"cluster has {n} point(s); cannot fit a chart")
    if not 1 <= rank <= min(n - 1, d):
        raise ValidationError(f"rank must be in [1, {min(n - 1, d)}], got {rank}")
    mu = Z.mean(axis=0)
    Zc = Z - mu
    S = Zc.T @ Zc / (n - 1)
    eig = top_r_eigen(S, rank)
    if rank < d:
        resid = (np.trace(S) - eig.values.sum()) / (d - rank)
    else:
        resid = 0.0
    resid = max(float(resid), var_floor)
    lam = np.maximum(eig.values - resid, 0.0)
    return Chart(mu, eig.vectors, lam, resid)


def _inv_factors(chart: Chart):
    return 1.0 / (chart.factor_vars + chart.resid_var)


def chart_score(chart: Chart, z) -> float:
    """Per-dimension Mahalanobis-plus-logdet energy of ``z`` under ``chart``."""
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    if z.shape[0] != chart.dim:
        raise ValidationError(f"feature has dim {z.shape[0]}, chart expects {chart.dim}")
    return float(chart_scores_batch([chart], z[None, :])[0, 0])


def chart_scores_batch(charts, Z: np.ndarray) -> np.ndarray:
    """``(n, K)`` matrix of chart scores for every row of ``Z``."""
    n, d = Z.shape
    out = np.empty((n, len(charts)))
    for k, c in enumerate(charts):
        diff = Z - c.mu
        a = diff @ c.basis
        resid = diff - a @ c.basis.T
        quad = (a * a) @ _inv_factors(c) + np.einsum("ij,ij->i", resid, resid) / c.resid_var
        out[:, k] = (quad + c.logdet) / d
    return out


def chart_score_grads(charts, Z: np.ndarray) -> np.ndarray:
    """``(n, K, d)`` gradients of each chart score w.r.t. the feature rows."""
    n, d = Z.shape
    out = np.empty((n, len(charts), d))
    for k, c in enumerate(charts):
        diff = Z - c.mu
        a = diff @ c.basis
        proj = a @ c.basis.T
        # Sigma^{-1} diff via the low-rank split.
        solve = (a * _inv_factors(c)) @ c.basis.T + (diff - proj) / c.resid_var
        out[:, k, :] = 2.0 * solve / d
    return out


@dataclass(frozen=True)
class ChartAtlas:
    charts: tuple
    tau_c: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "charts", tuple(self.charts))
        if not self.charts:
            raise ValidationError("atlas needs at least one chart")
        if not self.tau_c > 0:
            raise ValidationError("tau_c must be > 0")
        dims = {c.dim for c in self.charts}
        if len(dims) != 1:
            raise ValidationError(f"charts disagree on feature dim: {sorted(dims)}")

    @property
    def feature_dim(self) -> int:
        return self.charts[0].dim

    @property
    def n_charts(self) -> int:
        return len(self.charts)

    def scores(self, Z) -> np.ndarray:
        Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
        if Z.shape[1] != self.feature_dim:
            raise ValidationError(f"features have dim {Z.shape[1]}, atlas expects {self.feature_dim}")
        return chart_scores_batch(self.charts, Z)

    def assign(self, Z) -> np.ndarray:
        return softmax_temp(self.scores(Z), self.tau_c, negate=True)

    def to_json(self) -> str:
        return json.dumps({"kind": "chart_atlas", "tau_c": self.tau_c, "charts": [c.to_dict() for c in self.charts]}, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ChartAtlas":
        doc = json.loads(text)
        return cls(tuple(Chart.from_dict(c) for c in doc["charts"]), doc["tau_c"])


def soft_assign(atlas: ChartAtlas, z) -> np.ndarray:
    """Soft chart assignment for a single feature vector."""
    z = np.asarray(z, dtype=np.float64).reshape(1, -1)
    return atlas.assign(z)[0]


@dataclass(frozen=True)
class AtlasFit:
    atlas: ChartAtlas
    assignments: np.ndarray = field(repr=False)  # chart index per input row


def _merge_small(Z, assign, centers, min_size):
    assign = assign.copy()
    alive = list(range(centers.shape[0]))
    while True:
        counts = {k: int(np.sum(assign == k)) for k in alive}
        small = [k for k in alive if counts[k] < min_size]
        if not small or len(alive) == 1:
            break
        k = min(small, key=lambda j: (counts[j], j))
        others = [j for j in alive if j != k]
        dist = [np.linalg.norm(centers[k] - centers[j]) for j in others]
        target = others[int(np.argmin(dist))]
        assign[assign == k] = target
        alive.remove(k)
        if counts[target] + counts[k]:
            centers[target] = Z[assign == target].mean(axis=0)
    relabel = {k: i for i, k in enumerate(alive)}
    return np.array([relabel[k] for k in assign], dtype=np.int64)


def build_atlas(Z, n_charts: int, rank: int, tau_c: float, seed: int) -> AtlasFit:
    """Cluster teacher features with k-means and fit one chart per cluster.

    Clusters with fewer than ``rank + 2`` points are merged into the cluster
    with the nearest center before fitting.
    """
    Z = as_matrix(Z, "Z")
    if Z.shape[0] < 2 * n_charts:
        raise ValidationError(f"need n >= 2K, got n={Z.shape[0]}, K={n_charts}")
    km = kmeans(Z, n_charts, seed)
    assign = _merge_small(Z, km.assignments, km.centers.copy(), rank + 2)
    charts = []
    for k in range(int(assign.max()) + 1):
        members = Z[assign == k]
        charts.append(fit_chart(members, min(rank, members.shape[0] - 1, Z.shape[1])))
    return AtlasFit(ChartAtlas(tuple(charts), tau_c), assign)
