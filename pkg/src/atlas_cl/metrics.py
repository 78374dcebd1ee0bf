"""Accuracy, retention and representation-similarity metrics."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .charts import ChartAtlas
from .errors import DegenerateError, ValidationError
from .linalg import _pairwise, as_matrix, pearson


def accuracy(logits, labels) -> float:
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.shape[0] == 0:
        raise ValidationError("accuracy of an empty set")
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def harmonic_mean(a: float, b: float) -> float:
    if a < 0 or b < 0:
        raise ValidationError("harmonic mean needs non-negative inputs")
    s = a + b
    return 0.0 if s == 0 else 2.0 * a * b / s


def forgetting(old_before: float, old_after: float) -> float:
    return old_before - old_after


def _centered(X, name):
    X = as_matrix(X, name)
    Xc = X - X.mean(axis=0)
    if not np.any(Xc):
        raise DegenerateError(f"{name} has zero variance; CKA undefined")
    return Xc


def linear_cka(X, Y) -> float:
    """Centered linear CKA between two feature blocks on the same samples."""
    Xc, Yc = _centered(X, "X"), _centered(Y, "Y")
    if Xc.shape[0] != Yc.shape[0]:
        raise ValidationError("CKA needs the same number of samples")
    cross = np.linalg.norm(Yc.T @ Xc) ** 2
    value = cross / (np.linalg.norm(Xc.T @ Xc) * np.linalg.norm(Yc.T @ Yc))
    return float(np.clip(value, 0.0, 1.0))


def distance_correlation(X, Y) -> float:
    """Pearson correlation of the upper-triangle pairwise distances."""
    X, Y = as_matrix(X, "X"), as_matrix(Y, "Y")
    n = X.shape[0]
    if n < 3 or Y.shape[0] != n:
        raise ValidationError("distance correlation needs the same n >= 3 for both inputs")
    iu = np.triu_indices(n, k=1)
    return pearson(_pairwise(X)[iu], _pairwise(Y)[iu])


def best_chart_score(atlas: ChartAtlas, Z) -> np.ndarray:
    return atlas.scores(Z).min(axis=1)


def support_inclusion(atlas: ChartAtlas, teacher_features, probe_features, q: float = 0.95) -> float:
    """Share of probes whose best chart score is within the teacher ``q``-quantile."""
    if not 0 < q < 1:
        raise ValidationError("q must be in (0, 1)")
    threshold = np.quantile(best_chart_score(atlas, teacher_features), q)
    return float(np.mean(best_chart_score(atlas, probe_features) <= threshold))


SCHEMA_VERSION = 1


@dataclass(frozen=True)
class RunResult:
    method: str
    seed: int
    old_before: float
    old_after: float
    new_after: float
    forgetting: float
    harmonic_mean: float
    cka: float
    dist_corr: float
    support_in: float

    def to_json(self, config_hash: str = "") -> str:
        doc = {"schema_version": SCHEMA_VERSION, "config_hash": config_hash, "result": asdict(self)}
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunResult":
        return cls(**json.loads(text)["result"])


def evaluate_run(teacher_model, student_model, bundle, atlas: ChartAtlas, q: float = 0.95,
                 method: str = "", seed: int | None = None) -> RunResult:
    """Score a fine-tuned student against its frozen teacher."""
    old_x, old_y = bundle.old_test
    new_x, new_y = bundle.new_test
    anchors = bundle.anchors.inputs
    old_before = accuracy(teacher_model.predict(old_x), old_y)
    old_logits, old_feats = student_model.forward(old_x)
    old_after = accuracy(old_logits, old_y)
    new_after = accuracy(student_model.predict(new_x), new_y)
    z0 = teacher_model.features(anchors)
    z = student_model.features(anchors)
    return RunResult(
        method=method,
        seed=bundle.seed if seed is None else seed,
        old_before=old_before,
        old_after=old_after,
        new_after=new_after,
        forgetting=forgetting(old_before, old_after),
        harmonic_mean=harmonic_mean(old_after, new_after),
        cka=linear_cka(z, z0),
        dist_corr=distance_correlation(z, z0),
        support_in=support_inclusion(atlas, z0, old_feats, q),
    )
