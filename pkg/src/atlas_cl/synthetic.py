"""Warped-ribbon benchmark: one latent surface seen through two input maps.

A latent point ``(u, v)`` on the unit square is embedded as a ribbon in R^3,
lifted to quadratic features, and pushed through a view-specific random
``tanh`` map. Labels depend on ``u`` only, so both views share classes.
"""

from __future__ import annotations

import base64
import json
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import ValidationError

OLD, NEW = "old", "new"
_VIEW_STREAM = {OLD: 1, NEW: 2}
_SPLIT_STREAM = {"old_train": 11, "old_test": 12, "new_train": 13, "new_test": 14, "anchors": 15}
LIFT_DIM = 9


@dataclass(frozen=True)
class BenchmarkConfig:
    n_train: int = 2000
    n_test: int = 1000
    n_classes: int = 4
    input_dim: int = 16
    anchors_per_class: int = 64
    sigma_obs: float = 0.02
    warp_gain: float = 0.3
    mixing_scale: float = 1.5


class LatentSample(NamedTuple):
    u: float
    v: float
    label: int


def label_of(u, n_classes: int):
    """Sector index along ``u``; ``u == 1`` falls in the last class."""
    return np.minimum(np.floor(np.asarray(u) * n_classes).astype(np.int64), n_classes - 1)


def sample_latent(n: int, seed: int, n_classes: int = 4) -> list[LatentSample]:
    """``n`` i.i.d. uniform draws on the latent square with their labels."""
    u, v, y = _latent_arrays(n, np.random.default_rng(seed), n_classes)
    return [LatentSample(float(a), float(b), int(c)) for a, b, c in zip(u, v, y)]


def _latent_arrays(n, rng, n_classes):
    if n < 1:
        raise ValidationError(f"need n >= 1, got {n}")
    uv = rng.random((n, 2))
    return uv[:, 0], uv[:, 1], label_of(uv[:, 0], n_classes)


def embed_ribbon(s, warp_gain: float = 0.3) -> np.ndarray:
    """Ambient R^3 point(s) for latent sample(s).

    ``s`` may be a LatentSample or an (n, 2) array of ``(u, v)`` rows.
    """
    if isinstance(s, LatentSample):
        u, v = np.float64(s.u), np.float64(s.v)
    else:
        uv = np.asarray(s, dtype=np.float64)
        u, v = uv[..., 0], uv[..., 1]
    phase = 2.0 * np.pi * u
    return np.stack([u, np.sin(phase) * warp_gain + 0.5 * v, np.cos(phase) * warp_gain * v], axis=-1)


def lift(P) -> np.ndarray:
    """Quadratic features ``(p, p**2, p_x p_y, p_x p_z, p_y p_z)``."""
    P = np.asarray(P, dtype=np.float64)
    x, y, z = P[..., 0], P[..., 1], P[..., 2]
    return np.stack([x, y, z, x * x, y * y, z * z, x * y, x * z, y * z], axis=-1)


@dataclass(frozen=True)
class ViewMap:
    view_id: str
    mixing: np.ndarray = field(repr=False)  # (input_dim, LIFT_DIM)
    bias: np.ndarray = field(repr=False)    # (input_dim,)
    warp_gain: float = 0.3
    sigma_obs: float = 0.0


def make_view(view_id: str, seed: int, cfg: BenchmarkConfig) -> ViewMap:
    """Observation map for one view; pure function of ``(view_id, seed, cfg)``."""
    if view_id not in _VIEW_STREAM:
        raise ValidationError(f"unknown view {view_id!r}")
    rng = np.random.default_rng([seed, _VIEW_STREAM[view_id]])
    mixing = rng.standard_normal((cfg.input_dim, LIFT_DIM)) * (cfg.mixing_scale / np.sqrt(LIFT_DIM))
    bias = rng.uniform(-0.5, 0.5, cfg.input_dim)
    return ViewMap(view_id, mixing, bias, cfg.warp_gain, cfg.sigma_obs)


def _observe_rows(view: ViewMap, P: np.ndarray, rng: np.random.Generator | None) -> np.ndarray:
    X = np.tanh(lift(P) @ view.mixing.T + view.bias)
    if view.sigma_obs > 0 and rng is not None:
        X = X + view.sigma_obs * rng.standard_normal(X.shape)
    return X


def observe(view: ViewMap, p, noise_seed: int) -> np.ndarray:
    """Input vector for one ambient point ``p`` under ``view``."""
    return _observe_rows(view, np.asarray(p, dtype=np.float64)[None, :], np.random.default_rng(noise_seed))[0]


def observe_many(view: ViewMap, P, rng: np.random.Generator) -> np.ndarray:
    return _observe_rows(view, np.asarray(P, dtype=np.float64), rng)


class Split(NamedTuple):
    inputs: np.ndarray
    labels: np.ndarray


@dataclass(frozen=True)
class BenchmarkBundle:
    config: BenchmarkConfig
    seed: int
    old_train: Split
    old_test: Split
    new_train: Split
    new_test: Split
    anchor_index: np.ndarray  # rows of old_train

    @property
    def anchors(self) -> Split:
        return Split(self.old_train.inputs[self.anchor_index], self.old_train.labels[self.anchor_index])


def _make_split(name, n, seed, cfg, view):
    rng = np.random.default_rng([seed, _SPLIT_STREAM[name]])
    u, v, y = _latent_arrays(n, rng, cfg.n_classes)
    P = embed_ribbon(np.stack([u, v], axis=1), cfg.warp_gain)
    return Split(observe_many(view, P, rng), y)


def stratified_anchors(labels: np.ndarray, per_class: int, n_classes: int, rng) -> np.ndarray:
    picks = []
    for c in range(n_classes):
        members = np.flatnonzero(labels == c)
        if members.size < per_class:
            raise ValidationError(f"class {c} has {members.size} samples, need {per_class} anchors")
        picks.append(np.sort(rng.choice(members, per_class, replace=False)))
    return np.concatenate(picks)


def make_benchmark(cfg: BenchmarkConfig = BenchmarkConfig(), seed: int = 7) -> BenchmarkBundle:
    """Generate old/new train/test splits and a class-stratified anchor set."""
    if cfg.anchors_per_class * cfg.n_classes > cfg.n_train:
        raise ValidationError("anchors_per_class * n_classes exceeds n_train")
    old_view, new_view = make_view(OLD, seed, cfg), make_view(NEW, seed, cfg)
    old_train = _make_split("old_train", cfg.n_train, seed, cfg, old_view)
    anchors = stratified_anchors(
        old_train.labels, cfg.anchors_per_class, cfg.n_classes,
        np.random.default_rng([seed, _SPLIT_STREAM["anchors"]]),
    )
    return BenchmarkBundle(
        config=cfg,
        seed=seed,
        old_train=old_train,
        old_test=_make_split("old_test", cfg.n_test, seed, cfg, old_view),
        new_train=_make_split("new_train", cfg.n_train, seed, cfg, new_view),
        new_test=_make_split("new_test", cfg.n_test, seed, cfg, new_view),
        anchor_index=anchors,
    )


def encode_array(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a)
    dtype = "<f8" if a.dtype.kind == "f" else "<i8"
    return {"dtype": dtype, "shape": list(a.shape), "data": base64.b64encode(a.astype(dtype).tobytes()).decode("ascii")}


def decode_array(obj: dict) -> np.ndarray:
    raw = base64.b64decode(obj["data"])
    kind = np.float64 if obj["dtype"] == "<f8" else np.int64
    return np.frombuffer(raw, dtype=obj["dtype"]).reshape(obj["shape"]).astype(kind)


_SPLITS = ("old_train", "old_test", "new_train", "new_test")


def bundle_to_json(bundle: BenchmarkBundle) -> str:
    doc = {"kind": "benchmark_bundle", "config": asdict(bundle.config), "seed": bundle.seed}
    for name in _SPLITS:
        split = getattr(bundle, name)
        doc[name] = {"inputs": encode_array(split.inputs), "labels": encode_array(split.labels)}
    doc["anchor_index"] = encode_array(bundle.anchor_index)
    return json.dumps(doc, sort_keys=True)


def bundle_from_json(text: str) -> BenchmarkBundle:
    doc = json.loads(text)
    splits = {
        name: Split(decode_array(doc[name]["inputs"]), decode_array(doc[name]["labels"])) for name in _SPLITS
    }
    return BenchmarkBundle(
        config=BenchmarkConfig(**doc["config"]), seed=doc["seed"],
        anchor_index=decode_array(doc["anchor_index"]), **splits,
    )
