"""Feed-forward network, hand-written backprop, optimizers and training loops."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .charts import AtlasFit
from .errors import TrainingError, ValidationError
from .objective import (
    ObjectiveConfig,
    anchor_terms_active,
    effective_weights,
    get_preset,
    log_row,
    loss_ce,
    make_anchor_context,
    total_loss,
)
from .synthetic import BenchmarkBundle, decode_array, encode_array


class MlpModel:
    """``tanh`` MLP whose last hidden layer is exposed as the latent features.

    Parameters live in one flat float64 vector; ``weights``/``biases`` are
    views into it, laid out layer by layer as ``W`` (out x in, row-major)
    followed by ``b``.
    """

    def __init__(self, layer_dims, params=None, seed=0):
        self.layer_dims = tuple(int(d) for d in layer_dims)
        if len(self.layer_dims) < 3:
            raise ValidationError("need at least one hidden layer for the latent")
        self.n_params = parameter_count(self.layer_dims)
        if params is None:
            params = init_params(self.layer_dims, seed)
        params = np.array(params, dtype=np.float64).reshape(-1)
        if params.size != self.n_params:
            raise ValidationError(f"expected {self.n_params} parameters, got {params.size}")
        self.params = params
        self._bind_views()

    def _bind_views(self):
        self.weights, self.biases = [], []
        off = 0
        for fan_in, fan_out in zip(self.layer_dims[:-1], self.layer_dims[1:]):
            self.weights.append(self.params[off:off + fan_in * fan_out].reshape(fan_out, fan_in))
            off += fan_in * fan_out
            self.biases.append(self.params[off:off + fan_out])
            off += fan_out

    @property
    def latent_dim(self) -> int:
        return self.layer_dims[-2]

    def copy(self) -> "MlpModel":
        return MlpModel(self.layer_dims, self.params.copy())

    def set_params(self, theta):
        self.params[:] = theta

    def forward(self, X, keep=False):
        """Return ``(logits, latents)``; with ``keep`` also the backprop cache."""
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.layer_dims[0]:
            raise ValidationError(f"input must be (n, {self.layer_dims[0]}), got {X.shape}")
        acts = [X]
        h = X
        n_layers = len(self.weights)
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ W.T + b
            if i < n_layers - 1:
                h = np.tanh(h)
            acts.append(h)
        logits, latents = acts[-1], acts[-2]
        if keep:
            return logits, latents, acts
        return logits, latents

    def backward(self, acts, d_logits, d_latents=None) -> np.ndarray:
        """Flat parameter gradient given upstream grads on logits and latents."""
        grad = np.zeros_like(self.params)
        gW, gb = _views(grad, self.layer_dims)
        delta = d_logits
        n_layers = len(self.weights)
        for i in range(n_layers - 1, -1, -1):
            gW[i][:] = delta.T @ acts[i]
            gb[i][:] = delta.sum(axis=0)
            if i == 0:
                break
            up = delta @ self.weights[i]
            if i == n_layers - 1 and d_latents is not None:
                up = up + d_latents
            delta = up * (1.0 - acts[i] ** 2)
        return grad

    def predict(self, X) -> np.ndarray:
        return self.forward(X)[0]

    def features(self, X) -> np.ndarray:
        return self.forward(X)[1]


def parameter_count(layer_dims) -> int:
    return sum(a * b + b for a, b in zip(layer_dims[:-1], layer_dims[1:]))


def _views(flat, layer_dims):
    Ws, bs, off = [], [], 0
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        Ws.append(flat[off:off + fan_in * fan_out].reshape(fan_out, fan_in))
        off += fan_in * fan_out
        bs.append(flat[off:off + fan_out])
        off += fan_out
    return Ws, bs


def init_params(layer_dims, seed: int) -> np.ndarray:
    """Uniform ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]`` for weights and biases."""
    rng = np.random.default_rng(seed)
    chunks = []
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        bound = 1.0 / math.sqrt(fan_in)
        chunks.append(rng.uniform(-bound, bound, fan_in * fan_out))
        chunks.append(rng.uniform(-bound, bound, fan_out))
    return np.concatenate(chunks)


# -- optimizers ------------------------------------------------------------

class Adam:
    def __init__(self, n, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, params, grad):
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        params -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


class SGD:
    def __init__(self, n, lr, momentum=0.9):
        self.lr, self.momentum = lr, momentum
        self.buf = np.zeros(n)

    def step(self, params, grad):
        self.buf = self.momentum * self.buf + grad
        params -= self.lr * self.buf


def make_optimizer(name, n, lr):
    if name == "adam":
        return Adam(n, lr)
    if name == "sgd":
        return SGD(n, lr)
    raise ValidationError(f"unknown optimizer {name!r}")


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 30
    seed: int = 7
    replay_batch_size: int = 64


# -- teacher ---------------------------------------------------------------

@dataclass
class Teacher:
    model: MlpModel
    theta0: np.ndarray = field(repr=False)
    anchor_features: np.ndarray = field(repr=False)
    anchor_logits: np.ndarray = field(repr=False)
    history: list = field(default_factory=list, repr=False)


def _freeze(a):
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


def _minibatches(n, batch_size, rng):
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


def train_teacher(bundle: BenchmarkBundle, cfg: TrainConfig, hidden_dims=(64, 32)) -> Teacher:
    """Train on the old view with cross-entropy, then freeze and cache anchors."""
    X, y = bundle.old_train
    dims = (X.shape[1], *hidden_dims, bundle.config.n_classes)
    model = MlpModel(dims, seed=cfg.seed)
    opt = make_optimizer(cfg.optimizer, model.n_params, cfg.learning_rate)
    rng = np.random.default_rng([cfg.seed, 31])
    history = []
    step = 0
    for _ in range(cfg.epochs):
        for idx in _minibatches(X.shape[0], cfg.batch_size, rng):
            logits, _, acts = model.forward(X[idx], keep=True)
            value, d_logits = loss_ce(logits, y[idx], grad=True)
            if not np.isfinite(value):
                raise TrainingError("teacher loss is not finite", step, {"new": value})
            opt.step(model.params, model.backward(acts, d_logits))
            history.append(value)
            step += 1
    frozen = MlpModel(dims, model.params.copy())
    frozen.params.setflags(write=False)
    logits, feats = frozen.forward(bundle.anchors.inputs)
    return Teacher(frozen, _freeze(frozen.params), _freeze(feats), _freeze(logits), history)


# -- replay sampling -------------------------------------------------------

def sample_anchor_batch(cluster_assignments, size: int, rng: np.random.Generator) -> np.ndarray:
    """Cluster-stratified draw of anchor indices, without replacement.

    Clusters are visited round-robin in index order; within a cluster the
    order is a fresh random permutation.
    """
    labels = np.asarray(cluster_assignments)
    if not 0 <= size <= labels.size:
        raise ValidationError(f"batch size {size} exceeds anchor count {labels.size}")
    pools = [rng.permutation(np.flatnonzero(labels == k)) for k in np.unique(labels)]
    picks, pos = [], [0] * len(pools)
    while len(picks) < size:
        for c, pool in enumerate(pools):
            if pos[c] < pool.size and len(picks) < size:
                picks.append(pool[pos[c]])
                pos[c] += 1
    return np.asarray(picks, dtype=np.int64)


# -- fine-tuning -----------------------------------------------------------

def replay_size(method: str, cfg: TrainConfig, n_anchors: int) -> int:
    frac = get_preset(method).replay_fraction
    return min(n_anchors, int(round(frac * cfg.replay_batch_size)))


def finetune(teacher: Teacher, bundle: BenchmarkBundle, atlas_fit: AtlasFit, obj_cfg: ObjectiveConfig,
             train_cfg: TrainConfig, method: str):
    """Fine-tune a copy of the teacher on the new view under ``method``.

    Returns the student and one log row per optimizer step. ``t`` in the
    schedules is the global step index.
    """
    X, y = bundle.new_train
    anchors = bundle.anchors
    student = MlpModel(teacher.model.layer_dims, teacher.theta0.copy())
    opt = make_optimizer(train_cfg.optimizer, student.n_params, train_cfg.learning_rate)
    rng_new = np.random.default_rng([train_cfg.seed, 41])
    rng_anchor = np.random.default_rng([train_cfg.seed, 42])
    steps_per_epoch = math.ceil(X.shape[0] / train_cfg.batch_size)
    total_steps = train_cfg.epochs * steps_per_epoch
    m = replay_size(method, train_cfg, anchors.labels.size)
    atlas = atlas_fit.atlas

    rows = []
    step = 0
    for _ in range(train_cfg.epochs):
        for idx in _minibatches(X.shape[0], train_cfg.batch_size, rng_new):
            logits, _, acts = student.forward(X[idx], keep=True)
            w = effective_weights(obj_cfg, method, step, total_steps)
            ctx = anc_acts = None
            if anchor_terms_active(w) and m > 0:
                a_idx = sample_anchor_batch(atlas_fit.assignments, m, rng_anchor)
                a_logits, a_feats, anc_acts = student.forward(anchors.inputs[a_idx], keep=True)
                # Teacher targets are recomputed on the exact batch so that a student equal to
                # the teacher matches it bit for bit (BLAS results can depend on batch shape).
                t_logits, t_feats = teacher.model.forward(anchors.inputs[a_idx])
                ctx = make_anchor_context(
                    a_feats, t_feats, a_logits, t_logits,
                    anchors.labels[a_idx], obj_cfg,
                    atlas=atlas if w["chart"] else None,
                    need_geometry=bool(w["geo"] or w["smooth"]),
                )
            res = total_loss(logits, y[idx], ctx, atlas, obj_cfg, student.params, teacher.theta0,
                             step, total_steps, method, grad=True)
            if not np.isfinite(res.total):
                raise TrainingError("fine-tune loss is not finite", step, res.breakdown)
            grad = student.backward(acts, res.d_new_logits)
            if ctx is not None:
                grad = grad + student.backward(anc_acts, res.d_anchor_logits, res.d_anchor_features)
            if res.d_theta is not None:
                grad = grad + res.d_theta
            opt.step(student.params, grad)
            rows.append(log_row(step, obj_cfg, method, total_steps, res))
            step += 1
    return student, rows


# -- checkpoints -----------------------------------------------------------

def checkpoint_to_json(model: MlpModel, seed: int, config_hash: str) -> str:
    header = {"format": "atlas_cl.checkpoint/1", "layer_dims": list(model.layer_dims),
              "seed": seed, "config_hash": config_hash}
    return json.dumps({"header": header, "params": encode_array(model.params)}, sort_keys=True)


def checkpoint_from_json(text: str) -> tuple[MlpModel, dict]:
    doc = json.loads(text)
    header = doc["header"]
    return MlpModel(header["layer_dims"], decode_array(doc["params"])), header


def with_seed(cfg: TrainConfig, seed: int) -> TrainConfig:
    return replace(cfg, seed=seed)
