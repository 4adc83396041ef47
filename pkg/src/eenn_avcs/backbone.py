"""Residual-MLP early-exit backbone in plain numpy.

The network is an input affine layer followed by ``exits`` residual blocks
``h <- h + BN(ReLU(h W + b))``; every block feeds an affine head. All heads
are trained jointly on the exit-averaged loss with momentum SGD. After
training, the block outputs ``h_t(x)`` (with a trailing constant 1) are the
features consumed by the per-exit Bayesian heads.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import ClassificationDataset
from .errors import FormatError, InvalidArgument, TrainingDiverged

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
FORMAT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    exits: int = 15
    hidden: int = 20
    epochs: int = 500
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int | None = None  # None means full batch
    seed: int = 0


@dataclass(eq=False)
class BackboneModel:
    params: dict
    buffers: dict
    in_dim: int
    out_dim: int
    exits: int
    hidden: int
    task: str
    config: dict = field(default_factory=dict)
    history: list = field(default_factory=list)

    def head_weights(self, t):
        """Head ``t`` (0-based) as a matrix ``(hidden + 1, out_dim)``; bias last."""
        return np.vstack([self.params[f"head{t}.weight"], self.params[f"head{t}.bias"][None, :]])


@dataclass(eq=False)
class FeatureSet:
    per_exit: list
    split: str = ""
    targets: np.ndarray | None = None

    @property
    def exits(self):
        return len(self.per_exit)

    @property
    def dim(self):
        return self.per_exit[0].shape[1]

    @property
    def n(self):
        return self.per_exit[0].shape[0]


@dataclass(eq=False)
class Logits:
    per_exit: list
    split: str = ""
    targets: np.ndarray | None = None

    @property
    def exits(self):
        return len(self.per_exit)

    @property
    def n_classes(self):
        return self.per_exit[0].shape[1]

    @property
    def n(self):
        return self.per_exit[0].shape[0]


def init_model(in_dim, out_dim, exits, hidden, task, rng):
    """Uniform fan-in initialization for every affine map; BN starts at identity."""
    if exits < 1 or hidden < 1:
        raise InvalidArgument("exits and hidden must be >= 1")

    def affine(fan_in, fan_out):
        bound = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-bound, bound, (fan_in, fan_out)), rng.uniform(-bound, bound, fan_out)

    params, buffers = {}, {}
    params["input.weight"], params["input.bias"] = affine(in_dim, hidden)
    for t in range(exits):
        params[f"block{t}.weight"], params[f"block{t}.bias"] = affine(hidden, hidden)
        params[f"block{t}.gamma"] = np.ones(hidden)
        params[f"block{t}.beta"] = np.zeros(hidden)
        buffers[f"block{t}.running_mean"] = np.zeros(hidden)
        buffers[f"block{t}.running_var"] = np.ones(hidden)
    for t in range(exits):
        params[f"head{t}.weight"], params[f"head{t}.bias"] = affine(hidden, out_dim)
    return BackboneModel(params, buffers, in_dim, out_dim, exits, hidden, task)


def _forward(params, buffers, x, exits, train):
    """Run the backbone; return per-exit hidden states and a backward cache."""
    h = x @ params["input.weight"] + params["input.bias"]
    hidden_states, cache = [], []
    for t in range(exits):
        pre = h @ params[f"block{t}.weight"] + params[f"block{t}.bias"]
        act = np.maximum(pre, 0.0)
        if train:
            mean = act.mean(axis=0)
            var = act.var(axis=0)
            if buffers is not None:
                n = act.shape[0]
                unbiased = var * n / max(n - 1, 1)
                buffers[f"block{t}.running_mean"] = (1 - BN_MOMENTUM) * buffers[f"block{t}.running_mean"] + BN_MOMENTUM * mean
                buffers[f"block{t}.running_var"] = (1 - BN_MOMENTUM) * buffers[f"block{t}.running_var"] + BN_MOMENTUM * unbiased
        else:
            mean = buffers[f"block{t}.running_mean"]
            var = buffers[f"block{t}.running_var"]
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (act - mean) * inv_std
        h_new = h + params[f"block{t}.gamma"] * xhat + params[f"block{t}.beta"]
        cache.append((h, pre, xhat, inv_std))
        h = h_new
        hidden_states.append(h)
    return hidden_states, cache


def _heads(params, hidden_states):
    return [h @ params[f"head{t}.weight"] + params[f"head{t}.bias"] for t, h in enumerate(hidden_states)]


def _log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def loss_and_grads(params, x, y, task, exits, buffers=None):
    """Exit-averaged training loss and its gradient for every parameter.

    Batch normalization uses batch statistics (training mode). When
    ``buffers`` is given, its running statistics are updated in place.
    """
    hidden_states, cache = _forward(params, buffers, x, exits, train=True)
    outputs = _heads(params, hidden_states)
    n = x.shape[0]
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    loss = 0.0
    d_hidden = []
    for t, out in enumerate(outputs):
        if task == "regression":
            resid = out[:, 0] - y
            loss += np.mean(resid**2) / exits
            d_out = (2.0 / (n * exits)) * resid[:, None]
        else:
            logp = _log_softmax(out)
            loss -= np.mean(logp[np.arange(n), y]) / exits
            d_out = np.exp(logp)
            d_out[np.arange(n), y] -= 1.0
            d_out /= n * exits
        grads[f"head{t}.weight"] = hidden_states[t].T @ d_out
        grads[f"head{t}.bias"] = d_out.sum(axis=0)
        d_hidden.append(d_out @ params[f"head{t}.weight"].T)

    dh = np.zeros_like(hidden_states[-1])
    for t in reversed(range(exits)):
        dh = dh + d_hidden[t]
        h_prev, pre, xhat, inv_std = cache[t]
        gamma = params[f"block{t}.gamma"]
        grads[f"block{t}.gamma"] = np.sum(dh * xhat, axis=0)
        grads[f"block{t}.beta"] = dh.sum(axis=0)
        dxhat = dh * gamma
        dact = inv_std / n * (n * dxhat - dxhat.sum(axis=0) - xhat * np.sum(dxhat * xhat, axis=0))
        dpre = dact * (pre > 0)
        grads[f"block{t}.weight"] = h_prev.T @ dpre
        grads[f"block{t}.bias"] = dpre.sum(axis=0)
        dh = dh + dpre @ params[f"block{t}.weight"].T
    grads["input.weight"] = x.T @ dh
    grads["input.bias"] = dh.sum(axis=0)
    return loss, grads


def _as_training_arrays(data):
    x, y = data.subset("train")
    if len(y) == 0:
        raise InvalidArgument("dataset has an empty train split")
    x = np.asarray(x, dtype=float).reshape(len(y), -1)
    if isinstance(data, ClassificationDataset):
        return x, np.asarray(y, dtype=int), "classification", int(data.n_classes)
    return x, np.asarray(y, dtype=float), "regression", 1


def train_backbone(data, config=TrainConfig()):
    """Fit the backbone on the train split with momentum SGD and weight decay."""
    x, y, task, out_dim = _as_training_arrays(data)
    rng = np.random.default_rng(config.seed)
    model = init_model(x.shape[1], out_dim, config.exits, config.hidden, task, rng)
    model.config = asdict(config)
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    n = len(y)
    batch = n if not config.batch_size else min(config.batch_size, n)
    for epoch in range(1, config.epochs + 1):
        order = np.arange(n) if batch == n else rng.permutation(n)
        epoch_loss, seen = 0.0, 0
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            if len(idx) < 2:  # batch statistics need two points
                continue
            loss, grads = loss_and_grads(model.params, x[idx], y[idx], task, config.exits, model.buffers)
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch, loss)
            for k, p in model.params.items():
                g = grads[k] + config.weight_decay * p
                velocity[k] = config.momentum * velocity[k] + g
                p -= config.lr * velocity[k]
            epoch_loss += loss * len(idx)
            seen += len(idx)
        epoch_loss /= max(seen, 1)
        if not np.isfinite(epoch_loss):
            raise TrainingDiverged(epoch, epoch_loss)
        model.history.append(float(epoch_loss))
    return model


def _check_inputs(model, inputs):
    x = np.asarray(inputs, dtype=float)
    if x.ndim == 1 and model.in_dim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[1] != model.in_dim:
        raise InvalidArgument(f"expected inputs with {model.in_dim} columns, got shape {x.shape}")
    return x


def extract_features(model, inputs, split=""):
    """Per-exit hidden states in evaluation mode with a bias column appended."""
    x = _check_inputs(model, inputs)
    hidden_states, _ = _forward(model.params, model.buffers, x, model.exits, train=False)
    ones = np.ones((x.shape[0], 1))
    return FeatureSet([np.hstack([h, ones]) for h in hidden_states], split=split)


def extract_logits(model, inputs, split=""):
    x = _check_inputs(model, inputs)
    hidden_states, _ = _forward(model.params, model.buffers, x, model.exits, train=False)
    return Logits(_heads(model.params, hidden_states), split=split)


def exit_mse(model, inputs, targets):
    """Mean squared error of each regression head, evaluation mode."""
    x = _check_inputs(model, inputs)
    hidden_states, _ = _forward(model.params, model.buffers, x, model.exits, train=False)
    return np.array([np.mean((out[:, 0] - targets) ** 2) for out in _heads(model.params, hidden_states)])


# -- checkpoints --------------------------------------------------------------

def save_model(model, path):
    blob = {
        "format_version": FORMAT_VERSION,
        "hyperparameters": {
            "in_dim": model.in_dim,
            "out_dim": model.out_dim,
            "exits": model.exits,
            "hidden": model.hidden,
            "task": model.task,
            "train_config": model.config,
            "bn_eps": BN_EPS,
            "bn_momentum": BN_MOMENTUM,
            "init": "uniform fan-in",
        },
        "params": {k: v.tolist() for k, v in model.params.items()},
        "buffers": {k: v.tolist() for k, v in model.buffers.items()},
        "history": model.history,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(blob))
    return path


def load_model(path):
    path = Path(path)
    if not path.exists():
        raise FormatError(f"model checkpoint not found: {path}", path)
    blob = json.loads(path.read_text())
    hp = blob["hyperparameters"]
    return BackboneModel(
        params={k: np.asarray(v, dtype=float) for k, v in blob["params"].items()},
        buffers={k: np.asarray(v, dtype=float) for k, v in blob["buffers"].items()},
        in_dim=hp["in_dim"],
        out_dim=hp["out_dim"],
        exits=hp["exits"],
        hidden=hp["hidden"],
        task=hp["task"],
        config=hp.get("train_config", {}),
        history=blob.get("history", []),
    )


# -- feature directories ---------------------------------------------------------

def _exit_file(t, exits):
    width = max(2, len(str(exits)))
    return f"exit_{t:0{width}d}.csv"


def save_features(obj, path):
    """Write a FeatureSet or Logits as ``manifest.json`` + one CSV per exit."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    kind = "features" if isinstance(obj, FeatureSet) else "logits"
    width_key = "H" if kind == "features" else "K"
    manifest = {
        "kind": kind,
        "T": obj.exits,
        width_key: int(obj.per_exit[0].shape[1]),
        "N": int(obj.n),
        "split": obj.split,
        "has_targets": obj.targets is not None,
    }
    for t, mat in enumerate(obj.per_exit, start=1):
        np.savetxt(path / _exit_file(t, obj.exits), mat, delimiter=",", fmt="%.17g")
    if obj.targets is not None:
        fmt = "%d" if np.issubdtype(np.asarray(obj.targets).dtype, np.integer) else "%.17g"
        np.savetxt(path / "targets.csv", np.asarray(obj.targets), fmt=fmt)
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_features(path):
    """Load a directory written by :func:`save_features` (or by an external tool)."""
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise FormatError(f"missing manifest: {manifest_path}", manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
        kind, exits, n = manifest["kind"], int(manifest["T"]), int(manifest["N"])
        width = int(manifest["H"] if kind == "features" else manifest["K"])
    except (KeyError, ValueError, json.JSONDecodeError) as exc:
        raise FormatError(f"malformed manifest {manifest_path}: {exc}", manifest_path) from exc
    if kind not in ("features", "logits"):
        raise FormatError(f"unknown kind {kind!r} in {manifest_path}", manifest_path)
    per_exit = []
    for t in range(1, exits + 1):
        f = path / _exit_file(t, exits)
        if not f.exists():
            raise FormatError(f"exit {t}: missing file {f.name} (manifest declares T={exits})", f)
        try:
            mat = np.loadtxt(f, delimiter=",", ndmin=2)
        except ValueError as exc:
            raise FormatError(f"exit {t}: unparseable file {f.name}: {exc}", f) from exc
        if mat.shape != (n, width):
            raise FormatError(f"exit {t}: {f.name} has shape {mat.shape}, manifest says {(n, width)}", f)
        if not np.all(np.isfinite(mat)):
            raise FormatError(f"exit {t}: non-finite values in {f.name}", f)
        if kind == "features" and not np.all(mat[:, -1] == 1.0):
            raise FormatError(f"exit {t}: last column of {f.name} must be the constant bias 1", f)
        per_exit.append(mat)
    targets = None
    tfile = path / "targets.csv"
    if tfile.exists():
        targets = np.loadtxt(tfile, ndmin=1)
        if kind == "logits":
            targets = targets.astype(int)
        if targets.shape != (n,):
            raise FormatError(f"targets.csv has {targets.shape[0]} rows, manifest says N={n}", tfile)
    cls = FeatureSet if kind == "features" else Logits
    return cls(per_exit, split=manifest.get("split", ""), targets=targets)
