"""Feed-forward CVR predictor trained on a mix of hard and soft labels.

The model only ever sees :class:`FeatureView` objects, which carry ranking
features ``x`` and a label vector.  Post-ranking signals cannot reach it.
"""
from __future__ import annotations

import enum
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .datagen import LogRecord
from .errors import ConfigurationError, DivergenceError, ShapeError, UndefinedMetricError
from .metrics import pr_auc
from .settings import EarlyStopping, FixedEpochs, Stopping

P_EPS = 1e-12


class Activation(str, enum.Enum):
    RELU = "ReLU"
    TANH = "Tanh"


@dataclass(frozen=True)
class MLPArch:
    layer_widths: Tuple[int, ...]
    activation: Activation = Activation.RELU
    seed: int = 0

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        object.__setattr__(self, "activation", Activation(self.activation))
        if len(widths) < 3:
            raise ConfigurationError("layer_widths", "need input, at least one hidden layer, and output")
        if widths[-1] != 1:
            raise ConfigurationError("layer_widths", "last width must be 1")
        if min(widths) < 1:
            raise ConfigurationError("layer_widths", "widths must be >= 1")

    @classmethod
    def default(cls, dim_x: int, seed: int = 0) -> "MLPArch":
        return cls((dim_x, 64, 32, 1), Activation.RELU, seed)

    @property
    def dim_x(self) -> int:
        return self.layer_widths[0]


@dataclass(frozen=True)
class ModelParams:
    weights: Tuple[np.ndarray, ...]
    biases: Tuple[np.ndarray, ...]
    arch: MLPArch
    aux_head: Optional[Tuple[np.ndarray, np.ndarray]] = None  # soft-label head of the two-head model

    def __post_init__(self):
        widths = self.arch.layer_widths
        if len(self.weights) != len(widths) - 1 or len(self.biases) != len(widths) - 1:
            raise ShapeError("layer count does not match architecture")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape != (widths[i], widths[i + 1]) or b.shape != (widths[i + 1],):
                raise ShapeError(f"layer {i}: got W{W.shape} b{b.shape}")
        if self.aux_head is not None:
            W, b = self.aux_head
            if W.shape != (widths[-2], 1) or b.shape != (1,):
                raise ShapeError("aux head shape mismatch")
        if not all(np.all(np.isfinite(a)) for a in self.arrays()):
            raise ValueError("non-finite parameter")

    def arrays(self) -> List[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        if self.aux_head is not None:
            out += list(self.aux_head)
        return out

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> "ModelParams":
        n = len(self.weights)
        aux = (arrays[2 * n], arrays[2 * n + 1]) if self.aux_head is not None else None
        return ModelParams(tuple(arrays[0 : 2 * n : 2]), tuple(arrays[1 : 2 * n : 2]), self.arch, aux)

    def predict(self, X: np.ndarray, head: str = "hard") -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.arch.dim_x:
            raise ShapeError(f"expected {self.arch.dim_x} features, got {X.shape[1]}")
        s_main, s_aux, _ = _forward(self, X)
        s = s_aux if head == "soft" and s_aux is not None else s_main
        return np.clip(_sigmoid(s), P_EPS, 1 - P_EPS)


def init_params(arch: MLPArch, two_heads: bool = False) -> ModelParams:
    rng = np.random.default_rng([arch.seed, 0x1417])
    gain = 6.0 if arch.activation is Activation.RELU else 3.0
    widths = arch.layer_widths
    Ws, bs = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        lim = math.sqrt(gain / fan_in)
        Ws.append(rng.uniform(-lim, lim, (fan_in, fan_out)))
        bs.append(np.zeros(fan_out))
    aux = None
    if two_heads:
        lim = math.sqrt(gain / widths[-2])
        aux = (rng.uniform(-lim, lim, (widths[-2], 1)), np.zeros(1))
    return ModelParams(tuple(Ws), tuple(bs), arch, aux)


def _sigmoid(t):
    return 0.5 * (1.0 + np.tanh(0.5 * t))


def _act(a, kind):
    return np.maximum(a, 0.0) if kind is Activation.RELU else np.tanh(a)


def _act_grad(a, h, kind):
    return (a > 0.0).astype(float) if kind is Activation.RELU else 1.0 - h * h


def _forward(params: ModelParams, X: np.ndarray):
    kind = params.arch.activation
    hs, pre = [X], []
    for W, b in zip(params.weights[:-1], params.biases[:-1]):
        a = hs[-1] @ W + b
        pre.append(a)
        hs.append(_act(a, kind))
    s_main = (hs[-1] @ params.weights[-1] + params.biases[-1])[:, 0]
    s_aux = None
    if params.aux_head is not None:
        s_aux = (hs[-1] @ params.aux_head[0] + params.aux_head[1])[:, 0]
    return s_main, s_aux, (hs, pre)


def _backward(params: ModelParams, cache, ds_main: np.ndarray, ds_aux: Optional[np.ndarray]) -> List[np.ndarray]:
    hs, pre = cache
    kind = params.arch.activation
    n_layers = len(params.weights)
    gW: List[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    gb: List[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    top = hs[-1]
    gW[-1] = top.T @ ds_main[:, None]
    gb[-1] = np.array([ds_main.sum()])
    dh = ds_main[:, None] @ params.weights[-1].T
    aux_grads = []
    if params.aux_head is not None:
        d = np.zeros_like(ds_main) if ds_aux is None else ds_aux
        aux_grads = [top.T @ d[:, None], np.array([d.sum()])]
        dh = dh + d[:, None] @ params.aux_head[0].T
    for l in range(n_layers - 2, -1, -1):
        da = dh * _act_grad(pre[l], hs[l + 1], kind)
        gW[l] = hs[l].T @ da
        gb[l] = da.sum(axis=0)
        if l > 0:
            dh = da @ params.weights[l].T
    grads = []
    for W, b in zip(gW, gb):
        grads += [W, b]
    return grads + aux_grads


def forward(params: ModelParams, x: np.ndarray) -> float:
    """Conversion probability for one feature vector, in the open interval (0, 1)."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.size != params.arch.dim_x:
        raise ShapeError(f"expected a {params.arch.dim_x}-vector, got shape {x.shape}")
    return float(params.predict(x[None, :])[0])


def soft_xent_loss(p: float, label: float) -> float:
    if not 0.0 <= label <= 1.0:
        raise ValueError(f"label must lie in [0, 1], got {label}")
    p = min(max(p, P_EPS), 1.0 - P_EPS)
    return -label * math.log(p) - (1.0 - label) * math.log1p(-p)


def mlp_loss_and_gradients(
    params: ModelParams,
    X: np.ndarray,
    labels: np.ndarray,
    sample_weight: Optional[np.ndarray] = None,
    head: Optional[np.ndarray] = None,
) -> Tuple[float, List[np.ndarray]]:
    """Batch cross-entropy ``sum_i c_i * xent_i / n`` and its gradient.

    ``head`` (two-head models only) routes row ``i`` to the hard head when 0
    and to the soft head when 1.  Gradients align with ``params.arrays()``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    labels = np.asarray(labels, dtype=float)
    n = X.shape[0]
    c = np.ones(n) if sample_weight is None else np.asarray(sample_weight, dtype=float)
    s_main, s_aux, cache = _forward(params, X)
    if head is None or s_aux is None:
        s = s_main
        route = np.zeros(n, dtype=bool)
    else:
        route = np.asarray(head).astype(bool)
        s = np.where(route, s_aux, s_main)
    # -l log s(t) - (1-l) log(1-s(t)) = softplus(t) - l t
    loss = float(np.sum(c * (np.logaddexp(0.0, s) - labels * s)) / n)
    ds = c * (_sigmoid(s) - labels) / n
    ds_main = np.where(route, 0.0, ds)
    ds_aux = np.where(route, ds, 0.0) if s_aux is not None else None
    return loss, _backward(params, cache, ds_main, ds_aux)


@dataclass(frozen=True)
class FeatureView:
    """Ranking features and labels for one training set, nothing else."""

    record_ids: np.ndarray
    X: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if not (len(self.record_ids) == self.X.shape[0] == len(self.labels)):
            raise ShapeError("record_ids, X and labels disagree in length")
        if np.any((self.labels < 0) | (self.labels > 1)):
            raise ValueError("labels must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.record_ids)

    @classmethod
    def empty(cls, dim_x: int) -> "FeatureView":
        return cls(np.zeros(0, dtype=np.int64), np.zeros((0, dim_x)), np.zeros(0))

    @classmethod
    def hard(cls, records: Sequence[LogRecord]) -> "FeatureView":
        for r in records:
            if r.z is None:
                raise ValueError(f"record {r.record_id} has no hard label")
        return cls._build(records, [float(r.z) for r in records])

    @classmethod
    def soft(cls, records: Sequence[LogRecord], soft_labels) -> "FeatureView":
        by_id = {s.record_id: s.z_hat for s in soft_labels}
        return cls._build(records, [min(max(by_id[r.record_id], 1e-6), 1 - 1e-6) for r in records])

    @classmethod
    def _build(cls, records, labels):
        if not records:
            raise ValueError("use FeatureView.empty for an empty set")
        return cls(
            np.array([r.record_id for r in records], dtype=np.int64),
            np.vstack([r.x for r in records]),
            np.asarray(labels, dtype=float),
        )


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.2
    batch_size: int = 128
    max_epochs: int = 60
    stopping: Stopping = field(default_factory=EarlyStopping)
    validation_fraction: float = 0.1
    seed: int = 0
    soft_weight: float = 1.0
    optimizer: str = "sgd"  # "sgd" | "momentum" | "adam"
    momentum: float = 0.9

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigurationError("learning_rate", "must be > 0")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size", "must be >= 1")
        if self.max_epochs < 1:
            raise ConfigurationError("max_epochs", "must be >= 1")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ConfigurationError("validation_fraction", "must lie in (0, 1)")
        if self.soft_weight < 0:
            raise ConfigurationError("soft_weight", "must be >= 0")
        if self.optimizer not in ("sgd", "momentum", "adam"):
            raise ConfigurationError("optimizer", f"unknown optimizer {self.optimizer!r}")
        if not isinstance(self.stopping, (EarlyStopping, FixedEpochs)):
            raise ConfigurationError("stopping", "must be EarlyStopping or FixedEpochs")


@dataclass
class TrainingTrace:
    epochs: List[int] = field(default_factory=list)
    train_loss: List[float] = field(default_factory=list)
    val_pr_auc: List[float] = field(default_factory=list)
    best_epoch: Optional[int] = None
    stopped_early: bool = False
    val_record_ids: List[int] = field(default_factory=list)

    def rows(self):
        return list(zip(self.epochs, self.train_loss, self.val_pr_auc))


def stratified_split(labels: np.ndarray, fraction: float, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Indices (train, validation) with the label mix preserved in both."""
    val = []
    for cls in (0, 1):
        idx = np.flatnonzero(labels == cls)
        if idx.size == 0:
            continue
        k = int(round(fraction * idx.size))
        if idx.size >= 2:
            k = min(max(k, 1), idx.size - 1)
        val.append(rng.permutation(idx)[:k])
    val_idx = np.sort(np.concatenate(val)) if val else np.zeros(0, dtype=int)
    mask = np.ones(labels.size, dtype=bool)
    mask[val_idx] = False
    return np.flatnonzero(mask), val_idx


class _Optimizer:
    def __init__(self, cfg: TrainConfig, arrays: Sequence[np.ndarray]):
        self.cfg = cfg
        self.t = 0
        if cfg.optimizer != "sgd":
            self.m = [np.zeros_like(a) for a in arrays]
        if cfg.optimizer == "adam":
            self.v = [np.zeros_like(a) for a in arrays]

    def step(self, arrays, grads):
        cfg, lr = self.cfg, self.cfg.learning_rate
        if cfg.optimizer == "sgd":
            return [a - lr * g for a, g in zip(arrays, grads)]
        if cfg.optimizer == "momentum":
            self.m = [cfg.momentum * m + g for m, g in zip(self.m, grads)]
            return [a - lr * m for a, m in zip(arrays, self.m)]
        self.t += 1
        b1, b2 = 0.9, 0.999
        out = []
        for i, (a, g) in enumerate(zip(arrays, grads)):
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            mh = self.m[i] / (1 - b1**self.t)
            vh = self.v[i] / (1 - b2**self.t)
            out.append(a - lr * mh / (np.sqrt(vh) + 1e-8))
        return out


def _fit(hard: FeatureView, soft: Optional[FeatureView], arch: MLPArch, cfg: TrainConfig, two_heads: bool, on_epoch=None):
    soft = soft if soft is not None and len(soft) else None
    if len(hard) and hard.X.shape[1] != arch.dim_x:
        raise ShapeError(f"arch expects {arch.dim_x} features, data has {hard.X.shape[1]}")
    early = isinstance(cfg.stopping, EarlyStopping)
    if early and len(hard) == 0:
        raise ConfigurationError("stopping", "early stopping needs hard labels for validation; use FixedEpochs")
    if len(hard) == 0 and soft is None:
        raise ConfigurationError("train", "no training data")

    rng = np.random.default_rng([cfg.seed, 0x7A1])
    if len(hard):
        tr_idx, val_idx = stratified_split(hard.labels, cfg.validation_fraction, rng)
    else:
        tr_idx, val_idx = np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    X_val, y_val = hard.X[val_idx], hard.labels[val_idx]
    val_defined = y_val.size > 0 and 0 < y_val.sum() < y_val.size
    if early and not val_defined:
        raise ConfigurationError("validation_fraction", "validation split lacks positive or negative examples")

    parts_X, parts_y, parts_c, parts_h = [hard.X[tr_idx]], [hard.labels[tr_idx]], [np.ones(tr_idx.size)], [np.zeros(tr_idx.size)]
    if soft is not None:
        parts_X.append(soft.X)
        parts_y.append(soft.labels)
        parts_c.append(np.full(len(soft), cfg.soft_weight))
        parts_h.append(np.ones(len(soft)))
    X = np.vstack(parts_X)
    y = np.concatenate(parts_y)
    c = np.concatenate(parts_c)
    head = np.concatenate(parts_h) if two_heads else None
    n = X.shape[0]

    params = init_params(arch, two_heads=two_heads)
    arrays = params.arrays()
    opt = _Optimizer(cfg, arrays)
    n_epochs = cfg.stopping.n if isinstance(cfg.stopping, FixedEpochs) else cfg.max_epochs
    trace = TrainingTrace(val_record_ids=hard.record_ids[val_idx].tolist())
    best_score, best_arrays = -np.inf, None
    for epoch in range(1, n_epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            b = order[start : start + cfg.batch_size]
            loss, grads = mlp_loss_and_gradients(
                params, X[b], y[b], c[b], None if head is None else head[b]
            )
            if not math.isfinite(loss):
                raise DivergenceError(epoch, loss)
            total += loss * b.size
            arrays = opt.step(arrays, grads)
            try:
                params = params.with_arrays(arrays)
            except ValueError:
                raise DivergenceError(epoch, float("nan")) from None
        score = pr_auc(params.predict(X_val), y_val) if val_defined else float("nan")
        trace.epochs.append(epoch)
        trace.train_loss.append(total / n)
        trace.val_pr_auc.append(score)
        if on_epoch is not None:
            on_epoch(epoch, params)
        if early:
            if score > best_score:
                best_score, best_arrays, trace.best_epoch = score, arrays, epoch
            elif epoch - trace.best_epoch >= cfg.stopping.patience:
                trace.stopped_early = True
                break
    if early:
        params = params.with_arrays(best_arrays)
    else:
        trace.best_epoch = n_epochs
    return params, trace


def train(hard: FeatureView, soft: Optional[FeatureView], arch: MLPArch, cfg: TrainConfig, on_epoch=None):
    """Mini-batch training on the shuffled union of hard and soft examples.

    ``on_epoch(epoch, params)`` is called after every epoch when given.
    """
    return _fit(hard, soft, arch, cfg, two_heads=False, on_epoch=on_epoch)


def train_mtl(hard: FeatureView, soft: Optional[FeatureView], arch: MLPArch, cfg: TrainConfig, on_epoch=None):
    """Shared trunk with one output head per label type.

    Hard rows train the hard head, soft rows the soft head, and both
    gradients reach the trunk.  Predictions use the hard head.
    """
    if soft is None or len(soft) == 0:
        raise ConfigurationError("soft", "two-head training needs soft labels; use train() instead")
    if len(hard) == 0:
        raise ConfigurationError("hard", "two-head training needs hard labels")
    return _fit(hard, soft, arch, cfg, two_heads=True, on_epoch=on_epoch)


# -- checkpoints ---------------------------------------------------------

_MAGIC = "ppctsim-mlp v1"


def save_params(params: ModelParams, path: Union[str, Path]) -> None:
    arch = params.arch
    lines = [
        f"# {_MAGIC}",
        f"widths={','.join(map(str, arch.layer_widths))}",
        f"activation={arch.activation.value}",
        f"seed={arch.seed}",
        f"heads={1 if params.aux_head is None else 2}",
    ]
    for a in params.arrays():
        shape = "x".join(map(str, a.shape))
        lines.append(shape + " " + " ".join(float(v).hex() for v in a.ravel()))
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_text("\n".join(lines) + "\n")
    os.replace(tmp, path)


def load_params(path: Union[str, Path]) -> ModelParams:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != f"# {_MAGIC}":
        raise ValueError(f"{path}: not a model checkpoint")
    meta = dict(line.split("=", 1) for line in lines[1:5])
    arch = MLPArch(
        tuple(int(w) for w in meta["widths"].split(",")),
        Activation(meta["activation"]),
        int(meta["seed"]),
    )
    arrays = []
    for line in lines[5:]:
        shape_s, *vals = line.split(" ")
        shape = tuple(int(s) for s in shape_s.split("x"))
        arrays.append(np.array([float.fromhex(v) for v in vals]).reshape(shape))
    template = init_params(arch, two_heads=meta["heads"] == "2")
    return template.with_arrays(arrays)
