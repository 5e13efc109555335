"""A small NumPy multilayer perceptron for binary classification.

Covers exactly what the attack and the defense pipelines need: the fixed
dense/ReLU/batch-norm stacks used for the Higgs and jet-tagging tasks,
mini-batch training with Adam and early stopping, inference-mode input
gradients, and a bit-exact save format.
"""

from __future__ import annotations

import copy
import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .exceptions import ConfigError, DataError, ModelFormatError, NumericError

FORMAT_VERSION = 1
HIDDEN_STACK = (300, 102, 12, 6)
ARCHITECTURES = {"higgs": 30, "ttww": 87, "donut": 2}
LAYER_KINDS = ("dense", "batch_norm", "relu", "sigmoid")


@dataclass
class LayerSpec:
    kind: str
    in_dim: int | None = None
    out_dim: int | None = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")

    def param_count(self) -> int:
        if self.kind == "dense":
            return self.in_dim * self.out_dim + self.out_dim
        if self.kind == "batch_norm":
            return 2 * self.out_dim
        return 0


def stack_spec(input_dim: int, hidden=HIDDEN_STACK, batch_norm: bool = True) -> list[LayerSpec]:
    """Dense+ReLU(+BatchNorm) blocks followed by a single sigmoid unit."""
    specs, prev = [], input_dim
    for width in hidden:
        specs += [LayerSpec("dense", prev, width), LayerSpec("relu")]
        if batch_norm:
            specs.append(LayerSpec("batch_norm", width, width))
        prev = width
    specs += [LayerSpec("dense", prev, 1), LayerSpec("sigmoid")]
    return specs


class MlpModel:
    """Layer stack with trainable parameters and batch-norm running statistics.

    The final sigmoid is applied outside the layer loop so that the loss can
    be computed from logits.
    """

    bn_momentum = 0.9
    bn_eps = 1e-5

    def __init__(self, specs: list[LayerSpec], seed: int = 0):
        self.specs = [LayerSpec(**asdict(s)) if isinstance(s, LayerSpec) else LayerSpec(**s) for s in specs]
        self._check_chain()
        self.seed = seed
        self.training = False
        self.params: list[dict[str, np.ndarray]] = []
        rng = np.random.default_rng(seed)
        for s in self.specs:
            if s.kind == "dense":
                limit = np.sqrt(6.0 / s.in_dim)
                self.params.append({"W": rng.uniform(-limit, limit, size=(s.out_dim, s.in_dim)),
                                    "b": np.zeros(s.out_dim)})
            elif s.kind == "batch_norm":
                c = s.out_dim
                self.params.append({"gamma": np.ones(c), "beta": np.zeros(c),
                                    "running_mean": np.zeros(c), "running_var": np.ones(c)})
            else:
                self.params.append({})

    def _check_chain(self):
        if not self.specs or self.specs[-1].kind != "sigmoid":
            raise ConfigError("architecture must end in a sigmoid output")
        width = None
        for i, s in enumerate(self.specs):
            if s.kind == "dense":
                if s.in_dim is None or s.out_dim is None or s.in_dim < 1 or s.out_dim < 1:
                    raise ConfigError(f"layer {i}: dense layer needs positive in_dim/out_dim")
                if width is not None and s.in_dim != width:
                    raise ConfigError(f"layer {i}: expects {s.in_dim} inputs but previous layer gives {width}")
                width = s.out_dim
            elif s.kind == "batch_norm":
                if width is None:
                    raise ConfigError("batch_norm before any dense layer")
                if s.out_dim is None:
                    s.out_dim = s.in_dim = width
                if s.out_dim != width:
                    raise ConfigError(f"layer {i}: batch_norm over {s.out_dim} channels, input has {width}")
        if width != 1:
            raise ConfigError("output layer must have a single unit")

    @property
    def input_dim(self) -> int:
        return next(s.in_dim for s in self.specs if s.kind == "dense")

    @property
    def trainable_param_count(self) -> int:
        return sum(s.param_count() for s in self.specs)

    def copy(self) -> "MlpModel":
        return copy.deepcopy(self)

    # -- forward / backward --------------------------------------------------

    def logits(self, X: np.ndarray, training: bool = False, cache: list | None = None) -> np.ndarray:
        h = X
        for s, p in zip(self.specs[:-1], self.params[:-1]):
            if cache is not None:
                cache.append(h)
            if s.kind == "dense":
                h = h @ p["W"].T + p["b"]
            elif s.kind == "relu":
                h = np.maximum(h, 0.0)
            elif s.kind == "batch_norm":
                if training:
                    mu = h.mean(axis=0)
                    var = h.var(axis=0)
                    p["running_mean"] = self.bn_momentum * p["running_mean"] + (1 - self.bn_momentum) * mu
                    p["running_var"] = self.bn_momentum * p["running_var"] + (1 - self.bn_momentum) * var
                else:
                    mu, var = p["running_mean"], p["running_var"]
                inv = 1.0 / np.sqrt(var + self.bn_eps)
                xhat = (h - mu) * inv
                if cache is not None:
                    cache.append((xhat, inv))
                h = p["gamma"] * xhat + p["beta"]
        return h[:, 0]

    def _backward(self, cache: list, grad_logit: np.ndarray, training: bool):
        """Backpropagate ``dL/dlogit``; returns (param grads, dL/dinput)."""
        grads: list[dict] = [dict() for _ in self.specs]
        g = grad_logit[:, None]
        ci = len(cache)
        for li in range(len(self.specs) - 2, -1, -1):
            s, p = self.specs[li], self.params[li]
            if s.kind == "batch_norm":
                xhat, inv = cache[ci - 1]
                ci -= 2
                grads[li] = {"gamma": np.sum(g * xhat, axis=0), "beta": g.sum(axis=0)}
                gx = g * p["gamma"]
                if training:
                    m = g.shape[0]
                    g = inv / m * (m * gx - gx.sum(axis=0) - xhat * np.sum(gx * xhat, axis=0))
                else:
                    g = gx * inv
                continue
            ci -= 1
            x_in = cache[ci]
            if s.kind == "dense":
                grads[li] = {"W": g.T @ x_in, "b": g.sum(axis=0)}
                g = g @ p["W"]
            elif s.kind == "relu":
                g = g * (x_in > 0)
        return grads, g

    def input_gradients(self, X: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Per-row gradient of binary cross-entropy w.r.t. the inputs (inference mode)."""
        X = np.asarray(X, dtype=np.float64)
        cache: list = []
        z = self.logits(X, training=False, cache=cache)
        if not np.all(np.isfinite(z)):
            raise NumericError("non-finite activation in gradient computation")
        _, g = self._backward(cache, _sigmoid(z) - np.asarray(y, dtype=np.float64), training=False)
        return g

    def trainable_arrays(self):
        for li, s in enumerate(self.specs):
            if s.kind == "dense":
                yield li, "W"
                yield li, "b"
            elif s.kind == "batch_norm":
                yield li, "gamma"
                yield li, "beta"

    # -- serialization -------------------------------------------------------

    def flat_parameters(self) -> np.ndarray:
        parts = []
        for s, p in zip(self.specs, self.params):
            if s.kind == "dense":
                parts += [p["W"].ravel(), p["b"]]
            elif s.kind == "batch_norm":
                parts += [p["gamma"], p["beta"], p["running_mean"], p["running_var"]]
        return np.concatenate(parts) if parts else np.zeros(0)

    def load_flat_parameters(self, flat: np.ndarray) -> None:
        off = 0

        def take(shape):
            nonlocal off
            size = int(np.prod(shape))
            out = flat[off:off + size].reshape(shape).copy()
            off += size
            return out

        for s, p in zip(self.specs, self.params):
            if s.kind == "dense":
                p["W"] = take((s.out_dim, s.in_dim))
                p["b"] = take((s.out_dim,))
            elif s.kind == "batch_norm":
                for key in ("gamma", "beta", "running_mean", "running_var"):
                    p[key] = take((s.out_dim,))
        if off != flat.size:
            raise ModelFormatError(f"parameter payload has {flat.size} values, architecture needs {off}")


def _sigmoid(z):
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def _bce_from_logits(z, y):
    return np.mean(np.logaddexp(0.0, z) - y * z)


def build(architecture: str | list = "higgs", input_dim: int | None = None, seed: int = 0) -> MlpModel:
    """Build one of the named architectures or a custom ``LayerSpec`` list.

    ``higgs`` (30 inputs) and ``ttww`` (87 inputs) share the
    300-102-12-6 ReLU stack with batch norm after every hidden activation;
    ``donut`` is the same stack on 2 inputs. ``input_dim`` overrides the
    named input width.
    """
    if isinstance(architecture, str):
        if architecture not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {architecture!r}; expected one of {sorted(ARCHITECTURES)}")
        return MlpModel(stack_spec(input_dim or ARCHITECTURES[architecture]), seed=seed)
    return MlpModel(list(architecture), seed=seed)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 256
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    early_stop_patience: int = 10
    seed: int = 0
    loss: str = "binary_crossentropy"

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.early_stop_patience < 1:
            raise ConfigError("epochs must be >= 0, batch_size and early_stop_patience >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.loss != "binary_crossentropy":
            raise ConfigError("only binary_crossentropy is supported")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown training keys {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False


class _Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, model, grads):
        self.t += 1
        for li, key in model.trainable_arrays():
            g = grads[li][key]
            m = self.m.setdefault((li, key), np.zeros_like(g))
            v = self.v.setdefault((li, key), np.zeros_like(g))
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            mhat = m / (1 - self.b1 ** self.t)
            vhat = v / (1 - self.b2 ** self.t)
            model.params[li][key] -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


class _Sgd:
    def __init__(self, lr):
        self.lr = lr

    def step(self, model, grads):
        for li, key in model.trainable_arrays():
            model.params[li][key] -= self.lr * grads[li][key]


def _check_xy(model, X, y):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.input_dim:
        raise DataError(f"expected input with {model.input_dim} features, got shape {X.shape}")
    if y.shape != (X.shape[0],) or not np.all(np.isin(y, (0, 1))):
        raise DataError("labels must be a binary vector matching X")
    return X, y


def train(model: MlpModel, X, y, cfg: TrainConfig | None = None, X_val=None, y_val=None,
          verbose: bool = False) -> tuple[MlpModel, TrainHistory]:
    """Minimize binary cross-entropy; returns a trained copy and its history.

    With a validation set, training stops after ``early_stop_patience``
    epochs without improvement and the best-validation weights are restored.
    """
    cfg = cfg or TrainConfig()
    X, y = _check_xy(model, X, y)
    if X.shape[0] < 1:
        raise DataError("need at least one training row")
    has_val = X_val is not None
    if has_val:
        X_val, y_val = _check_xy(model, X_val, y_val)
    model = model.copy()
    history = TrainHistory()
    if cfg.epochs == 0:
        return model, history
    rng = np.random.default_rng(cfg.seed)
    opt = _Adam(cfg.learning_rate) if cfg.optimizer == "adam" else _Sgd(cfg.learning_rate)
    best, best_loss, since_best = None, np.inf, 0
    n = X.shape[0]
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if idx.size < 2 and n >= 2:
                # batch norm needs >1 row; fold a lone trailing row into the previous batch
                idx = order[max(0, start - cfg.batch_size):start + cfg.batch_size]
            cache: list = []
            z = model.logits(X[idx], training=True, cache=cache)
            loss = _bce_from_logits(z, y[idx])
            if not np.isfinite(loss):
                raise NumericError(f"non-finite training loss at epoch {epoch}")
            grads, _ = model._backward(cache, (_sigmoid(z) - y[idx]) / idx.size, training=True)
            opt.step(model, grads)
            total += loss * idx.size
        history.train_loss.append(total / n)
        if has_val:
            vl = float(_bce_from_logits(model.logits(X_val), y_val))
            if not np.isfinite(vl):
                raise NumericError(f"non-finite validation loss at epoch {epoch}")
            history.val_loss.append(vl)
            if vl < best_loss:
                best_loss, best, since_best = vl, model.copy(), 0
                history.best_epoch = epoch
            else:
                since_best += 1
                if since_best >= cfg.early_stop_patience:
                    history.stopped_early = True
                    break
        if verbose:
            print(f"epoch {epoch} train_loss={history.train_loss[-1]:.5f}"
                  + (f" val_loss={history.val_loss[-1]:.5f}" if has_val else ""), file=sys.stderr)
    if best is not None:
        model = best
    else:
        history.best_epoch = len(history.train_loss) - 1
    return model, history


def predict(model: MlpModel, X, threshold: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Sigmoid scores and hard labels (score >= threshold -> 1), inference mode."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.input_dim:
        raise DataError(f"expected input with {model.input_dim} features, got shape {X.shape}")
    scores = _sigmoid(model.logits(X, training=False))
    return scores, (scores >= threshold).astype(np.int64)


def input_gradient(model: MlpModel, x, y) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    if x.shape[1] != model.input_dim:
        raise DataError(f"expected {model.input_dim} features, got {x.shape[1]}")
    return model.input_gradients(x, np.array([y]))[0]


# ---------------------------------------------------------------------------
# persistence


def _payload_path(path: Path) -> Path:
    return path.with_suffix(".bin")


def save(model: MlpModel, path, extra: dict | None = None) -> Path:
    """Write ``<path>`` (JSON manifest) and ``<path>.bin`` (little-endian float64)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    flat = model.flat_parameters().astype("<f8")
    payload = flat.tobytes()
    manifest = {
        "format_version": FORMAT_VERSION,
        "layers": [asdict(s) for s in model.specs],
        "seed": model.seed,
        "trainable_param_count": model.trainable_param_count,
        "n_values": int(flat.size),
        "sha256": hashlib.sha256(payload).hexdigest(),
        "payload": _payload_path(path).name,
    }
    if extra:
        manifest.update(extra)
    _payload_path(path).write_bytes(payload)
    path.write_text(json.dumps(manifest, indent=2))
    return path


def load(path, input_dim: int | None = None) -> MlpModel:
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"cannot read model manifest {path}: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model format version {manifest.get('format_version')!r}")
    try:
        model = MlpModel([LayerSpec(**s) for s in manifest["layers"]], seed=manifest.get("seed", 0))
    except (KeyError, TypeError, ConfigError) as exc:
        raise ModelFormatError(f"bad architecture in {path}: {exc}") from exc
    if input_dim is not None and model.input_dim != input_dim:
        raise ModelFormatError(f"model expects {model.input_dim} inputs, caller needs {input_dim}")
    try:
        payload = (path.parent / manifest.get("payload", _payload_path(path).name)).read_bytes()
    except OSError as exc:
        raise ModelFormatError(f"missing parameter payload for {path}") from exc
    if len(payload) != 8 * manifest.get("n_values", -1) or hashlib.sha256(payload).hexdigest() != manifest.get("sha256"):
        raise ModelFormatError(f"parameter payload for {path} is truncated or corrupt")
    model.load_flat_parameters(np.frombuffer(payload, dtype="<f8").astype(np.float64))
    return model


# ---------------------------------------------------------------------------
# scikit-learn facade


class MLPBinaryClassifier(ClassifierMixin, BaseEstimator):
    """scikit-learn compatible wrapper around :class:`MlpModel`.

    ``architecture`` is a named stack (``higgs``, ``ttww``, ``donut``) or
    ``"custom"``, in which case ``hidden_layer_sizes`` and ``batch_norm``
    describe it. The input width always comes from ``X``.
    """

    def __init__(self, architecture="custom", hidden_layer_sizes=HIDDEN_STACK, batch_norm=True,
                 learning_rate=1e-3, batch_size=256, max_epochs=200, patience=10,
                 optimizer="adam", validation_fraction=0.2, random_state=0):
        self.architecture = architecture
        self.hidden_layer_sizes = hidden_layer_sizes
        self.batch_norm = batch_norm
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.optimizer = optimizer
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.max_epochs, batch_size=self.batch_size,
                           learning_rate=self.learning_rate, optimizer=self.optimizer,
                           early_stop_patience=self.patience, seed=self.random_state)

    def fit(self, X, y, X_val=None, y_val=None):
        X, y = check_X_y(X, y, dtype=np.float64)
        if not np.all(np.isin(y, (0, 1))):
            raise DataError("MLPBinaryClassifier expects labels in {0, 1}")
        if X_val is None and self.validation_fraction:
            rng = np.random.default_rng(self.random_state)
            order = rng.permutation(X.shape[0])
            n_val = int(round(self.validation_fraction * X.shape[0]))
            if 0 < n_val < X.shape[0]:
                X_val, y_val = X[order[:n_val]], y[order[:n_val]]
                X, y = X[order[n_val:]], y[order[n_val:]]
        if self.architecture == "custom":
            model = MlpModel(stack_spec(X.shape[1], tuple(self.hidden_layer_sizes), self.batch_norm),
                             seed=self.random_state)
        else:
            model = build(self.architecture, input_dim=X.shape[1], seed=self.random_state)
        self.model_, self.history_ = train(model, X, y, self._train_config(), X_val, y_val)
        self.classes_ = np.array([0, 1])
        self.n_features_in_ = X.shape[1]
        return self

    @classmethod
    def from_model(cls, model: MlpModel, **params) -> "MLPBinaryClassifier":
        est = cls(**params)
        est.model_ = model
        est.history_ = TrainHistory()
        est.classes_ = np.array([0, 1])
        est.n_features_in_ = model.input_dim
        return est

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        return self.model_.logits(X)

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        scores, _ = predict(self.model_, check_array(X, dtype=np.float64))
        return np.column_stack([1.0 - scores, scores])

    def predict(self, X):
        check_is_fitted(self, "model_")
        return predict(self.model_, check_array(X, dtype=np.float64))[1]

    def input_gradient(self, X, y):
        check_is_fitted(self, "model_")
        return self.model_.input_gradients(check_array(X, dtype=np.float64), y)

    def save(self, path):
        check_is_fitted(self, "model_")
        return save(self.model_, path)
