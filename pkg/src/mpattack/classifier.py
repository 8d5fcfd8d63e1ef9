"""A small rectifier MLP in numpy, with exact reverse-mode gradients and SGD training.

Inputs are either a single example of shape ``(d,)`` or a batch ``(n, d)``.
All arithmetic is float64 so that seeded runs are bit-for-bit repeatable.
"""

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

CHECKPOINT_FORMAT = "mpattack-mlp"
CHECKPOINT_VERSION = 1


class ConfigurationError(ValueError):
    """Raised when shapes or settings are inconsistent."""


@dataclass
class MLP:
    weights: list
    biases: list
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in self.biases]
        if not self.weights or len(self.weights) != len(self.biases):
            raise ConfigurationError("need one bias per weight matrix")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ConfigurationError(f"layer {i}: weight {w.shape} / bias {b.shape}")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ConfigurationError(f"layer {i} expects {w.shape[1]} inputs, got {self.weights[i - 1].shape[0]}")

    @property
    def input_dim(self):
        return self.weights[0].shape[1]

    @property
    def n_classes(self):
        return self.weights[-1].shape[0]

    @property
    def layer_sizes(self):
        return [self.input_dim] + [w.shape[0] for w in self.weights]

    def copy(self):
        return MLP([w.copy() for w in self.weights], [b.copy() for b in self.biases], dict(self.meta))

    def params(self):
        """Parameters in a fixed order: ``W0, b0, W1, b1, ...``."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out


def init_mlp(input_dim, n_classes, hidden=(64, 64), seed=0, rng=None):
    """Uniform ``[-sqrt(6 / fan_in), sqrt(6 / fan_in)]`` weights and zero biases."""
    rng = np.random.default_rng(seed) if rng is None else rng
    sizes = [input_dim, *hidden, n_classes]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = math.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MLP(weights, biases)


def _as_batch(model, x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    if x2.ndim != 2 or x2.shape[1] != model.input_dim:
        raise ConfigurationError(f"expected inputs of length {model.input_dim}, got shape {x.shape}")
    return x2, single


def _forward_trace(model, x):
    """Forward pass keeping every layer input for the backward pass."""
    acts = [x]
    h = x
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ w.T + b
        h = z if i == last else np.maximum(z, 0.0)
        acts.append(h)
    return acts


def _backward(model, acts, dlogits, need_params=True):
    """Back-propagate ``dlogits`` (n, C); returns (input grad, [(dW, db), ...])."""
    grads = []
    dz = dlogits
    for i in range(len(model.weights) - 1, -1, -1):
        a_prev = acts[i]
        if need_params:
            grads.append((dz.T @ a_prev, dz.sum(axis=0)))
        dh = dz @ model.weights[i]
        if i:
            dz = dh * (acts[i] > 0)
    grads.reverse()
    return dh, grads


def forward(model, x):
    x2, single = _as_batch(model, x)
    logits = _forward_trace(model, x2)[-1]
    return logits[0] if single else logits


def softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def loss(logits, y):
    """Softmax cross-entropy, per row for a batch of logits."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    y = np.asarray(y)
    picked = np.take_along_axis(z, y[..., None], axis=-1)[..., 0] if z.ndim > 1 else z[y]
    out = lse - picked
    return float(out) if np.ndim(out) == 0 else out


def _loss_and_dlogits(logits, y):
    y = np.asarray(y)
    p = softmax(logits)
    losses = loss(logits, y)
    p[np.arange(len(y)), y] -= 1.0
    return np.atleast_1d(losses), p


def input_gradient(model, x, y, return_loss=False):
    """Gradient of each example's own loss with respect to its input.

    For a batch the rows are independent: row ``i`` holds
    ``d loss(f(x_i), y_i) / d x_i``.
    """
    x2, single = _as_batch(model, x)
    y2 = np.atleast_1d(np.asarray(y))
    acts = _forward_trace(model, x2)
    losses, dlogits = _loss_and_dlogits(acts[-1], y2)
    grad, _ = _backward(model, acts, dlogits, need_params=False)
    if single:
        grad, losses = grad[0], float(losses[0])
    return (grad, losses) if return_loss else grad


def param_gradient(model, x, y):
    """Mean batch loss and its gradients ``[(dW, db), ...]`` per layer."""
    x2, _ = _as_batch(model, x)
    y2 = np.atleast_1d(np.asarray(y))
    if len(y2) == 0:
        raise ConfigurationError("empty batch")
    acts = _forward_trace(model, x2)
    losses, dlogits = _loss_and_dlogits(acts[-1], y2)
    _, grads = _backward(model, acts, dlogits / len(y2))
    return float(losses.mean()), grads


def predict(model, x):
    logits = forward(model, x)
    # argmax returns the first maximum, so ties go to the lowest class index
    out = np.argmax(logits, axis=-1)
    return int(out) if np.ndim(out) == 0 else out


def accuracy(model, x, y):
    return float(np.mean(predict(model, x) == np.asarray(y)))


# training

@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 128
    momentum: float = 0.9
    weight_decay: float = 5e-4
    # piecewise-linear learning rate over the fraction of training completed
    lr_schedule: tuple = ((0.0, 0.0), (0.4, 0.1), (1.0, 0.0))
    hidden: tuple = (64, 64)
    seed: int = 0

    def __post_init__(self):
        self.lr_schedule = tuple(tuple(float(v) for v in pt) for pt in self.lr_schedule)
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigurationError("epochs must be >= 0 and batch_size >= 1")
        if not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ConfigurationError("momentum must lie in [0, 1) and weight_decay be >= 0")
        if not self.lr_schedule:
            raise ConfigurationError("empty learning-rate schedule")

    def learning_rate(self, progress):
        ts, lrs = zip(*self.lr_schedule)
        return float(np.interp(progress, ts, lrs))

    def to_dict(self):
        d = asdict(self)
        d["lr_schedule"] = [list(pt) for pt in self.lr_schedule]
        d["hidden"] = list(self.hidden)
        return d


def train(x, y, cfg, n_classes=None, perturb=None, on_batch=None):
    """Minibatch SGD with momentum and weight decay.

    Args:
        x, y: training inputs ``(n, d)`` and integer labels ``(n,)``.
        cfg: a :class:`TrainConfig`.
        n_classes: defaults to ``max(y) + 1``.
        perturb: optional ``perturb(model, xb, yb) -> xb_adv`` applied to
            every batch before the parameter step (adversarial training).
        on_batch: optional ``on_batch(epoch, xb, xb_used)`` hook for tests.

    Returns:
        The trained :class:`MLP`; ``meta["train_config"]`` records ``cfg``.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if len(x) == 0:
        raise ConfigurationError("empty training set")
    n_classes = int(y.max()) + 1 if n_classes is None else n_classes
    rng = np.random.default_rng(cfg.seed)
    model = init_mlp(x.shape[1], n_classes, cfg.hidden, rng=rng)
    velocity = [np.zeros_like(p) for p in model.params()]
    n_batches = math.ceil(len(x) / cfg.batch_size)
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(x))
        for b in range(n_batches):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            xb, yb = x[idx], y[idx]
            xb_used = xb if perturb is None else perturb(model, xb, yb)
            if on_batch is not None:
                on_batch(epoch, xb, xb_used)
            lr = cfg.learning_rate((epoch + (b + 1) / n_batches) / cfg.epochs)
            _, grads = param_gradient(model, xb_used, yb)
            flat = [g for pair in grads for g in pair]
            for p, g, v in zip(model.params(), flat, velocity):
                g = g + cfg.weight_decay * p
                v *= cfg.momentum
                v += g
                p -= lr * v
    model.meta["train_config"] = cfg.to_dict()
    return model


def train_standard(x, y, cfg, n_classes=None, on_batch=None):
    return train(x, y, cfg, n_classes=n_classes, on_batch=on_batch)


def train_msd(x, y, cfg, atk, n_classes=None, on_batch=None, on_step=None):
    """Adversarial training where each batch is replaced by its MSD adversaries.

    ``atk`` is an :class:`mpattack.attacks.AttackConfig`; ``on_step`` is
    forwarded to :func:`mpattack.attacks.msd_adversary`.
    """
    from mpattack.attacks import msd_adversary

    def perturb(model, xb, yb):
        return msd_adversary(model, xb, yb, atk, on_step=on_step)

    model = train(x, y, cfg, n_classes=n_classes, perturb=perturb, on_batch=on_batch)
    model.meta["adversary"] = atk.to_dict()
    return model


# checkpoints

def dumps_checkpoint(model):
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "layers": [
            {"shape": list(w.shape), "weight": w.ravel().tolist(), "bias": b.tolist()}
            for w, b in zip(model.weights, model.biases)
        ],
        "meta": model.meta,
    }
    # repr of a float64 round-trips exactly, so JSON numbers are lossless
    return json.dumps(doc, sort_keys=True, indent=1) + "\n"


def loads_checkpoint(text):
    doc = json.loads(text)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ConfigurationError("not an mpattack checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ConfigurationError(f"unsupported checkpoint version {doc.get('version')}")
    weights = [np.array(layer["weight"], dtype=np.float64).reshape(layer["shape"]) for layer in doc["layers"]]
    biases = [np.array(layer["bias"], dtype=np.float64) for layer in doc["layers"]]
    return MLP(weights, biases, doc.get("meta", {}))


def save_checkpoint(model, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps_checkpoint(model))


def load_checkpoint(path):
    with open(path, encoding="utf-8") as fh:
        return loads_checkpoint(fh.read())
