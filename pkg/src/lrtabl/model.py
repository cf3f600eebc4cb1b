"""Network structures A/B/C, the class-weighted entropy loss, and metrics."""

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import layers
from .layers import LayerKind, LayerSpec
from .tensor_core import ShapeError, row_softmax

N_CLASSES = 3
CLASS_NAMES = ("up", "stationary", "down")
INPUT_SHAPE = (40, 10)

# (d_out, t_out, activation) per hidden layer; every structure ends in a 3x1 attention layer.
_HIDDEN = {
    "A": (),
    "B": ((120, 5, "relu"),),
    "C": ((60, 10, "relu"), (120, 5, "relu")),
}


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple
    structure_id: str = "custom"
    variant: str = "full"
    rank: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ValueError("network needs at least one layer")
        for i, (a, b) in enumerate(zip(self.layers, self.layers[1:])):
            if (a.d_out, a.t_out) != (b.d_in, b.t_in):
                raise ValueError(
                    f"layer {i} outputs {a.d_out}x{a.t_out} but layer {i + 1} expects {b.d_in}x{b.t_in}"
                )
        last = self.layers[-1]
        if last.t_out != 1:
            raise ValueError(f"final layer must output C x 1, got {last.d_out}x{last.t_out}")

    @property
    def input_shape(self):
        return (self.layers[0].d_in, self.layers[0].t_in)

    @property
    def n_classes(self):
        return self.layers[-1].d_out

    def to_dict(self):
        return {
            "structure_id": self.structure_id,
            "variant": self.variant,
            "rank": self.rank,
            "layers": [s.to_dict() for s in self.layers],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            layers=tuple(LayerSpec.from_dict(s) for s in d["layers"]),
            structure_id=d["structure_id"],
            variant=d["variant"],
            rank=d["rank"],
        )

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass
class Network:
    spec: NetworkSpec
    params: list

    def copy(self):
        return Network(self.spec, [{k: np.array(v, copy=True) for k, v in p.items()} for p in self.params])


def structure_spec(structure_id, variant="full", rank=None, enforce_diag=True):
    if structure_id not in _HIDDEN:
        raise ValueError(f"unknown structure {structure_id!r}; expected one of {sorted(_HIDDEN)}")
    if variant not in ("full", "lowrank"):
        raise ValueError(f"unknown variant {variant!r}")
    if variant == "lowrank":
        if rank is None or rank < 1:
            raise ValueError("low-rank variant needs rank >= 1")
    elif rank is not None:
        raise ValueError("rank is only valid with the low-rank variant")

    lr = variant == "lowrank"
    d, t = INPUT_SHAPE
    specs = []
    for d_out, t_out, act in _HIDDEN[structure_id]:
        kind = LayerKind.LRBL if lr else LayerKind.BL
        specs.append(LayerSpec(kind, d, t, d_out, t_out, rank if lr else None, act))
        d, t = d_out, t_out
    kind = LayerKind.LRTABL if lr else LayerKind.TABL
    specs.append(LayerSpec(kind, d, t, N_CLASSES, 1, rank if lr else None, "identity", enforce_diag))
    return NetworkSpec(tuple(specs), structure_id, variant, rank)


def init_network(spec, seed, dtype=np.float32):
    seeds = np.random.SeedSequence(seed).spawn(len(spec.layers))
    return Network(spec, [layers.init_params(s, ss, dtype) for s, ss in zip(spec.layers, seeds)])


def build_structure(structure_id, variant="full", rank=None, seed=0, dtype=np.float32, enforce_diag=True):
    return init_network(structure_spec(structure_id, variant, rank, enforce_diag), seed, dtype)


def total_param_count(spec):
    return sum(layers.param_count(s) for s in spec.layers)


def network_forward(net, x):
    """Class probabilities for ``x`` of shape ``(..., 40, 10)``; returns ``(probs, caches)``."""
    x = np.asarray(x)
    if x.ndim < 2 or x.shape[-2:] != net.spec.input_shape:
        raise ShapeError(f"network expects input (..., {net.spec.input_shape[0]}, {net.spec.input_shape[1]}), got {x.shape}")
    caches = []
    h = x
    for spec, params in zip(net.spec.layers, net.params):
        h, cache = layers.forward(spec, params, h)
        caches.append(cache)
    probs = row_softmax(h[..., 0])
    return probs, caches


def network_backward(net, caches, probs, dprobs):
    """Gradients for every layer given ``dLoss/dprobs``; returns ``(dx, grads)``."""
    dlogits = probs * (dprobs - np.sum(dprobs * probs, axis=-1, keepdims=True))
    g = dlogits[..., None]
    grads = [None] * len(net.params)
    for i in reversed(range(len(net.params))):
        g, grads[i] = layers.backward(net.spec.layers[i], net.params[i], caches[i], g)
    return g, grads


def predict_class(probs):
    # argmax returns the first maximum, so ties go to the lower class index
    return np.argmax(np.asarray(probs), axis=-1)


def weighted_entropy_loss(probs, true_classes, class_counts, epsilon=1e6):
    """Batch-mean of ``-(epsilon / N_c) * log(p_c)`` for each sample's true class ``c``.

    Probabilities are clipped to ``[1e-12, 1]`` before the log; clipped
    entries receive zero gradient. Returns ``(loss, dprobs)``.
    """
    probs = np.asarray(probs)
    y = np.asarray(true_classes, dtype=np.int64).reshape(-1)
    if probs.ndim == 1:
        probs = probs[None, :]
    n, c = probs.shape
    if n == 0:
        raise ValueError("empty batch")
    if y.shape[0] != n:
        raise ValueError(f"{n} probability rows but {y.shape[0]} labels")
    if y.min() < 0 or y.max() >= c:
        raise ValueError(f"class index out of range [0, {c}): {y.min()}..{y.max()}")
    counts = np.asarray(class_counts, dtype=np.float64)
    if counts.shape != (c,) or np.any(counts < 1):
        raise ValueError(f"class_counts must hold {c} values >= 1, got {class_counts}")

    weights = (epsilon / counts)[y]
    rows = np.arange(n)
    p_true = probs[rows, y]
    clipped = np.clip(p_true, 1e-12, 1.0)
    loss = float(np.mean(-weights * np.log(clipped)))
    dprobs = np.zeros_like(probs)
    dprobs[rows, y] = np.where(p_true >= 1e-12, -weights / (n * clipped), 0.0)
    return loss, dprobs


@dataclass
class Metrics:
    confusion: np.ndarray
    accuracy: float = field(init=False)
    precision: np.ndarray = field(init=False)
    recall: np.ndarray = field(init=False)
    f1: np.ndarray = field(init=False)

    def __post_init__(self):
        cm = np.asarray(self.confusion, dtype=np.int64)
        self.confusion = cm
        tp = np.diag(cm).astype(np.float64)
        predicted = cm.sum(axis=0)
        actual = cm.sum(axis=1)
        self.accuracy = float(tp.sum() / cm.sum()) if cm.sum() else 0.0
        self.precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
        self.recall = np.divide(tp, actual, out=np.zeros_like(tp), where=actual > 0)
        denom = self.precision + self.recall
        self.f1 = np.divide(2 * self.precision * self.recall, denom, out=np.zeros_like(tp), where=denom > 0)

    @property
    def macro_precision(self):
        return float(self.precision.mean())

    @property
    def macro_recall(self):
        return float(self.recall.mean())

    @property
    def macro_f1(self):
        return float(self.f1.mean())

    @property
    def n_samples(self):
        return int(self.confusion.sum())

    def merge(self, other):
        return Metrics(self.confusion + other.confusion)


def compute_metrics(predictions, truths, n_classes=N_CLASSES):
    pred = np.asarray(predictions, dtype=np.int64).reshape(-1)
    true = np.asarray(truths, dtype=np.int64).reshape(-1)
    if pred.size == 0:
        raise ValueError("cannot compute metrics on empty input")
    if pred.shape != true.shape:
        raise ValueError(f"{pred.size} predictions but {true.size} truths")
    for arr in (pred, true):
        if arr.min() < 0 or arr.max() >= n_classes:
            raise ValueError(f"labels must lie in [0, {n_classes})")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (true, pred), 1)
    return Metrics(cm)


def predict(net, windows, batch_size=4096):
    windows = np.asarray(windows)
    out = []
    for start in range(0, len(windows), batch_size):
        probs, _ = network_forward(net, windows[start:start + batch_size])
        out.append(predict_class(probs))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate(net, windows, labels, batch_size=4096):
    return compute_metrics(predict(net, windows, batch_size), labels, net.spec.n_classes)
