"""Mini-batch training with constraint projection and checkpointing."""

import csv
import hashlib
import io
import json
import os
import tempfile
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .tensor_core import NonFiniteError
from .model import Network, NetworkSpec, evaluate, network_backward, network_forward, weighted_entropy_loss

CHECKPOINT_MAGIC = b"LRTABL-CKPT\n"
CHECKPOINT_VERSION = 1
HISTORY_FIELDS = ("epoch", "train_loss", "val_acc", "val_p", "val_r", "val_f1")


class DivergenceError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    batch_size: int = 256
    max_epochs: int = 200
    patience: int = 20
    seed: int = 0
    shuffle: bool = True
    epsilon: float = 1e6
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if self.max_epochs < 0 or self.patience < 1:
            raise ValueError("max_epochs must be >= 0 and patience >= 1")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)


@dataclass
class OptimizerState:
    t: int
    m: list
    v: list

    @classmethod
    def zeros(cls, params):
        z = [{k: np.zeros_like(a) for k, a in p.items()} for p in params]
        return cls(0, z, [{k: np.zeros_like(a) for k, a in p.items()} for p in params])


def project_constraints(params):
    """Clamp ``lam`` into [0, 1] and pin a full attention matrix's diagonal to 1/T."""
    for p in params:
        if "lam" in p:
            np.clip(p["lam"], 0, 1, out=p["lam"])
        if "W" in p:
            w = p["W"]
            np.fill_diagonal(w, w.dtype.type(1.0 / w.shape[0]))


def audit_constraints(params):
    """Human-readable list of constraint violations (empty when feasible)."""
    bad = []
    for i, p in enumerate(params):
        if "lam" in p and not 0 <= float(p["lam"]) <= 1:
            bad.append(f"layer {i}: lam={float(p['lam'])} outside [0, 1]")
        if "W" in p:
            w = p["W"]
            target = w.dtype.type(1.0 / w.shape[0])
            if not np.all(np.diag(w) == target):
                bad.append(f"layer {i}: diag(W) differs from 1/{w.shape[0]}")
    return bad


def optimizer_step(params, grads, state, config):
    """Update ``params`` in place, then project onto the constraint set."""
    for i, g in enumerate(grads):
        for name, arr in g.items():
            if not np.all(np.isfinite(arr)):
                raise FloatingPointError(f"non-finite gradient in layer {i} parameter {name}")
    lr = config.learning_rate
    if config.optimizer == "sgd":
        for p, g in zip(params, grads):
            for name, arr in p.items():
                arr -= lr * g[name]
    else:
        state.t += 1
        b1, b2 = config.beta1, config.beta2
        c1 = 1 - b1 ** state.t
        c2 = 1 - b2 ** state.t
        for p, g, m, v in zip(params, grads, state.m, state.v):
            for name, arr in p.items():
                gi = g[name]
                m[name] *= b1
                m[name] += (1 - b1) * gi
                v[name] *= b2
                v[name] += (1 - b2) * gi * gi
                arr -= lr * (m[name] / c1) / (np.sqrt(v[name] / c2) + config.eps_adam)
    project_constraints(params)
    return params, state


@dataclass
class HistoryRow:
    epoch: int
    train_loss: float
    val_acc: float
    val_p: float
    val_r: float
    val_f1: float


@dataclass
class TrainState:
    params: list
    opt: OptimizerState
    rng_state: dict
    best_params: list
    epoch: int = 0
    best_f1: float = -1.0
    best_epoch: int = 0
    bad_epochs: int = 0
    history: list = field(default_factory=list)

    @classmethod
    def fresh(cls, net, config):
        params = net.copy().params
        rng = np.random.default_rng(config.seed)
        return cls(params, OptimizerState.zeros(params), rng.bit_generator.state, net.copy().params)


@dataclass
class TrainResult:
    net: Network
    history: list
    state: TrainState


def _copy_params(params):
    return [{k: np.array(v, copy=True) for k, v in p.items()} for p in params]


def train(net, dataset, config, state=None, audit=None):
    """Train on ``dataset`` (the training split) and return the best-validation network.

    The last ``config.val_fraction`` of samples is held out for early stopping
    on macro-F1. Class weights use counts over the whole training split.
    ``state`` resumes a previous run; ``audit(epoch, batch, params)`` is called
    after every optimizer step.
    """
    if len(dataset) == 0:
        raise ValueError("empty training set")
    fit, val = dataset.tail_split(config.val_fraction)
    counts = np.maximum(dataset.class_counts, 1)
    if state is None:
        state = TrainState.fresh(net, config)
    work = Network(net.spec, state.params)
    rng = np.random.default_rng()
    rng.bit_generator.state = state.rng_state
    n = len(fit)

    while state.epoch < config.max_epochs and state.bad_epochs < config.patience:
        order = rng.permutation(n) if config.shuffle else np.arange(n)
        total = 0.0
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            try:
                probs, caches = network_forward(work, fit.windows[idx])
            except NonFiniteError as exc:
                raise DivergenceError(f"epoch {state.epoch + 1}, batch {b}: {exc}") from None
            loss, dprobs = weighted_entropy_loss(probs, fit.labels[idx], counts, config.epsilon)
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {state.epoch + 1}, batch {b}")
            _, grads = network_backward(work, caches, probs, dprobs)
            try:
                optimizer_step(work.params, grads, state.opt, config)
            except FloatingPointError as exc:
                raise DivergenceError(f"epoch {state.epoch + 1}, batch {b}: {exc}") from None
            for i, p in enumerate(work.params):
                for name, arr in p.items():
                    if not np.all(np.isfinite(arr)):
                        raise DivergenceError(
                            f"parameter {name} of layer {i} became non-finite at epoch {state.epoch + 1}, batch {b}"
                        )
            if audit is not None:
                audit(state.epoch + 1, b, work.params)
            total += loss * len(idx)

        state.epoch += 1
        m = evaluate(work, val.windows, val.labels)
        state.history.append(HistoryRow(state.epoch, total / n, m.accuracy, m.macro_precision,
                                        m.macro_recall, m.macro_f1))
        # ties move the best snapshot forward but only strict gains reset patience
        if m.macro_f1 >= state.best_f1:
            state.bad_epochs = 0 if m.macro_f1 > state.best_f1 else state.bad_epochs + 1
            state.best_f1 = m.macro_f1
            state.best_epoch = state.epoch
            state.best_params = _copy_params(work.params)
        else:
            state.bad_epochs += 1
        state.rng_state = rng.bit_generator.state

    return TrainResult(Network(net.spec, _copy_params(state.best_params)), list(state.history), state)


def history_csv(history):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_FIELDS)
    for row in history:
        w.writerow([row.epoch] + [repr(float(getattr(row, k))) for k in HISTORY_FIELDS[1:]])
    return buf.getvalue()


def atomic_write(path, data):
    """Write ``data`` (str or bytes) to ``path`` via a temp file and rename."""
    path = os.fspath(path)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)), prefix=".tmp-")
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"newline": ""})) as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass
class Checkpoint:
    net: Network
    state: TrainState | None
    config: dict | None


def _param_arrays(prefix, params):
    for i, p in enumerate(params):
        for name in sorted(p):
            yield f"{prefix}/{i}/{name}", p[name]


def save_checkpoint(path, net, state=None, config=None):
    """Serialize ``net`` (and optionally a resumable ``state``) to ``path``.

    Layout: magic line, one-line JSON header, raw little-endian array
    payload, then a SHA-256 of everything before it.
    """
    arrays = list(_param_arrays("model", net.params))
    header = {
        "version": CHECKPOINT_VERSION,
        "spec": net.spec.to_dict(),
        "spec_digest": net.spec.digest(),
        "config": config.to_dict() if isinstance(config, TrainConfig) else config,
        "state": None,
    }
    if state is not None:
        arrays += list(_param_arrays("params", state.params))
        arrays += list(_param_arrays("best", state.best_params))
        arrays += list(_param_arrays("adam_m", state.opt.m))
        arrays += list(_param_arrays("adam_v", state.opt.v))
        header["state"] = {
            "epoch": state.epoch,
            "adam_t": state.opt.t,
            "best_f1": state.best_f1,
            "best_epoch": state.best_epoch,
            "bad_epochs": state.bad_epochs,
            "rng_state": state.rng_state,
            "history": [asdict(r) for r in state.history],
        }
    manifest = []
    payload = io.BytesIO()
    for name, arr in arrays:
        arr = np.asarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        manifest.append({"name": name, "dtype": le.dtype.str, "shape": list(arr.shape),
                         "offset": payload.tell(), "nbytes": le.nbytes})
        payload.write(le.tobytes())
    header["arrays"] = manifest
    body = CHECKPOINT_MAGIC + json.dumps(header, sort_keys=True).encode() + b"\n" + payload.getvalue()
    atomic_write(path, body + hashlib.sha256(body).digest())


def _collect(arrays, prefix, n_layers):
    out = [dict() for _ in range(n_layers)]
    for name, arr in arrays.items():
        head, i, pname = name.split("/")
        if head == prefix:
            out[int(i)][pname] = arr
    return out


def load_checkpoint(path):
    with open(path, "rb") as f:
        raw = f.read()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    body, digest = raw[:-32], raw[-32:]
    if len(raw) < len(CHECKPOINT_MAGIC) + 32 or hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch, file is corrupted")
    rest = body[len(CHECKPOINT_MAGIC):]
    nl = rest.index(b"\n")
    header = json.loads(rest[:nl])
    payload = rest[nl + 1:]
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {header.get('version')}, expected {CHECKPOINT_VERSION}")
    spec = NetworkSpec.from_dict(header["spec"])
    if spec.digest() != header["spec_digest"]:
        raise CheckpointError(f"{path}: spec digest mismatch")

    arrays = {}
    for entry in header["arrays"]:
        buf = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(buf, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        arrays[entry["name"]] = arr.astype(arr.dtype.newbyteorder("="))
    n = len(spec.layers)
    net = Network(spec, _collect(arrays, "model", n))

    state = None
    if header["state"] is not None:
        s = header["state"]
        state = TrainState(
            params=_collect(arrays, "params", n),
            opt=OptimizerState(s["adam_t"], _collect(arrays, "adam_m", n), _collect(arrays, "adam_v", n)),
            rng_state=s["rng_state"],
            best_params=_collect(arrays, "best", n),
            epoch=s["epoch"],
            best_f1=s["best_f1"],
            best_epoch=s["best_epoch"],
            bad_epochs=s["bad_epochs"],
            history=[HistoryRow(**r) for r in s["history"]],
        )
    return Checkpoint(net, state, header["config"])
