"""MLP classifier: specification, training, prediction and weight files."""

from dataclasses import dataclass, field

import numpy as np

from . import rng, serialize
from .autodiff import Graph, backward, forward
from .errors import NumericError, ShapeError, TrainingError

WEIGHTS_MAGIC = "IMMUNEKIT-WEIGHTS"
ACTIVATIONS = ("relu", "tanh", "sigmoid")


@dataclass(frozen=True)
class ClassifierSpec:
    """Layer widths ``(n, hidden..., l)`` and one activation per hidden layer."""

    widths: tuple
    activations: tuple = None
    seed: int = 0

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        object.__setattr__(self, "widths", widths)
        acts = self.activations
        if acts is None:
            acts = ("relu",) * (len(widths) - 2)
        acts = tuple(acts)
        object.__setattr__(self, "activations", acts)
        if len(widths) < 2 or min(widths) < 1:
            raise ValueError(f"invalid widths {widths}")
        if widths[-1] < 2:
            raise ValueError("class count must be at least 2")
        if len(acts) != len(widths) - 2 or any(a not in ACTIVATIONS for a in acts):
            raise ValueError(f"need one activation from {ACTIVATIONS} per hidden layer, got {acts}")

    @property
    def n_inputs(self):
        return self.widths[0]

    @property
    def n_classes(self):
        return self.widths[-1]

    def hash(self):
        return serialize.spec_hash({"widths": list(self.widths), "activations": list(self.activations)})


@dataclass
class ModelParams:
    spec: ClassifierSpec
    weights: list
    biases: list
    epochs: int = 0

    @property
    def n_classes(self):
        return self.spec.n_classes

    def arrays(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self):
        return ModelParams(self.spec, [w.copy() for w in self.weights], [b.copy() for b in self.biases], self.epochs)


@dataclass
class OptimizerConfig:
    name: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 64


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr: float = 1e-3

    @classmethod
    def zeros_like(cls, params, **kw):
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **kw)


@dataclass
class TrainReport:
    epoch_losses: list = field(default_factory=list)
    train_accuracy: float = float("nan")
    heldout_accuracy: float = float("nan")


def init_params(spec):
    gen = rng.stream(spec.seed, "classifier", "init")
    weights, biases = [], []
    for fan_in, fan_out in zip(spec.widths[:-1], spec.widths[1:]):
        weights.append(gen.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return ModelParams(spec, weights, biases, 0)


def add_classifier(graph, x, params, prefix="f"):
    """Append the classifier to ``graph`` on input node ``x``; returns the logits node."""
    h = x
    n_layers = len(params.weights)
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        wn = graph.param(f"{prefix}.w{i}", w)
        bn = graph.param(f"{prefix}.b{i}", b)
        h = graph.affine(h, wn, bn, name=f"{prefix}.affine{i}")
        if i < n_layers - 1:
            h = getattr(graph, params.spec.activations[i])(h, name=f"{prefix}.{params.spec.activations[i]}{i}")
    return h


def adam_step(state, params, grads):
    """One Adam update with bias correction.  Returns ``(new_params, new_state)``."""
    if len(params) != len(grads) or any(p.shape != g.shape for p, g in zip(params, grads)):
        raise ShapeError("gradients must match parameter shapes")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    m = [b1 * mi + (1.0 - b1) * g for mi, g in zip(state.m, grads)]
    v = [b2 * vi + (1.0 - b2) * g * g for vi, g in zip(state.v, grads)]
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new = [p - state.lr * (mi / c1) / (np.sqrt(vi / c2) + state.eps) for p, mi, vi in zip(params, m, v)]
    return new, AdamState(m, v, t, b1, b2, state.eps, state.lr)


def sgd_step(params, grads, lr):
    if len(params) != len(grads) or any(p.shape != g.shape for p, g in zip(params, grads)):
        raise ShapeError("gradients must match parameter shapes")
    return [p - lr * g for p, g in zip(params, grads)]


def logits(params, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.spec.n_inputs:
        raise ShapeError(f"expected inputs of width {params.spec.n_inputs}, got {x.shape}")
    g = Graph()
    xn = g.input("x", width=params.spec.n_inputs)
    g.set_loss(add_classifier(g, xn, params))
    return forward(g, {"x": x})


def predict(params, x):
    """Class ids (ties broken toward the lowest index) and logits."""
    z = logits(params, x)
    return np.argmax(z, axis=-1), z


def accuracy(params, x, y):
    if len(y) == 0:
        return float("nan")
    return float(np.mean(predict(params, x)[0] == y))


def train_classifier(dataset, spec, optimizer=None, epochs=10, heldout=None):
    """Minibatch training of ``spec`` on ``dataset`` (a :class:`~immunekit.data.Dataset`).

    Deterministic given ``spec.seed``.  Returns ``(ModelParams, TrainReport)``.
    """
    opt = optimizer or OptimizerConfig()
    if len(dataset) == 0:
        raise ValueError("empty training set")
    if dataset.x.shape[1] != spec.n_inputs:
        raise ShapeError(f"dataset dimension {dataset.x.shape[1]} != classifier input {spec.n_inputs}")
    if dataset.y.min() < 0 or dataset.y.max() >= spec.n_classes:
        raise ValueError("labels out of range")

    params = init_params(spec)
    arrays = params.arrays()
    g = Graph()
    xn = g.input("x", width=spec.n_inputs)
    yn = g.input("y", labels=True)
    g.set_loss(g.softmax_ce(add_classifier(g, xn, params), yn, reduction="mean"))
    names = [n for i in range(len(params.weights)) for n in (f"f.w{i}", f"f.b{i}")]

    state = AdamState.zeros_like(arrays, beta1=opt.beta1, beta2=opt.beta2, eps=opt.eps, lr=opt.lr)
    shuffle = rng.stream(spec.seed, "classifier", "shuffle")
    report = TrainReport()
    n = len(dataset)
    for epoch in range(epochs):
        order = shuffle.permutation(n)
        total = 0.0
        for start in range(0, n, opt.batch_size):
            idx = order[start : start + opt.batch_size]
            binds = {"x": dataset.x[idx], "y": dataset.y[idx], **dict(zip(names, arrays))}
            try:
                value = float(forward(g, binds))
            except NumericError as exc:
                raise TrainingError(f"classifier training diverged in epoch {epoch + 1}: {exc}") from exc
            grads = backward(g, names)
            grads = [grads[k] for k in names]
            if opt.name == "adam":
                arrays, state = adam_step(state, arrays, grads)
            elif opt.name == "sgd":
                arrays = sgd_step(arrays, grads, opt.lr)
            else:
                raise ValueError(f"unknown optimizer {opt.name!r}")
            total += value * len(idx)
        mean = total / n
        if not np.isfinite(mean):
            raise TrainingError(f"classifier training diverged in epoch {epoch + 1}")
        report.epoch_losses.append(mean)

    params = ModelParams(spec, arrays[0::2], arrays[1::2], epochs)
    report.train_accuracy = accuracy(params, dataset.x, dataset.y)
    if heldout is not None and len(heldout):
        report.heldout_accuracy = accuracy(params, heldout.x, heldout.y)
    return params, report


def _classifier_tensors(params):
    out = []
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        out.extend(((f"w{i}", w), (f"b{i}", b)))
    return out


def _classifier_from_tensors(spec, tensors, epochs):
    d = dict(tensors)
    n = len(spec.widths) - 1
    weights = [d[f"w{i}"] for i in range(n)]
    biases = [d[f"b{i}"] for i in range(n)]
    for i, (w, b) in enumerate(zip(weights, biases)):
        if w.shape != (spec.widths[i], spec.widths[i + 1]) or b.shape != (spec.widths[i + 1],):
            raise serialize.FormatError(f"layer {i} shapes {w.shape}/{b.shape} do not match the spec")
    return ModelParams(spec, weights, biases, epochs)


def save_weights(params, path):
    meta = {
        "widths": list(params.spec.widths),
        "activations": list(params.spec.activations),
        "seed": params.spec.seed,
        "epochs": params.epochs,
    }
    serialize.write(path, WEIGHTS_MAGIC, [params.spec.hash()], _classifier_tensors(params), meta)


def load_weights(path, expected_hash=None):
    """Load classifier weights; ``expected_hash`` (if given) must match the file's spec hash."""
    (file_hash,), tensors, meta = serialize.read(path, WEIGHTS_MAGIC, 1)
    try:
        spec = ClassifierSpec(tuple(meta["widths"]), tuple(meta["activations"]), int(meta["seed"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise serialize.ParseError(f"bad classifier metadata: {exc}") from exc
    if spec.hash() != file_hash:
        raise serialize.SpecHashMismatch(f"header hash {file_hash} does not match metadata hash {spec.hash()}")
    if expected_hash is not None and file_hash != expected_hash:
        raise serialize.SpecHashMismatch(f"weights were written for spec {file_hash}, expected {expected_hash}")
    return _classifier_from_tensors(spec, tensors, int(meta.get("epochs", 0)))
