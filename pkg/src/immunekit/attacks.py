"""Generation-based attack models g(x) and the iterative sign attack.

Differentiable kinds are small MLPs (or a single shared perturbation) built
from autodiff layers, so gradients flow through ``g`` into the defended image:

* ``perturb-generator``: ``clip(x + eps * tanh(h(x)), 0, 1)``, h an MLP,
  trained with a logit-margin hinge and an L2 penalty on the perturbation.
* ``targeted-autoencoder``: ``sigmoid`` MLP autoencoder whose output is
  projected into the eps-ball of ``x``; trained toward one target class.
* ``universal-perturbation``: ``clip(x + delta, 0, 1)`` with one ``delta``.

``iterative-sign`` wraps I-FGSM against the classifier.  It is only usable for
evaluation: it has no parameters to differentiate and cannot be a crafting
source.
"""

from dataclasses import dataclass, field

import numpy as np

from . import rng, serialize
from .autodiff import Graph, backward, clip_to_ball, forward
from .errors import CapabilityError, ShapeError, TrainingError, UndefinedMetricError, UsageError
from .models import AdamState, adam_step, add_classifier, predict

ATTACK_MAGIC = "IMMUNEKIT-ATTACK"
PERTURB = "perturb-generator"
TARGETED = "targeted-autoencoder"
UNIVERSAL = "universal-perturbation"
ITERATIVE = "iterative-sign"
KINDS = (PERTURB, TARGETED, UNIVERSAL, ITERATIVE)
DIFFERENTIABLE = (PERTURB, TARGETED, UNIVERSAL)


@dataclass
class AttackModel:
    kind: str
    epsilon: float
    weights: list = field(default_factory=list)
    biases: list = field(default_factory=list)
    delta: np.ndarray = None
    target: int = None
    classifier: object = None
    steps: int = 0
    step_size: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise UsageError(f"unknown attack kind {self.kind!r}")
        if not 0.0 <= self.epsilon < 1.0:
            raise UsageError(f"attack budget must lie in [0, 1), got {self.epsilon}")

    @property
    def differentiable(self):
        return self.kind in DIFFERENTIABLE

    @property
    def targeted(self):
        return self.kind == TARGETED

    def describe(self):
        d = {"kind": self.kind, "epsilon": self.epsilon}
        if self.weights:
            d["widths"] = [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]
        if self.delta is not None:
            d["dim"] = int(self.delta.shape[0])
        if self.target is not None:
            d["target"] = int(self.target)
        if self.kind == ITERATIVE:
            d.update(steps=self.steps, step_size=self.step_size)
        return d

    def hash(self):
        return serialize.spec_hash(self.describe())


# ------------------------------------------------------------------------
# graph construction


def add_attack(graph, x, attack, prefix="g"):
    """Append ``attack`` to ``graph`` on input node ``x``; returns the g(x) node."""
    if not attack.differentiable:
        raise CapabilityError(f"{attack.kind} is evaluation-only and cannot be differentiated")
    if attack.kind == UNIVERSAL:
        d = graph.param(f"{prefix}.delta", attack.delta)
        return graph.clip(graph.bias(x, d, name=f"{prefix}.shift"), 0.0, 1.0, name=f"{prefix}.out")
    h = x
    n_layers = len(attack.weights)
    for i, (w, b) in enumerate(zip(attack.weights, attack.biases)):
        h = graph.affine(h, graph.param(f"{prefix}.w{i}", w), graph.param(f"{prefix}.b{i}", b), name=f"{prefix}.affine{i}")
        if i < n_layers - 1:
            h = graph.relu(h, name=f"{prefix}.relu{i}")
    if attack.kind == PERTURB:
        pert = graph.scale(graph.tanh(h, name=f"{prefix}.tanh"), attack.epsilon, name=f"{prefix}.pert")
        return graph.clip(graph.add(x, pert, name=f"{prefix}.sum"), 0.0, 1.0, name=f"{prefix}.out")
    raw = graph.sigmoid(h, name=f"{prefix}.recon")
    return graph.ball_clip(raw, x, attack.epsilon, 0.0, 1.0, name=f"{prefix}.out")


def param_names(attack, prefix="g"):
    if attack.kind == UNIVERSAL:
        return [f"{prefix}.delta"]
    return [n for i in range(len(attack.weights)) for n in (f"{prefix}.w{i}", f"{prefix}.b{i}")]


def param_arrays(attack):
    if attack.kind == UNIVERSAL:
        return [attack.delta]
    return [a for wb in zip(attack.weights, attack.biases) for a in wb]


def apply_attack(attack, x):
    """Adversarial examples for ``x`` (rows in [0, 1]); stays in the eps-ball and in [0, 1]."""
    x = np.asarray(x, dtype=np.float64)
    if attack.kind == ITERATIVE:
        labels, _ = predict(attack.classifier, x)
        return iterative_sign_attack(attack.classifier, x, labels, attack.epsilon, attack.steps, attack.step_size)
    width = attack.delta.shape[0] if attack.kind == UNIVERSAL else attack.weights[0].shape[0]
    if x.shape[-1] != width:
        raise ShapeError(f"attack expects width {width}, got {x.shape}")
    g = Graph()
    xn = g.input("x", width=width)
    g.set_loss(add_attack(g, xn, attack))
    return forward(g, {"x": x})


def iterative_sign_attack(f, x, y, epsilon, steps, step_size):
    """I-FGSM: ascend the classifier loss by signed steps, projected to the eps-ball and [0, 1]."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    g = Graph()
    xn = g.input("x", width=x.shape[-1])
    yn = g.input("y", labels=True)
    g.set_loss(g.softmax_ce(add_classifier(g, xn, f), yn, reduction="sum"))
    xk = x.copy()
    for _ in range(steps):
        forward(g, {"x": xk, "y": y})
        grad = backward(g, ["x"])["x"]
        xk = clip_to_ball(xk + step_size * np.sign(grad), x, epsilon)
    return xk


def iterative_sign_model(f, epsilon, steps=10, step_size=None):
    step = epsilon / 4.0 if step_size is None else step_size
    return AttackModel(ITERATIVE, epsilon, classifier=f, steps=int(steps), step_size=float(step))


# ------------------------------------------------------------------------
# success rates used as training floors


def untargeted_asr(f, attack, x, y):
    """Fraction of correctly classified examples that the attack flips."""
    ok = predict(f, x)[0] == y
    if not ok.any():
        raise UndefinedMetricError("no correctly classified examples to attack")
    adv = predict(f, apply_attack(attack, x[ok]))[0]
    return float(np.mean(adv != y[ok]))


def targeted_asr(f, attack, x, y):
    """Fraction of correctly classified, non-target examples sent to the target class."""
    keep = (predict(f, x)[0] == y) & (y != attack.target)
    if not keep.any():
        raise UndefinedMetricError("every example is misclassified or already carries the target label")
    adv = predict(f, apply_attack(attack, x[keep]))[0]
    return float(np.mean(adv == attack.target))


def _check_floor(kind, asr, min_asr):
    if min_asr is not None and asr < min_asr:
        raise TrainingError(f"{kind} reached ASR {asr:.3f} below the floor {min_asr:.3f}")


# ------------------------------------------------------------------------
# training


@dataclass
class AttackTrainConfig:
    epochs: int = 10
    lr: float = 1e-3
    batch_size: int = 64
    hidden: int = 256
    margin: float = 5.0
    c: float = 0.1
    step: float = None


def _train_loop(attack, f, dataset, cfg, loss_builder, seed, name):
    g = Graph()
    xn = g.input("x", width=dataset.x.shape[1])
    yn = g.input("y", labels=True)
    gx = add_attack(g, xn, attack)
    g.set_loss(loss_builder(g, xn, yn, gx, add_classifier(g, gx, f)))
    names = param_names(attack)
    arrays = [a.copy() for a in param_arrays(attack)]
    state = AdamState.zeros_like(arrays, lr=cfg.lr)
    shuffle = rng.stream(seed, "attack", name, "shuffle")
    n = len(dataset)
    for epoch in range(cfg.epochs):
        order = shuffle.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            binds = {"x": dataset.x[idx], "y": dataset.y[idx], **dict(zip(names, arrays))}
            try:
                forward(g, binds)
            except ArithmeticError as exc:
                raise TrainingError(f"{name} training diverged in epoch {epoch + 1}: {exc}") from exc
            grads = backward(g, names)
            arrays, state = adam_step(state, arrays, [grads[k] for k in names])
    return arrays


def _mlp_init(gen, widths, out_scale):
    weights, biases = [], []
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        std = np.sqrt(2.0 / a) * (out_scale if i == len(widths) - 2 else 1.0)
        weights.append(gen.normal(0.0, std, size=(a, b)))
        biases.append(np.zeros(b))
    return weights, biases


def train_perturb_generator(f, dataset, epsilon, seed, cfg=None, heldout=None, min_asr=None):
    """Train a residual perturbation generator against classifier ``f``.

    Loss: ``mean(max(margin - (max_{j != y} z_j - z_y), 0)) + c * mean ||g(x) - x||^2``.
    """
    cfg = cfg or AttackTrainConfig()
    n = dataset.x.shape[1]
    gen = rng.stream(seed, "attack", PERTURB, "init")
    weights, biases = _mlp_init(gen, [n, cfg.hidden, n], out_scale=0.01)
    attack = AttackModel(PERTURB, epsilon, weights, biases, seed=seed)

    def loss(g, xn, yn, gx, z):
        adv = g.margin_hinge(z, yn, cfg.margin, reduction="mean")
        return g.add(adv, g.scale(g.sq_dist(gx, xn, reduction="mean"), cfg.c))

    arrays = _train_loop(attack, f, dataset, cfg, loss, seed, PERTURB)
    attack.weights, attack.biases = arrays[0::2], arrays[1::2]
    if min_asr is not None:
        ev = heldout if heldout is not None else dataset
        _check_floor(PERTURB, untargeted_asr(f, attack, ev.x, ev.y), min_asr)
    return attack


def train_targeted_autoencoder(f, dataset, target, epsilon, seed, cfg=None, heldout=None, min_asr=None):
    """Train an autoencoder that sends images to class ``target``.

    Loss: ``CE(f(P(s)), target) + c * mean ||s - x||^2`` with ``s`` the sigmoid
    reconstruction and ``P`` the eps-ball projection applied at attack time.
    """
    cfg = cfg or AttackTrainConfig(hidden=128)
    n = dataset.x.shape[1]
    gen = rng.stream(seed, "attack", TARGETED, "init")
    weights, biases = _mlp_init(gen, [n, cfg.hidden, n], out_scale=1.0)
    attack = AttackModel(TARGETED, epsilon, weights, biases, target=int(target), seed=seed)
    shifted = dataset.subset(np.arange(len(dataset)))
    shifted.y = np.full(len(dataset), int(target), dtype=np.int64)

    def loss(g, xn, yn, gx, z):
        recon = g.nodes[gx].inputs[0]
        return g.add(g.softmax_ce(z, yn, reduction="mean"), g.scale(g.sq_dist(recon, xn, reduction="mean"), cfg.c))

    arrays = _train_loop(attack, f, shifted, cfg, loss, seed, TARGETED)
    attack.weights, attack.biases = arrays[0::2], arrays[1::2]
    if min_asr is not None:
        ev = heldout if heldout is not None else dataset
        _check_floor(TARGETED, targeted_asr(f, attack, ev.x, ev.y), min_asr)
    return attack


def train_universal_perturbation(f, dataset, epsilon, seed, cfg=None, heldout=None, min_asr=None):
    """One shared ``delta`` by projected sign-gradient ascent on the mean classifier loss."""
    cfg = cfg or AttackTrainConfig()
    n = dataset.x.shape[1]
    attack = AttackModel(UNIVERSAL, epsilon, delta=np.zeros(n), seed=seed)
    step = epsilon / 10.0 if cfg.step is None else cfg.step
    g = Graph()
    xn = g.input("x", width=n)
    yn = g.input("y", labels=True)
    gx = add_attack(g, xn, attack)
    g.set_loss(g.softmax_ce(add_classifier(g, gx, f), yn, reduction="mean"))
    delta = attack.delta.copy()
    shuffle = rng.stream(seed, "attack", UNIVERSAL, "shuffle")
    for _ in range(cfg.epochs):
        order = shuffle.permutation(len(dataset))
        for start in range(0, len(dataset), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            forward(g, {"x": dataset.x[idx], "y": dataset.y[idx], "g.delta": delta})
            grad = backward(g, ["g.delta"])["g.delta"]
            delta = np.clip(delta + step * np.sign(grad), -epsilon, epsilon)
    attack.delta = delta
    if min_asr is not None:
        ev = heldout if heldout is not None else dataset
        _check_floor(UNIVERSAL, untargeted_asr(f, attack, ev.x, ev.y), min_asr)
    return attack


# ------------------------------------------------------------------------
# persistence


def save_attack(attack, path):
    if attack.kind == UNIVERSAL:
        tensors = [("delta", attack.delta)]
    elif attack.kind == ITERATIVE:
        tensors = []
    else:
        tensors = [(f"{p}{i}", a) for i, (w, b) in enumerate(zip(attack.weights, attack.biases)) for p, a in (("w", w), ("b", b))]
    meta = attack.describe()
    meta["seed"] = attack.seed
    if attack.kind == ITERATIVE:
        meta["classifier_hash"] = attack.classifier.spec.hash()
    serialize.write(path, ATTACK_MAGIC, [attack.kind, attack.hash()], tensors, meta)


def load_attack(path, classifier=None):
    (kind, file_hash), tensors, meta = serialize.read(path, ATTACK_MAGIC, 2)
    if kind not in KINDS:
        raise serialize.FormatError(f"unknown attack kind {kind!r}")
    d = dict(tensors)
    try:
        eps = float(meta["epsilon"])
        seed = int(meta.get("seed", 0))
        if kind == UNIVERSAL:
            attack = AttackModel(kind, eps, delta=d["delta"], seed=seed)
        elif kind == ITERATIVE:
            if classifier is None:
                raise serialize.FormatError("iterative-sign attack files need the classifier they target")
            if meta.get("classifier_hash") != classifier.spec.hash():
                raise serialize.SpecHashMismatch("iterative-sign attack was written for a different classifier")
            attack = AttackModel(kind, eps, classifier=classifier, steps=int(meta["steps"]), step_size=float(meta["step_size"]), seed=seed)
        else:
            k = len(d) // 2
            attack = AttackModel(kind, eps, [d[f"w{i}"] for i in range(k)], [d[f"b{i}"] for i in range(k)], target=meta.get("target"), seed=seed)
    except KeyError as exc:
        raise serialize.ParseError(f"attack file missing {exc}") from exc
    if attack.hash() != file_hash:
        raise serialize.SpecHashMismatch(f"attack header hash {file_hash} does not match its contents ({attack.hash()})")
    return attack
