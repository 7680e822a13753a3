"""Crafting immune examples.

An immune example ``x_ie`` stays close to ``x`` while both ``x_ie`` and the
attack output ``g(x_ie)`` keep the true label.  Sign-descent methods (GSD and
its masked / momentum / variance-tuned variants) minimise

    lam * J(f(x'), y) + J(f(g(x')), y)

by signed steps projected onto the tau-ball; OPT minimises the same loss plus
``eta * ||x' - x||_inf`` with Adam in tanh space.

Budgets ``tau`` and ``alpha`` are given on the 0-255 pixel scale and divided
by 255 internally.  Batches are processed row-wise: every example is crafted
independently, the batch axis only vectorises the work.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels, rng
from .attacks import add_attack
from .autodiff import Graph, backward, clip_to_ball, forward
from .errors import BudgetViolation, CapabilityError, NumericError, UsageError
from .models import AdamState, adam_step, add_classifier

METHODS = ("GSD", "OPT", "MGSD", "PM-GSD", "PM-MGSD", "VT-GSD", "VT-MGSD")
PIXEL = 255.0


@dataclass
class ImmuneConfig:
    method: str = "MGSD"
    lam: float = 0.1
    eta: float = 10.0
    tau: float = 64.0
    T: int = 5
    alpha: float = 48.0
    lr: float = 1e-3
    p: str = "inf"
    mu: float = 1.0
    n_vt: int = 20
    beta_vt: float = 1.5
    box_eps: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise UsageError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.p != "inf":
            raise UsageError("only the L-inf norm is supported")
        if self.tau < 0 or self.T < 0 or self.lam < 0 or self.eta < 0 or self.n_vt < 0:
            raise UsageError("tau, T, lam, eta and n_vt must be non-negative")
        if self.method != "OPT" and self.alpha <= 0:
            raise UsageError("sign methods need alpha > 0")
        if not 0 < self.box_eps < 0.5:
            raise UsageError("box_eps must lie in (0, 0.5)")

    @property
    def masked(self):
        return self.method.endswith("MGSD")

    @property
    def momentum(self):
        return self.method.startswith("PM-")

    @property
    def variance_tuned(self):
        return self.method.startswith("VT-")

    def with_(self, **kw):
        return replace(self, **kw)


@dataclass
class ImmuneResult:
    x_ie: np.ndarray
    ip: np.ndarray
    immune_loss: np.ndarray
    adv_loss: np.ndarray
    masked_dims: np.ndarray
    linf: np.ndarray
    method: str = ""
    extra: dict = field(default_factory=dict)


class Objective:
    """Prebuilt loss graphs for ``J(f(x), y)`` and ``J(f(g(x)), y)`` (per-example sums)."""

    def __init__(self, f, g):
        if not g.differentiable:
            raise CapabilityError(f"{g.kind} cannot be used as a crafting source")
        n = f.spec.n_inputs
        self.imm = Graph()
        xi = self.imm.input("x", width=n)
        yi = self.imm.input("y", labels=True)
        self.imm_loss = self.imm.set_loss(self.imm.softmax_ce(add_classifier(self.imm, xi, f), yi, reduction="sum"))

        self.adv = Graph()
        xa = self.adv.input("x", width=n)
        ya = self.adv.input("y", labels=True)
        self.gx = add_attack(self.adv, xa, g)
        self.adv_loss = self.adv.set_loss(self.adv.softmax_ce(add_classifier(self.adv, self.gx, f), ya, reduction="sum"))

    def immune(self, x, y):
        forward(self.imm, {"x": x, "y": y})
        return backward(self.imm, ["x"])["x"], self.imm.per_example(self.imm_loss).copy()

    def adversarial(self, x, y):
        """Returns (grad wrt x, grad wrt g(x), per-example loss)."""
        forward(self.adv, {"x": x, "y": y})
        grads = backward(self.adv, ["x", self.gx])
        return grads["x"], grads[self.gx], self.adv.per_example(self.adv_loss).copy()

    def losses(self, x, y):
        forward(self.imm, {"x": x, "y": y})
        forward(self.adv, {"x": x, "y": y})
        return self.imm.per_example(self.imm_loss).copy(), self.adv.per_example(self.adv_loss).copy()


def _rows(x):
    x = np.asarray(x, dtype=np.float64)
    return x[None, :] if x.ndim == 1 else x


def _labels(y, batch):
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if y.shape != (batch,):
        raise UsageError(f"expected {batch} labels, got shape {y.shape}")
    return y


# ------------------------------------------------------------------------
# gradient rules


def compute_mask(grad_in, grad_out):
    """1 where ``grad_in / grad_out > 0``, else 0 (including ``grad_out == 0``)."""
    grad_in = np.asarray(grad_in, dtype=np.float64)
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_in.shape != grad_out.shape:
        raise UsageError(f"gradient shapes differ: {grad_in.shape} vs {grad_out.shape}")
    return _kernels.compute_mask(grad_in, grad_out)


def _gradient(obj, x, y, lam, masked, mask_fn=compute_mask):
    """Combined descent direction at ``x``; also returns losses and the mask."""
    gi, li = obj.immune(x, y)
    ga, gout, la = obj.adversarial(x, y)
    if masked:
        mask = mask_fn(ga, gout)
        ga = mask * ga
    else:
        mask = None
    return lam * gi + ga, li, la, mask


def ensemble_gradient(f, g, x_t, y, lam):
    """``lam * grad_x J(f(x), y) + grad_x J(f(g(x)), y)``."""
    x_t = _rows(x_t)
    return _gradient(Objective(f, g), x_t, _labels(y, x_t.shape[0]), lam, False)[0]


def masked_ensemble_gradient(f, g, x_t, y, lam, mask_fn=compute_mask):
    """Like :func:`ensemble_gradient` with the adversarial term masked to aligned dimensions."""
    x_t = _rows(x_t)
    return _gradient(Objective(f, g), x_t, _labels(y, x_t.shape[0]), lam, True, mask_fn)[0]


def momentum_accumulate(v_prev, grad, mu):
    """``mu * v_prev + grad / ||grad||_1`` row-wise; zero rows contribute nothing."""
    grad = _rows(grad)
    v_prev = np.zeros_like(grad) if v_prev is None else _rows(v_prev)
    l1 = np.abs(grad).sum(axis=1, keepdims=True)
    safe = np.where(l1 > 0, l1, 1.0)
    return mu * v_prev + np.where(l1 > 0, grad / safe, 0.0)


def variance_tune(obj, x_t, y, lam, grad_t, v_prev, n_vt, beta_vt, tau, gen, masked=False):
    """Variance tuning: returns ``(grad_t + v_prev, v_next)``.

    ``v_next`` is the mean gradient over ``n_vt`` neighbours drawn uniformly
    from the L-inf ball of radius ``beta_vt * tau / 255`` (clipped to [0, 1]),
    minus ``grad_t``.  With ``n_vt == 0`` the gradient passes through unchanged.
    """
    if n_vt == 0:
        return grad_t, v_prev
    tuned = grad_t + v_prev
    radius = beta_vt * tau / PIXEL
    acc = np.zeros_like(grad_t)
    for _ in range(n_vt):
        nb = np.clip(x_t + gen.uniform(-radius, radius, size=x_t.shape), 0.0, 1.0)
        acc += _gradient(obj, nb, y, lam, masked)[0]
    return tuned, acc / n_vt - grad_t


# ------------------------------------------------------------------------
# crafting


def check_budget(x, x_ie, tau):
    """Raise :class:`BudgetViolation` unless ``x_ie`` is in the tau-ball (0-255 scale) and in [0, 1]."""
    dev = np.abs(x_ie - x).max() if x.size else 0.0
    if dev > tau / PIXEL + 1e-12:
        raise BudgetViolation(f"immune perturbation {dev * PIXEL:.6f}/255 exceeds tau={tau}")
    if x_ie.size and (x_ie.min() < 0.0 or x_ie.max() > 1.0):
        raise BudgetViolation("immune example left the pixel range [0, 1]")


def craft_ie_gsd(x, y, f, g, cfg, mask_fn=compute_mask):
    """Signed descent shared by GSD, MGSD and their PM / VT variants."""
    if cfg.method == "OPT":
        raise UsageError("craft_ie_gsd handles sign methods only; use craft_ie_opt")
    x = _rows(x)
    y = _labels(y, x.shape[0])
    obj = Objective(f, g)
    tau = cfg.tau / PIXEL
    alpha = cfg.alpha / PIXEL
    gen = rng.stream(cfg.seed, "defense", "vt")
    xt = x.copy()
    mom = np.zeros_like(x)
    var = np.zeros_like(x)
    imm_tr, adv_tr, masked_tr = [], [], []
    for _ in range(cfg.T):
        grad, li, la, mask = _gradient(obj, xt, y, cfg.lam, cfg.masked, mask_fn)
        imm_tr.append(li)
        adv_tr.append(la)
        masked_tr.append(np.zeros(len(y), dtype=np.int64) if mask is None else (mask == 0).sum(axis=1))
        if cfg.variance_tuned:
            grad, var = variance_tune(obj, xt, y, cfg.lam, grad, var, cfg.n_vt, cfg.beta_vt, cfg.tau, gen, cfg.masked)
        if cfg.momentum:
            mom = momentum_accumulate(mom, grad, cfg.mu)
            grad = mom
        xt = _kernels.sign_step(xt, grad, alpha, x, tau, 0.0, 1.0)
    li, la = obj.losses(xt, y)
    imm_tr.append(li)
    adv_tr.append(la)
    ip = xt - x
    return ImmuneResult(
        x_ie=xt,
        ip=ip,
        immune_loss=np.array(imm_tr),
        adv_loss=np.array(adv_tr),
        masked_dims=np.array(masked_tr, dtype=np.int64).reshape(cfg.T, len(y)),
        linf=np.abs(ip).max(axis=1),
        method=cfg.method,
    )


def craft_ie_opt(x, y, f, g, cfg):
    """Adam on ``lam*J(x') + J(g(x')) + eta*||x'-x||_inf`` with ``x' = (tanh(w)+1)/2``.

    ``w`` starts at the inverse transform of ``x`` clipped to
    ``[box_eps, 1 - box_eps]``; pixels at exactly 0 or 1 would otherwise sit
    where ``tanh`` is flat and Adam could not move them.  The perturbation
    size is not projected; it is controlled by ``eta`` and reported.  Each
    example keeps its best iterate by total loss, the unperturbed image
    included.
    """
    x = _rows(x)
    y = _labels(y, x.shape[0])
    obj = Objective(f, g)
    w = np.arctanh(2.0 * np.clip(x, cfg.box_eps, 1.0 - cfg.box_eps) - 1.0)
    state = AdamState.zeros_like([w], lr=cfg.lr)
    best = x.copy()
    best_total = np.full(len(y), np.inf)
    imm_tr, adv_tr = [], []
    for t in range(cfg.T + 1):
        xp = x if t == 0 else 0.5 * (np.tanh(w) + 1.0)
        gi, li = obj.immune(xp, y)
        ga, _, la = obj.adversarial(xp, y)
        ip = xp - x
        absip = np.abs(ip)
        linf = absip.max(axis=1)
        total = cfg.lam * li + la + cfg.eta * linf
        if not np.all(np.isfinite(total)):
            raise NumericError(f"optimisation diverged at iteration {t}")
        better = total < best_total
        best[better] = xp[better]
        best_total[better] = total[better]
        imm_tr.append(li)
        adv_tr.append(la)
        if t == cfg.T:
            break
        # subgradient of the max: shared equally between tied coordinates
        ties = (absip >= linf[:, None]) & (linf[:, None] > 0)
        sub = np.sign(ip) * ties / np.maximum(ties.sum(axis=1, keepdims=True), 1)
        dx = cfg.lam * gi + ga + cfg.eta * sub
        dw = dx * 0.5 * (1.0 - np.tanh(w) ** 2)
        (w,), state = adam_step(state, [w], [dw])
    ip = best - x
    return ImmuneResult(
        x_ie=best,
        ip=ip,
        immune_loss=np.array(imm_tr),
        adv_loss=np.array(adv_tr),
        masked_dims=np.zeros((cfg.T, len(y)), dtype=np.int64),
        linf=np.abs(ip).max(axis=1),
        method="OPT",
        extra={"best_total": best_total},
    )


def craft(x, y, f, g, cfg):
    """Dispatch on ``cfg.method``; sign methods are checked against the tau budget."""
    if cfg.method == "OPT":
        return craft_ie_opt(x, y, f, g, cfg)
    res = craft_ie_gsd(x, y, f, g, cfg)
    check_budget(_rows(x), res.x_ie, cfg.tau)
    return res


def craft_batched(x, y, f, g, cfg, batch_size=256):
    """Craft in chunks of ``batch_size`` rows and concatenate, preserving input order."""
    x = _rows(x)
    y = _labels(y, x.shape[0])
    parts = [craft(x[i : i + batch_size], y[i : i + batch_size], f, g, cfg) for i in range(0, len(y), batch_size)]
    if len(parts) == 1:
        return parts[0]
    cat = lambda name, axis: np.concatenate([getattr(p, name) for p in parts], axis=axis)  # noqa: E731
    return ImmuneResult(
        cat("x_ie", 0), cat("ip", 0), cat("immune_loss", 1), cat("adv_loss", 1), cat("masked_dims", 1), cat("linf", 0), cfg.method
    )


__all__ = [
    "METHODS",
    "ImmuneConfig",
    "ImmuneResult",
    "Objective",
    "check_budget",
    "clip_to_ball",
    "compute_mask",
    "craft",
    "craft_batched",
    "craft_ie_gsd",
    "craft_ie_opt",
    "ensemble_gradient",
    "masked_ensemble_gradient",
    "momentum_accumulate",
    "variance_tune",
]
