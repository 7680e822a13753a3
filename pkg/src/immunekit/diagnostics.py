"""Executable checks of how a signed IE step moves the adversarial output.

A step ``l = -alpha * sign(grad)`` changes the attack output by
``g(x + l) - g(x)``.  To first order that is ``J_g(x) l``; the probes below
measure how far the true change departs from that prediction, and how often
each coordinate of the IE and of ``g`` move in the same direction.
"""

from dataclasses import dataclass

import numpy as np

from . import rng
from .attacks import add_attack
from .autodiff import Graph, backward, forward
from .defense import PIXEL, Objective, compute_mask
from .errors import CapabilityError, UsageError


def sign_step_l2(grad, alpha):
    """``||-alpha * sign(grad)||_2``, checked against ``alpha * sqrt(||grad||_0)``."""
    grad = np.asarray(grad, dtype=np.float64)
    direct = float(np.linalg.norm((-alpha * np.sign(grad)).ravel()))
    closed = float(alpha * np.sqrt(np.count_nonzero(grad)))
    if abs(direct - closed) > 1e-12 * max(1.0, closed):
        raise ArithmeticError(f"sign step norm {direct!r} disagrees with alpha*sqrt(nnz) {closed!r}")
    return direct


def _attack_graph(g, n):
    graph = Graph()
    x = graph.input("x", width=n)
    out = graph.set_loss(add_attack(graph, x, g))
    return graph, out


def attack_jacobian(g, x):
    """Jacobians ``d g(x)_k / d x`` for each row of ``x``: shape ``(batch, n_out, n_in)``.

    Built from one backward pass per output coordinate with a unit upstream
    gradient on that coordinate.
    """
    if not g.differentiable:
        raise CapabilityError(f"{g.kind} has no Jacobian")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    graph, out = _attack_graph(g, x.shape[1])
    gx = forward(graph, {"x": x})
    jac = np.empty((x.shape[0], gx.shape[1], x.shape[1]))
    seed = np.zeros_like(gx)
    for k in range(gx.shape[1]):
        seed[:, k] = 1.0
        jac[:, k, :] = backward(graph, ["x"], upstream=seed)["x"]
        seed[:, k] = 0.0
    return jac


def _step_direction(obj, x, y, masked):
    ga, gout, _ = obj.adversarial(x, y)
    if masked:
        ga = compute_mask(ga, gout) * ga
    return ga


@dataclass
class ErrorProbeReport:
    alphas: np.ndarray
    masked: bool
    mean_error: np.ndarray
    std_error: np.ndarray
    l2: np.ndarray
    per_sample: np.ndarray

    def __post_init__(self):
        n = len(self.alphas)
        if not (len(self.mean_error) == len(self.std_error) == n == self.l2.shape[0] == self.per_sample.shape[0]):
            raise UsageError("probe series lengths differ")


def approximation_error_probe(f, g, x, y, alphas, masked=False, samples=64, seed=0):
    """Mean ``|Delta_k - <grad g_k, l>|`` for signed steps of each size in ``alphas``.

    ``alphas`` are on the 0-255 scale.  ``samples`` rows are drawn from ``x``
    without replacement (all rows if fewer).  The step uses the adversarial
    loss gradient only, masked when ``masked`` is set; it is not clipped, so
    the comparison isolates the attack map's curvature.
    """
    alphas = np.asarray(alphas, dtype=np.float64)
    if alphas.ndim != 1 or alphas.size == 0 or np.any(alphas <= 0) or np.any(np.diff(alphas) <= 0):
        raise UsageError("alpha grid must be positive and strictly ascending")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if len(x) > samples:
        idx = np.sort(rng.stream(seed, "diagnostics", "probe").choice(len(x), samples, replace=False))
        x, y = x[idx], y[idx]
    obj = Objective(f, g)
    direction = np.sign(_step_direction(obj, x, y, masked))
    jac = attack_jacobian(g, x)
    graph, _ = _attack_graph(g, x.shape[1])
    base = forward(graph, {"x": x})
    per = np.empty((len(alphas), len(x)))
    std = np.empty(len(alphas))
    l2 = np.empty((len(alphas), len(x)))
    for i, a in enumerate(alphas):
        step = -(a / PIXEL) * direction
        actual = forward(graph, {"x": x + step}) - base
        predicted = np.einsum("bkn,bn->bk", jac, step)
        err = np.abs(actual - predicted)
        per[i] = err.mean(axis=1)
        std[i] = err.std()
        l2[i] = np.linalg.norm(step, axis=1)
    return ErrorProbeReport(alphas, masked, per.mean(axis=1), std, l2, per)


def _alignment_counts(f, g, x_t, y, masked, alpha, lam):
    x_t = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    obj = Objective(f, g)
    ga = _step_direction(obj, x_t, y, masked)
    if lam:
        ga = ga + lam * obj.immune(x_t, y)[0]
    x_next = np.clip(x_t - (alpha / PIXEL) * np.sign(ga), 0.0, 1.0)
    graph, _ = _attack_graph(g, x_t.shape[1])
    dg = forward(graph, {"x": x_next}) - forward(graph, {"x": x_t})
    dx = x_next - x_t
    moved = dx != 0
    aligned = (dx * dg > 0) & moved
    return aligned.sum(axis=1), moved.sum(axis=1)


def alignment_fraction(f, g, x_t, y, masked=False, alpha=1.0, lam=0.0):
    """Share of updated coordinates where the IE and ``g`` move the same way.

    One signed step of size ``alpha`` (0-255 scale) on the adversarial loss
    (plus ``lam`` times the immune loss), pooled over the batch.  A step that
    moves nothing counts as fully aligned.
    """
    aligned, moved = _alignment_counts(f, g, x_t, y, masked, alpha, lam)
    total = int(moved.sum())
    return 1.0 if total == 0 else float(aligned.sum()) / total


def alignment_fractions(f, g, x_t, y, masked=False, alpha=1.0, lam=0.0):
    """Per-example version of :func:`alignment_fraction`."""
    aligned, moved = _alignment_counts(f, g, x_t, y, masked, alpha, lam)
    return np.where(moved > 0, aligned / np.maximum(moved, 1), 1.0)
