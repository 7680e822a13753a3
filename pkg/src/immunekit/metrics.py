"""Per-example outcomes and the evaluation metrics built on them.

Each example gets four verdicts (correct / wrong) from the classifier: on the
raw image ``x``, on the adversarial ``g(x)``, on the immune example ``x_ie``
and on ``g(x_ie)``.  The raw pair places it in one of the cells A1..A4, the
immune pair in B1..B4:

    cell 1: image correct, adversarial correct  (attack failed)
    cell 2: image correct, adversarial wrong    (attack succeeded)
    cell 3: image wrong,   adversarial correct
    cell 4: image wrong,   adversarial wrong

For targeted attacks, examples whose label already equals the target are
removed from cells 1 and 2 on both sides.
"""

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .attacks import apply_attack
from .errors import UndefinedMetricError, UsageError
from .models import predict

PIXEL = 255.0


@dataclass(frozen=True)
class OutcomeRecord:
    id: int
    y: int
    raw: bool
    adv: bool
    ie: bool = None
    adv_ie: bool = None
    target: int = None

    @property
    def excluded(self):
        return self.target is not None and self.y == self.target

    @property
    def has_immune(self):
        return self.ie is not None and self.adv_ie is not None


def _cell(img_ok, adv_ok):
    if img_ok:
        return 1 if adv_ok else 2
    return 3 if adv_ok else 4


def cell(record, side):
    """Cell number 1..4 of ``record`` on the ``"raw"`` or ``"immune"`` side."""
    if side == "raw":
        return _cell(record.raw, record.adv)
    if side == "immune":
        if not record.has_immune:
            raise UsageError(f"record {record.id} has no immune-side verdicts")
        return _cell(record.ie, record.adv_ie)
    raise UsageError(f"side must be 'raw' or 'immune', got {side!r}")


def in_set(record, side, k, targeted=False):
    """Membership of ``record`` in A_k (raw side) or B_k (immune side)."""
    if targeted and k in (1, 2) and _excluded(record):
        return False
    return cell(record, side) == k


def _excluded(record):
    if record.target is None:
        raise UsageError(f"targeted metric requested but record {record.id} has no target label")
    return record.y == record.target


def classify_outcomes(f, x, y, g, x_ie=None, target=None, ids=None, adv=None, adv_ie=None):
    """One :class:`OutcomeRecord` per row of ``x``.

    ``g`` is an attack model; precomputed adversarial batches can be passed
    as ``adv`` / ``adv_ie`` to skip running it.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if x.ndim != 2 or y.shape != (x.shape[0],):
        raise UsageError(f"x{x.shape} and y{y.shape} disagree")
    if x_ie is not None and np.shape(x_ie) != x.shape:
        raise UsageError(f"immune batch {np.shape(x_ie)} does not match {x.shape}")
    ids = np.arange(len(y)) if ids is None else np.asarray(ids)
    if len(set(ids.tolist())) != len(ids) or len(ids) != len(y):
        raise UsageError("example ids must be unique, one per row")
    raw_ok = predict(f, x)[0] == y
    adv_ok = predict(f, apply_attack(g, x) if adv is None else adv)[0] == y
    if x_ie is None:
        ie_ok = adv_ie_ok = [None] * len(y)
    else:
        ie_ok = predict(f, x_ie)[0] == y
        adv_ie_ok = predict(f, apply_attack(g, x_ie) if adv_ie is None else adv_ie)[0] == y
    t = None if target is None else int(target)
    return [
        OutcomeRecord(
            int(i),
            int(yy),
            bool(a),
            bool(b),
            None if c is None else bool(c),
            None if d is None else bool(d),
            t,
        )
        for i, yy, a, b, c, d in zip(ids, y, raw_ok, adv_ok, ie_ok, adv_ie_ok)
    ]


def counts(records, targeted=False):
    """Cell sizes ``A1..A4``, ``B1..B4`` and the intersections used by the immune rate."""
    out = {f"A{k}": 0 for k in range(1, 5)}
    immune = all(r.has_immune for r in records) and len(records) > 0
    if immune:
        out.update({f"B{k}": 0 for k in range(1, 5)})
        out["A2&B1"] = 0
        out["A2&(B1|B2)"] = 0
    for r in records:
        for k in range(1, 5):
            out[f"A{k}"] += in_set(r, "raw", k, targeted)
            if immune:
                out[f"B{k}"] += in_set(r, "immune", k, targeted)
        if immune and in_set(r, "raw", 2, targeted):
            b1 = in_set(r, "immune", 1, targeted)
            out["A2&B1"] += b1
            out["A2&(B1|B2)"] += b1 or in_set(r, "immune", 2, targeted)
    return out


def asr(records, side="raw", targeted=False):
    """``|A2| / |A1 u A2|`` (or the B-side analogue)."""
    num = den = 0
    for r in records:
        s1 = in_set(r, side, 1, targeted)
        s2 = in_set(r, side, 2, targeted)
        num += s2
        den += s1 or s2
    if den == 0:
        raise UndefinedMetricError(f"{side} ASR undefined: no correctly classified images remain")
    return num / den


def vasr(records, targeted=False):
    return asr(records, "raw", targeted) - asr(records, "immune", targeted)


def immune_rate(records, targeted=False):
    """``|A2 n B1| / |A2 n (B1 u B2)|``, intersected per example."""
    num = den = 0
    for r in records:
        if not in_set(r, "raw", 2, targeted):
            continue
        b1 = in_set(r, "immune", 1, targeted)
        num += b1
        den += b1 or in_set(r, "immune", 2, targeted)
    if den == 0:
        raise UndefinedMetricError("immune rate undefined: no successful adversarial example has a correctly classified IE")
    return num / den


def immune_accuracy(records):
    if not records:
        raise UndefinedMetricError("accuracy of an empty set")
    if not all(r.has_immune for r in records):
        raise UsageError("immune-side verdicts missing")
    return sum(r.ie for r in records) / len(records)


def uiqi(a, b, window=8, stride=1):
    """Mean universal image quality index over ``window`` x ``window`` patches.

    Windows where both denominator factors vanish are skipped; a window where
    only one vanishes scores 1 if the patches are identical and 0 otherwise.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise UsageError(f"uiqi needs two equal 2-D images, got {a.shape} and {b.shape}")
    if window < 1 or stride < 1 or window > min(a.shape):
        raise UsageError(f"window {window} does not fit image {a.shape}")
    q = _kernels.uiqi_window_mean(a, b, int(window), int(stride))
    if np.isnan(q):
        raise UndefinedMetricError("uiqi undefined: every window is flat black in both images")
    return q


def uiqi_batch(x, x_ie, image_shape, window=8, stride=1):
    """Per-image UIQI for flattened batches; undefined images give NaN."""
    out = np.empty(len(x))
    for i, (a, b) in enumerate(zip(np.asarray(x), np.asarray(x_ie))):
        try:
            out[i] = uiqi(a.reshape(image_shape), b.reshape(image_shape), window, stride)
        except UndefinedMetricError:
            out[i] = np.nan
    return out


def linf_of_ip(ip):
    """Largest absolute IP entry on the 0-255 scale."""
    ip = np.asarray(ip, dtype=np.float64)
    return float(PIXEL * np.abs(ip).max()) if ip.size else 0.0


@dataclass
class EvalReport:
    records: list
    counts: dict
    targeted: bool
    accuracy: float = None
    asr_raw: float = None
    asr_ie: float = None
    vasr: float = None
    ir: float = None
    uiqi_mean: float = None
    linf_max: float = None
    linf_mean: float = None
    undefined: dict = field(default_factory=dict)

    def metric_dict(self):
        keys = ("accuracy", "asr_raw", "asr_ie", "vasr", "ir", "uiqi_mean", "linf_max", "linf_mean")
        return {k: getattr(self, k) for k in keys}


def _try(report, name, fn, *args, **kw):
    try:
        setattr(report, name, float(fn(*args, **kw)))
    except UndefinedMetricError as exc:
        report.undefined[name] = str(exc)


def evaluate_records(records, targeted=False, x=None, x_ie=None, image_shape=None, window=8, stride=1):
    """Bundle every metric into an :class:`EvalReport`; undefined ones are ``None`` with a reason."""
    rep = EvalReport(list(records), counts(records, targeted), targeted)
    _try(rep, "asr_raw", asr, records, "raw", targeted)
    if records and all(r.has_immune for r in records):
        _try(rep, "accuracy", immune_accuracy, records)
        _try(rep, "asr_ie", asr, records, "immune", targeted)
        _try(rep, "vasr", vasr, records, targeted)
        _try(rep, "ir", immune_rate, records, targeted)
    if x is not None and x_ie is not None:
        ip = np.asarray(x_ie) - np.asarray(x)
        per = PIXEL * np.abs(ip).max(axis=1) if len(ip) else np.zeros(0)
        if len(per):
            rep.linf_max = float(per.max())
            rep.linf_mean = float(per.mean())
        if image_shape is not None and len(ip):
            q = uiqi_batch(x, x_ie, image_shape, window, stride)
            if np.all(np.isnan(q)):
                rep.undefined["uiqi_mean"] = "every image pair is degenerate"
            else:
                rep.uiqi_mean = float(np.nanmean(q))
    return rep
