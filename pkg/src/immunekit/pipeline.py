"""In-memory experiment stages shared by the command line and the test suites.

Every stage is a pure function of the resolved config and the seed, so the
CLI can rebuild the dataset instead of storing it.
"""

import numpy as np

from . import attacks as atk
from . import data, defense, metrics, rng
from .config import defense_params
from .errors import TrainingError, UndefinedMetricError, UsageError
from .models import ClassifierSpec, OptimizerConfig, train_classifier

REPORT_COLUMNS = (
    "method",
    "source_attack",
    "target_attack",
    "is_whitebox",
    "n_eval",
    "accuracy",
    "asr_raw",
    "asr_ie",
    "vasr",
    "ir",
    "uiqi_mean",
    "linf_max",
    "seed",
)


def build_dataset(cfg):
    """Train/val/test splits and a manifest for ``cfg["data"]``."""
    d = cfg["data"]
    seed = cfg["seed"]
    if d["source"] == "strokes":
        ds = data.synth_strokes(rng.child_seed(seed, "data"), d["per_class"], d["n_classes"])
    elif d["source"] == "blobs":
        ds = data.synth_dataset(rng.child_seed(seed, "data"), d["per_class"], n_classes=d["n_classes"])
    else:
        ds = data.load_mnist_idx(d["images"], d["labels"], d["n_classes"])
    if d.get("limit"):
        ds = ds.subset(np.arange(min(d["limit"], len(ds))))
    parts = data.split(ds, d["split"], rng.child_seed(seed, "split"))
    manifest = data.DatasetManifest(
        source=d["source"],
        counts={p.name.rsplit("-", 1)[1]: len(p) for p in parts},
        dim=ds.x.shape[1],
        n_classes=ds.n_classes,
        image_shape=tuple(ds.image_shape),
        seed=None if d["source"] == "mnist-idx" else seed,
    )
    return parts, manifest


def classifier_spec(cfg, n_inputs):
    c = cfg["classifier"]
    widths = (n_inputs, *c["hidden"], cfg["data"]["n_classes"])
    return ClassifierSpec(widths, (c["activation"],) * len(c["hidden"]), rng.child_seed(cfg["seed"], "classifier"))


def fit_classifier(cfg, train, heldout):
    """Train the classifier; :class:`TrainingError` if held-out accuracy misses the floor."""
    c = cfg["classifier"]
    spec = classifier_spec(cfg, train.x.shape[1])
    opt = OptimizerConfig(lr=c["lr"], batch_size=c["batch_size"])
    f, report = train_classifier(train, spec, opt, epochs=c["epochs"], heldout=heldout)
    if report.heldout_accuracy < c["min_accuracy"]:
        raise TrainingError(f"classifier held-out accuracy {report.heldout_accuracy:.4f} below floor {c['min_accuracy']}")
    return f, report


def fit_attack(cfg, name, f, train, heldout):
    """Train (or, for iterative-sign, assemble) attack ``name``; returns ``(attack, heldout_asr)``."""
    a = cfg["attacks"][name]
    seed = rng.child_seed(cfg["seed"], "attack", name)
    kind = a["kind"]
    if kind == atk.ITERATIVE:
        g = atk.iterative_sign_model(f, a["epsilon"], a["steps"], a["step_size"])
        return g, atk.untargeted_asr(f, g, heldout.x, heldout.y)
    tc = atk.AttackTrainConfig(
        epochs=a["epochs"],
        lr=a.get("lr", 1e-3),
        batch_size=a["batch_size"],
        hidden=a.get("hidden", 256),
        margin=a.get("margin", 5.0),
        c=a.get("c", 0.1),
        step=a.get("step_size"),
    )
    floor = a.get("min_asr")
    if kind == atk.PERTURB:
        g = atk.train_perturb_generator(f, train, a["epsilon"], seed, tc, heldout, floor)
    elif kind == atk.TARGETED:
        g = atk.train_targeted_autoencoder(f, train, a["target"], a["epsilon"], seed, tc, heldout, floor)
    else:
        g = atk.train_universal_perturbation(f, train, a["epsilon"], seed, tc, heldout, floor)
    asr = atk.targeted_asr(f, g, heldout.x, heldout.y) if g.targeted else atk.untargeted_asr(f, g, heldout.x, heldout.y)
    return g, asr


def eval_slice(cfg, test):
    n = cfg["evaluate"]["n_eval"]
    if n > len(test):
        raise UsageError(f"evaluation size {n} exceeds the {len(test)}-example test split")
    return test.x[:n], test.y[:n]


def immune_config(cfg, method, **overrides):
    params = defense_params(cfg, method)
    params.update(overrides)
    return defense.ImmuneConfig(seed=rng.child_seed(cfg["seed"], "defense", method), **params)


def craft_method(cfg, method, f, source, x, y, **overrides):
    icfg = immune_config(cfg, method, **overrides)
    return defense.craft_batched(x, y, f, source, icfg, cfg["evaluate"]["batch_size"])


def _fmt(v):
    return None if v is None else float(v)


def evaluate_method(cfg, method, f, attack_models, x, y, x_ie, image_shape):
    """Report rows and per-example outcome rows for one crafted IE batch against every attack."""
    src = cfg["defense"]["source"]
    ev = cfg["evaluate"]
    rows, outcomes = [], []
    for name, g in attack_models.items():
        target = g.target if g.targeted else None
        recs = metrics.classify_outcomes(f, x, y, g, x_ie, target=target)
        rep = metrics.evaluate_records(recs, g.targeted, x, x_ie, image_shape, ev["uiqi_window"], ev["uiqi_stride"])
        row = {
            "method": method,
            "source_attack": src,
            "target_attack": name,
            "is_whitebox": name == src,
            "n_eval": len(y),
            "accuracy": _fmt(rep.accuracy),
            "asr_raw": _fmt(rep.asr_raw),
            "asr_ie": _fmt(rep.asr_ie),
            "vasr": _fmt(rep.vasr),
            "ir": _fmt(rep.ir),
            "uiqi_mean": _fmt(rep.uiqi_mean),
            "linf_max": _fmt(rep.linf_max),
            "seed": cfg["seed"],
            "undefined_reason": "; ".join(f"{k}: {v}" for k, v in sorted(rep.undefined.items())),
            "counts": rep.counts,
            "targeted": g.targeted,
        }
        rows.append(row)
        for r in recs:
            outcomes.append(
                {
                    "method": method,
                    "target_attack": name,
                    "id": r.id,
                    "y": r.y,
                    "target": "" if r.target is None else r.target,
                    "raw": int(r.raw),
                    "adv": int(r.adv),
                    "ie": int(r.ie),
                    "adv_ie": int(r.adv_ie),
                }
            )
    return rows, outcomes


def ablation_point(cfg, f, source, attack_models, x, y, image_shape, method, param, value):
    """Craft with one swept parameter set to ``value``; returns the plot-ready row."""
    value = int(value) if param == "T" else float(value)
    res = craft_method(cfg, method, f, source, x, y, **{param: value})
    rows, _ = evaluate_method(cfg, method, f, attack_models, x, y, res.x_ie, image_shape)
    out = {"param": param, "value": value}
    src = next(r for r in rows if r["is_whitebox"])
    out["accuracy"] = src["accuracy"]
    out["uiqi_mean"] = src["uiqi_mean"]
    out["linf_max"] = src["linf_max"]
    for r in rows:
        out[f"ir_{r['target_attack']}"] = r["ir"]
    return out


def mean_ir(rows, attacks_used):
    """Average immune rate over ``attacks_used``; undefined entries raise."""
    vals = []
    for r in rows:
        if r["target_attack"] in attacks_used:
            if r["ir"] is None:
                raise UndefinedMetricError(f"IR undefined for {r['method']} vs {r['target_attack']}: {r['undefined_reason']}")
            vals.append(r["ir"])
    if len(vals) != len(attacks_used):
        raise UsageError("some requested attacks have no report rows")
    return float(np.mean(vals))
