"""Command line driver.

Every subcommand takes ``--config``, ``--seed`` and ``--out`` and works
inside the output directory: ``train-classifier`` writes the classifier,
``train-attack`` the attacks, ``craft`` one IE archive per defense method,
``evaluate`` the CSV/JSON reports and ``ablate`` a parameter sweep.  The
dataset is regenerated (or reloaded) from the config each time.
"""

import argparse
import csv
import datetime
import hashlib
import io
import json
import os
import platform
import sys

import filelock
import numpy as np

from . import _kernels, attacks, config, pipeline, serialize
from .defense import check_budget
from .errors import BudgetViolation, ConsistencyError, ImmuneKitError, UsageError
from .models import load_weights, save_weights

ARCHIVE_MAGIC = "IMMUNEKIT-ARCHIVE"
LOCK_NAME = ".immunekit.lock"
EXIT_OK, EXIT_FAIL, EXIT_BUSY = 0, 1, 3

OUTCOME_COLUMNS = ("method", "target_attack", "id", "y", "target", "raw", "adv", "ie", "adv_ie")
TRACE_COLUMNS = ("id", "iteration", "immune_loss", "adv_loss", "masked_dims")


# ------------------------------------------------------------------------
# file helpers


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path, columns, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_cell(r.get(c)) for c in columns])
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())


def write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def _write_metadata(out, command, cfg, started):
    write_json(
        os.path.join(out, f"metadata-{command}.json"),
        {
            "command": command,
            "started": started,
            "finished": datetime.datetime.now(datetime.timezone.utc).isoformat(),
            "seed": cfg["seed"],
            "python": platform.python_version(),
            "numpy": np.__version__,
            "kernel_backend": _kernels.BACKEND,
        },
    )


def _array_digest(a):
    return hashlib.sha256(np.ascontiguousarray(a, dtype=np.float64).tobytes()).hexdigest()[:16]


def _classifier_path(out):
    return os.path.join(out, "classifier.weights")


def _attack_path(out, name):
    return os.path.join(out, f"attack-{name}.weights")


def _archive_path(out, method):
    return os.path.join(out, f"ie-{method}.archive")


def _need(path, what):
    if not os.path.exists(path):
        raise UsageError(f"missing {what}: {path} (run the earlier stage first)")
    return path


def _load_classifier(cfg, out, n_inputs):
    spec = pipeline.classifier_spec(cfg, n_inputs)
    return load_weights(_need(_classifier_path(out), "classifier weights"), expected_hash=spec.hash())


def _load_attacks(cfg, out, f):
    models = {}
    for name in cfg["attacks"]:
        g = attacks.load_attack(_need(_attack_path(out, name), f"attack {name!r}"), classifier=f)
        want = cfg["attacks"][name]["kind"]
        if g.kind != want:
            raise ConsistencyError(f"attack file for {name!r} holds a {g.kind}, config asks for {want}")
        models[name] = g
    return models


# ------------------------------------------------------------------------
# commands


def cmd_train_classifier(cfg, out):
    (train, val, test), manifest = pipeline.build_dataset(cfg)
    f, rep = pipeline.fit_classifier(cfg, train, test)
    save_weights(f, _classifier_path(out))
    write_json(
        os.path.join(out, "classifier.json"),
        {
            "spec_hash": f.spec.hash(),
            "widths": list(f.spec.widths),
            "epoch_losses": rep.epoch_losses,
            "train_accuracy": rep.train_accuracy,
            "heldout_accuracy": rep.heldout_accuracy,
            "manifest": manifest.to_dict(),
        },
    )
    print(f"classifier held-out accuracy {rep.heldout_accuracy:.4f}")


def cmd_train_attack(cfg, out, only=None):
    (train, val, test), _ = pipeline.build_dataset(cfg)
    f = _load_classifier(cfg, out, train.x.shape[1])
    names = [only] if only else list(cfg["attacks"])
    for n in names:
        if n not in cfg["attacks"]:
            raise UsageError(f"attack {n!r} is not in the config")
    summary_path = os.path.join(out, "attacks.json")
    summary = {}
    if os.path.exists(summary_path):
        with open(summary_path, encoding="utf-8") as fh:
            summary = json.load(fh)
    for name in names:
        g, asr = pipeline.fit_attack(cfg, name, f, train, val)
        attacks.save_attack(g, _attack_path(out, name))
        summary[name] = {"kind": g.kind, "epsilon": g.epsilon, "heldout_asr": asr, "targeted": g.targeted, "hash": g.hash()}
        print(f"{name} ({g.kind}) held-out ASR {asr:.4f}")
    write_json(summary_path, summary)


def cmd_craft(cfg, out):
    (train, val, test), _ = pipeline.build_dataset(cfg)
    f = _load_classifier(cfg, out, train.x.shape[1])
    src_name = cfg["defense"]["source"]
    source = attacks.load_attack(_need(_attack_path(out, src_name), f"source attack {src_name!r}"), classifier=f)
    x, y = pipeline.eval_slice(cfg, test)
    for method in cfg["defense"]["methods"]:
        icfg = pipeline.immune_config(cfg, method)
        res = pipeline.craft_method(cfg, method, f, source, x, y)
        if method != "OPT":
            # a violation here is a bug in the crafting loop; nothing is written
            defense_budget(x, res.x_ie, icfg.tau)
        meta = {
            "method": method,
            "immune_config": {k: getattr(icfg, k) for k in icfg.__dataclass_fields__},
            "source_attack": src_name,
            "source_hash": source.hash(),
            "classifier_hash": f.spec.hash(),
            "x_digest": _array_digest(x),
            "n_eval": len(y),
        }
        tensors = [
            ("x_ie", res.x_ie),
            ("ip", res.ip),
            ("immune_loss", res.immune_loss),
            ("adv_loss", res.adv_loss),
            ("masked_dims", res.masked_dims.astype(np.float64)),
            ("linf", res.linf),
        ]
        serialize.write(_archive_path(out, method), ARCHIVE_MAGIC, [method, serialize.spec_hash(meta)], tensors, meta)
        trace = []
        for i in range(len(y)):
            for t in range(res.immune_loss.shape[0]):
                trace.append(
                    {
                        "id": i,
                        "iteration": t,
                        "immune_loss": float(res.immune_loss[t, i]),
                        "adv_loss": float(res.adv_loss[t, i]),
                        "masked_dims": int(res.masked_dims[t, i]) if t < res.masked_dims.shape[0] else "",
                    }
                )
        write_csv(os.path.join(out, f"trace-{method}.csv"), TRACE_COLUMNS, trace)
        print(f"{method}: crafted {len(y)} IEs, max Linf {255 * float(res.linf.max()):.1f}/255")


def defense_budget(x, x_ie, tau):
    try:
        check_budget(x, x_ie, tau)
    except BudgetViolation as exc:
        raise BudgetViolation(f"refusing to write IEs: {exc}") from exc


def load_archive(path, x=None):
    """Read an IE archive; with ``x`` given, check it was crafted for exactly these images."""
    (method, digest), tensors, meta = serialize.read(path, ARCHIVE_MAGIC, 2)
    if serialize.spec_hash(meta) != digest:
        raise serialize.SpecHashMismatch(f"{path}: header digest does not match metadata")
    if x is not None and meta.get("x_digest") != _array_digest(x):
        raise ConsistencyError(f"{path} was crafted for different images than the current evaluation set")
    return method, dict(tensors), meta


def cmd_evaluate(cfg, out):
    (train, val, test), manifest = pipeline.build_dataset(cfg)
    f = _load_classifier(cfg, out, train.x.shape[1])
    models = _load_attacks(cfg, out, f)
    x, y = pipeline.eval_slice(cfg, test)
    rows, outcomes = [], []
    for method in cfg["defense"]["methods"]:
        _, t, meta = load_archive(_need(_archive_path(out, method), f"IE archive for {method}"), x)
        if meta["classifier_hash"] != f.spec.hash():
            raise ConsistencyError(f"IE archive for {method} was crafted against another classifier")
        r, o = pipeline.evaluate_method(cfg, method, f, models, x, y, t["x_ie"], manifest.image_shape)
        rows.extend(r)
        outcomes.extend(o)
    write_csv(os.path.join(out, "report.csv"), pipeline.REPORT_COLUMNS + ("undefined_reason",), rows)
    write_json(os.path.join(out, "report.json"), {"rows": rows, "manifest": manifest.to_dict()})
    write_csv(os.path.join(out, "outcomes.csv"), OUTCOME_COLUMNS, outcomes)
    for r in rows:
        flag = "*" if r["is_whitebox"] else " "
        ir = "null" if r["ir"] is None else f"{r['ir']:.3f}"
        print(f"{r['method']:>8} vs {r['target_attack']:<12}{flag} IR {ir}")


def cmd_ablate(cfg, out):
    (train, val, test), manifest = pipeline.build_dataset(cfg)
    f = _load_classifier(cfg, out, train.x.shape[1])
    models = _load_attacks(cfg, out, f)
    source = models[cfg["defense"]["source"]]
    x, y = pipeline.eval_slice(cfg, test)
    ab = cfg["ablate"]
    stem = os.path.join(out, f"ablation-{ab['param']}")
    series = []
    for value in ab["values"]:
        series.append(pipeline.ablation_point(cfg, f, source, models, x, y, manifest.image_shape, ab["method"], ab["param"], value))
        write_json(stem + ".json", {"method": ab["method"], "param": ab["param"], "complete": False, "series": series})
    columns = list(series[0].keys())
    write_csv(stem + ".csv", columns, series)
    write_json(stem + ".json", {"method": ab["method"], "param": ab["param"], "complete": True, "series": series})
    print(f"ablation over {ab['param']}: {len(series)} points written to {stem}.csv")


COMMANDS = {
    "train-classifier": cmd_train_classifier,
    "train-attack": cmd_train_attack,
    "craft": cmd_craft,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
}


def build_parser():
    p = argparse.ArgumentParser(prog="immunekit", description="Craft and evaluate immune examples.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="JSON experiment config")
        s.add_argument("--seed", type=int, default=None, help="unsigned 64-bit seed (overrides the config)")
        s.add_argument("--out", required=True, help="working/output directory")
        if name == "train-attack":
            s.add_argument("--attack", default=None, help="train only this configured attack")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    started = datetime.datetime.now(datetime.timezone.utc).isoformat()
    try:
        cfg = config.load(args.config, args.seed)
        os.makedirs(args.out, exist_ok=True)
        lock = filelock.FileLock(os.path.join(args.out, LOCK_NAME))
        try:
            lock.acquire(timeout=0)
        except filelock.Timeout:
            print(f"error: another command is running in {args.out}", file=sys.stderr)
            return EXIT_BUSY
        try:
            if args.command == "train-attack":
                cmd_train_attack(cfg, args.out, args.attack)
            else:
                COMMANDS[args.command](cfg, args.out)
            _write_metadata(args.out, args.command, cfg, started)
        finally:
            lock.release()
    except (ImmuneKitError, OSError, ValueError, ArithmeticError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
