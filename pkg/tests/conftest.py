import numpy as np
import pytest

from immunekit import attacks, config, pipeline
from immunekit.models import ClassifierSpec, init_params


def toy_classifier(n=6, classes=3, hidden=(5,), act="tanh", seed=0):
    spec = ClassifierSpec((n, *hidden, classes), (act,) * len(hidden), seed)
    return init_params(spec)


def toy_generator(n=6, hidden=4, eps=0.15, seed=1, scale=1.0):
    gen = np.random.default_rng(seed)
    w = [gen.normal(0, scale, (n, hidden)), gen.normal(0, scale, (hidden, n))]
    b = [gen.normal(0, 0.1, hidden), gen.normal(0, 0.1, n)]
    return attacks.AttackModel(attacks.PERTURB, eps, w, b)


def toy_autoencoder(n=6, hidden=4, eps=0.2, seed=2, target=0):
    gen = np.random.default_rng(seed)
    w = [gen.normal(0, 1, (n, hidden)), gen.normal(0, 1, (hidden, n))]
    b = [gen.normal(0, 0.1, hidden), gen.normal(0, 0.1, n)]
    return attacks.AttackModel(attacks.TARGETED, eps, w, b, target=target)


def toy_universal(n=6, eps=0.1, seed=3):
    delta = np.random.default_rng(seed).uniform(-eps, eps, n)
    return attacks.AttackModel(attacks.UNIVERSAL, eps, delta=delta)


SMALL = {
    "version": 1,
    "data": {"per_class": 40},
    "classifier": {"hidden": [64], "epochs": 8, "min_accuracy": 0.0},
    "attacks": {
        "generator": {"kind": "perturb-generator", "epochs": 6, "hidden": 64, "min_asr": None},
        "universal": {"kind": "universal-perturbation", "epochs": 3, "min_asr": None},
    },
    "defense": {"source": "generator", "methods": ["GSD", "MGSD"]},
    "evaluate": {"n_eval": 64},
}


@pytest.fixture(scope="session")
def desk():
    """A small trained stroke-data pipeline shared by the slower tests."""
    cfg = config.resolve(SMALL, 0)
    (train, val, test), manifest = pipeline.build_dataset(cfg)
    f, _ = pipeline.fit_classifier(cfg, train, test)
    g, _ = pipeline.fit_attack(cfg, "generator", f, train, val)
    u, _ = pipeline.fit_attack(cfg, "universal", f, train, val)
    return {"cfg": cfg, "train": train, "val": val, "test": test, "manifest": manifest, "f": f, "g": g, "u": u}


def idx_images(count=3, rows=2, cols=2):
    import struct

    body = bytes(range(count * rows * cols))
    return struct.pack(">IIII", 0x803, count, rows, cols) + body


def idx_labels(labels=(0, 1, 2)):
    import struct

    return struct.pack(">II", 0x801, len(labels)) + bytes(labels)


def malformed_idx_streams():
    """Twenty broken IDX streams as (name, "images" | "labels", bytes)."""
    import gzip
    import struct

    img, lab = idx_images(), idx_labels()
    return [
        ("empty-images", "images", b""),
        ("two-byte-images", "images", img[:2]),
        ("label-magic-as-images", "images", struct.pack(">I", 0x801) + img[4:]),
        ("zero-magic-images", "images", b"\0\0\0\0" + img[4:]),
        ("byte-swapped-magic", "images", struct.pack("<I", 0x803) + img[4:]),
        ("header-cut", "images", img[:10]),
        ("header-only", "images", img[:16]),
        ("payload-short", "images", img[:-1]),
        ("payload-long", "images", img + b"\0"),
        ("zero-rows", "images", struct.pack(">IIII", 0x803, 3, 0, 2)),
        ("zero-cols", "images", struct.pack(">IIII", 0x803, 3, 2, 0)),
        ("count-too-large", "images", struct.pack(">IIII", 0x803, 4, 2, 2) + img[16:]),
        ("text-file", "images", b"not an idx file at all\n"),
        ("empty-labels", "labels", b""),
        ("image-magic-as-labels", "labels", struct.pack(">I", 0x803) + lab[4:]),
        ("label-header-cut", "labels", lab[:6]),
        ("labels-short", "labels", lab[:-1]),
        ("labels-long", "labels", lab + b"\x01"),
        ("label-count-zero-with-data", "labels", struct.pack(">II", 0x801, 0) + b"\x01"),
        ("truncated-gzip", "images", gzip.compress(img)[:-8]),
    ]


def run_pipeline(out, doc, seed=0, steps=("train-classifier", "train-attack", "craft", "evaluate")):
    """Write ``doc`` as a config and run the CLI steps in ``out``; returns the exit codes."""
    import json
    import os

    from immunekit import cli

    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, "config.json")
    with open(path, "w") as fh:
        json.dump(doc, fh)
    return [cli.main([step, "--config", path, "--seed", str(seed), "--out", str(out)]) for step in steps]
