import json

import pytest

from immunekit import config
from immunekit.errors import UsageError


def test_defaults_fill_in():
    cfg = config.resolve({"version": 1}, seed=3)
    assert cfg["seed"] == 3
    assert cfg["defense"]["tau"] == 64.0 and cfg["defense"]["T"] == 5
    assert cfg["attacks"]["generator"]["epsilon"] == 0.3
    p = config.defense_params(cfg, "OPT")
    assert p["T"] == 1000 and p["method"] == "OPT"
    assert config.defense_params(cfg, "GSD")["T"] == 5


@pytest.mark.parametrize(
    "doc",
    [
        {},
        {"version": 2},
        {"version": 1, "colour": "red"},
        {"version": 1, "data": {"per_klass": 3}},
        {"version": 1, "attacks": {"g": {"kind": "perturb-generator", "epsilon": 0}}},
        {"version": 1, "attacks": {"g": {"kind": "perturb-generator", "epsilon": 1.5}}},
        {"version": 1, "attacks": {"g": {"kind": "laser"}}},
        {"version": 1, "defense": {"alpha": 0}},
        {"version": 1, "defense": {"tau": -1}},
        {"version": 1, "defense": {"methods": ["GSD", "GSD"]}},
        {"version": 1, "defense": {"overrides": {"OPT": {"tau": -2}}}},
        {"version": 1, "defense": {"source": "nowhere"}},
        {"version": 1, "defense": {"source": "iterative"}},
        {"version": 1, "data": {"split": [0.5, 0.5, 0.5]}},
        {"version": 1, "data": {"source": "mnist-idx"}},
        {"version": 1, "ablate": {"values": [3, 2]}},
        {"version": 1, "attacks": {"g": {"kind": "targeted-autoencoder", "target": 12}}, "defense": {"source": "g"}},
    ],
)
def test_rejected(doc):
    with pytest.raises(UsageError):
        config.resolve(doc)


def test_bad_seed_and_json(tmp_path):
    with pytest.raises(UsageError):
        config.resolve({"version": 1}, seed=2**64)
    (tmp_path / "c.json").write_text("{not json")
    with pytest.raises(UsageError):
        config.load(tmp_path / "c.json")
    (tmp_path / "d.json").write_text(json.dumps({"version": 1}))
    assert config.load(tmp_path / "d.json")["version"] == 1


def test_attacks_replace_not_merge():
    cfg = config.resolve({"version": 1, "attacks": {"g": {"kind": "perturb-generator"}}, "defense": {"source": "g"}})
    assert list(cfg["attacks"]) == ["g"]
