import numpy as np
import pytest

from immunekit import attacks, data
from immunekit.autodiff import Graph, backward, finite_diff_grad, forward
from immunekit.errors import CapabilityError, TrainingError, UndefinedMetricError
from immunekit.models import ModelParams, ClassifierSpec, add_classifier, predict, train_classifier

from conftest import toy_autoencoder, toy_classifier, toy_generator, toy_universal


def chain_loss_graph(f, g, n):
    gr = Graph()
    x = gr.input("x", width=n)
    y = gr.input("y", labels=True)
    gr.set_loss(gr.softmax_ce(add_classifier(gr, attacks.add_attack(gr, x, g), f), y))
    return gr


@pytest.mark.parametrize("make", [toy_generator, toy_autoencoder, toy_universal])
def test_chain_gradient_matches_finite_differences(make):
    f = toy_classifier()
    g = make()
    gen = np.random.default_rng(5)
    x, y = gen.uniform(0.3, 0.7, size=(4, 6)), np.array([0, 1, 2, 1])
    gr = chain_loss_graph(f, g, 6)
    forward(gr, {"x": x, "y": y})
    d = backward(gr, ["x"])["x"]
    fd = finite_diff_grad(lambda v: forward(gr, {"x": v, "y": y}), x)
    assert np.max(np.abs(d - fd) / np.maximum(np.maximum(np.abs(d), np.abs(fd)), 1e-4)) < 1e-4


@pytest.mark.parametrize("make", [toy_generator, toy_autoencoder, toy_universal])
def test_output_in_range_and_ball(make):
    g = make()
    x = np.random.default_rng(0).uniform(size=(50, 6))
    out = attacks.apply_attack(g, x)
    assert out.min() >= 0.0 and out.max() <= 1.0
    assert np.abs(out - x).max() <= g.epsilon + 1e-15


def test_universal_examples():
    g = attacks.AttackModel(attacks.UNIVERSAL, 0.2, delta=np.zeros(3))
    x = np.array([[0.1, 0.5, 0.95]])
    assert np.array_equal(attacks.apply_attack(g, x), x)
    g.delta = np.full(3, 0.1)
    assert attacks.apply_attack(g, x)[0, 2] == 1.0


def test_iterative_sign():
    f = toy_classifier()
    x = np.random.default_rng(1).uniform(size=(5, 6))
    y = predict(f, x)[0]
    assert np.array_equal(attacks.iterative_sign_attack(f, x, y, 0.1, 0, 0.05), x)
    out = attacks.iterative_sign_attack(f, x, y, 0.1, 5, 0.05)
    assert np.abs(out - x).max() <= 0.1 + 1e-15 and out.min() >= 0 and out.max() <= 1


def test_iterative_sign_linear_softmax_step():
    w = np.array([[1.0, -2.0], [-0.5, 0.5], [3.0, 1.0]])
    f = ModelParams(ClassifierSpec((3, 2)), [w], [np.zeros(2)])
    x = np.array([[0.5, 0.5, 0.5]])
    y = np.array([0])
    z = x @ w
    p = np.exp(z) / np.exp(z).sum()
    grad = (p - np.eye(2)[y]) @ w.T
    out = attacks.iterative_sign_attack(f, x, y, 0.1, 1, 0.05)
    assert np.array_equal(out, x + 0.05 * np.sign(grad))


def test_iterative_sign_is_not_a_source():
    g = attacks.iterative_sign_model(toy_classifier(), 0.1)
    assert not g.differentiable
    with pytest.raises(CapabilityError):
        attacks.add_attack(Graph(), 0, g)


def trained_setup():
    ds = data.synth_dataset(0, 60, n=16, n_classes=3, spread=0.1, radius=1.0)
    f, _ = train_classifier(ds, ClassifierSpec((16, 16, 3), seed=1), epochs=15)
    return ds, f


def test_perturb_generator_training():
    ds, f = trained_setup()
    before = [a.copy() for a in f.arrays()]
    cfg = attacks.AttackTrainConfig(epochs=15, hidden=16, lr=1e-2)
    g = attacks.train_perturb_generator(f, ds, 0.3, 4, cfg)
    assert all(a.tobytes() == b.tobytes() for a, b in zip(before, f.arrays()))
    assert attacks.untargeted_asr(f, g, ds.x, ds.y) >= 0.8
    h = attacks.train_perturb_generator(f, ds, 0.3, 4, cfg)
    assert all(a.tobytes() == b.tobytes() for a, b in zip(attacks.param_arrays(g), attacks.param_arrays(h)))
    untrained = attacks.train_perturb_generator(f, ds, 0.3, 4, attacks.AttackTrainConfig(epochs=0, hidden=16))
    base_err = 1 - np.mean(predict(f, ds.x)[0] == ds.y)
    assert attacks.untargeted_asr(f, untrained, ds.x, ds.y) <= base_err + 0.05
    with pytest.raises(TrainingError):
        attacks.train_perturb_generator(f, ds, 0.3, 4, attacks.AttackTrainConfig(epochs=0, hidden=16), min_asr=0.8)


def test_universal_training_and_budget():
    ds, f = trained_setup()
    g = attacks.train_universal_perturbation(f, ds, 0.3, 2, attacks.AttackTrainConfig(epochs=3))
    assert np.abs(g.delta).max() <= 0.3
    assert attacks.untargeted_asr(f, g, ds.x, ds.y) >= 0.5
    z = attacks.train_universal_perturbation(f, ds, 0.0, 2, attacks.AttackTrainConfig(epochs=2))
    assert np.array_equal(z.delta, np.zeros(16))
    assert attacks.untargeted_asr(f, z, ds.x, ds.y) == 0.0


def test_targeted_autoencoder_training():
    ds, f = trained_setup()
    cfg = attacks.AttackTrainConfig(epochs=15, hidden=16, lr=1e-2)
    g = attacks.train_targeted_autoencoder(f, ds, 0, 0.3, 3, cfg)
    assert attacks.targeted_asr(f, g, ds.x, ds.y) >= 0.6
    one = ds.subset(np.nonzero(ds.y == 0)[0])
    with pytest.raises(UndefinedMetricError):
        attacks.targeted_asr(f, g, one.x, one.y)


def test_attack_file_round_trip(tmp_path):
    for g in (toy_generator(), toy_autoencoder(), toy_universal()):
        path = tmp_path / "a.weights"
        attacks.save_attack(g, path)
        h = attacks.load_attack(path)
        assert h.hash() == g.hash()
        assert all(a.tobytes() == b.tobytes() for a, b in zip(attacks.param_arrays(g), attacks.param_arrays(h)))
    f = toy_classifier()
    it = attacks.iterative_sign_model(f, 0.2, 3)
    attacks.save_attack(it, tmp_path / "i.weights")
    assert attacks.load_attack(tmp_path / "i.weights", classifier=f).steps == 3
    with pytest.raises(Exception):
        attacks.load_attack(tmp_path / "i.weights", classifier=toy_classifier(hidden=(3,)))
