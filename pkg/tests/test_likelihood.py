import itertools

import numpy as np
import pytest

from ddflow.flow import CouplingLayer, FlowModel, ShuffleLayer, SqueezeLayer
from ddflow.likelihood import (
    BaseDistribution,
    NotFittedError,
    denoise_binary_joint,
    empirical_marginal_entropy,
    evaluate_bpd,
    fit_base,
    optimal_factorized_bits,
)
from ddflow.neural import build_classifier
from ddflow.verify import random_net

WORKED = [[0.4, 0.2], [0.1, 0.3]]


def joint_dataset(joint, n=1000):
    """Points (a, b) drawn in exact proportion to a 2x2 joint."""
    counts = np.round(np.asarray(joint) * n).astype(int)
    return np.array([(a, b) for a, b in itertools.product(range(2), repeat=2) for _ in range(counts[a, b])])


class TestFitBase:
    def test_single_sample(self):
        base = fit_base(np.array([[0]]), 2)
        assert np.allclose(base.probs, [[2 / 3, 1 / 3]])

    def test_uniform_data(self, rng):
        n, k = 200_000, 5
        base = fit_base(rng.integers(0, k, size=(n, 3)), k)
        sigma = np.sqrt((1 / k) * (1 - 1 / k) / n)
        assert np.all(np.abs(base.probs - 1 / k) < 3 * sigma + 1e-12)

    def test_constant_dimension(self, rng):
        z = np.stack([rng.integers(0, 4, size=100), np.full(100, 2)], axis=1)
        assert np.argmax(fit_base(z, 4).probs[1]) == 2

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            fit_base(np.zeros((0, 2), dtype=int), 2)

    def test_invalid_table(self):
        with pytest.raises(ValueError):
            BaseDistribution(np.array([[0.5, 0.6]]))


class TestEvaluate:
    def test_uniform_base_is_one_bit(self, rng):
        model = FlowModel([], 2, (1, 28, 28)).with_base(BaseDistribution(np.full((784, 2), 0.5)))
        rep = evaluate_bpd(model, rng.integers(0, 2, size=(10, 1, 28, 28)))
        assert rep.mean_bpd == 1.0 and np.all(rep.per_sample == 1.0)

    def test_unfitted(self):
        with pytest.raises(NotFittedError):
            evaluate_bpd(FlowModel([], 2, (2,)), np.zeros((1, 2), dtype=int))

    def test_worked_example_end_to_end(self):
        x = joint_dataset(WORKED)
        no_flow = FlowModel([], 2, (2,))
        rep = evaluate_bpd(no_flow.with_base(fit_base(x, 2, alpha=1e-9)), x)
        assert rep.mean_bpd * 2 == pytest.approx(1.971, abs=1e-3)
        net = build_classifier({"kind": "mlp", "hidden": []}, (1,), (1,), 2, seed=0)
        net.layers[0].W[...] = [[1, 0], [0, 1]]
        flow = FlowModel([CouplingLayer(net, 1, 2)], 2, (2,))
        flow = flow.with_base(fit_base(flow.forward(x).z, 2, alpha=1e-9))
        assert evaluate_bpd(flow, x).mean_bpd * 2 == pytest.approx(1.852, abs=1e-3)

    def test_permutation_only_model_conserves_bits(self, rng):
        x = rng.integers(0, 3, size=(200, 2, 4, 4))
        net = random_net({"kind": "conv", "width": 4, "depth": 2}, (4, 2, 2), (4, 2, 2), 3, rng)
        layers = [SqueezeLayer(), ShuffleLayer.random(8, 1), CouplingLayer(net, 4, 2)]
        model = FlowModel(layers, 3, (2, 4, 4))
        z = model.forward(x).z
        model = model.with_base(fit_base(z, 3))
        rep = evaluate_bpd(model, x)
        assert np.array_equal(rep.base_bits, model.base.bits(z))
        assert np.allclose(rep.base_bits, -model.base.log_prob(z) / np.log(2), rtol=1e-12)

    def test_relabeling_invariance(self, rng):
        k = 4
        sigma = rng.permutation(k)
        x = rng.integers(0, k, size=(500, 2))
        x[:, 1] = (x[:, 0] + rng.integers(0, 2, size=500)) % k
        net = random_net({"kind": "mlp", "hidden": []}, (1,), (1,), k, rng)
        relabeled = net.copy()
        # input one-hot rows and output logit columns follow the relabeling
        relabeled.layers[0].W[sigma] = net.layers[0].W
        relabeled.layers[0].W[:, sigma] = relabeled.layers[0].W.copy()
        relabeled.layers[0].b[sigma] = net.layers[0].b

        def bpd(n, data):
            model = FlowModel([CouplingLayer(n, 1, k)], k, (2,))
            return evaluate_bpd(model.with_base(fit_base(model.forward(data).z, k)), data).mean_bpd

        assert bpd(relabeled, sigma[x]) == pytest.approx(bpd(net, x), abs=1e-12)

    def test_no_flow_matches_marginal_entropy(self, rng):
        x = rng.integers(0, 6, size=(20_000, 3)) % 4
        model = FlowModel([], 6, (3,)).with_base(fit_base(x, 6))
        assert evaluate_bpd(model, x).mean_bpd == pytest.approx(empirical_marginal_entropy(x, 6), abs=0.01)

    def test_report_csv(self, rng):
        model = FlowModel([], 2, (2,)).with_base(fit_base(rng.integers(0, 2, size=(10, 2)), 2))
        lines = evaluate_bpd(model, np.zeros((3, 2), dtype=int)).to_csv().splitlines()
        assert lines[0] == "sample,bpd,base_bits" and len(lines) == 4

    def test_batching_does_not_change_bits(self, rng):
        from ddflow.verify import random_model

        model = random_model((1, 4, 4), 3, rng, splitprior=True)
        x = rng.integers(0, 3, size=(70, 1, 4, 4))
        a = evaluate_bpd(model, x, batch_size=256).per_sample
        b = evaluate_bpd(model, x, batch_size=1).per_sample
        assert np.allclose(a, b, rtol=1e-6)


class TestOracles:
    def test_worked_example(self):
        assert optimal_factorized_bits(WORKED) == pytest.approx(1.971, abs=1e-3)
        assert optimal_factorized_bits(denoise_binary_joint(WORKED)) == pytest.approx(1.852, abs=1e-3)

    def test_uniform_and_point_mass(self):
        assert optimal_factorized_bits([[0.25, 0.25], [0.25, 0.25]]) == pytest.approx(2.0)
        assert optimal_factorized_bits([[1, 0], [0, 0]]) == 0.0

    def test_transform_example(self):
        assert np.allclose(denoise_binary_joint(WORKED), [[0.4, 0.2], [0.3, 0.1]])

    def test_sorted_table_is_fixed(self):
        t = np.array([[0.5, 0.1], [0.3, 0.1]])
        assert np.array_equal(denoise_binary_joint(t), t)

    def test_transform_never_hurts(self, rng):
        joints = rng.dirichlet(np.ones(4), size=10_000).reshape(-1, 2, 2)
        gain = optimal_factorized_bits(joints) - optimal_factorized_bits(denoise_binary_joint(joints))
        assert gain.min() >= -1e-12

    def test_invalid_table(self):
        with pytest.raises(ValueError):
            optimal_factorized_bits([[0.5, 0.5], [0.5, 0.5]])
