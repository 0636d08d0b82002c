"""Self-checks shared by the ``verify`` subcommand and the test suite."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .codec import Codec
from .flow import (
    CouplingLayer,
    FlowModel,
    ShuffleLayer,
    SplitPriorLayer,
    SqueezeLayer,
    build_argsort_top,
    decode_classes,
    encode_classes,
)
from .likelihood import denoise_binary_joint, fit_base, optimal_factorized_bits
from .neural import Conv2d, Dense, ReLU, build_classifier, cross_entropy_loss

WORKED_JOINT = [[0.4, 0.2], [0.1, 0.3]]


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail}"


def random_net(arch, in_shape, out_shape, num_classes, rng, scale=1.0):
    """Network with every weight drawn at random (no zero output layer)."""
    net = build_classifier(arch, in_shape, out_shape, num_classes, int(rng.integers(2**31)))
    for p in net.params:
        p[...] = scale * rng.standard_normal(p.shape)
    return net


def random_model(shape, num_classes, rng, h=None, splitprior=False, arch=None, layers=2, base_samples=64,
                 factor="a"):
    """Random frozen flow: ``layers`` x (shuffle, coupling [, splitprior]), fitted base.

    Image shapes get a leading squeeze.
    """
    shape = tuple(shape)
    k = num_classes
    arch = arch or ({"kind": "mlp", "hidden": [8]} if len(shape) == 1 else {"kind": "conv", "width": 4, "depth": 2})
    built = []
    cur = shape
    if len(shape) == 3 and shape[1] % 2 == 0 and shape[2] % 2 == 0:
        built.append(SqueezeLayer())
        cur = built[-1].output_shape(cur)
    for _ in range(layers):
        if cur[0] < 2:
            break
        built.append(ShuffleLayer.random(cur[0], int(rng.integers(2**31))))
        d = cur[0] // 2
        a, b = (d, *cur[1:]), (cur[0] - d, *cur[1:])
        built.append(CouplingLayer(random_net(arch, a, b, k, rng), d, h if h is not None else int(rng.integers(1, k + 1))))
        if splitprior and cur[0] >= 2:
            factored, kept = (a, b) if factor == "a" else (b, a)
            built.append(SplitPriorLayer(random_net(arch, kept, factored, k, rng), d, factor))
            cur = kept
    model = FlowModel(built, k, shape)
    z = model.forward(rng.integers(0, k, size=(base_samples, *shape))).z
    return model.with_base(fit_base(z, k))


def brute_force_argsort_top(theta, h):
    """Reference: sort all classes by value (stable, descending), keep the first h,
    then write them back into the slots they occupied, in ascending slot order."""
    k = len(theta)
    ranked = sorted(range(k), key=lambda i: (-float(theta[i]), i))[:h]
    slots = sorted(ranked)
    r = list(range(k))
    for slot, cls in zip(slots, ranked):
        r[slot] = cls
    return r


def check_worked_example() -> CheckResult:
    before = optimal_factorized_bits(WORKED_JOINT)
    after = optimal_factorized_bits(denoise_binary_joint(WORKED_JOINT))
    ok = abs(before - 1.971) <= 1e-3 and abs(after - 1.852) <= 1e-3
    return CheckResult("2x2 worked example", ok, f"{before:.4f} -> {after:.4f} bits (expect 1.971 -> 1.852)")


def simplex_grid_joints(steps: int = 51) -> np.ndarray:
    """All 2x2 joints with entries on a ``1/(steps-1)`` lattice of the simplex."""
    m = steps - 1
    g = np.arange(steps)
    p1, p2, p3 = np.meshgrid(g, g, g, indexing="ij")
    keep = p1 + p2 + p3 <= m
    p = np.stack([p1[keep], p2[keep], p3[keep], m - (p1 + p2 + p3)[keep]], axis=1) / m
    return p.reshape(-1, 2, 2)


def check_binary_sweep(n_random: int = 10_000, steps: int = 51, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    joints = np.concatenate([rng.dirichlet(np.ones(4), size=n_random).reshape(-1, 2, 2), simplex_grid_joints(steps)])
    gain = optimal_factorized_bits(joints) - optimal_factorized_bits(denoise_binary_joint(joints))
    worst = float(gain.min())
    return CheckResult("binary denoising sweep", worst >= -1e-12, f"{len(joints)} joints, min gain {worst:.3e} bits")


def check_argsort_top(n: int = 10_000, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(n):
        k = int(rng.integers(1, 9))
        h = int(rng.integers(1, k + 1))
        theta = rng.integers(0, 4, size=k).astype(float) if rng.random() < 0.5 else rng.standard_normal(k)
        if list(build_argsort_top(theta, h)) != brute_force_argsort_top(theta, h):
            bad += 1
    return CheckResult("argsort_top vs brute force", bad == 0, f"{bad} mismatches in {n} draws")


def exhaustive_layer_configs(max_dim: int = 4, max_k: int = 4):
    for dim in range(2, max_dim + 1):
        for k in range(2, max_k + 1):
            for h in range(1, k + 1):
                for d in range(1, dim):
                    yield dim, k, h, d


def check_exhaustive_invertibility(seed: int = 0) -> CheckResult:
    """Every input of every small coupling/splitprior/squeeze config round-trips."""
    rng = np.random.default_rng(seed)
    failures, configs = 0, 0
    for dim, k, h, d in exhaustive_layer_configs():
        xs = np.array(list(itertools.product(range(k), repeat=dim)))
        arch = {"kind": "mlp", "hidden": [6]}
        layer = CouplingLayer(random_net(arch, (d,), (dim - d,), k, rng), d, h)
        model = FlowModel([ShuffleLayer.random(dim, int(rng.integers(2**31))), layer], k, (dim,))
        z = model.forward(xs).z
        configs += 1
        # bijection on the full alphabet and exact inverse
        if len({tuple(r) for r in z}) != len(xs) or not np.array_equal(model.inverse(z), xs):
            failures += 1
        split = FlowModel([layer, SplitPriorLayer(random_net(arch, (dim - d,), (d,), k, rng), d, "a")], k, (dim,))
        out = split.forward(xs)
        configs += 1
        if not np.array_equal(split.inverse(out.z, out.factored), xs):
            failures += 1
    for k in range(2, 5):
        xs = np.array(list(itertools.product(range(k), repeat=4))).reshape(-1, 1, 2, 2)
        sq = SqueezeLayer()
        configs += 1
        if not np.array_equal(sq.inverse(sq.forward(xs)), xs):
            failures += 1
    return CheckResult("exhaustive invertibility", failures == 0, f"{failures} failing of {configs} configurations")


def check_random_model_roundtrips(n: int = 1000, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    bad = 0
    cases = [((6,), 5, False, "a"), ((1, 4, 4), 3, True, "a"), ((1, 4, 4), 3, True, "b"), ((2, 4, 8), 8, True, "b")]
    for shape, k, split, factor in cases:
        model = random_model(shape, k, rng, splitprior=split, factor=factor)
        x = rng.integers(0, k, size=(n, *shape))
        out = model.forward(x)
        bad += int(np.sum(np.any((model.inverse(out.z, out.factored) != x).reshape(n, -1), axis=1)))
    return CheckResult("random model round trips", bad == 0, f"{bad} mismatching samples")


def check_codec_roundtrip(n: int = 50, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    bad = 0
    for shape, k, split, factor in [((4,), 6, False, "a"), ((1, 4, 4), 2, True, "a"), ((1, 4, 4), 3, True, "b")]:
        codec = Codec(random_model(shape, k, rng, splitprior=split, factor=factor))
        x = rng.integers(0, k, size=(n, *shape))
        for i in range(n):
            if not np.array_equal(codec.decompress(codec.compress(x[i:i + 1]).to_bytes()).values, x[i]):
                bad += 1
    return CheckResult("codec round trip", bad == 0, f"{bad} mismatching samples")


def _rel_err(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def numeric_gradient(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. array ``x`` (perturbed in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        up = f()
        x[i] = old - eps
        down = f()
        x[i] = old
        g[i] = (up - down) / (2 * eps)
    return g


def layer_gradient_errors(layer, x: np.ndarray, rng) -> dict[str, float]:
    """Relative error of analytic vs numeric gradients for ``sum(R * layer(x))``.

    Keys are ``"input"`` and one entry per parameter array.
    """
    probe = rng.standard_normal(layer.forward(x).shape)
    loss = lambda: float(np.sum(probe * layer.forward(x)))
    loss()
    dx, grads = layer.backward(probe, need_dx=True)
    errors = {"input": _rel_err(dx, numeric_gradient(loss, x))}
    for name, p, g in zip(("W", "b"), layer.params, grads):
        errors[name] = _rel_err(g, numeric_gradient(loss, p))
    return errors


def network_gradient_errors(arch, in_shape, out_shape, num_classes, rng) -> dict[str, float]:
    """Cross-entropy gradients of a whole float64 classifier, parameter by parameter."""
    net = build_classifier(arch, in_shape, out_shape, num_classes, int(rng.integers(2**31)), dtype=np.float64)
    for p in net.params:
        p[...] = 0.5 * rng.standard_normal(p.shape)
    part = rng.integers(0, num_classes, size=(3, *in_shape))
    target = rng.integers(0, num_classes, size=(3, *out_shape))
    loss = lambda: cross_entropy_loss(net.forward(part), target)[0]
    _, g_logits = cross_entropy_loss(net.forward(part), target)
    grads, _ = net.backward(g_logits)
    return {f"param{i}": _rel_err(g, numeric_gradient(loss, p)) for i, (p, g) in enumerate(zip(net.params, grads))}


def _randomized(layer, rng):
    for p in layer.params:
        p[...] = rng.standard_normal(p.shape)
    return layer


def check_gradients(seed: int = 0, tol: float = 1e-4) -> CheckResult:
    rng = np.random.default_rng(seed)
    f64 = np.float64
    # inputs kept away from the ReLU kink so central differences stay smooth
    relu_x = rng.standard_normal((4, 5))
    relu_x += np.sign(relu_x) * 0.1
    cases = {
        "dense": layer_gradient_errors(_randomized(Dense(5, 4, f64), rng), rng.standard_normal((3, 5)), rng),
        "conv": layer_gradient_errors(_randomized(Conv2d(2, 3, 3, f64), rng), rng.standard_normal((2, 4, 5, 2)), rng),
        "relu": layer_gradient_errors(ReLU(), relu_x, rng),
        "mlp": network_gradient_errors({"kind": "mlp", "hidden": [5]}, (2,), (3,), 3, rng),
        "convnet": network_gradient_errors({"kind": "conv", "width": 5, "depth": 2}, (1, 3, 4), (2, 3, 4), 2, rng),
    }
    worst_name, worst = max(((f"{c}.{k}", v) for c, errs in cases.items() for k, v in errs.items()), key=lambda t: t[1])
    return CheckResult("gradient checks", worst <= tol, f"worst relative error {worst:.2e} ({worst_name})")


def run_all(seed: int = 0) -> list[CheckResult]:
    return [
        check_worked_example(),
        check_binary_sweep(seed=seed),
        check_argsort_top(seed=seed),
        check_exhaustive_invertibility(seed=seed),
        check_random_model_roundtrips(seed=seed),
        check_codec_roundtrip(seed=seed),
        check_gradients(seed=seed),
    ]
