"""Attack engine tests: projection, iterate structure, oracles, export."""

import json
import math

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from advlab.attack import (
    AttackConfig,
    export_adversarial_pngs,
    perturbation_metrics,
    pgd_attack,
    project,
)
from advlab.autodiff import Tensor
from advlab.errors import AttackError, DimensionError, ParameterError
from advlab.models import ClassifierSpec, build_model
from conftest import FlatLinearClassifier


class TestAttackConfig:
    def test_zero_epsilon_allowed(self):
        assert AttackConfig(epsilon=0.0).epsilon == 0.0

    def test_invalid_values_rejected(self):
        with pytest.raises(ParameterError):
            AttackConfig(epsilon=1.5)
        with pytest.raises(ParameterError):
            AttackConfig(alpha=0.0)
        with pytest.raises(ParameterError):
            AttackConfig(steps=0)

    def test_dict_roundtrip(self):
        cfg = AttackConfig(epsilon=0.1, alpha=0.02, steps=7, random_start=True)
        assert AttackConfig.from_dict(cfg.to_dict()) == cfg


class TestProject:
    def test_interior_point_unchanged(self):
        x = Tensor(np.array([0.5, 0.52], dtype=np.float32))
        out = project(x, x, epsilon=0.03)
        npt.assert_array_equal(out.data, x.data)

    def test_budget_clamp(self):
        out = project(
            Tensor([0.6], dtype=np.float64),
            Tensor([0.5], dtype=np.float64),
            epsilon=0.03,
        )
        npt.assert_allclose(out.data, [0.53], rtol=1e-12)

    def test_valid_range_dominates(self):
        out = project(
            Tensor([-0.2], dtype=np.float64),
            Tensor([0.01], dtype=np.float64),
            epsilon=0.05,
        )
        npt.assert_allclose(out.data, [0.0], atol=0)

    def test_idempotent_bit_exact(self, rng):
        x = Tensor(rng.uniform(-0.5, 1.5, (3, 4)).astype(np.float32))
        orig = Tensor(rng.uniform(0, 1, (3, 4)).astype(np.float32))
        once = project(x, orig, 0.1)
        twice = project(once, orig, 0.1)
        assert once.data.tobytes() == twice.data.tobytes()

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            project(Tensor(np.zeros(3)), Tensor(np.zeros(4)), 0.1)


def _toy_model():
    weights = np.array([[1.2, -0.7], [-0.4, 0.9]])
    bias = np.array([0.1, -0.2])
    return FlatLinearClassifier(weights, bias)


def _toy_images(values):
    return Tensor(np.asarray(values, dtype=np.float64).reshape(1, 1, 1, 2), dtype=np.float64)


class TestPgdAttack:
    def test_zero_epsilon_is_bit_exact_identity(self, rng):
        model = _toy_model()
        images = Tensor(rng.uniform(0, 1, (4, 1, 1, 2)), dtype=np.float64)
        result = pgd_attack(model, images, np.array([0, 1, 0, 1]), AttackConfig(epsilon=0.0))
        assert result.adversarial.data.tobytes() == images.data.tobytes()
        assert not result.success.any()
        npt.assert_array_equal(result.linf, np.zeros(4))

    def test_single_step_equals_sign_gradient_method(self, rng):
        model = _toy_model()
        images = Tensor(rng.uniform(0.2, 0.8, (3, 1, 1, 2)), dtype=np.float64)
        labels = np.array([0, 1, 1])
        cfg = AttackConfig(epsilon=0.1, alpha=0.04, steps=1)
        result = pgd_attack(model, images, labels, cfg)
        grad = model.input_gradient(images, labels)
        expected = images.data + cfg.alpha * np.sign(grad.data)
        expected = np.clip(expected, np.maximum(images.data - 0.1, 0), np.minimum(images.data + 0.1, 1))
        npt.assert_allclose(result.adversarial.data, expected, rtol=1e-12)

    def test_three_step_trace_matches_scalar_oracle(self):
        """Hand-rolled recurrence: softmax CE gradient, sign step, projection."""
        w = [[1.2, -0.7], [-0.4, 0.9]]
        b = [0.1, -0.2]
        eps, alpha = 0.05, 0.03
        x = [0.50, 0.98]  # second pixel will hit the valid-range ceiling
        orig = list(x)
        label = 0
        trace = []
        for _ in range(3):
            z = [x[0] * w[0][0] + x[1] * w[1][0] + b[0], x[0] * w[0][1] + x[1] * w[1][1] + b[1]]
            m = max(z)
            e = [math.exp(z[0] - m), math.exp(z[1] - m)]
            p = [e[0] / (e[0] + e[1]), e[1] / (e[0] + e[1])]
            d = [p[0] - 1.0 if label == 0 else p[0], p[1] - 1.0 if label == 1 else p[1]]
            grad = [w[0][0] * d[0] + w[0][1] * d[1], w[1][0] * d[0] + w[1][1] * d[1]]
            x = [xi + alpha * (1 if gi > 0 else -1 if gi < 0 else 0) for xi, gi in zip(x, grad)]
            x = [min(max(xi, oi - eps, 0.0), oi + eps, 1.0) for xi, oi in zip(x, orig)]
            trace.append(list(x))

        model = _toy_model()
        for steps in (1, 2, 3):
            cfg = AttackConfig(epsilon=eps, alpha=alpha, steps=steps)
            result = pgd_attack(model, _toy_images(orig), np.array([label]), cfg, record_iterates=True)
            npt.assert_allclose(result.adversarial.data.reshape(2), trace[steps - 1], atol=1e-6)
            # the recorded iterate sequence is the prefix of the same trajectory
            for t in range(steps):
                npt.assert_allclose(result.iterates[t + 1].reshape(2), trace[t], atol=1e-6)

    def test_pre_projection_steps_lie_on_alpha_grid(self, rng):
        model = _toy_model()
        images = Tensor(rng.uniform(0.3, 0.7, (2, 1, 1, 2)), dtype=np.float64)
        labels = np.array([0, 1])
        cfg = AttackConfig(epsilon=0.5, alpha=0.037, steps=4)
        result = pgd_attack(model, images, labels, cfg, record_iterates=True)
        for t in range(cfg.steps):
            grad, _ = model.loss_and_input_gradient(Tensor(result.iterates[t], dtype=np.float64), labels)
            pre = result.iterates[t] + cfg.alpha * np.sign(grad.data)
            deltas = (pre - result.iterates[t]).reshape(-1)
            dist = np.min(np.abs(deltas[:, None] - np.array([-cfg.alpha, 0.0, cfg.alpha])), axis=1)
            assert dist.max() < 1e-7
            # and the recorded next iterate is exactly the projection of it
            lo = np.maximum(images.data - cfg.epsilon, 0.0)
            hi = np.minimum(images.data + cfg.epsilon, 1.0)
            npt.assert_array_equal(result.iterates[t + 1], np.clip(pre, lo, hi))

    def test_containment_randomized(self, rng):
        model = _toy_model()
        for _ in range(25):
            n = int(rng.integers(1, 4))
            images = Tensor(rng.uniform(0, 1, (n, 1, 1, 2)), dtype=np.float64)
            cfg = AttackConfig(
                epsilon=float(rng.uniform(0, 0.3)),
                alpha=float(rng.uniform(0.005, 0.1)),
                steps=int(rng.integers(1, 8)),
                random_start=bool(rng.integers(0, 2)),
            )
            labels = rng.integers(0, 2, n)
            result = pgd_attack(model, images, labels, cfg, seed=int(rng.integers(0, 1000)))
            adv = result.adversarial.data
            assert np.all(np.abs(adv - images.data) <= cfg.epsilon + 1e-6)
            assert adv.min() >= 0.0 and adv.max() <= 1.0
            assert np.all(result.linf <= cfg.epsilon + 1e-6)

    def test_deterministic_given_seed(self, rng):
        model = _toy_model()
        images = Tensor(rng.uniform(0, 1, (3, 1, 1, 2)), dtype=np.float64)
        labels = np.array([0, 1, 0])
        cfg = AttackConfig(epsilon=0.1, alpha=0.02, steps=5, random_start=True)
        a = pgd_attack(model, images, labels, cfg, seed=42)
        b = pgd_attack(model, images, labels, cfg, seed=42)
        assert a.adversarial.data.tobytes() == b.adversarial.data.tobytes()
        npt.assert_array_equal(a.loss_trajectory, b.loss_trajectory)
        c = pgd_attack(model, images, labels, cfg, seed=43)
        assert a.adversarial.data.tobytes() != c.adversarial.data.tobytes()

    def test_loss_trajectory_shape_and_growth(self, rng):
        model = _toy_model()
        images = Tensor(rng.uniform(0.2, 0.8, (5, 1, 1, 2)), dtype=np.float64)
        labels = np.array([0, 1, 0, 1, 0])
        cfg = AttackConfig(epsilon=0.2, alpha=0.05, steps=6)
        result = pgd_attack(model, images, labels, cfg)
        assert result.loss_trajectory.shape == (7, 5)
        # untargeted ascent on a convex-in-x toy loss strictly raises it
        assert np.all(result.loss_trajectory[-1] >= result.loss_trajectory[0])

    def test_model_parameters_untouched(self, rng):
        model = build_model(ClassifierSpec("vgg", resolution=8, channels=1, classes=3), seed=2)
        before = model.checksum()
        images = Tensor(rng.uniform(0, 1, (2, 1, 8, 8)).astype(np.float32))
        pgd_attack(model, images, np.array([0, 1]), AttackConfig(steps=3))
        assert model.checksum() == before
        assert all(p.grad is None for p in model.params.values())

    def test_targeted_mode_descends_toward_target(self, rng):
        model = _toy_model()
        images = Tensor(np.full((4, 1, 1, 2), 0.5), dtype=np.float64)
        target = np.array([1, 1, 1, 1])
        cfg = AttackConfig(epsilon=0.4, alpha=0.05, steps=12, targeted=True)
        result = pgd_attack(model, images, target, cfg)
        from advlab.autodiff import per_sample_cross_entropy

        before = per_sample_cross_entropy(model.forward(images).data, target)
        after = per_sample_cross_entropy(model.forward(result.adversarial).data, target)
        assert np.all(after <= before)

    def test_non_finite_gradient_raises_attack_error(self):
        model = FlatLinearClassifier(np.array([[np.inf, -np.inf]]), np.array([0.0, 0.0]))
        images = Tensor(np.full((1, 1, 1, 1), 0.5), dtype=np.float64)
        with np.errstate(invalid="ignore"), pytest.raises(AttackError):
            pgd_attack(model, images, np.array([0]), AttackConfig(steps=1))


class TestPerturbationMetrics:
    def test_identical_images(self):
        x = Tensor(np.full((2, 1, 2, 2), 0.5, dtype=np.float32))
        linf, l2, psnr = perturbation_metrics(x, x)
        npt.assert_array_equal(linf, [0.0, 0.0])
        npt.assert_array_equal(l2, [0.0, 0.0])
        assert np.all(np.isinf(psnr))

    def test_uniform_shift_norms(self):
        clean = Tensor(np.full((1, 1, 2, 5), 0.5), dtype=np.float64)
        adv = Tensor(clean.data + 0.01, dtype=np.float64)
        linf, l2, psnr = perturbation_metrics(clean, adv)
        npt.assert_allclose(linf, [0.01], rtol=1e-9)
        npt.assert_allclose(l2, [0.01 * np.sqrt(10)], rtol=1e-9)

    def test_psnr_formula(self):
        clean = Tensor(np.zeros((1, 1, 1, 1)), dtype=np.float64)
        adv = Tensor(np.full((1, 1, 1, 1), 0.01), dtype=np.float64)  # MSE = 1e-4
        _, _, psnr = perturbation_metrics(clean, adv)
        npt.assert_allclose(psnr, [40.0], rtol=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            perturbation_metrics(Tensor(np.zeros((1, 2))), Tensor(np.zeros((2, 2))))


class TestPngExport:
    def test_pairs_sidecar_and_quantization_bound(self, rng, tmp_path):
        model = build_model(ClassifierSpec("vgg", resolution=8, channels=3, classes=3), seed=1)
        images = Tensor(
            (np.round(rng.uniform(0, 1, (3, 3, 8, 8)) * 255) / 255).astype(np.float32)
        )
        labels = np.array([0, 1, 2])
        cfg = AttackConfig(steps=2)
        result = pgd_attack(model, images, labels, cfg)
        out = export_adversarial_pngs(images, result, ["a/0", "a/1", "b/0"], tmp_path, cfg)
        sidecar = json.loads((out / "metrics.json").read_text())
        assert sidecar["count"] == 3
        assert len(sidecar["samples"]) == 3
        for record in sidecar["samples"]:
            assert record["quantized_linf"] <= cfg.epsilon + 1.0 / 510.0 + 1e-9
            assert record["linf"] <= cfg.epsilon + 1e-6
        clean_png = np.asarray(Image.open(out / "a_0_clean.png"))
        npt.assert_array_equal(clean_png, np.round(images.data[0].transpose(1, 2, 0) * 255))

    def test_zero_epsilon_pngs_byte_identical(self, rng, tmp_path):
        model = build_model(ClassifierSpec("vgg", resolution=8, channels=3, classes=3), seed=1)
        images = Tensor(
            (np.round(rng.uniform(0, 1, (2, 3, 8, 8)) * 255) / 255).astype(np.float32)
        )
        cfg = AttackConfig(epsilon=0.0)
        result = pgd_attack(model, images, np.array([0, 1]), cfg)
        out = export_adversarial_pngs(images, result, ["x/0", "x/1"], tmp_path, cfg)
        for stem in ("x_0", "x_1"):
            clean = (out / f"{stem}_clean.png").read_bytes()
            adv = (out / f"{stem}_adv.png").read_bytes()
            assert clean == adv


@settings(max_examples=30, deadline=None)
@given(
    eps=st.floats(min_value=0.0, max_value=0.5),
    data_seed=st.integers(min_value=0, max_value=2**16),
)
def test_property_projection_contains_and_is_idempotent(eps, data_seed):
    rng = np.random.default_rng(data_seed)
    orig = Tensor(rng.uniform(0, 1, (2, 3)).astype(np.float32))
    x = Tensor(rng.uniform(-0.5, 1.5, (2, 3)).astype(np.float32))
    out = project(x, orig, eps)
    assert np.all(np.abs(out.data - orig.data) <= eps + 1e-6)
    assert out.data.min() >= 0.0 and out.data.max() <= 1.0
    assert project(out, orig, eps).data.tobytes() == out.data.tobytes()
