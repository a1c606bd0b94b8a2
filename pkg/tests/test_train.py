"""Synthetic two-domain task, finite-difference gradients and training loop."""

import numpy as np
import pytest

from stainsep.head import HeadWeights, project_density
from stainsep.imagery import to_optical_density
from stainsep.train import (
    Classifier,
    DomainSpec,
    TrainConfig,
    evaluate_accuracy,
    fd_gradient,
    make_synthetic_domains,
    model_loss,
    pack_parameters,
    pooled_features,
    train_loop,
    unpack_parameters,
    zero_classifier,
)
from stainsep.unroll import SolverConfig, decompose, default_params


def small_spec(per_domain=4, size=16):
    return DomainSpec(width=size, height=size, per_domain=per_domain)


class TestSyntheticDomains:
    def test_same_seed_is_bit_identical(self):
        a = make_synthetic_domains(3, small_spec())
        b = make_synthetic_domains(3, small_spec())
        assert a.labels.tolist() == b.labels.tolist()
        assert a.domains == b.domains
        for img_a, img_b in zip(a.images, b.images):
            np.testing.assert_array_equal(img_a.data, img_b.data)

    def test_negatives_have_zero_target_density(self):
        ds = make_synthetic_domains(0, small_spec(per_domain=6))
        for label, target in zip(ds.labels, ds.target_density):
            if label == 0:
                assert np.all(target == 0.0)
            else:
                assert target.max() > 0.0

    def test_both_domains_contain_both_labels(self):
        ds = make_synthetic_domains(1, small_spec())
        for dom in "AB":
            labels = {lab for lab, d in zip(ds.labels, ds.domains) if d == dom}
            assert labels == {0, 1}

    def test_domain_mean_colors_differ(self):
        ds = make_synthetic_domains(0)
        means = {}
        for dom in "AB":
            imgs = [im for im, d in zip(ds.images, ds.domains) if d == dom]
            means[dom] = np.mean([im.data.mean(axis=1) for im in imgs], axis=0)
        assert np.all(np.abs(means["A"] - means["B"]) >= 0.05)

    def test_degenerate_stain_angle_rejected(self):
        stains = np.array([[0.7, 0.71], [0.5, 0.5], [0.5, 0.49]])
        stains /= np.linalg.norm(stains, axis=0, keepdims=True)
        with pytest.raises(ValueError):
            DomainSpec(stains_a=stains)

    def test_odd_per_domain_rejected(self):
        with pytest.raises(ValueError):
            DomainSpec(per_domain=5)


class TestModelLoss:
    def test_zero_classifier_gives_ln2(self):
        ds = make_synthetic_domains(0, small_spec())
        params = default_params(3, 4, seed=0)
        loss = model_loss(params, zero_classifier(), ds.batch("A"), SolverConfig(rank=4))
        assert loss == np.log(2.0)

    def test_duplicated_batch_preserves_loss(self):
        ds = make_synthetic_domains(1, small_spec())
        params = default_params(3, 4, seed=0)
        clf = Classifier(np.linspace(-0.5, 0.5, 6), 0.1)
        batch = ds.batch("A")[:4]
        cfg = SolverConfig(rank=4)
        assert model_loss(params, clf, batch, cfg) == model_loss(
            params, clf, batch + batch, cfg
        )

    def test_matches_composition_of_tested_ops(self):
        ds = make_synthetic_domains(2, small_spec())
        params = default_params(3, 4, seed=1)
        clf = Classifier(np.array([0.3, -0.2, 0.5, 0.1, -0.4, 0.2]), -0.05)
        batch = ds.batch("B")[:5]
        cfg = SolverConfig(rank=4)
        losses = []
        for img, label in batch:
            model = decompose(to_optical_density(img), params, cfg)
            projected = project_density(model, HeadWeights(params.head), img.width, img.height)
            logit = float(clf.weights @ pooled_features(projected) + clf.bias)
            losses.append(np.logaddexp(0.0, (1 - 2 * label) * logit))
        assert model_loss(params, clf, batch, cfg) == pytest.approx(
            np.mean(losses), rel=1e-9
        )

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError):
            model_loss(default_params(3, 4), zero_classifier(), [])


class TestFdGradient:
    def test_quadratic_is_exact(self):
        grad = fd_gradient(lambda p: float(p @ p), np.array([1.0, 2.0]), 1e-4)
        np.testing.assert_allclose(grad, [2.0, 4.0], atol=1e-8)

    def test_constant_function_gives_zero(self):
        grad = fd_gradient(lambda p: 3.5, np.array([0.3, -0.7, 1.1]), 1e-4)
        np.testing.assert_array_equal(grad, np.zeros(3))

    def test_richardson_error_ratio_near_four(self):
        # central differences have O(h^2) truncation error, so halving h
        # divides the error by about four on a smooth non-quadratic function
        point = np.array([0.3, -0.2])
        exact = np.exp(point.sum()) * np.ones(2)
        err_h = np.abs(fd_gradient(lambda p: float(np.exp(p.sum())), point, 1e-2) - exact)
        err_half = np.abs(fd_gradient(lambda p: float(np.exp(p.sum())), point, 5e-3) - exact)
        ratio = err_h / err_half
        assert np.all(ratio > 3.0) and np.all(ratio < 5.0)

    def test_nonfinite_evaluation_raises(self):
        def bad(p):
            return float("inf") if p[0] > 0.5 else 0.0

        with pytest.raises(ArithmeticError):
            fd_gradient(bad, np.array([0.5]), 0.1)

    def test_nonpositive_step_rejected(self):
        with pytest.raises(ValueError):
            fd_gradient(lambda p: 0.0, np.zeros(2), 0.0)

    def test_model_loss_richardson_agreement_at_generic_point(self):
        # reduced-size version of the gradient sanity acceptance criterion
        ds = make_synthetic_domains(0, small_spec(per_domain=4, size=14))
        params = default_params(3, 4, seed=0)
        clf = Classifier(np.array([0.25, -0.15, 0.3, 0.2, -0.1, 0.15]), 0.05)
        batch = ds.batch("A")
        cfg = SolverConfig(rank=4)
        vec = pack_parameters(params, clf)

        def loss_at(v):
            p, c = unpack_parameters(v, 3, 4, clamp=True)
            return model_loss(p, c, batch, cfg)

        g_h = fd_gradient(loss_at, vec, 1e-4)
        g_half = fd_gradient(loss_at, vec, 5e-5)
        mask = np.abs(g_half) > 1e-6
        assert mask.any()
        rel = np.abs(g_h[mask] - g_half[mask]) / np.abs(g_half[mask])
        assert rel.max() < 1e-3


class TestPackUnpack:
    def test_round_trip(self):
        params = default_params(3, 5, seed=2)
        clf = Classifier(np.arange(6, dtype=float), -1.25)
        vec = pack_parameters(params, clf)
        assert vec.size == 3 * 5 + 2 + 3 * 5 + 7
        p2, c2 = unpack_parameters(vec, 3, 5)
        np.testing.assert_array_equal(p2.s_init, params.s_init)
        np.testing.assert_array_equal(p2.head, params.head)
        assert (p2.gamma, p2.lam) == (params.gamma, params.lam)
        np.testing.assert_array_equal(c2.weights, clf.weights)
        assert c2.bias == clf.bias

    def test_clamping_restores_feasibility(self):
        params = default_params(3, 2, seed=0)
        vec = pack_parameters(params, zero_classifier())
        vec[:8] = -1.0  # s_init, gamma, lam all negative
        p2, _ = unpack_parameters(vec, 3, 2, clamp=True)
        assert p2.s_init.min() >= 0.0 and p2.gamma >= 0.0 and p2.lam >= 0.0


class TestEvaluateAccuracy:
    def test_label_flip_complements_accuracy(self):
        ds = make_synthetic_domains(4, small_spec())
        params = default_params(3, 4, seed=0)
        clf = Classifier(np.array([0.4, -0.3, 0.2, 0.5, -0.2, 0.3]), 0.01)
        flipped = Classifier(-clf.weights, -clf.bias)
        acc = evaluate_accuracy(params, clf, ds, "A", SolverConfig(rank=4))
        acc_flipped = evaluate_accuracy(params, flipped, ds, "A", SolverConfig(rank=4))
        assert acc + acc_flipped == pytest.approx(1.0)

    def test_matches_manual_confusion_count(self):
        ds = make_synthetic_domains(5, small_spec(per_domain=6, size=14))
        params = default_params(3, 4, seed=0)
        clf = Classifier(np.array([0.3, 0.1, -0.2, 0.4, 0.2, -0.1]), -0.02)
        cfg = SolverConfig(rank=4)
        batch = ds.batch("B")
        hits = 0
        for img, label in batch:
            model = decompose(to_optical_density(img), params, cfg)
            projected = project_density(model, HeadWeights(params.head), img.width, img.height)
            logit = float(clf.weights @ pooled_features(projected) + clf.bias)
            hits += int((logit > 0) == bool(label))
        assert evaluate_accuracy(params, clf, ds, "B", cfg) == hits / len(batch)

    def test_empty_domain_rejected(self):
        ds = make_synthetic_domains(0, small_spec())
        with pytest.raises(ValueError):
            evaluate_accuracy(default_params(3, 4), zero_classifier(), ds, "C")

    def test_perfect_model_scores_one(self):
        # trained long enough on an easy split, train accuracy reaches 1.0
        spec = DomainSpec(width=16, height=16, per_domain=6,
                          structure_amp=(3.5, 4.5), context_amp=(0.4, 0.8))
        ds = make_synthetic_domains(0, spec)
        params = default_params(3, 4, seed=0)
        _, clf, history = train_loop(
            params, zero_classifier(), ds,
            TrainConfig(epochs=12, learning_rate=1.0), train_params=False,
        )
        assert history[-1]["acc_a"] == 1.0


class TestTrainLoop:
    def test_zero_learning_rate_keeps_everything_flat(self):
        ds = make_synthetic_domains(0, small_spec())
        params = default_params(3, 4, seed=0)
        with pytest.raises(ValueError):
            TrainConfig(learning_rate=0.0)
        # smallest positive rate: parameters move negligibly, history repeats
        out_params, _, history = train_loop(
            params, zero_classifier(), ds, TrainConfig(epochs=3, learning_rate=1e-300)
        )
        np.testing.assert_array_equal(out_params.s_init, params.s_init)
        assert all(rec["loss"] == history[0]["loss"] for rec in history)

    def test_history_shape_and_determinism(self):
        ds = make_synthetic_domains(1, small_spec())
        params = default_params(3, 4, seed=0)
        cfg = TrainConfig(epochs=2, learning_rate=0.3)
        _, _, h1 = train_loop(params, zero_classifier(), ds, cfg)
        _, _, h2 = train_loop(params, zero_classifier(), ds, cfg)
        assert len(h1) == 3
        assert h1 == h2
        assert {"epoch", "loss", "acc_a", "acc_b"} <= set(h1[0])

    def test_nonneg_clamping_after_steps(self):
        ds = make_synthetic_domains(2, small_spec())
        params = default_params(3, 4, seed=0)
        out_params, _, _ = train_loop(
            params, zero_classifier(), ds, TrainConfig(epochs=3, learning_rate=5.0)
        )
        assert out_params.s_init.min() >= 0.0
        assert out_params.gamma >= 0.0 and out_params.lam >= 0.0

    def test_divergence_aborts_with_diagnostic(self):
        ds = make_synthetic_domains(3, small_spec())
        params = default_params(3, 4, seed=0)
        with pytest.raises(ArithmeticError):
            train_loop(params, zero_classifier(), ds,
                       TrainConfig(epochs=4, learning_rate=1e180))

    def test_frozen_arm_only_moves_classifier(self):
        ds = make_synthetic_domains(0, small_spec())
        params = default_params(3, 4, seed=0)
        out_params, out_clf, _ = train_loop(
            params, zero_classifier(), ds,
            TrainConfig(epochs=2, learning_rate=0.5), train_params=False,
        )
        np.testing.assert_array_equal(out_params.s_init, params.s_init)
        np.testing.assert_array_equal(out_params.head, params.head)
        assert (out_params.gamma, out_params.lam) == (params.gamma, params.lam)
        assert np.any(out_clf.weights != 0.0)
