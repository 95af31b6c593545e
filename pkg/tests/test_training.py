import math

import numpy as np
import pytest

from raid import synthetic, training
from raid.database import build_database
from raid.moe_filter import FilterConfig, FilterParameters
from raid.training import (
    AnomalyConfig,
    FilterSample,
    TrainConfig,
    balance_loss,
    focal_loss,
    focal_loss_gradient,
    inject_anomaly,
    loss_gradient,
    total_loss,
    train_filter,
)


class TestInjectAnomaly:
    def setup_method(self):
        spec = synthetic.SyntheticSpec(
            num_classes=2, templates_per_class=3, grid_height=6, grid_width=6,
            dim=8, modes_per_class=2,
        )
        self.templates = synthetic.make_templates(spec, seed=0)

    def test_unmasked_cells_untouched(self):
        sample = inject_anomaly(self.templates[0], self.templates[3:], seed=1)
        mask = sample.mask.astype(bool)
        original = self.templates[0].patch_tokens
        corrupted = sample.embedding_set.patch_tokens
        np.testing.assert_array_equal(corrupted[~mask], original[~mask])
        assert (corrupted[mask] != original[mask]).any()

    def test_area_fraction_within_bounds(self):
        for seed in range(40):
            sample = inject_anomaly(self.templates[0], self.templates[3:], seed=seed)
            frac = sample.mask.mean()
            assert 0.02 <= frac <= 0.25

    def test_alpha_one_copies_foreign_tokens(self):
        config = AnomalyConfig(alpha_range=(1.0, 1.0))
        foreign = self.templates[3]
        sample = inject_anomaly(self.templates[0], [foreign], seed=2, config=config)
        mask = sample.mask.astype(bool)
        corrupted = sample.embedding_set.patch_tokens[mask]
        pool = foreign.patch_tokens.reshape(-1, foreign.dim)
        for token in corrupted:
            assert any(np.array_equal(token, p) for p in pool)

    def test_deterministic(self):
        a = inject_anomaly(self.templates[1], self.templates[3:], seed=3)
        b = inject_anomaly(self.templates[1], self.templates[3:], seed=3)
        np.testing.assert_array_equal(a.mask, b.mask)
        np.testing.assert_array_equal(
            a.embedding_set.patch_tokens, b.embedding_set.patch_tokens
        )

    def test_grid_too_small(self):
        from raid.types import TokenEmbeddingSet

        tiny = TokenEmbeddingSet(
            image_id="t",
            cls_token=np.ones(2, dtype=np.float32),
            patch_tokens=np.ones((1, 2, 2), dtype=np.float32),
            source_height=4,
            source_width=4,
        )
        with pytest.raises(ValueError, match="too small"):
            inject_anomaly(tiny, self.templates, seed=4)


class TestFocalLoss:
    def test_perfect_prediction_limit(self):
        mask = np.array([[1, 0], [0, 1]], dtype=np.uint8)
        near_perfect = np.where(mask, 1.0 - 1e-9, 1e-9)
        assert focal_loss(near_perfect, mask) < 1e-6

    def test_gamma_zero_alpha_half_is_half_bce(self):
        rng = np.random.default_rng(0)
        m = rng.uniform(0.05, 0.95, size=(4, 4))
        mask = (rng.uniform(size=(4, 4)) < 0.4).astype(np.uint8)
        got = focal_loss(m, mask, gamma=0.0, alpha=0.5)
        bce = -np.mean(mask * np.log(m) + (1 - mask) * np.log(1 - m))
        assert got == pytest.approx(0.5 * bce, rel=1e-9)

    def test_uniform_half_map_all_normal(self):
        # Frozen oracle value: 0.25 * 0.5^2 * ln 2 = 0.043321698...
        m = np.full((5, 5), 0.5)
        mask = np.zeros((5, 5), dtype=np.uint8)
        assert focal_loss(m, mask, gamma=2.0, alpha=0.75) == pytest.approx(0.043322, abs=1e-5)

    def test_rejects_out_of_range(self):
        mask = np.zeros((2, 2), dtype=np.uint8)
        with pytest.raises(ValueError):
            focal_loss(np.array([[0.0, 0.5], [0.5, 0.5]]), mask)
        with pytest.raises(ValueError):
            focal_loss(np.array([[1.0, 0.5], [0.5, 0.5]]), mask)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            focal_loss(np.full((2, 2), 0.5), np.zeros((3, 3), dtype=np.uint8))

    def test_gradient_matches_finite_difference(self):
        rng = np.random.default_rng(1)
        m = rng.uniform(0.1, 0.9, size=(3, 3))
        mask = (rng.uniform(size=(3, 3)) < 0.5).astype(np.uint8)
        grad = focal_loss_gradient(m, mask)
        h = 1e-7
        for y in range(3):
            for x in range(3):
                up = m.copy(); up[y, x] += h
                dn = m.copy(); dn[y, x] -= h
                fd = (focal_loss(up, mask) - focal_loss(dn, mask)) / (2 * h)
                assert grad[y, x] == pytest.approx(fd, rel=1e-5, abs=1e-10)


class TestBalanceLoss:
    def test_uniform_routing_gives_one(self):
        probs = np.full((12, 3), 1 / 3)
        active = np.zeros((12, 3), dtype=bool)
        # spread activations uniformly: each pair appears equally often
        pairs = [(0, 1), (0, 2), (1, 2)] * 4
        for row, (i, j) in enumerate(pairs):
            active[row, i] = active[row, j] = True
        assert balance_loss(probs, active) == pytest.approx(1.0, abs=1e-12)

    def test_uniform_probs_tie_activation_also_one(self):
        probs = np.full((8, 3), 1 / 3)
        active = np.zeros((8, 3), dtype=bool)
        active[:, 0] = active[:, 1] = True  # tie rule keeps experts 0 and 1
        assert balance_loss(probs, active) == pytest.approx(1.0, abs=1e-12)

    def test_collapsed_routing_exceeds_one(self):
        probs = np.tile(np.array([[0.8, 0.1, 0.1]]), (6, 1))
        active = np.zeros((6, 3), dtype=bool)
        active[:, 0] = True  # k = 1, always expert 0
        value = balance_loss(probs, active)
        assert value == pytest.approx(3 * 0.8, abs=1e-12)
        assert value > 1.0

    def test_single_expert_model_constant(self):
        probs = np.ones((5, 1))
        active = np.ones((5, 1), dtype=bool)
        assert balance_loss(probs, active) == pytest.approx(1.0, abs=1e-12)

    def test_empty_batch(self):
        with pytest.raises(ValueError):
            balance_loss(np.zeros((0, 3)), np.zeros((0, 3), dtype=bool))


class TestTotalLoss:
    def test_lambda_zero_equals_focal(self):
        rng = np.random.default_rng(2)
        m = rng.uniform(0.2, 0.8, size=(3, 3))
        mask = (rng.uniform(size=(3, 3)) < 0.5).astype(np.uint8)
        probs = np.full((2, 3), 1 / 3)
        active = np.zeros((2, 3), dtype=bool)
        active[:, :2] = True
        got = total_loss([m], [mask], probs, active, lambda_bal=0.0)
        assert got.total == got.focal

    def test_arithmetic(self):
        # focal 0.1, balance 1.0, lambda 0.005 -> 0.105
        breakdown = training.LossBreakdown(focal=0.1, balance=1.0, total=0.1 + 0.005 * 1.0, lambda_bal=0.005)
        assert breakdown.total == pytest.approx(0.105)

    def test_breakdown_invariant_random(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            m = rng.uniform(0.2, 0.8, size=(3, 3))
            mask = (rng.uniform(size=(3, 3)) < 0.5).astype(np.uint8)
            probs = np.abs(rng.normal(size=(3, 3)))
            probs /= probs.sum(axis=1, keepdims=True)
            active = np.zeros((3, 3), dtype=bool)
            for row in range(3):
                active[row, np.argsort(-probs[row])[:2]] = True
            lam = float(rng.uniform(0, 0.1))
            got = total_loss([m], [mask], probs, active, lambda_bal=lam)
            assert got.total == pytest.approx(got.focal + lam * got.balance, abs=1e-9)


def random_sample(rng, h=3, w=3, d=4, k=6):
    return FilterSample(
        query_grid=rng.normal(size=(h, w, d)),
        prototype_grid=rng.normal(size=(h, w, d)),
        cost_values=rng.uniform(0, 2, size=(h, w, k)),
        mask=(rng.uniform(size=(h, w)) < 0.3).astype(np.uint8),
    )


class TestLossGradient:
    @pytest.mark.parametrize("config_seed", [11, 23, 57])
    def test_matches_central_finite_differences(self, config_seed):
        rng = np.random.default_rng(config_seed)
        cfg = FilterConfig(dim=4, volume_depth=6, stage1_experts=2, stage2_experts=2, active_experts=1)
        params = FilterParameters.initialize(cfg, seed=config_seed)
        batch = [random_sample(rng), random_sample(rng)]
        grads, _ = loss_gradient(params, batch, lambda_bal=0.005)

        def total(p):
            _, loss = loss_gradient(p, batch, lambda_bal=0.005)
            return loss.total

        h = 1e-4
        for name, tensor in params.param_items():
            flat = tensor.ravel()
            grad_flat = grads[name].ravel()
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                up = total(params)
                flat[i] = orig - h
                down = total(params)
                flat[i] = orig
                fd = (up - down) / (2 * h)
                rel = abs(grad_flat[i] - fd) / (abs(fd) + 1e-8)
                assert rel <= 1e-3, f"{name}[{i}]: analytic {grad_flat[i]}, fd {fd}"

    def test_saturated_correct_prediction_has_tiny_gradient(self):
        rng = np.random.default_rng(4)
        cfg = FilterConfig(dim=4, volume_depth=6, stage1_experts=2, stage2_experts=2, active_experts=1)
        params = FilterParameters.initialize(cfg, seed=5)
        # Saturate every output toward 0 and keep masks all-normal: the focal
        # term vanishes, so with lambda_bal = 0 gradients must vanish too.
        for e in params.experts:
            e.out_bias[...] = -45.0
            e.out_weight[...] = 0.0
        sample = random_sample(rng)
        sample.mask[...] = 0
        grads, loss = loss_gradient(params, [sample], lambda_bal=0.0)
        assert loss.total < 1e-12
        norm = math.sqrt(sum(float((g ** 2).sum()) for g in grads.values()))
        assert norm <= 1e-6

    def test_inactive_sparse_expert_gets_zero_gradient(self):
        rng = np.random.default_rng(6)
        cfg = FilterConfig(dim=4, volume_depth=6, stage1_experts=3, stage2_experts=2, active_experts=1)
        params = FilterParameters.initialize(cfg, seed=7)
        sample = random_sample(rng)
        grads, _ = loss_gradient(params, [sample], lambda_bal=0.005)
        from raid.moe_filter import _forward

        _, cache = _forward(params, sample.query_grid, sample.prototype_grid, sample.cost_values)
        inactive = [i for i in range(3) if i not in cache["active"]]
        assert inactive
        for i in inactive:
            assert np.all(grads[f"stage1.{i}.conv.weight"] == 0.0)
            assert np.all(grads[f"stage1.{i}.conv.bias"] == 0.0)

    def test_empty_batch(self):
        cfg = FilterConfig(dim=4, volume_depth=6)
        params = FilterParameters.initialize(cfg, seed=8)
        with pytest.raises(ValueError):
            loss_gradient(params, [])


class TestTrainFilter:
    def make_world(self):
        spec = synthetic.SyntheticSpec(
            num_classes=2, templates_per_class=4, grid_height=4, grid_width=4,
            dim=6, modes_per_class=2,
        )
        templates = synthetic.make_templates(spec, seed=9)
        db = build_database(templates, 2, 2, seed=10)
        return templates, db

    def make_config(self, epochs=3):
        return TrainConfig(
            epochs=epochs,
            learning_rate=1e-3,
            batch_size=4,
            seed=11,
            k_prime=2,
            k=8,
            stage1_experts=2,
            stage2_experts=2,
            active_experts=1,
        )

    def test_loss_history_finite(self):
        templates, db = self.make_world()
        _, history = train_filter(templates, db, self.make_config())
        assert len(history) == 3
        for row in history:
            assert math.isfinite(row.total)
            assert math.isfinite(row.focal)
            assert math.isfinite(row.balance)

    def test_loss_decreases_on_toy_data(self):
        templates, db = self.make_world()
        _, history = train_filter(templates, db, self.make_config(epochs=12))
        assert history[-1].total < history[0].total

    def test_deterministic_history(self):
        templates, db = self.make_world()
        _, h1 = train_filter(templates, db, self.make_config())
        _, h2 = train_filter(templates, db, self.make_config())
        assert [(r.focal, r.balance, r.total) for r in h1] == [
            (r.focal, r.balance, r.total) for r in h2
        ]
