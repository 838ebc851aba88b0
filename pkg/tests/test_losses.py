import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cycada.losses import (
    LEAST_SQUARES,
    MINIMAX,
    LossWeights,
    cycada_objective,
    cycle_loss,
    gan_loss_discriminator,
    gan_loss_generator,
    pseudo_labels,
    semantic_consistency_loss,
    task_loss,
)

from fd import check_gradient


class TestTaskLoss:
    def test_uniform_logits_give_ln_k(self):
        logits = torch.zeros(5, 10, dtype=torch.float64)
        labels = torch.arange(5) % 10
        assert float(task_loss(logits, labels)) == pytest.approx(math.log(10), abs=1e-9)

    def test_saturated_correct_prediction_is_zero(self):
        logits = torch.zeros(3, 10)
        labels = torch.tensor([2, 5, 9])
        logits[torch.arange(3), labels] = 1000.0
        assert float(task_loss(logits, labels)) < 1e-9

    def test_two_class_closed_form(self):
        # softplus(-1) evaluated by hand
        logits = torch.tensor([[1.0, 0.0]])
        labels = torch.tensor([0])
        expected = math.log(1 + math.exp(-1))
        assert float(task_loss(logits, labels)) == pytest.approx(expected, abs=1e-6)

    def test_rejects_shape_mismatch(self):
        with pytest.raises(ValueError):
            task_loss(torch.zeros(3, 4), torch.zeros(2, dtype=torch.long))

    def test_rejects_nonfinite_logits(self):
        logits = torch.zeros(2, 3)
        logits[0, 0] = float("nan")
        with pytest.raises(ValueError):
            task_loss(logits, torch.zeros(2, dtype=torch.long))

    def test_rejects_out_of_range_labels(self):
        with pytest.raises(ValueError):
            task_loss(torch.zeros(2, 3), torch.tensor([0, 3]))

    @given(st.integers(0, 1000))
    @settings(max_examples=25, deadline=None)
    def test_nonnegative(self, seed):
        gen = torch.Generator().manual_seed(seed)
        logits = torch.randn(4, 6, generator=gen)
        labels = torch.randint(0, 6, (4,), generator=gen)
        assert float(task_loss(logits, labels)) >= 0.0

    def test_gradient_matches_finite_differences(self):
        for seed in range(20):
            gen = torch.Generator().manual_seed(seed)
            logits = torch.randn(4, 5, generator=gen, dtype=torch.float64)
            labels = torch.randint(0, 5, (4,), generator=gen)
            check_gradient(lambda: task_loss(logits, labels), logits)


class TestGanLosses:
    def test_confused_discriminator_minimax(self):
        half = torch.full((7,), 0.5, dtype=torch.float64)
        value = float(gan_loss_discriminator(half, half, MINIMAX))
        assert value == pytest.approx(2 * math.log(2), abs=1e-9)

    def test_perfect_discriminator_minimax(self):
        eps = 1e-9
        real = torch.full((5,), 1.0 - eps, dtype=torch.float64)
        fake = torch.full((5,), eps, dtype=torch.float64)
        assert float(gan_loss_discriminator(real, fake, MINIMAX)) < 1e-6

    def test_perfect_discriminator_least_squares(self):
        real = torch.ones(4)
        fake = torch.zeros(4)
        assert float(gan_loss_discriminator(real, fake, LEAST_SQUARES)) == 0.0

    def test_generator_fooling_minimax(self):
        fake = torch.full((3,), 1 - 1e-9, dtype=torch.float64)
        assert float(gan_loss_generator(fake, MINIMAX)) < 1e-6

    def test_generator_half_minimax(self):
        value = float(gan_loss_generator(torch.full((3,), 0.5, dtype=torch.float64), MINIMAX))
        assert value == pytest.approx(math.log(2), abs=1e-9)

    def test_generator_half_least_squares(self):
        assert float(gan_loss_generator(torch.full((3,), 0.5), LEAST_SQUARES)) == \
            pytest.approx(0.25, abs=1e-9)

    def test_minimax_rejects_probabilities_outside_open_interval(self):
        with pytest.raises(ValueError):
            gan_loss_discriminator(torch.ones(3), torch.full((3,), 0.5), MINIMAX)
        with pytest.raises(ValueError):
            gan_loss_generator(torch.zeros(3), MINIMAX)

    def test_rejects_unknown_variant(self):
        with pytest.raises(ValueError):
            gan_loss_generator(torch.full((3,), 0.5), "wasserstein")

    def test_minimax_minimized_at_correct_decisions(self):
        # on a grid of D values the loss is smallest at D(real)->1, D(fake)->0
        grid = torch.linspace(0.05, 0.95, 10)
        best = min(
            (float(gan_loss_discriminator(torch.full((1,), float(r)),
                                          torch.full((1,), float(f)), MINIMAX)), float(r), float(f))
            for r in grid
            for f in grid
        )
        _, r_best, f_best = best
        assert r_best == pytest.approx(0.95)
        assert f_best == pytest.approx(0.05)

    def test_gradients_match_finite_differences(self):
        for seed in range(20):
            gen = torch.Generator().manual_seed(seed)
            real = torch.rand(6, generator=gen, dtype=torch.float64) * 0.9 + 0.05
            fake = torch.rand(6, generator=gen, dtype=torch.float64) * 0.9 + 0.05
            check_gradient(lambda: gan_loss_discriminator(real, fake, MINIMAX), real)
            check_gradient(lambda: gan_loss_discriminator(real, fake, MINIMAX), fake)
            check_gradient(lambda: gan_loss_generator(fake, MINIMAX), fake)
            raw_real = torch.randn(6, generator=gen, dtype=torch.float64)
            raw_fake = torch.randn(6, generator=gen, dtype=torch.float64)
            check_gradient(
                lambda: gan_loss_discriminator(raw_real, raw_fake, LEAST_SQUARES), raw_real
            )
            check_gradient(lambda: gan_loss_generator(raw_fake, LEAST_SQUARES), raw_fake)


class TestCycleLoss:
    def test_identity_reconstruction_is_zero(self, tiny_images):
        assert float(cycle_loss(tiny_images, tiny_images.clone())) == 0.0

    def test_constant_shift(self):
        a = torch.zeros(2, 1, 4, 4)
        b = torch.full((2, 1, 4, 4), 0.5)
        assert float(cycle_loss(a, b)) == pytest.approx(0.5, abs=1e-9)

    def test_maximal_range_difference(self):
        a = torch.full((1, 1, 3, 3), -1.0)
        b = torch.full((1, 1, 3, 3), 1.0)
        assert float(cycle_loss(a, b)) == pytest.approx(2.0, abs=1e-9)

    def test_rejects_shape_mismatch(self):
        with pytest.raises(ValueError):
            cycle_loss(torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 3, 3))

    @given(st.integers(0, 10_000))
    @settings(max_examples=40, deadline=None)
    def test_symmetry_and_triangle_inequality(self, seed):
        gen = torch.Generator().manual_seed(seed)
        a, b, c = (torch.rand(2, 1, 3, 3, generator=gen) * 2 - 1 for _ in range(3))
        ab = float(cycle_loss(a, b))
        assert ab == pytest.approx(float(cycle_loss(b, a)), abs=1e-7)
        assert ab <= float(cycle_loss(a, c)) + float(cycle_loss(c, b)) + 1e-7

    def test_gradient_matches_finite_differences(self):
        for seed in range(20):
            gen = torch.Generator().manual_seed(seed)
            a = torch.rand(2, 1, 3, 3, generator=gen, dtype=torch.float64) * 1.6 - 0.8
            b = torch.rand(2, 1, 3, 3, generator=gen, dtype=torch.float64) * 1.6 - 0.8
            check_gradient(lambda: cycle_loss(a, b), a)
            check_gradient(lambda: cycle_loss(a, b), b)


class TestPseudoLabels:
    def test_plain_argmax(self):
        logits = torch.tensor([[0.1, 0.9, 0.3], [2.0, -1.0, 0.0]])
        assert pseudo_labels(logits).tolist() == [1, 0]

    def test_tie_breaks_to_lowest_index(self):
        logits = torch.tensor([[1.0, 1.0], [0.5, 0.5]])
        assert pseudo_labels(logits).tolist() == [0, 0]

    @given(st.integers(0, 10_000), st.floats(-50, 50), st.floats(0.01, 100))
    @settings(max_examples=40, deadline=None)
    def test_invariance_under_shift_and_positive_scale(self, seed, shift, scale):
        gen = torch.Generator().manual_seed(seed)
        logits = torch.randn(5, 4, generator=gen)
        base = pseudo_labels(logits)
        assert torch.equal(pseudo_labels(logits + shift), base)
        assert torch.equal(pseudo_labels(logits * scale), base)

    def test_no_gradient_flows(self):
        logits = torch.randn(3, 4, requires_grad=True)
        labels = pseudo_labels(logits)
        assert not labels.requires_grad


class _StubTaskNet(torch.nn.Module):
    """Flatten -> linear classifier; small enough for finite differences."""

    def __init__(self, pixels: int, classes: int, weight: torch.Tensor):
        super().__init__()
        self.linear = torch.nn.Linear(pixels, classes, bias=False).double()
        with torch.no_grad():
            self.linear.weight.copy_(weight)

    def forward(self, x):
        return self.linear(x.reshape(x.shape[0], -1))


class StubHandle:
    def __init__(self, module, frozen=False, feature_fn=None):
        self.module = module
        self.frozen = frozen
        self._feature_fn = feature_fn
        if frozen:
            for p in module.parameters():
                p.requires_grad_(False)

    def __call__(self, x, *, train=False):
        return self.module(x)

    def features(self, x, *, train=False):
        if self._feature_fn is not None:
            return self._feature_fn(x)
        return self.module(x)


def _stub_classifier(seed: int, pixels: int = 16, classes: int = 2, frozen=True):
    gen = torch.Generator().manual_seed(seed)
    weight = torch.randn(classes, pixels, generator=gen, dtype=torch.float64)
    return StubHandle(_StubTaskNet(pixels, classes, weight), frozen=frozen)


class _StubGenerator(torch.nn.Module):
    """Per-pixel affine map squashed by tanh; two parameters."""

    def __init__(self, scale: float, shift: float):
        super().__init__()
        self.scale = torch.nn.Parameter(torch.tensor(scale, dtype=torch.float64))
        self.shift = torch.nn.Parameter(torch.tensor(shift, dtype=torch.float64))

    def forward(self, x):
        return torch.tanh(self.scale * x + self.shift)


class TestSemanticConsistency:
    def test_identity_generators_with_saturated_reference(self, tiny_images):
        f_ref = _stub_classifier(0)
        with torch.no_grad():
            f_ref.module.linear.weight.mul_(1000.0)
        identity = StubHandle(torch.nn.Identity())
        loss = semantic_consistency_loss(f_ref, identity, identity, tiny_images,
                                         tiny_images.clone())
        assert float(loss) < 1e-9

    def test_uniform_reference_gives_two_ln_k(self, tiny_images):
        f_ref = _stub_classifier(0, classes=10)
        with torch.no_grad():
            f_ref.module.linear.weight.zero_()
        identity = StubHandle(torch.nn.Identity())
        loss = semantic_consistency_loss(f_ref, identity, identity, tiny_images,
                                         tiny_images.clone())
        assert float(loss) == pytest.approx(2 * math.log(10), abs=1e-9)

    def test_class_flip_costs_the_margin(self):
        # saturated reference: flipping its predicted class costs ~ the margin
        margin = 1000.0
        f_ref = _stub_classifier(3)
        with torch.no_grad():
            f_ref.module.linear.weight[:] = 0.0
            f_ref.module.linear.weight[0, 0] = margin
            f_ref.module.linear.weight[1, 1] = margin

        base = torch.zeros(1, 1, 4, 4, dtype=torch.float64)
        batch = base.clone()
        batch[0, 0, 0, 0] = 1.0  # pixel 0 on -> class 0 under f_ref

        class Flip(torch.nn.Module):
            def forward(self, x):
                out = x.clone()
                out[:, :, 0, 0] = 0.0
                out[:, :, 0, 1] = 1.0  # pixel 1 on -> class 1
                return out

        loss = semantic_consistency_loss(f_ref, StubHandle(Flip()), StubHandle(Flip()),
                                         batch, batch.clone())
        assert float(loss) >= margin  # two flipped terms, each ~ margin

    def test_requires_frozen_reference(self, tiny_images):
        f_ref = _stub_classifier(0, frozen=False)
        identity = StubHandle(torch.nn.Identity())
        with pytest.raises(ValueError):
            semantic_consistency_loss(f_ref, identity, identity, tiny_images, tiny_images)

    def test_no_gradient_reaches_reference(self, tiny_images):
        f_ref = _stub_classifier(1)
        g_st = StubHandle(_StubGenerator(1.0, 0.1))
        g_ts = StubHandle(_StubGenerator(0.9, -0.1))
        loss = semantic_consistency_loss(f_ref, g_st, g_ts, tiny_images, tiny_images.clone())
        loss.backward()
        assert f_ref.module.linear.weight.grad is None
        assert g_st.module.scale.grad is not None
        assert float(g_st.module.scale.grad.abs()) >= 0.0

    def test_gradient_matches_finite_differences(self):
        for seed in range(20):
            gen = torch.Generator().manual_seed(seed)
            batch_s = (torch.rand(2, 1, 4, 4, generator=gen, dtype=torch.float64) * 2 - 1) * 0.9
            batch_t = (torch.rand(2, 1, 4, 4, generator=gen, dtype=torch.float64) * 2 - 1) * 0.9
            f_ref = _stub_classifier(seed)
            g_st = StubHandle(_StubGenerator(0.8, 0.05))
            g_ts = StubHandle(_StubGenerator(1.1, -0.05))
            params = torch.stack([g_st.module.scale.detach(), g_st.module.shift.detach()])
            params = params.clone()

            def rebuild():
                with torch.no_grad():
                    g_st.module.scale.copy_(params[0])
                    g_st.module.shift.copy_(params[1])
                return semantic_consistency_loss(f_ref, g_st, g_ts, batch_s, batch_t)

            loss = rebuild()
            analytic = torch.stack(
                torch.autograd.grad(loss, [g_st.module.scale, g_st.module.shift])
            )
            from fd import fd_gradient, relative_error

            numeric = fd_gradient(rebuild, params)
            assert relative_error(analytic, numeric) < 1e-4


class TestFeatureGanTerms:
    def _setup(self, seed):
        from cycada.losses import feature_gan_terms

        gen = torch.Generator().manual_seed(seed)
        batch_ts = (torch.rand(2, 1, 4, 4, generator=gen, dtype=torch.float64) * 2 - 1) * 0.9
        batch_t = (torch.rand(2, 1, 4, 4, generator=gen, dtype=torch.float64) * 2 - 1) * 0.9
        f_ref = _stub_classifier(seed, frozen=True)
        f_t = _stub_classifier(seed + 1, frozen=False)
        d_weight = torch.randn(1, 2, generator=gen, dtype=torch.float64)
        d_feat = StubHandle(_StubTaskNet(2, 1, d_weight))
        wrap = lambda h: StubHandle(h.module, frozen=h.frozen)  # noqa: E731
        return feature_gan_terms, f_t, f_ref, d_feat, batch_ts, batch_t

    def test_confused_discriminator_values(self, tiny_images):
        from cycada.losses import feature_gan_terms

        f_ref = _stub_classifier(0, frozen=True)
        f_t = _stub_classifier(1, frozen=False)

        class HalfDisc(torch.nn.Module):
            def forward(self, x):
                return torch.zeros(x.shape[0], dtype=x.dtype)  # sigmoid(0) = 0.5

        disc, gen = feature_gan_terms(f_t, f_ref, StubHandle(HalfDisc()), tiny_images,
                                      tiny_images.clone(), MINIMAX)
        assert float(disc) == pytest.approx(2 * math.log(2), abs=1e-7)
        assert float(gen) == pytest.approx(math.log(2), abs=1e-7)

    def test_matches_termwise_transcription(self):
        # direct transcription of the feature-level GAN objective, term by term
        from cycada.losses import feature_gan_terms, squash_scores

        for seed in range(5):
            fn, f_t, f_ref, d_feat, batch_ts, batch_t = self._setup(seed)
            disc, gen = fn(f_t, f_ref, d_feat, batch_ts, batch_t, MINIMAX)
            p_real = squash_scores(d_feat(f_ref(batch_ts)), MINIMAX)
            p_fake = squash_scores(d_feat(f_t(batch_t)), MINIMAX)
            expected_disc = -(torch.log(p_real).mean() + torch.log(1 - p_fake).mean())
            expected_gen = -torch.log(p_fake).mean()
            assert float(disc) == pytest.approx(float(expected_disc), abs=1e-6)
            assert float(gen) == pytest.approx(float(expected_gen), abs=1e-6)

    def test_rejects_feature_dim_mismatch(self, tiny_images):
        from cycada.losses import feature_gan_terms

        f_ref = _stub_classifier(0, classes=3, frozen=True)
        f_t = _stub_classifier(1, classes=2, frozen=False)
        d_feat = StubHandle(torch.nn.Identity())
        with pytest.raises(ValueError):
            feature_gan_terms(f_t, f_ref, d_feat, tiny_images, tiny_images.clone())

    def test_gradients_match_finite_differences(self):
        from cycada.losses import feature_gan_terms
        from fd import fd_gradient, relative_error

        for seed in range(20):
            fn, f_t, f_ref, d_feat, batch_ts, batch_t = self._setup(seed)
            weight = f_t.module.linear.weight
            snapshot = weight.detach().clone()

            def rebuild():
                with torch.no_grad():
                    weight.copy_(snapshot)
                _, gen_loss = feature_gan_terms(f_t, f_ref, d_feat, batch_ts, batch_t,
                                                MINIMAX)
                return gen_loss

            loss = rebuild()
            (analytic,) = torch.autograd.grad(loss, weight)
            numeric = fd_gradient(rebuild, snapshot)
            assert relative_error(analytic, numeric) < 1e-4


class TestObjective:
    def test_all_zero_weights(self):
        weights = LossWeights(task=0, gan_image=0, gan_feat=0, cycle=0, semantic=0)
        assert float(cycada_objective(weights, {})) == 0.0

    def test_plain_sum(self):
        weights = LossWeights()
        terms = {name: torch.tensor(float(i + 1))
                 for i, name in enumerate(("task", "gan_image", "gan_feat", "cycle",
                                           "semantic"))}
        assert float(cycada_objective(weights, terms)) == pytest.approx(15.0)

    def test_equal_weighting_matches_hand_sum(self, rng):
        values = rng.uniform(0.1, 3.0, size=5)
        names = ("task", "gan_image", "gan_feat", "cycle", "semantic")
        terms = {n: torch.tensor(v) for n, v in zip(names, values)}
        assert float(cycada_objective(LossWeights.equal(), terms)) == \
            pytest.approx(float(values.sum()), rel=1e-12)

    def test_missing_enabled_term_rejected(self):
        with pytest.raises(ValueError):
            cycada_objective(LossWeights(), {"task": torch.tensor(1.0)})

    def test_zero_weight_term_not_required(self):
        weights = LossWeights(task=1.0, gan_image=0, gan_feat=0, cycle=0, semantic=0)
        assert float(cycada_objective(weights, {"task": torch.tensor(2.0)})) == 2.0

    @given(st.floats(0.0, 10.0), st.floats(0.0, 10.0))
    @settings(max_examples=30, deadline=None)
    def test_linear_in_each_weight(self, w1, w2):
        terms = {"task": torch.tensor(3.0, dtype=torch.float64),
                 "cycle": torch.tensor(2.0, dtype=torch.float64)}

        def value(w):
            weights = LossWeights(task=w, gan_image=0, gan_feat=0, cycle=1.0, semantic=0)
            return float(cycada_objective(weights, terms))

        # affine in the weight: value(w) = w * term + constant
        assert value(w1) + value(w2) == pytest.approx(2 * value((w1 + w2) / 2), rel=1e-9,
                                                      abs=1e-9)

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(cycle=-0.1)
