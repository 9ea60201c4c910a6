import math

import numpy as np
import pytest
import torch

from attnprior.priors import (
    AttentionPrior,
    compute_prior,
    joint_prior,
    kl_divergence,
    load_priors,
    marginalize_prior,
    pretrain_loss_joint,
    pretrain_loss_marginal,
    random_prior_for,
    save_priors,
    uniform_prior_for,
)


class TestMarginalization:
    def test_all_zero_gives_uniform(self):
        alpha, beta = marginalize_prior(torch.zeros(3, 5))
        assert torch.allclose(alpha, torch.full((3,), 1 / 3, dtype=torch.float64))
        assert torch.allclose(beta, torch.full((5,), 1 / 5, dtype=torch.float64))

    def test_single_row(self):
        logits = torch.tensor([[1.0, 2.0, 0.0]])
        _, beta = marginalize_prior(logits)
        assert torch.allclose(beta, torch.softmax(logits[0].double(), dim=0))

    def test_hand_value(self):
        # rows softmax to (2/3, 1/3) and (1/2, 1/2); mean = (7/12, 5/12)
        logits = torch.tensor([[math.log(2.0), 0.0], [0.0, 0.0]], dtype=torch.float64)
        _, beta = marginalize_prior(logits)
        assert torch.allclose(beta, torch.tensor([7 / 12, 5 / 12], dtype=torch.float64))

    def test_on_simplex(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            logits = torch.tensor(rng.normal(size=(int(rng.integers(1, 7)), int(rng.integers(1, 9)))) * 3)
            alpha, beta = marginalize_prior(logits)
            for vec in (alpha, beta):
                assert float(vec.sum()) == pytest.approx(1.0, abs=1e-9)
                assert torch.all(vec >= 0)

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            marginalize_prior(torch.tensor([[1.0, float("inf")]]))


class TestJointPrior:
    def test_all_zero(self):
        out = joint_prior(torch.zeros(2, 2))
        assert torch.allclose(out, torch.full((2, 2), 0.25, dtype=torch.float64))

    def test_hand_value(self):
        logits = torch.zeros(2, 2)
        logits[0, 1] = math.log(3.0)
        out = joint_prior(logits)
        expected = torch.tensor([[1 / 6, 0.5], [1 / 6, 1 / 6]], dtype=torch.float64)
        assert torch.allclose(out, expected)

    def test_sums_to_one(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            out = joint_prior(torch.tensor(rng.normal(size=(4, 6))))
            assert float(out.sum()) == pytest.approx(1.0, abs=1e-9)

    def test_shift_invariance(self):
        logits = torch.tensor(np.random.default_rng(2).normal(size=(3, 4)))
        assert torch.allclose(joint_prior(logits), joint_prior(logits + 17.3))


class TestKl:
    def test_identical_is_zero(self):
        assert float(kl_divergence([0.5, 0.5], [0.5, 0.5])) == pytest.approx(0.0)

    def test_hand_value(self):
        # direct summation: 0.5 ln(0.5/0.25) + 0.5 ln(0.5/0.75)
        expected = 0.5 * math.log(2.0) + 0.5 * math.log(2.0 / 3.0)
        got = float(kl_divergence([0.5, 0.5], [0.25, 0.75]))
        assert got == pytest.approx(expected, abs=1e-12)
        assert got == pytest.approx(0.1438, abs=5e-5)

    def test_asymmetry(self):
        forward = float(kl_divergence([0.5, 0.5], [0.25, 0.75]))
        backward = float(kl_divergence([0.25, 0.75], [0.5, 0.5]))
        expected_back = 0.25 * math.log(0.5) + 0.75 * math.log(1.5)
        assert backward == pytest.approx(expected_back, abs=1e-12)
        assert backward == pytest.approx(0.1308, abs=5e-5)
        assert forward != backward

    def test_zero_numerator_term_dropped(self):
        assert float(kl_divergence([0.0, 1.0], [0.5, 0.5])) == pytest.approx(math.log(2.0))

    def test_zero_denominator_floored(self):
        val = float(kl_divergence([0.5, 0.5], [1.0, 0.0]))
        assert math.isfinite(val) and val > 0

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            kl_divergence([0.5, 0.5], [1.0, 0.0, 0.0])

    def test_nonnegative(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            n = int(rng.integers(2, 9))
            p, q = rng.dirichlet(np.ones(n)), rng.dirichlet(np.ones(n))
            assert float(kl_divergence(p, q)) >= 0.0


class TestPretrainLosses:
    def test_joint_zero_at_match(self):
        logits = torch.tensor(np.random.default_rng(4).normal(size=(2, 3)))
        target = joint_prior(logits)
        assert float(pretrain_loss_joint(target, logits)) == pytest.approx(0.0, abs=1e-12)

    def test_joint_hand_value(self):
        # 1x2 alignment softmaxing to (0.75, 0.25) against uniform attention
        logits = torch.tensor([[math.log(3.0), 0.0]], dtype=torch.float64)
        attention = torch.tensor([[0.5, 0.5]], dtype=torch.float64)
        expected = 0.75 * math.log(1.5) + 0.25 * math.log(0.5)
        assert float(pretrain_loss_joint(attention, logits)) == pytest.approx(expected, abs=1e-12)
        assert float(pretrain_loss_joint(attention, logits)) == pytest.approx(0.1308, abs=5e-5)

    def test_joint_finite_with_full_support(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            logits = torch.tensor(rng.normal(size=(3, 4)))
            attention = torch.tensor(rng.dirichlet(np.ones(12)).reshape(3, 4))
            assert math.isfinite(float(pretrain_loss_joint(attention, logits)))

    def test_joint_shape_mismatch(self):
        with pytest.raises(ValueError):
            pretrain_loss_joint(torch.ones(2, 2) / 4, torch.zeros(2, 3))

    def test_marginal_zero_at_match(self):
        logits = torch.tensor([[math.log(2.0), 0.0], [0.0, 0.0]], dtype=torch.float64)
        _, beta_star = marginalize_prior(logits)
        assert float(pretrain_loss_marginal(beta_star, logits)) == pytest.approx(0.0, abs=1e-12)

    def test_marginal_hand_value(self):
        # KL((7/12, 5/12) || uniform) by direct summation; note the
        # summation value, 0.01395 nats, not the 0.0120 sometimes quoted
        logits = torch.tensor([[math.log(2.0), 0.0], [0.0, 0.0]], dtype=torch.float64)
        expected = (7 / 12) * math.log((7 / 12) / 0.5) + (5 / 12) * math.log((5 / 12) / 0.5)
        got = float(pretrain_loss_marginal(torch.tensor([0.5, 0.5]), logits))
        assert got == pytest.approx(expected, abs=1e-12)
        assert got == pytest.approx(0.013954, abs=5e-6)

    def test_marginal_monotone_on_mixture_path(self):
        logits = torch.tensor([[math.log(2.0), 0.0], [0.0, 0.0]], dtype=torch.float64)
        _, beta_star = marginalize_prior(logits)
        uniform = torch.full((2,), 0.5, dtype=torch.float64)
        vals = []
        for w in (0.0, 0.5, 1.0):
            beta = (1 - w) * uniform + w * beta_star
            vals.append(float(pretrain_loss_marginal(beta, logits)))
        assert vals[0] > vals[1] > vals[2]
        assert vals[2] == pytest.approx(0.0, abs=1e-12)

    def test_positive_off_match(self):
        rng = np.random.default_rng(6)
        logits = torch.tensor(rng.normal(size=(3, 4)))
        beta = torch.tensor(rng.dirichlet(np.ones(4)))
        _, beta_star = marginalize_prior(logits)
        if not torch.allclose(beta, beta_star):
            assert float(pretrain_loss_marginal(beta, logits)) > 0


class TestPriorContainers:
    def test_validate_catches_bad_sum(self):
        bad = AttentionPrior(
            alpha_star=torch.tensor([0.5, 0.4]),
            beta_star=torch.tensor([0.5, 0.5]),
            joint_star=torch.full((2, 2), 0.25),
        )
        with pytest.raises(ValueError):
            bad.validate()

    def test_uniform_and_random(self):
        uni = uniform_prior_for(3, 4).validate()
        assert torch.allclose(uni.beta_star, torch.full((4,), 0.25, dtype=torch.float64))
        rng = np.random.default_rng(7)
        rnd = random_prior_for(3, 4, rng).validate()
        assert rnd.joint_star.shape == (3, 4)
        rnd2 = random_prior_for(3, 4, np.random.default_rng(7)).validate()
        assert torch.equal(rnd.beta_star, rnd2.beta_star)

    def test_save_load_round_trip(self, tmp_path):
        rng = np.random.default_rng(8)
        priors = {f"q-{i}": random_prior_for(2 + i, 3, rng) for i in range(4)}
        path = tmp_path / "priors.jsonl"
        save_priors(path, priors)
        loaded = load_priors(path)
        assert set(loaded) == set(priors)
        for key in priors:
            assert torch.allclose(loaded[key].joint_star, priors[key].joint_star)

    def test_save_is_deterministic(self, tmp_path):
        logits = torch.tensor([[0.3, -0.2], [1.0, 0.0]])
        priors = {"a": compute_prior(logits), "b": compute_prior(logits * 2)}
        p1, p2 = tmp_path / "one.jsonl", tmp_path / "two.jsonl"
        save_priors(p1, priors)
        save_priors(p2, priors)
        assert p1.read_bytes() == p2.read_bytes()
