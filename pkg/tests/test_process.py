"""Forward process: marginals, sampling, posteriors, backend agreement."""

import numpy as np
import pytest
from scipy import stats

from d3pm.exceptions import InvalidSpecError, UnreachableStateError
from d3pm.process import (Categorical, ForwardProcess, SequenceBatch,
                          marginal_dist, posterior_dist, sample_forward,
                          sample_stationary)
from d3pm.schedule import make_schedule
from d3pm.transition import TransitionSpec
from d3pm.verify import brute_posterior
from d3pm.util import rng_from_seed

from test_transition import family_specs


def uniform_process(K=4, T=4, beta=0.3):
    return ForwardProcess(TransitionSpec("uniform", K),
                          make_schedule("linear", T, beta_min=beta, beta_max=beta))


class TestDomainTypes:
    def test_categorical_validation(self):
        Categorical(np.array([0.5, 0.5]))
        with pytest.raises(InvalidSpecError):
            Categorical(np.array([0.5, 0.6]))
        with pytest.raises(InvalidSpecError):
            Categorical(np.array([1.1, -0.1]))

    def test_batch_validation(self):
        SequenceBatch(np.zeros((2, 3), dtype=int), 4)
        with pytest.raises(InvalidSpecError):
            SequenceBatch(np.full((2, 3), 4), 4)
        with pytest.raises(InvalidSpecError):
            SequenceBatch(np.zeros(3, dtype=int), 4)

    def test_batch_immutable(self):
        batch = SequenceBatch(np.zeros((2, 3), dtype=int), 4)
        with pytest.raises(ValueError):
            batch.data[0, 0] = 1


class TestMarginal:
    def test_identity_kernel_is_delta(self):
        dist = marginal_dist(2, np.eye(4))
        np.testing.assert_array_equal(dist.probs, [0, 0, 1, 0])

    def test_absorbing_half_life(self):
        # keep probability 1/2: mass splits between origin and the mask
        spec = TransitionSpec("absorbing", 4, absorbing_index=3)
        proc = ForwardProcess(spec, make_schedule("linear", 1, beta_min=0.5,
                                                  beta_max=0.5))
        dist = proc.marginal(0, 1)
        np.testing.assert_allclose(dist.probs, [0.5, 0.0, 0.0, 0.5], atol=1e-15)

    def test_uniform_two_step_row(self):
        proc = uniform_process(K=2, T=2, beta=0.5)
        dist = proc.marginal(0, 2)
        np.testing.assert_allclose(dist.probs, [0.625, 0.375], atol=1e-15)

    def test_index_out_of_range(self):
        proc = uniform_process()
        with pytest.raises(InvalidSpecError):
            proc.marginal(7, 1)


class TestSampleForward:
    def test_zero_noise_is_identity(self):
        proc = uniform_process(K=5, T=3, beta=0.0)
        batch = SequenceBatch(np.arange(10).reshape(5, 2) % 5, 5)
        out = proc.sample_forward(batch, 3, seed=0)
        np.testing.assert_array_equal(out.data, batch.data)

    def test_jacobi_final_step_all_mask(self):
        spec = TransitionSpec("absorbing", 6, absorbing_index=2)
        proc = ForwardProcess(spec, make_schedule("jacobi", 5))
        batch = SequenceBatch(np.array([[0, 1, 3], [4, 5, 0]]), 6)
        out = proc.sample_forward(batch, 5, seed=1)
        assert np.all(out.data == 2)

    def test_deterministic_given_seed(self):
        proc = uniform_process(K=8, T=4)
        batch = SequenceBatch(np.zeros((50, 3), dtype=int), 8)
        a = proc.sample_forward(batch, 2, seed=42)
        b = proc.sample_forward(batch, 2, seed=42)
        np.testing.assert_array_equal(a.data, b.data)
        c = proc.sample_forward(batch, 2, seed=43)
        assert np.any(a.data != c.data)

    def test_frequencies_match_marginal(self):
        # 1e4 draws at fixed (x0, t) within 4-sigma binomial bounds per category
        proc = uniform_process(K=4, T=3, beta=0.35)
        n = 10000
        batch = SequenceBatch(np.full((n, 1), 1), 4)
        out = proc.sample_forward(batch, 2, seed=7)
        probs = proc.marginal(1, 2).probs
        counts = np.bincount(out.data[:, 0], minlength=4)
        for j in range(4):
            sigma = np.sqrt(n * probs[j] * (1 - probs[j]))
            assert abs(counts[j] - n * probs[j]) <= 4 * sigma

    def test_factorization_across_positions(self):
        # joint histogram of a D=2 batch matches the product law (chi-square)
        proc = uniform_process(K=4, T=3, beta=0.4)
        n = 100000
        batch = SequenceBatch(np.tile([1, 2], (n, 1)), 4)
        out = proc.sample_forward(batch, 3, seed=5)
        joint = np.zeros((4, 4))
        np.add.at(joint, (out.data[:, 0], out.data[:, 1]), 1)
        expected = n * np.outer(proc.marginal(1, 3).probs,
                                proc.marginal(2, 3).probs)
        chi2 = float(((joint - expected) ** 2 / expected).sum())
        pvalue = stats.chi2.sf(chi2, df=15)
        assert pvalue > 0.001

    def test_worker_partitioning_is_deterministic(self):
        proc = uniform_process(K=6, T=2)
        batch = SequenceBatch(np.ones((64, 2), dtype=int), 6)
        a = proc.sample_forward(batch, 2, seed=3, workers=4)
        b = proc.sample_forward(batch, 2, seed=3, workers=4)
        np.testing.assert_array_equal(a.data, b.data)

    def test_t_out_of_range(self):
        proc = uniform_process(T=3)
        batch = SequenceBatch(np.zeros((1, 1), dtype=int), 4)
        with pytest.raises(InvalidSpecError):
            proc.sample_forward(batch, 4, seed=0)
        with pytest.raises(InvalidSpecError):
            sample_forward(batch, 0, proc, seed=0)


class TestPosterior:
    def test_t1_is_delta_on_origin(self):
        proc = uniform_process(K=5)
        dist = proc.posterior(x_t=3, x0=1, t=1)
        np.testing.assert_array_equal(dist.probs, [0, 1, 0, 0, 0])

    def test_absorbing_unmasked_is_delta(self):
        spec = TransitionSpec("absorbing", 5, absorbing_index=4)
        proc = ForwardProcess(spec, make_schedule("jacobi", 4))
        dist = proc.posterior(x_t=2, x0=2, t=3)
        np.testing.assert_array_equal(dist.probs, [0, 0, 1, 0, 0])

    def test_uniform_k3_matches_enumeration(self):
        proc = uniform_process(K=3, T=2, beta=0.3)
        got = proc.posterior(x_t=1, x0=0, t=2)
        q_mats = [proc.q_mat(1), proc.q_mat(2)]
        want = brute_posterior(q_mats, 2, x_t=1, x0=0)
        np.testing.assert_allclose(got.probs, want, atol=1e-12)

    @pytest.mark.parametrize("family", list(family_specs()))
    def test_bayes_consistency_all_families(self, family):
        spec = family_specs(K=4)[family] if family != "band_diagonal" else \
            TransitionSpec("band_diagonal", 4, band_width=1)
        proc = ForwardProcess(spec, make_schedule("linear", 4, beta_min=0.2,
                                                  beta_max=0.5))
        q_mats = [proc.q_mat(t) for t in range(1, 5)]
        for t in range(1, 5):
            for x0 in range(4):
                reach = proc.qbar_mat(t)[x0]
                for x_t in range(4):
                    if reach[x_t] <= 0:
                        with pytest.raises(UnreachableStateError):
                            proc.posterior(x_t, x0, t)
                        continue
                    got = proc.posterior(x_t, x0, t)
                    want = brute_posterior(q_mats, t, x_t, x0)
                    np.testing.assert_allclose(got.probs, want, atol=1e-12)

    def test_unreachable_pair_raises(self):
        spec = TransitionSpec("band_diagonal", 8, band_width=1)
        proc = ForwardProcess(spec, make_schedule("linear", 1, beta_min=0.2,
                                                  beta_max=0.2))
        with pytest.raises(UnreachableStateError):
            proc.posterior(x_t=7, x0=0, t=1)

    def test_markov_property_one_step_kernel_ignores_origin(self):
        # q(x_t | x_{t-1}) is a pure matrix lookup: same for any origin
        proc = uniform_process(K=4, T=3)
        col = proc.q_mat(2)[:, 3]
        np.testing.assert_array_equal(proc.q_mat(2)[:, 3], col)

    def test_posterior_free_function(self):
        proc = uniform_process(K=3, T=2, beta=0.25)
        a = posterior_dist(2, 1, proc.q_mat(2), proc.qbar_mat(1), proc.qbar_mat(2))
        b = proc.posterior(2, 1, 2)
        np.testing.assert_array_equal(a.probs, b.probs)


class TestChapmanKolmogorov:
    @pytest.mark.parametrize("family", list(family_specs()))
    def test_marginal_composition(self, family):
        spec = family_specs(K=5)[family]
        proc = ForwardProcess(spec, make_schedule("linear", 6, beta_min=0.1,
                                                  beta_max=0.4))
        for t in range(2, 7):
            lhs = proc.qbar_mat(t - 1) @ proc.q_mat(t)
            np.testing.assert_allclose(lhs, proc.qbar_mat(t), atol=1e-10)


class TestBackends:
    def test_lowrank_agrees_with_dense(self):
        for family, kw in (("uniform", {}), ("absorbing", {"absorbing_index": 5})):
            spec = TransitionSpec(family, 16, **kw)
            sched = (make_schedule("cosine", 30) if family == "uniform"
                     else make_schedule("jacobi", 30))
            dense = ForwardProcess(spec, sched, backend="dense")
            low = ForwardProcess(spec, sched, backend="lowrank")
            for t in (0, 1, 15, 30):
                np.testing.assert_allclose(low.qbar_mat(t), dense.qbar_mat(t),
                                           atol=1e-12)
            np.testing.assert_allclose(low.kernel_mat(3, 17),
                                       dense.kernel_mat(3, 17), atol=1e-12)
            rows = low.qbar_rows(7, np.array([[0, 5], [3, 2]]))
            np.testing.assert_allclose(
                rows, dense.qbar_mat(7)[np.array([[0, 5], [3, 2]])], atol=1e-12)

    def test_matexp_agrees_with_dense(self):
        import dataclasses
        rng = np.random.default_rng(8)
        emb = rng.standard_normal((6, 2))
        spec = TransitionSpec("embedding", 6, neighbor_count=2, embeddings=emb)
        sched = dataclasses.replace(
            make_schedule("linear_exponent", 12, alpha_step=0.125),
            alpha_star=0.125)
        dense = ForwardProcess(spec, sched, backend="dense")
        fast = ForwardProcess(spec, sched, backend="matexp")
        for t in (1, 5, 12):
            np.testing.assert_allclose(fast.qbar_mat(t), dense.qbar_mat(t),
                                       atol=1e-10)
            np.testing.assert_allclose(fast.q_mat(t), dense.q_mat(t), atol=1e-10)
        np.testing.assert_allclose(fast.kernel_mat(2, 9),
                                   dense.kernel_mat(2, 9), atol=1e-10)

    def test_lowrank_rejects_other_families(self):
        spec = TransitionSpec("gaussian", 8)
        with pytest.raises(InvalidSpecError):
            ForwardProcess(spec, make_schedule("cosine", 4), backend="lowrank")


def test_sample_stationary_matches_pi():
    spec = TransitionSpec("absorbing", 5, absorbing_index=1)
    proc = ForwardProcess(spec, make_schedule("jacobi", 3))
    batch = sample_stationary(proc, 100, 4, rng_from_seed(0))
    assert np.all(batch.data == 1)
