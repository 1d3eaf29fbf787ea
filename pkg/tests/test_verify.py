"""The oracles get their own sanity checks: they guard everything else."""

import numpy as np
import pytest

from d3pm.process import ForwardProcess, SequenceBatch
from d3pm.schedule import make_schedule
from d3pm.transition import TransitionSpec
from d3pm.verify import (BayesDenoiser, CheatingDenoiser, HashDenoiser,
                         enumerate_model_nll, explicit_reverse_sum,
                         marginal_by_paths, run_all)


class TestHashDenoiser:
    def test_pure_function_of_inputs(self):
        dn = HashDenoiser(3, 5)
        x = np.array([[0, 2], [4, 1]])
        np.testing.assert_array_equal(dn(x, 2), dn(x, 2))
        assert np.any(dn(x, 2) != dn(x, 3))
        assert np.any(dn(x, 2)[0] != dn(x[::-1], 2)[0])

    def test_seed_changes_function(self):
        x = np.array([[1, 1]])
        assert np.any(HashDenoiser(0, 4)(x, 1) != HashDenoiser(1, 4)(x, 1))


class TestPathOracles:
    def test_marginal_by_paths_matches_matrix_product(self):
        proc = ForwardProcess(TransitionSpec("gaussian", 4),
                              make_schedule("linear", 4, beta_min=0.2,
                                            beta_max=0.5))
        q_mats = [proc.q_mat(t) for t in range(1, 5)]
        for t in range(1, 5):
            for x0 in range(4):
                want = proc.qbar_mat(t)[x0]
                got = marginal_by_paths(q_mats, t, x0)
                np.testing.assert_allclose(got, want, atol=1e-12)

    def test_path_limit_guard(self):
        q_mats = [np.eye(8)] * 10
        with pytest.raises(ValueError):
            marginal_by_paths(q_mats, 10, 0)

    def test_explicit_sum_zero_total_returns_zeros(self):
        kernel = np.eye(3)
        qbar = np.eye(3)
        logits = np.array([-np.inf, 0.0, -np.inf])
        # prediction on category 1 cannot reach x_t = 0 through identity
        out = explicit_reverse_sum(0, logits, kernel, qbar)
        np.testing.assert_array_equal(out, np.zeros(3))


class TestEnumerateNll:
    def test_t1_chain_closed_form(self):
        # with T = 1 the model likelihood is sum_s pi(s) p~(x0 | s)
        K = 3
        spec = TransitionSpec("uniform", K)
        proc = ForwardProcess(spec, make_schedule("linear", 1, beta_min=0.4,
                                                  beta_max=0.4))
        dn = HashDenoiser(0, K)
        x0 = np.array([1])
        got = enumerate_model_nll(x0, dn, proc)
        from d3pm.util import softmax
        probs = softmax(dn(np.arange(K)[:, None], 1), axis=-1)
        want = -np.log(np.sum(probs[:, 0, 1] / K))
        assert got == pytest.approx(want, rel=1e-12)

    def test_cheating_denoiser_reaches_its_target(self):
        # the cheater decodes its sequence from any state: NLL ~ 0
        K = 4
        spec = TransitionSpec("uniform", K)
        proc = ForwardProcess(spec, make_schedule("linear", 3, beta_min=0.3,
                                                  beta_max=0.5))
        x0 = np.array([2])
        nll = enumerate_model_nll(x0, CheatingDenoiser(x0, K), proc)
        assert nll == pytest.approx(0.0, abs=1e-10)

    def test_bayes_denoiser_beats_random_on_average(self):
        K = 4
        spec = TransitionSpec("absorbing", K, absorbing_index=K - 1)
        proc = ForwardProcess(spec, make_schedule("jacobi", 3))
        p0 = np.array([0.6, 0.3, 0.1, 0.0])
        bayes_nll = sum(p0[i] * enumerate_model_nll(np.array([i]),
                                                    BayesDenoiser(p0, proc),
                                                    proc)
                        for i in range(3))
        rand_nll = sum(p0[i] * enumerate_model_nll(np.array([i]),
                                                   HashDenoiser(0, K), proc)
                       for i in range(3))
        assert bayes_nll < rand_nll


def test_run_all_passes():
    results = run_all(seed=0)
    assert len(results) == 7
    for result in results:
        assert result.passed, result.line()
