from __future__ import annotations

import numpy as np
import pytest

from crl_risklab.errors import DimensionMismatch, NonSmoothDisutility
from crl_risklab.oce import CVaR, EntropyRisk, Exponential, Linear, MeanVariance, SoftPlus, SquaredHinge
from crl_risklab.probspace import random_problem, two_point_problem
from crl_risklab.retrieval import auc_optimum, auc_score, is_auc_maximizer, oce_reference
from crl_risklab.risks import optimal_risk, optimal_scorer, population_oce_risk, population_risk
from crl_risklab.sampling import sample_scrl
from crl_risklab.scorers import LinearEmbedScorer
from crl_risklab.trainer import (
    Objective,
    TrainConfig,
    default_bound,
    finite_diff_certify,
    minimize_empirical,
    minimize_population,
    with_bound,
)


class TestConfig:
    def test_validation(self):
        for kwargs in ({"step": 0.0}, {"step_rule": "adam"}, {"tol": 0.0}, {"bound": -1.0}, {"trace_stride": 0}):
            with pytest.raises(ValueError):
                TrainConfig(**kwargs)

    def test_with_bound(self):
        assert with_bound(TrainConfig(), 3.0).bound == 3.0


class TestPopulation:
    def test_two_point(self):
        p = two_point_problem()
        s, trace = minimize_population(p)
        assert trace.converged
        assert population_risk(p, s).value - optimal_risk(p) <= 1e-10
        assert auc_score(p, s).score == pytest.approx(0.65, abs=1e-12)

    def test_random_entropy(self):
        for seed in range(5):
            p = random_problem(3, 6, seed, 1e-3)
            s, trace = minimize_population(p)
            assert trace.converged
            assert population_risk(p, s).value - optimal_risk(p) <= 1e-8
            assert auc_optimum(p) - auc_score(p, s).score <= 1e-6

    def test_mean_variance(self):
        for seed in range(5):
            p = random_problem(3, 6, seed, 1e-3)
            phi, ell = MeanVariance(), Linear()
            s, _ = minimize_population(p, phi, ell)
            assert population_oce_risk(p, s, phi, ell).value - oce_reference(p, phi, ell) <= 1e-8
            assert is_auc_maximizer(p, s, tol=1e-6)

    def test_risk_is_non_increasing(self):
        p = random_problem(2, 5, 4, 1e-3)
        _, trace = minimize_population(p, MeanVariance(), SoftPlus())
        assert np.all(np.diff(trace.risks) <= 1e-12)

    def test_trace_stride_and_auc(self):
        p = random_problem(2, 4, 0, 1e-3)
        _, trace = minimize_population(p, config=TrainConfig(trace_stride=5, max_iter=23), track_auc=True)
        assert trace.iters[:3] == [0, 5, 10] and trace.iters[-1] <= 23
        assert len(trace.aucs) == len(trace.iters)
        lines = trace.to_csv().splitlines()
        assert lines[0] == "iter,risk,grad_norm,auc" and len(lines) == len(trace.iters) + 1

    def test_box(self):
        p = random_problem(2, 4, 2, 1e-3)
        s, _ = minimize_population(p, config=TrainConfig(bound=0.1, max_iter=200))
        assert s.bound <= 0.1 + 1e-15

    def test_inv_sqrt_rule(self):
        p = two_point_problem()
        s, trace = minimize_population(p, config=TrainConfig(step_rule="inv_sqrt", max_iter=2000, tol=1e-6))
        assert population_risk(p, s).value - optimal_risk(p) <= 1e-6

    def test_embedding_init(self):
        p = random_problem(2, 3, 1, 1e-2)
        rng = np.random.default_rng(0)
        init = LinearEmbedScorer(rng.normal(size=(2, 4)) * 0.1, rng.normal(size=(3, 4)) * 0.1)
        s, trace = minimize_population(p, init=init, config=TrainConfig(max_iter=3000, tol=1e-7))
        assert isinstance(s, LinearEmbedScorer)
        assert trace.risks[-1] < trace.risks[0]
        assert population_risk(p, s).value - optimal_risk(p) <= 1e-4

    def test_cvar_refused(self):
        with pytest.raises(NonSmoothDisutility):
            minimize_population(two_point_problem(), CVaR(0.5))

    def test_init_shape(self):
        with pytest.raises(DimensionMismatch):
            minimize_population(two_point_problem(), init=np.zeros((2, 2)))

    def test_default_bound(self):
        p = two_point_problem()
        assert default_bound(p) == pytest.approx(5 * np.log(2.5))
        assert default_bound(p, MeanVariance()) == pytest.approx(5 * np.log(2.5))


class TestEmpirical:
    def test_decreases_and_respects_box(self):
        p = random_problem(2, 4, 3, 1e-2)
        smp = sample_scrl(p, 50, 5, 1)
        s, trace = minimize_empirical(smp, (2, 4), None, None, p.temperature, TrainConfig(max_iter=500))
        assert trace.risks[-1] <= trace.risks[0]
        assert s.bound <= 10 * p.temperature + 1e-12

    def test_shape_check(self):
        p = random_problem(2, 4, 3, 1e-2)
        with pytest.raises(DimensionMismatch):
            minimize_empirical(sample_scrl(p, 5, 2, 0), (3, 4), None, None, 1.0)

    def test_deterministic(self):
        p = random_problem(2, 4, 3, 1e-2)
        smp = sample_scrl(p, 30, 3, 2)
        cfg = TrainConfig(max_iter=50)
        a, _ = minimize_empirical(smp, (2, 4), MeanVariance(), Exponential(), 1.0, cfg)
        b, _ = minimize_empirical(smp, (2, 4), MeanVariance(), Exponential(), 1.0, cfg)
        assert a.matrix.tobytes() == b.matrix.tobytes()


class TestFiniteDifferences:
    @pytest.mark.parametrize("phi", [EntropyRisk(), MeanVariance()], ids=repr)
    @pytest.mark.parametrize("ell", [Linear(), Exponential(), SoftPlus(), SquaredHinge()], ids=repr)
    def test_certify(self, phi, ell):
        p = random_problem(3, 4, 21, 1e-2)
        s = np.random.default_rng(1).uniform(-1, 1, size=(3, 4)) * p.temperature
        rep = finite_diff_certify(Objective.of(p, phi, ell), s)
        assert rep.relative and rep.error <= 1e-6

    def test_flat_gradient_is_absolute(self):
        p = random_problem(2, 3, 0, 1e-2)
        rep = finite_diff_certify(Objective.of(p), optimal_scorer(p))
        assert not rep.relative and float(rep) <= 1e-8

    def test_step_range(self):
        with pytest.raises(ValueError):
            finite_diff_certify(Objective.of(two_point_problem()), np.zeros((1, 2)), h=1e-2)
