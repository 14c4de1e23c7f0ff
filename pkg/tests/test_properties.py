from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from crl_risklab.experiments import calibration_sweep, csv_text, default_study_problem, default_study_scorer, inner_outer_decomposition
from crl_risklab.oce import (
    CVaR,
    EntropyRisk,
    Exponential,
    Identity,
    Linear,
    MeanVariance,
    SoftPlus,
    SquaredHinge,
    oce_empirical,
    oce_objective,
    oce_weighted,
)
from crl_risklab.probspace import random_problem
from crl_risklab.retrieval import auc_optimum, auc_score, is_auc_maximizer
from crl_risklab.risks import optimal_scorer, population_oce_risk, population_risk
from crl_risklab.sampling import sample_scrl

PHIS = [Identity(), EntropyRisk(), MeanVariance(), CVaR(0.3), CVaR(0.8)]
phis = st.sampled_from(PHIS)
taus = st.floats(0.1, 10.0)
finite = st.floats(-20.0, 20.0, allow_nan=False, allow_infinity=False)


@st.composite
def weighted(draw, min_size=1, max_size=12):
    k = draw(st.integers(min_size, max_size))
    z = draw(arrays(np.float64, k, elements=finite))
    raw = draw(arrays(np.float64, k, elements=st.floats(0.01, 1.0)))
    return z, raw / raw.sum()


@st.composite
def problems(draw, max_x=4, max_y=6):
    nx = draw(st.integers(1, max_x))
    ny = draw(st.integers(2, max_y))
    seed = draw(st.integers(0, 2**31))
    return random_problem(nx, ny, seed, 1e-3)


def _oce(phi, z, w, tau):
    return oce_weighted(phi, z, w, tau).value


def _tol(z, tau):
    return 1e-9 * (1.0 + float(np.max(np.abs(z))) + tau)


class TestOceProperties:
    @given(phis, weighted(), taus, st.data())
    def test_linf_lipschitz(self, phi, zw, tau, data):
        z, w = zw
        e = data.draw(arrays(np.float64, z.size, elements=st.floats(-3.0, 3.0)))
        gap = abs(_oce(phi, z + e, w, tau) - _oce(phi, z, w, tau))
        assert gap <= float(np.max(np.abs(e))) + _tol(z, tau)

    @given(phis, weighted(), taus)
    def test_risk_averse(self, phi, zw, tau):
        z, w = zw
        assert _oce(phi, z, w, tau) >= float(w @ z) - _tol(z, tau)

    @given(phis, weighted(), taus, st.floats(-50.0, 50.0))
    def test_translation_equivariant(self, phi, zw, tau, c):
        z, w = zw
        assert _oce(phi, z + c, w, tau) == pytest.approx(_oce(phi, z, w, tau) + c, abs=10 * _tol(z, tau) + 1e-12 * abs(c))

    @given(phis, weighted(), taus, st.data())
    def test_monotone(self, phi, zw, tau, data):
        z, w = zw
        up = data.draw(arrays(np.float64, z.size, elements=st.floats(0.0, 3.0)))
        assert _oce(phi, z + up, w, tau) >= _oce(phi, z, w, tau) - _tol(z, tau)

    @given(phis, weighted(), taus)
    def test_at_most_max(self, phi, zw, tau):
        z, w = zw
        v = _oce(phi, z, w, tau)
        assert v <= z.max() + _tol(z, tau)

    @given(phis, weighted(), taus, st.floats(-30.0, 30.0))
    def test_bracket_suffices(self, phi, zw, tau, mu):
        z, w = zw
        r = oce_weighted(phi, z, w, tau)
        assert float(oce_objective(phi, z, w, mu, tau)) >= r.value - _tol(z, tau)

    @given(arrays(np.float64, st.integers(1, 40), elements=finite), st.floats(0.05, 0.95))
    def test_cvar_is_top_mean(self, z, alpha):
        k = int(np.ceil(alpha * z.size - 1e-12))
        want = np.sort(z)[::-1][:k].sum() / k
        # CVaR of the empirical law at level alpha averages the top alpha-fraction,
        # with the boundary sample entering fractionally
        frac = alpha * z.size - (k - 1)
        top = np.sort(z)[::-1]
        exact = (top[: k - 1].sum() + frac * top[k - 1]) / (alpha * z.size)
        got = oce_empirical(CVaR(alpha), z, 1.0).value
        assert got == pytest.approx(exact, abs=1e-9 * (1 + np.abs(z).max()))
        if abs(frac - 1.0) < 1e-12:
            assert got == pytest.approx(want, abs=1e-9 * (1 + np.abs(z).max()))


class TestRiskProperties:
    @given(problems(), st.data())
    def test_gauge_invariance(self, p, data):
        # scores on a lattice keep every gap either zero or far from the tie tolerance
        s = np.round(data.draw(arrays(np.float64, (p.anchor_size, p.item_size), elements=st.floats(-3, 3))), 3)
        g = data.draw(arrays(np.float64, p.anchor_size, elements=st.floats(-10, 10)))
        shifted = s + g[:, None]
        assert population_risk(p, shifted).value == pytest.approx(population_risk(p, s).value, abs=1e-10)
        assert auc_score(p, shifted).score == pytest.approx(auc_score(p, s).score, abs=1e-12)

    @given(problems(), st.data())
    def test_auc_order_invariance(self, p, data):
        s = np.round(data.draw(arrays(np.float64, (p.anchor_size, p.item_size), elements=st.floats(-2, 2))), 2)
        a = data.draw(arrays(np.float64, p.anchor_size, elements=st.floats(0.1, 5)))
        t = np.exp(a[:, None] * s) + 3.0
        assert auc_score(p, t).score == pytest.approx(auc_score(p, s).score, abs=1e-12)

    @given(problems(), st.data())
    def test_auc_bounded_by_optimum(self, p, data):
        s = data.draw(arrays(np.float64, (p.anchor_size, p.item_size), elements=st.floats(-3, 3)))
        e = auc_score(p, s).score
        assert 0.0 <= e <= auc_optimum(p) + 1e-12
        if is_auc_maximizer(p, s, 1e-9):
            assert e == pytest.approx(auc_optimum(p), abs=1e-9)

    @given(problems(max_x=2, max_y=4), st.sampled_from([EntropyRisk(), MeanVariance()]),
           st.sampled_from([Linear(), Exponential(), SoftPlus(), SquaredHinge()]), st.data())
    def test_convex_in_scores(self, p, phi, ell, data):
        shape = (p.anchor_size, p.item_size)
        a = data.draw(arrays(np.float64, shape, elements=st.floats(-1, 1)))
        b = data.draw(arrays(np.float64, shape, elements=st.floats(-1, 1)))
        lam = data.draw(st.floats(0, 1))
        f = lambda s: population_oce_risk(p, s, phi, ell).value
        mid = f(lam * a + (1 - lam) * b)
        assert mid <= lam * f(a) + (1 - lam) * f(b) + 1e-9

    @given(problems())
    def test_optimal_scorer_gauges(self, p):
        g = np.linspace(-3, 3, p.anchor_size)
        assert auc_score(p, optimal_scorer(p, g)).score == pytest.approx(auc_optimum(p), abs=1e-12)


class TestDeterminism:
    def test_sampler(self):
        p = random_problem(3, 4, 1, 1e-2)
        a, b = sample_scrl(p, 500, 7, 42), sample_scrl(p, 500, 7, 42)
        assert a.negatives.tobytes() == b.negatives.tobytes()

    def test_monte_carlo(self):
        p = default_study_problem()
        s = default_study_scorer(p)
        a = inner_outer_decomposition(p, s, 16, 8, 300, 5)
        b = inner_outer_decomposition(p, s, 16, 8, 300, 5)
        assert csv_text(list(a.to_dict()), [list(a.to_dict().values())]) == csv_text(list(b.to_dict()), [list(b.to_dict().values())])

    def test_calibration_bytes(self):
        a = calibration_sweep(4, 3, 9)
        b = calibration_sweep(4, 3, 9)
        head = ("p", "s", "lhs", "rhs", "slack")
        assert csv_text(head, a.csv_rows()).encode() == csv_text(head, b.csv_rows()).encode()
