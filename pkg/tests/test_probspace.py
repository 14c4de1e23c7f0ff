from __future__ import annotations

import json

import numpy as np
import pytest

from crl_risklab.errors import (
    DegenerateClassPrior,
    DimensionMismatch,
    InfeasibleFloor,
    MissingLabelSlice,
    NotADistribution,
    SupportViolation,
    ZeroMarginal,
)
from crl_risklab.probspace import (
    ClassStructure,
    ContrastiveProblem,
    LabeledJoint,
    density_ratio,
    from_joint,
    from_labeled,
    from_multiclass,
    new_problem,
    random_problem,
    two_point_problem,
)


class TestNewProblem:
    def test_two_point_instance(self):
        p = new_problem([1.0], [[0.8, 0.2]], [[0.5, 0.5]], 1.0)
        assert (p.anchor_size, p.item_size) == (1, 2)
        assert p.temperature == 1.0
        np.testing.assert_array_equal(p.pos_cond, [[0.8, 0.2]])

    def test_support_violation(self):
        with pytest.raises(SupportViolation):
            new_problem([1.0], [[0.5, 0.5]], [[1.0, 0.0]], 1.0)

    def test_row_sum_off(self):
        with pytest.raises(NotADistribution):
            new_problem([1.0], [[0.6, 0.5]], [[0.5, 0.5]], 1.0)

    def test_negative_entry(self):
        with pytest.raises(NotADistribution):
            new_problem([1.0], [[1.2, -0.2]], [[0.5, 0.5]], 1.0)

    def test_shapes(self):
        with pytest.raises(DimensionMismatch):
            new_problem([0.5, 0.5], [[0.8, 0.2]], [[0.5, 0.5]], 1.0)
        with pytest.raises(DimensionMismatch):
            new_problem([1.0], [[0.8, 0.2]], [[0.3, 0.3, 0.4]], 1.0)

    def test_temperature(self):
        for bad in (0.0, -1.0, float("nan")):
            with pytest.raises(ValueError):
                new_problem([1.0], [[0.8, 0.2]], [[0.5, 0.5]], bad)

    def test_renormalizes_small_error(self):
        p = new_problem([1.0], [[0.8 + 5e-10, 0.2]], [[0.5, 0.5]], 1.0)
        assert abs(p.pos_cond.sum() - 1.0) <= 1e-12

    def test_immutable(self):
        p = two_point_problem()
        with pytest.raises(ValueError):
            p.pos_cond[0, 0] = 0.1


class TestFromJoint:
    def test_worked_example(self):
        p = from_joint([[0.4, 0.1], [0.1, 0.4]], 1.0)
        np.testing.assert_allclose(p.anchor_marginal, [0.5, 0.5])
        np.testing.assert_allclose(p.pos_cond, [[0.8, 0.2], [0.2, 0.8]])
        np.testing.assert_allclose(p.neg_cond, [[0.5, 0.5], [0.5, 0.5]])

    def test_product_joint(self):
        joint = np.outer([0.3, 0.7], [0.1, 0.6, 0.3])
        p = from_joint(joint, 2.0)
        np.testing.assert_allclose(p.pos_cond, p.neg_cond, atol=1e-15)

    def test_zero_row(self):
        with pytest.raises(ZeroMarginal):
            from_joint([[0.5, 0.5], [0.0, 0.0]], 1.0)

    def test_round_trip(self):
        rng = np.random.default_rng(3)
        joint = rng.dirichlet(np.ones(12)).reshape(3, 4)
        p = from_joint(joint, 1.0)
        np.testing.assert_allclose(p.joint_positive(), joint, atol=1e-12)

    def test_shared_negatives(self):
        assert from_joint([[0.4, 0.1], [0.1, 0.4]], 1.0).has_shared_negatives()


class TestFromLabeled:
    def test_worked_example(self):
        t = np.zeros((1, 2, 2))
        t[0, :, 1] = [0.4, 0.1]
        t[0, :, 0] = [0.25, 0.25]
        p = from_labeled(LabeledJoint(t), 1.0)
        np.testing.assert_allclose(p.pos_cond, [[0.8, 0.2]])
        np.testing.assert_allclose(p.neg_cond, [[0.5, 0.5]])

    def test_independent_label(self):
        rng = np.random.default_rng(0)
        xy = rng.dirichlet(np.ones(6)).reshape(2, 3)
        t = np.stack([0.3 * xy, 0.7 * xy], axis=-1)
        p = from_labeled(LabeledJoint(t), 1.0)
        np.testing.assert_allclose(p.pos_cond, p.neg_cond, atol=1e-12)
        np.testing.assert_allclose(density_ratio(p), np.ones((2, 3)), atol=1e-12)

    def test_missing_slice(self):
        t = np.zeros((1, 2, 2))
        t[0, :, 1] = [0.5, 0.5]
        with pytest.raises(MissingLabelSlice):
            from_labeled(LabeledJoint(t), 1.0)

    def test_bad_tensor(self):
        with pytest.raises(DimensionMismatch):
            LabeledJoint(np.full((2, 2), 0.25))


class TestFromMulticlass:
    def test_two_point_masses(self):
        cs = ClassStructure([0.5, 0.5], [[1.0, 0.0], [0.0, 1.0]])
        p = from_multiclass(cs, [[1.0], [1.0]], 1.0)
        np.testing.assert_allclose(p.pos_cond[0], [1.0, 0.0])
        np.testing.assert_allclose(p.neg_cond[0], [0.0, 1.0])
        # disjoint class supports: the ratio is infinite on the class's own item
        assert not p.support_ok

    def test_three_classes(self):
        cs = ClassStructure(np.full(3, 1 / 3), np.eye(3))
        p = from_multiclass(cs, np.ones((3, 1)), 1.0)
        np.testing.assert_allclose(p.neg_cond[0], [0.0, 0.5, 0.5])

    def test_degenerate_prior(self):
        cs = ClassStructure([1.0, 0.0], [[0.5, 0.5], [0.2, 0.8]])
        with pytest.raises(DegenerateClassPrior):
            from_multiclass(cs, [[1.0], [1.0]], 1.0)

    def test_strict_support(self):
        cs = ClassStructure([0.5, 0.5], [[1.0, 0.0], [0.0, 1.0]])
        with pytest.raises(SupportViolation):
            from_multiclass(cs, [[1.0], [1.0]], 1.0, strict_support=True)

    def test_anchor_layout(self):
        cs = ClassStructure([0.25, 0.75], [[0.6, 0.4], [0.1, 0.9]])
        cond = [[0.5, 0.5], [0.2, 0.8]]
        p = from_multiclass(cs, cond, 1.0)
        np.testing.assert_allclose(p.anchor_marginal, [0.125, 0.125, 0.15, 0.6])
        np.testing.assert_allclose(p.pos_cond[2], [0.1, 0.9])

    def test_total_probability(self):
        rng = np.random.default_rng(5)
        rho = rng.dirichlet(np.ones(4))
        dist = rng.dirichlet(np.ones(6), size=4)
        cs = ClassStructure(rho, dist)
        mix = cs.item_marginal()
        comp = cs.complement_dist()
        recon = (rho[:, None] * dist + (1 - rho[:, None]) * comp)
        for c in range(4):
            np.testing.assert_allclose(recon[c], mix, atol=1e-12)
        np.testing.assert_allclose(np.sum(rho[:, None] * recon, axis=0), mix, atol=1e-12)


class TestDensityRatio:
    def test_two_point(self):
        np.testing.assert_allclose(density_ratio(two_point_problem(), 0), [1.6, 0.4])

    def test_equal_rows(self):
        p = new_problem([1.0], [[0.2, 0.3, 0.5]], [[0.2, 0.3, 0.5]], 1.0)
        np.testing.assert_allclose(density_ratio(p, 0), np.ones(3))

    def test_zero_numerator(self):
        p = new_problem([1.0], [[1.0, 0.0]], [[0.5, 0.5]], 1.0)
        np.testing.assert_array_equal(density_ratio(p, 0), [2.0, 0.0])

    def test_zero_over_zero(self):
        p = new_problem([1.0], [[1.0, 0.0]], [[1.0, 0.0]], 1.0)
        np.testing.assert_array_equal(density_ratio(p, 0), [1.0, 0.0])


class TestRandomProblem:
    def test_deterministic(self):
        a, b = random_problem(3, 5, 7, 1e-3), random_problem(3, 5, 7, 1e-3)
        assert a.to_json() == b.to_json()
        assert a.pos_cond.tobytes() == b.pos_cond.tobytes()

    def test_floor(self):
        p = random_problem(1, 2, 0, 0.2)
        for m in (p.pos_cond, p.neg_cond):
            assert m.min() >= 0.2 - 1e-15 and m.max() <= 0.8 + 1e-15

    def test_infeasible(self):
        with pytest.raises(InfeasibleFloor):
            random_problem(2, 4, 1, 0.3)

    def test_temperature_range(self):
        taus = [random_problem(2, 3, s, 1e-3).temperature for s in range(200)]
        assert 0.1 <= min(taus) and max(taus) <= 10.0
        assert min(taus) < 0.3 and max(taus) > 3.0

    def test_passes_validation(self):
        for s in range(20):
            p = random_problem(4, 6, s, 1e-3)
            q = new_problem(p.anchor_marginal, p.pos_cond, p.neg_cond, p.temperature)
            np.testing.assert_allclose(q.pos_cond, p.pos_cond, rtol=0, atol=1e-15)


class TestJson:
    def test_round_trip(self, tmp_path):
        p = random_problem(2, 3, 4, 1e-2)
        path = tmp_path / "p.json"
        p.to_json(path)
        q = ContrastiveProblem.from_json(path)
        np.testing.assert_array_equal(q.neg_cond, p.neg_cond)
        assert q.temperature == p.temperature
        assert set(json.loads(path.read_text())) == {"anchor_marginal", "pos_cond", "neg_cond", "temperature"}

    def test_missing_key(self):
        with pytest.raises(DimensionMismatch):
            ContrastiveProblem.from_dict({"anchor_marginal": [1.0]})
