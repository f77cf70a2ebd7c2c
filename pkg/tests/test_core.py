"""Parameter validation, age vectors and PMF arithmetic."""

import math

import numpy as np
import pytest

from aoi_lab import analytic
from aoi_lab.core import (
    InvalidParameters, InvalidState, ModelSpec, Pmf, PreemptionPolicy,
    ServiceDistribution, StationaryTable, SystemParams, Unstable, default_n_p,
    geometric_tail_bound, pmf_mean, pmf_mean_with_error, pmf_total_variation,
    validate_age_state,
)


class TestSystemParams:
    def test_rho_is_recomputed(self):
        params = SystemParams(0.2, 0.5)
        assert params.rho_d == 0.2 / 0.5

    @pytest.mark.parametrize("p,g", [(0.0, 0.5), (1.0, 0.5), (0.2, 0.0), (0.2, 1.0),
                                     (-0.1, 0.5), (float("nan"), 0.5)])
    def test_open_unit_interval(self, p, g):
        with pytest.raises(InvalidParameters):
            SystemParams(p, g)

    @pytest.mark.parametrize("ctor", [ModelSpec.ber_geo12, ModelSpec.ber_geo12star,
                                      lambda prm: ModelSpec.ber_geo1c(prm, 3)])
    def test_buffered_models_need_p_below_gamma(self, ctor):
        with pytest.raises(Unstable, match="unstable: p >= gamma"):
            ctor(SystemParams(0.5, 0.4))
        with pytest.raises(Unstable):
            ctor(SystemParams(0.4, 0.4))

    def test_size_one_accepts_heavy_load(self):
        ModelSpec.ber_geo11(SystemParams(0.9, 0.1))


class TestServiceDistribution:
    def test_general_must_normalise(self):
        with pytest.raises(InvalidParameters):
            ServiceDistribution.general([0.5, 0.4])
        ServiceDistribution.general([0.5, 0.5])

    def test_hazard_of_geometric_is_constant(self):
        svc = ServiceDistribution.geometric(0.3)
        assert all(svc.hazard(m) == pytest.approx(0.3) for m in range(1, 30))

    def test_hazard_of_finite_support_ends_at_one(self):
        svc = ServiceDistribution.general([0.2, 0.3, 0.5])
        assert svc.hazard(1) == pytest.approx(0.2)
        assert svc.hazard(2) == pytest.approx(0.3 / 0.8)
        assert svc.hazard(3) == pytest.approx(1.0)
        assert svc.max_support == 3

    def test_ber_g11_needs_q1(self):
        with pytest.raises(InvalidParameters):
            ModelSpec.ber_g11(SystemParams(0.2, 0.5), ServiceDistribution.general([0.0, 1.0]))


class TestPreemption:
    def test_default_n_p(self):
        assert default_n_p(0.2) == 4
        for p in np.linspace(0.01, 0.99, 99):
            n = default_n_p(p)
            assert p > 1 / (n + 2)
            assert n == 0 or not p > 1 / (n + 1)

    def test_increasing_family_range_and_monotone(self):
        pol = PreemptionPolicy.increasing(4)
        g = pol.values(500, 0.2)
        assert np.all((g > 0) & (g < 1))
        assert np.all(np.diff(g) >= 0)

    def test_increasing_family_validity_condition(self):
        with pytest.raises(InvalidParameters):
            ModelSpec.ber_geo11_preemptive(SystemParams(0.2, 0.5), n_p=2)

    def test_g_equal_to_one_is_allowed(self):
        pol = PreemptionPolicy.custom(lambda m: 1.0)
        ModelSpec.ber_g11(SystemParams(0.2, 0.5), ServiceDistribution.geometric(0.5), pol)

    def test_preemption_only_on_size_one(self):
        with pytest.raises(InvalidParameters):
            ModelSpec("ber-geo-1-2", SystemParams(0.2, 0.5), preemption=PreemptionPolicy.increasing(4), c=2)


class TestAgeState:
    @pytest.mark.parametrize("bad", [(3, 3, 0), (2, 0, 1), (0,), (2, 3), (1, 0, -1)])
    def test_rejects(self, bad):
        with pytest.raises(InvalidState):
            validate_age_state(bad)

    @pytest.mark.parametrize("good", [(3, 2, 1), (5, 0, 0), (1,)])
    def test_accepts(self, good):
        assert validate_age_state(good) == good


class TestPmf:
    def test_mean_of_point_mass(self):
        assert pmf_mean(Pmf(1, [1.0])) == 1.0

    def test_mean_of_uniform(self):
        assert pmf_mean(Pmf(1, [1 / 3] * 3)) == pytest.approx(2.0)

    def test_mean_of_size_one_aoi(self):
        pmf = analytic.ber_geo11_aoi_pmf(SystemParams(0.2, 1 / 3), 2000)
        mean, err = pmf_mean_with_error(pmf)
        assert mean == pytest.approx(55 / 7, abs=1e-6)
        assert err < 1e-6

    def test_total_variation_examples(self):
        assert pmf_total_variation(Pmf(1, [0.6, 0.4]), Pmf(1, [0.6, 0.4])) == 0.0
        assert pmf_total_variation(Pmf(1, [1.0]), Pmf(1, [0.0, 1.0])) == pytest.approx(1.0)
        assert pmf_total_variation(Pmf(1, [0.6, 0.4]), Pmf(1, [0.5, 0.5])) == pytest.approx(0.1)

    def test_total_variation_adds_tail_slack(self):
        a = Pmf(1, [0.5, 0.5 - 1e-6], 1e-6)
        assert pmf_total_variation(a, a) == pytest.approx(1e-6)

    def test_total_variation_needs_same_start(self):
        with pytest.raises(InvalidParameters):
            pmf_total_variation(Pmf(0, [1.0]), Pmf(1, [1.0]))

    def test_normalisation_is_enforced(self):
        with pytest.raises(InvalidParameters):
            Pmf(1, [0.5, 0.4])
        with pytest.raises(InvalidParameters):
            Pmf(1, [0.7, 0.4])
        Pmf(1, [0.5, 0.4], tail_bound=0.1)

    def test_dict_round_trip(self):
        pmf = Pmf(0, [0.25, 0.5, 0.25 - 1e-9], 1e-9)
        back = Pmf.from_dict(pmf.to_dict())
        assert back.support_start == 0
        assert np.array_equal(back.probs, pmf.probs)
        assert back.tail_bound == pmf.tail_bound

    def test_probs_are_read_only(self):
        pmf = Pmf(1, [1.0])
        with pytest.raises(ValueError):
            pmf.probs[0] = 0.5

    def test_tail_bound_rule(self):
        assert geometric_tail_bound(512, 0.8) == pytest.approx(512 ** 2 * 0.8 ** 513 / 0.2)
        assert geometric_tail_bound(3, 0.99) == 1.0


class TestStationaryTable:
    def test_lookup(self):
        table = StationaryTable(np.array([[1, 0], [2, 1]]), np.array([0.25, 0.75]))
        assert table.lookup((2, 1)) == 0.75
        assert table.lookup((3, 1)) == 0.0
        assert table.as_dict() == {(1, 0): 0.25, (2, 1): 0.75}
        assert math.isclose(sum(table.as_dict().values()), 1.0)
