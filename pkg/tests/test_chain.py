"""Kernel construction, stationary solve and marginals of the age-state chains."""

import io

import numpy as np
import pytest

from aoi_lab import analytic as A
from aoi_lab import chain
from aoi_lab.core import (
    EmptyCondition, InvalidParameters, ModelSpec, NotConverged, PreemptionPolicy,
    ServiceDistribution, StateSpaceTooLarge, SystemParams, pmf_total_variation,
)

BASE = SystemParams(0.2, 1 / 3)


@pytest.fixture(scope="module")
def geo12_table():
    model = ModelSpec.ber_geo12(BASE)
    return model, chain.solve_model(model, 600)


class TestKernel:
    def test_size_one_successors(self):
        k = chain.build_kernel(ModelSpec.ber_geo11(BASE), 50)
        succ = k.successors((10, 4))
        assert succ == pytest.approx({(11, 5): 2 / 3, (5, 0): 1 / 3})

    def test_size_two_empty_successors(self):
        k = chain.build_kernel(ModelSpec.ber_geo12(BASE), 50)
        assert k.successors((7, 0, 0)) == pytest.approx(
            {(8, 0, 0): 0.8, (8, 1, 0): 0.2 * 2 / 3, (1, 0, 0): 0.2 / 3})

    def test_size_two_full_successors(self):
        k = chain.build_kernel(ModelSpec.ber_geo12(BASE), 50)
        assert k.successors((9, 5, 2)) == pytest.approx({(10, 6, 3): 2 / 3, (6, 3, 0): 1 / 3})

    def test_replacing_full_successors(self):
        k = chain.build_kernel(ModelSpec.ber_geo12star(BASE), 50)
        assert k.successors((9, 5, 2)) == pytest.approx({
            (10, 6, 3): 0.8 * 2 / 3, (10, 6, 1): 0.2 * 2 / 3,
            (6, 3, 0): 0.8 / 3, (6, 1, 0): 0.2 / 3})

    def test_preemptive_successors(self):
        model = ModelSpec.ber_geo11_preemptive(BASE, 4)
        k = chain.build_kernel(model, 60)
        g3 = PreemptionPolicy.increasing(4).value(3, 0.2)
        pre = 0.2 * g3
        expected = {(9, 4): (1 - pre) * 2 / 3, (4, 0): (1 - pre) / 3,
                    (9, 1): pre * 2 / 3, (1, 0): pre / 3}
        assert k.successors((8, 3)) == pytest.approx(expected)

    def test_truncation_clamps_aoi(self):
        k = chain.build_kernel(ModelSpec.ber_geo11(BASE), 40)
        succ = k.successors((40, 0))
        assert succ[(40, 0)] == pytest.approx(0.8)
        assert succ[(40, 1)] == pytest.approx(0.2 * 2 / 3)

    @pytest.mark.parametrize("model", [
        ModelSpec.ber_geo11(BASE), ModelSpec.ber_geo11_preemptive(BASE, 4),
        ModelSpec.ber_geo12(BASE), ModelSpec.ber_geo12star(BASE),
        ModelSpec.ber_geo1c(SystemParams(0.2, 0.5), 3),
        ModelSpec.ber_g11(BASE, ServiceDistribution.general([0.2, 0.3, 0.5])),
    ], ids=lambda m: m.variant)
    def test_rows_are_stochastic(self, model):
        k = chain.build_kernel(model, 60)
        rng = np.random.default_rng(0)
        rows = rng.integers(0, k.size, size=min(1000, k.size))
        sums = k.row_sums()[rows]
        np.testing.assert_allclose(sums, 1.0, atol=1e-12)

    def test_states_are_valid_and_sorted(self):
        k = chain.build_kernel(ModelSpec.ber_geo1c(SystemParams(0.2, 0.5), 3), 30)
        st = k.states
        assert np.all(st[:, 0] >= 1)
        for i in range(1, st.shape[1]):
            prev, cur = st[:, i - 1], st[:, i]
            assert np.all((cur == 0) | (cur < prev))
            if i >= 2:
                assert np.all((prev > 0) | (cur == 0))
        keys = [tuple(r) for r in st.tolist()]
        assert keys == sorted(keys)

    def test_capacity_two_matches_dedicated_kernel(self):
        prm = SystemParams(0.3, 0.55)
        a = chain.build_kernel(ModelSpec.ber_geo12(prm), 80)
        b = chain.build_kernel(ModelSpec.ber_geo1c(prm, 2), 80)
        assert np.array_equal(a.states, b.states)
        assert (a.matrix != b.matrix).nnz == 0

    def test_capacity_one_matches_dedicated_kernel(self):
        a = chain.build_kernel(ModelSpec.ber_geo11(BASE), 80)
        b = chain.build_kernel(ModelSpec.ber_geo1c(BASE, 1), 80)
        assert np.array_equal(a.states, b.states)
        assert abs(a.matrix - b.matrix).max() < 1e-15

    def test_state_budget(self):
        with pytest.raises(StateSpaceTooLarge):
            chain.build_kernel(ModelSpec.ber_geo12(BASE), 600, max_states=1000)

    def test_small_n_rejected(self):
        with pytest.raises(InvalidParameters):
            chain.build_kernel(ModelSpec.ber_geo11(BASE), 2)

    def test_dump_format(self):
        k = chain.build_kernel(ModelSpec.ber_geo11(BASE), 4)
        out = io.StringIO()
        k.dump(out)
        lines = out.getvalue().splitlines()
        assert lines[0].startswith("(1,0) -> ")
        assert sum(len(k.transitions(i)) for i in range(k.size)) == len(lines)
        _, rhs = lines[0].split(" -> ")
        assert len(rhs.split()[1].replace(".", "").lstrip("0")) <= 17


class TestSolve:
    def test_two_state_symmetric(self):
        k = chain.kernel_from_matrix(np.array([[0.5, 0.5], [0.5, 0.5]]))
        table = chain.solve_stationary(k)
        np.testing.assert_allclose(table.probs, [0.5, 0.5])
        assert table.converged

    def test_two_state_asymmetric(self):
        k = chain.kernel_from_matrix(np.array([[0.9, 0.1], [0.3, 0.7]]))
        table = chain.solve_stationary(k)
        np.testing.assert_allclose(table.probs, [0.75, 0.25], atol=1e-11)

    def test_identity_is_flagged(self):
        k = chain.kernel_from_matrix(np.eye(3))
        table = chain.solve_stationary(k)
        assert not table.converged
        np.testing.assert_allclose(table.probs, 1 / 3)
        with pytest.raises(NotConverged) as info:
            chain.solve_stationary(k, strict=True)
        assert info.value.table is not None

    def test_iteration_cap(self):
        k = chain.build_kernel(ModelSpec.ber_geo11(BASE), 100)
        table = chain.solve_stationary(k, max_iters=3)
        assert not table.converged and table.iterations == 3

    def test_direct_solver_agrees(self):
        k = chain.build_kernel(ModelSpec.ber_geo12(BASE), 60)
        a = chain.solve_stationary(k)
        b = chain.solve_stationary_direct(k)
        np.testing.assert_allclose(a.probs, b.probs, atol=1e-11)

    def test_size_one_against_closed_form(self):
        model = ModelSpec.ber_geo11(BASE)
        table = chain.solve_model(model, 400)
        assert table.residual < 1e-11
        assert abs(table.probs.sum() - 1) < 1e-10
        pmf = chain.aoi_marginal(table, model)
        assert pmf_total_variation(pmf, A.ber_geo11_aoi_pmf(BASE, 400)) < 1e-6

    def test_preemptive_seeds(self):
        """The chain reproduces the exact rational pi(n, 1) values at (1/5, 1/3, N_p=4)."""
        sol = A.preemptive_geo_solution(BASE, 4)
        table = chain.solve_model(ModelSpec.ber_geo11_preemptive(BASE, 4), 300)
        for n, seed in zip((3, 4, 5), sol.seeds):
            assert table.lookup((n, 1)) == pytest.approx(seed, abs=1e-12)
        assert table.lookup((5, 1)) == pytest.approx(75152 / 6530625, abs=1e-12)

    def test_general_service(self):
        svc = ServiceDistribution.general([0.3, 0.1, 0.25, 0.35])
        prm = SystemParams(0.25, 0.5)
        for pol in (PreemptionPolicy.none(), PreemptionPolicy.custom(lambda m: min(1.0, 0.2 * m))):
            model = ModelSpec.ber_g11(prm, svc, pol)
            table = chain.solve_model(model, 200)
            ref = A.ber_g11_aoi_pmf(prm, svc, pol, 200)
            got = chain.marginal(table, 0)
            np.testing.assert_allclose(got.probs[:150], ref.probs[:150], atol=1e-10)

    def test_unit_service(self):
        prm = SystemParams(0.3, 0.5)
        model = ModelSpec.ber_g11(prm, ServiceDistribution.general([1.0]))
        table = chain.solve_model(model, 120)
        assert table.probs[table.states[:, 1] >= 1].sum() < 1e-12
        n = np.arange(1, 60)
        np.testing.assert_allclose(chain.marginal(table, 0).probs[:59], 0.3 * 0.7 ** (n - 1),
                                   atol=1e-11)


class TestMarginals:
    def test_aoi(self, geo12_table):
        model, table = geo12_table
        pmf = chain.aoi_marginal(table, model)
        assert pmf_total_variation(pmf, A.ber_geo12_aoi_pmf(BASE, 600)) < 1e-6

    def test_waiting_time(self, geo12_table):
        _, table = geo12_table
        w = chain.marginal(table, 2)
        ref = A.ber_geo12_waiting_time_pmf(BASE, 200)
        np.testing.assert_allclose(w.probs[:60], ref.probs[:60], atol=1e-7)

    def test_system_time(self, geo12_table):
        _, table = geo12_table
        t = chain.marginal(table, 1)
        ref = A.ber_geo12_system_time_pmf(BASE, 200)
        np.testing.assert_allclose(t.probs[:60], ref.probs[:60], atol=1e-7)

    def test_replacing_queue_times(self):
        model = ModelSpec.ber_geo12star(BASE)
        table = chain.solve_model(model, 300)
        for comp, ref in ((1, A.ber_geo12star_system_time_pmf(BASE, 100)),
                          (2, A.ber_geo12star_waiting_time_pmf(BASE, 100))):
            np.testing.assert_allclose(chain.marginal(table, comp).probs[:60], ref.probs[:60],
                                       atol=1e-9)

    def test_busy_service_age_is_geometric(self):
        table = chain.solve_model(ModelSpec.ber_geo11(BASE), 400)
        cond = chain.marginal(table, 1, lambda st: st[:, 1] >= 1)
        assert cond.support_start == 1
        m = np.arange(1, 41)
        np.testing.assert_allclose(cond.probs[:40], (2 / 3) ** (m - 1) / 3, atol=1e-7)

    def test_empty_condition(self):
        table = chain.solve_model(ModelSpec.ber_geo11(BASE), 50)
        with pytest.raises(EmptyCondition):
            chain.marginal(table, 1, lambda st: st[:, 0] > 10_000)

    def test_component_range(self):
        table = chain.solve_model(ModelSpec.ber_geo11(BASE), 50)
        with pytest.raises(InvalidParameters):
            chain.marginal(table, 2)

    @pytest.mark.parametrize("model", [ModelSpec.ber_geo12(SystemParams(0.2, 0.5)),
                                       ModelSpec.ber_geo11_preemptive(SystemParams(0.2, 0.5))],
                             ids=lambda m: m.variant)
    def test_doubling_n(self, model):
        small = chain.solve_model(model, 300)
        large = chain.solve_model(model, 600)
        for comp in range(model.dimension):
            ratio = max(1 - model.params.p, 1 - model.params.gamma) if comp == 0 else None
            a = chain.marginal(small, comp, tail_ratio=ratio)
            b = chain.marginal(large, comp, tail_ratio=ratio)
            n = min(len(a), len(b))
            diff = np.abs(a.probs[:n] - b.probs[:n])
            assert np.all(diff < a.tail_bound)
