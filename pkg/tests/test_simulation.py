import numpy as np
import pytest

from mixorder.errors import ArgumentError
from mixorder.simulation import (
    DESIGNS,
    SimulationConfig,
    estimate_runtime,
    get_design,
    replication_seeds,
    simulate,
)

TINY = dict(n=60, reps=3, B=4, K=2)


class TestDesigns:
    def test_table1_model2_correlation(self):
        d = get_design("table1-model1")
        assert d.a_n == "sqrt" and d.M0 == 1
        np.testing.assert_array_equal(get_design("table1-model2").params.sigmas[0],
                                      [[1, 0.5], [0.5, 1]])

    def test_power_designs(self):
        p = get_design("table3-model2").params
        np.testing.assert_array_equal(p.alphas, [0.3, 0.7])
        np.testing.assert_array_equal(p.mus, [[-1, -1], [1, 1]])
        np.testing.assert_array_equal(get_design("table2-model3").params.sigmas[0], 2 * np.eye(2))

    def test_m0_two_designs(self):
        d = get_design("table4-model1")
        assert d.M0 == 2 and d.under_null and d.a_n == "one"
        np.testing.assert_array_equal(d.params.alphas, [0.7, 0.3])
        p = get_design("table6-model2").params
        np.testing.assert_array_equal(p.sigmas, [0.5 * np.eye(2), np.eye(2), 2 * np.eye(2)])

    def test_every_design_samples(self, rng):
        from mixorder.mixture import sample

        for design in DESIGNS.values():
            assert sample(design.params, 10, rng).n == 10

    def test_unknown(self):
        with pytest.raises(ArgumentError, match="known designs"):
            get_design("table9-model1")


class TestHarness:
    def test_seed_streams_differ(self):
        a, sa = replication_seeds(0, 0)
        b, sb = replication_seeds(0, 1)
        assert sa != sb and a.random() != b.random()

    def test_worker_count_invariance(self):
        cfg = SimulationConfig("table1-model1", **TINY)
        one = simulate(cfg, n_jobs=1)
        two = simulate(cfg, n_jobs=2)
        np.testing.assert_array_equal(one.p_values, two.p_values)
        assert one.rows() == two.rows()

    def test_rows_cover_k_and_levels(self):
        table = simulate(SimulationConfig("table1-model1", **TINY))
        assert len(table.rows()) == 2 * 3
        assert all(0 <= row[7] <= 1 for row in table.rows())

    def test_lrt_kind_has_one_k(self):
        table = simulate(SimulationConfig("table1-model1", kind="lrt-homo", **TINY))
        assert {row[5] for row in table.rows()} == {2}

    def test_zero_reps(self, tmp_path):
        table = simulate(SimulationConfig(reps=0))
        assert table.rows() == []

    def test_full_scale_knobs(self):
        cfg = SimulationConfig("table4-model1", reps=2000, B=399)
        est = estimate_runtime(cfg, n_jobs=8, pilot=2)
        assert est.statistics == 2000 * 400
        assert est.total_seconds > 0
        assert "h" in est.format()

    @pytest.mark.parametrize("bad", [dict(n=1), dict(reps=-1), dict(B=0), dict(kind="wald"),
                                     dict(levels=(0.0,))])
    def test_validation(self, bad):
        with pytest.raises(ArgumentError):
            SimulationConfig(**bad)
