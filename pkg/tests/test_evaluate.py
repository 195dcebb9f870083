import numpy as np
import pytest

from slpkit import evaluate as ev
from slpkit.modulation import build_constellation
from slpkit.network import PerturbationNet

QPSK = build_constellation("psk", 4)


class TestWilson:
    def test_no_trials(self):
        assert ev.wilson_interval(0, 0) == (0.0, 0.0)

    def test_against_direct_formula(self):
        k, n, z = 13, 200, 1.96
        center, half = ev.wilson_interval(k, n, z)
        p = k / n
        denom = 1 + z**2 / n
        assert center == pytest.approx((p + z**2 / (2 * n)) / denom)
        assert half == pytest.approx(
            z * np.sqrt(p * (1 - p) / n + z**2 / (4 * n**2)) / denom
        )

    def test_halfwidth_shrinks(self):
        _, h1 = ev.wilson_interval(10, 100)
        _, h2 = ev.wilson_interval(100, 1000)
        assert h2 < h1


class TestEvalSer:
    def test_noiseless_zero_forcing_is_exact(self):
        schemes = {"zf": ev.make_static_scheme("zf", QPSK, 1.0)}
        rows = ev.eval_ser(schemes, 2, 3, 4, QPSK, 1.0, [300.0], 20, seed=0)
        assert rows[0].metric == 0.0

    def test_paired_ordering_cizf_vs_zf(self):
        # gamma dominance implies SER dominance under paired noise (PSK)
        schemes = {
            "zf": ev.make_static_scheme("zf", QPSK, 1.0),
            "cizf": ev.make_static_scheme("cizf", QPSK, 1.0),
        }
        rows = ev.eval_ser(schemes, 3, 3, 8, QPSK, 1.0, [12.0], 150, seed=1)
        by = {r.scheme: r for r in rows}
        assert by["cizf"].metric <= by["zf"].metric
        assert by["zf"].n_trials == 150 * 3 * 8

    def test_monotone_in_snr(self):
        schemes = {"zf": ev.make_static_scheme("zf", QPSK, 1.0)}
        rows = ev.eval_ser(schemes, 2, 3, 8, QPSK, 1.0, [0.0, 10.0, 20.0], 100, seed=2)
        sers = [r.metric for r in rows]
        assert sers[0] >= sers[1] >= sers[2]

    def test_learned_scheme_runs(self):
        net = PerturbationNet(width=4, depth=1, seed=0).eval_mode()
        schemes = {"cizf-dl": ev.make_static_scheme("cizf-dl", QPSK, 1.0, net=net)}
        rows = ev.eval_ser(schemes, 2, 2, 4, QPSK, 1.0, [10.0], 10, seed=3)
        assert 0.0 <= rows[0].metric <= 1.0


class TestPowerSweep:
    def test_doubling_threshold_doubles_power(self):
        from slpkit.modulation import symbols_from_indices

        shapers = {"zf": lambda h, s: symbols_from_indices(QPSK, s)}
        rows = ev.eval_power_vs_sinr(shapers, 2, 3, 4, QPSK, 1.0, [0.0, 3.0103], 30, seed=4)
        assert rows[1].metric == pytest.approx(2 * rows[0].metric, rel=1e-4)

    def test_cizf_requires_no_more_power_than_zf(self):
        from slpkit.modulation import symbols_from_indices
        from slpkit.precoding import cizf_optimal

        shapers = {
            "zf": lambda h, s: symbols_from_indices(QPSK, s),
            "cizf": lambda h, s: cizf_optimal(h, s, QPSK, 1.0)[2],
        }
        rows = ev.eval_power_vs_sinr(shapers, 3, 3, 6, QPSK, 1.0, [10.0], 50, seed=5)
        by = {r.scheme: r for r in rows}
        assert by["cizf"].metric <= by["zf"].metric


class TestBench:
    def test_reports_all_and_orders_costs(self):
        import time

        fast = lambda: None
        slow = lambda: time.sleep(0.002)
        out = ev.bench_runtime({"fast": fast, "slow": slow}, n_symbols=10, reps=5, warmup=1)
        assert set(out) == {"fast", "slow"}
        assert out["slow"] > out["fast"]


def test_write_curves(tmp_path):
    rows = [ev.CurvePoint("zf", 10.0, 0.125, 4000, 0.01)]
    path = tmp_path / "c.csv"
    ev.write_curves(path, rows)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "scheme,x_db,metric,n_trials,ci_half"
    assert lines[1].startswith("zf,10.0,0.125,4000,")
