"""Command-line front end: output formats, exit codes and subcommands."""

import csv
import io
import json
import shutil
import subprocess

import numpy as np
import pytest

from aoi_lab import analytic, cli
from aoi_lab.core import SystemParams

SIZE_ONE = ["--model", "ber-geo-1-1", "--p", "0.2", "--gamma", "0.3333333333333333"]


def _csv(text):
    return list(csv.reader(io.StringIO(text)))


class TestAnalytic:
    def test_csv_rows(self, capsys):
        assert cli.main(["analytic", *SIZE_ONE, "--n-max", "50"]) == cli.EXIT_OK
        rows = _csv(capsys.readouterr().out)
        assert rows[0] == ["n", "pmf", "cdf"]
        assert len(rows) == 51
        ref = analytic.ber_geo11_aoi_pmf(SystemParams(0.2, 1 / 3), 50)
        got = np.array([float(r[1]) for r in rows[1:]])
        np.testing.assert_allclose(got, ref.probs[:50], rtol=1e-15)
        assert float(rows[1][1]) == pytest.approx(1 / 21, rel=1e-14)

    def test_csv_uses_lf(self, tmp_path):
        out = tmp_path / "a.csv"
        cli.main(["analytic", *SIZE_ONE, "--n-max", "5", "-o", str(out)])
        assert b"\r\n" not in out.read_bytes()

    def test_size_two_columns(self, capsys):
        cli.main(["analytic", "--model", "ber-geo-1-2", "--p", "0.2", "--gamma", "0.5",
                  "--n-max", "10"])
        rows = _csv(capsys.readouterr().out)
        assert rows[0] == ["n", "pmf", "cdf", "t_pmf", "w_pmf"]
        assert rows[1][:3] == ["0", "0", "0"]
        ref = analytic.ber_geo12_waiting_time_pmf(SystemParams(0.2, 0.5), 10)
        assert float(rows[1][4]) == ref[0]

    def test_json_round_trip(self, capsys):
        cli.main(["analytic", *SIZE_ONE, "--n-max", "30", "--format", "json"])
        doc = json.loads(capsys.readouterr().out)
        pmf = analytic.Pmf.from_dict(doc["pmfs"]["aoi"])
        ref = analytic.ber_geo11_aoi_pmf(SystemParams(0.2, 1 / 3), 30)
        assert np.array_equal(pmf.probs, ref.probs)
        assert len(doc["rows"]) == 30

    def test_violation_table(self, capsys):
        cli.main(["analytic", "--model", "ber-geo-1-2", "--p", "0.18", "--gamma", "0.3",
                  "--violation", "20"])
        rows = _csv(capsys.readouterr().out)
        assert rows[0] == ["k", "p_violation", "exponent", "lower_bound"]
        assert len(rows) == 21
        assert all(float(r[2]) > float(r[3]) for r in rows[1:])

    def test_figure(self, capsys):
        assert cli.main(["analytic", "--figure", "2"]) == cli.EXIT_OK
        rows = _csv(capsys.readouterr().out)
        assert rows[0] == ["series", "p", "gamma", "x", "quantity", "value"]
        assert {r[0] for r in rows[1:]} == {"ber-geo-1-1"}
        assert {r[4] for r in rows[1:]} == {"exponent", "lower_bound"}

    def test_figure_with_three_models(self, capsys):
        cli.main(["analytic", "--figure", "4", "--n-max", "10"])
        rows = _csv(capsys.readouterr().out)
        assert {r[0] for r in rows[1:]} == {"ber-geo-1-1", "ber-geo-1-2", "ber-geo-1-2star"}
        assert len(rows) == 1 + 3 * 2 * 10

    def test_service_file(self, tmp_path, capsys):
        path = tmp_path / "svc.txt"
        path.write_text("# law\n1,0.5\n3,0.5\n")
        assert cli.main(["analytic", "--model", "ber-g-1-1", "--p", "0.3", "--gamma", "0.5",
                         "--service-file", str(path), "--n-max", "20"]) == cli.EXIT_OK
        rows = _csv(capsys.readouterr().out)
        assert abs(sum(float(r[1]) for r in rows[1:]) - float(rows[-1][2])) < 1e-12

    def test_bad_service_file(self, tmp_path):
        path = tmp_path / "svc.txt"
        path.write_text("1;0.5\n")
        assert cli.main(["analytic", "--model", "ber-g-1-1", "--p", "0.3", "--gamma", "0.5",
                         "--service-file", str(path)]) == cli.EXIT_INVALID

    def test_no_closed_form(self):
        assert cli.main(["analytic", "--model", "ber-geo-1-c", "--c", "3", "--p", "0.2",
                         "--gamma", "0.5"]) == cli.EXIT_INVALID


class TestExitCodes:
    def test_invalid_parameters(self, capsys):
        assert cli.main(["analytic", "--model", "ber-geo-1-1", "--p", "1.5",
                         "--gamma", "0.5"]) == cli.EXIT_INVALID

    def test_missing_parameters(self):
        assert cli.main(["analytic", "--model", "ber-geo-1-1"]) == cli.EXIT_INVALID

    def test_unstable(self, capsys):
        assert cli.main(["analytic", "--model", "ber-geo-1-2", "--p", "0.5",
                         "--gamma", "0.4"]) == cli.EXIT_DEGENERATE
        assert "unstable: p >= gamma" in capsys.readouterr().err

    def test_unknown_model_is_usage_error(self):
        with pytest.raises(SystemExit) as info:
            cli.main(["analytic", "--model", "mm1"])
        assert info.value.code == cli.EXIT_INVALID


class TestChainAndSimulate:
    def test_chain_matches_analytic(self, capsys):
        cli.main(["chain", *SIZE_ONE, "--N", "300", "--n-max", "40"])
        rows = _csv(capsys.readouterr().out)
        ref = analytic.ber_geo11_aoi_pmf(SystemParams(0.2, 1 / 3), 40)
        got = np.array([float(r[1]) for r in rows[1:]])
        np.testing.assert_allclose(got, ref.probs[:40], atol=1e-10)

    def test_dump_kernel(self, tmp_path, capsys):
        path = tmp_path / "k.txt"
        cli.main(["chain", *SIZE_ONE, "--N", "5", "--dump-kernel", str(path)])
        lines = path.read_text().splitlines()
        assert lines[0].startswith("(1,0) -> ")
        assert all(" -> " in ln for ln in lines)

    def test_simulate_is_reproducible(self, tmp_path):
        outs = []
        for name in ("a.csv", "b.csv"):
            out = tmp_path / name
            cli.main(["simulate", "--model", "ber-geo-1-2", "--p", "0.2", "--gamma", "0.5",
                      "--slots", "30000", "--warmup", "100", "--seed", "5", "-o", str(out)])
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]

    def test_simulate_json_counters(self, capsys):
        cli.main(["simulate", "--model", "ber-geo-1-2star", "--p", "0.2", "--gamma", "0.5",
                  "--slots", "20000", "--warmup", "100", "--format", "json"])
        doc = json.loads(capsys.readouterr().out)
        assert doc["generated"] == (doc["delivered"] + doc["discarded"] + doc["replaced"]
                                    + doc["in_flight"])


class TestCompare:
    def test_pass(self, capsys):
        code = cli.main(["compare", *SIZE_ONE, "--N", "300", "--slots", "300000",
                         "--tol-sim", "0.02"])
        err = capsys.readouterr().err
        assert code == cli.EXIT_OK
        assert "PASS analytic-chain" in err and "PASS analytic-sim" in err

    def test_fail_on_tight_tolerance(self, capsys):
        code = cli.main(["compare", *SIZE_ONE, "--N", "100", "--slots", "50000",
                         "--tol-chain", "1e-15", "--tol-sim", "1e-15"])
        assert code == cli.EXIT_FAIL
        assert "FAIL" in capsys.readouterr().err

    def test_chain_sim_without_closed_form(self, capsys):
        code = cli.main(["compare", "--model", "ber-geo-1-c", "--c", "3", "--p", "0.2",
                         "--gamma", "0.5", "--N", "60", "--slots", "300000",
                         "--tol-sim", "0.03"])
        assert code == cli.EXIT_OK
        assert "chain-sim" in capsys.readouterr().err


@pytest.mark.skipif(shutil.which("aoi-lab") is None, reason="console script not installed")
def test_console_script():
    proc = subprocess.run(["aoi-lab", "analytic", *SIZE_ONE, "--n-max", "3"],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0
    assert proc.stdout.splitlines()[0] == "n,pmf,cdf"
