import csv

import numpy as np
import pytest

from mixorder import mvn
from mixorder.cli import (
    CLUSTER_HEADER,
    LIMIT_HEADER,
    TEST_HEADER,
    main,
    parse_args,
    preprocess_rat,
)
from mixorder.errors import DataError
from mixorder.mixture import MixtureParams, sample, write_csv
from mixorder.simulation import SimulationTable


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture
def two_cluster_csv(tmp_path):
    p = MixtureParams(np.array([0.5, 0.5]), np.array([[-4.0, 0.0], [4.0, 0.0]]),
                      np.stack([np.eye(2)] * 2))
    data = sample(p, 80, np.random.default_rng(0))
    path = tmp_path / "data.csv"
    write_csv(path, ("a", "b"), [tuple(r) for r in data.x])
    return path


class TestConfig:
    def write(self, tmp_path, text):
        path = tmp_path / "run.cfg"
        path.write_text(text)
        return str(path)

    def test_values_and_override(self, tmp_path):
        cfg = self.write(tmp_path, "schema_version = 1\nB = 9  # few\nstat = lrt-homo\n")
        args = parse_args(["--config", cfg, "simulate", "--reps", "0"])
        assert args.B == 9 and args.stat == "lrt-homo"
        args = parse_args(["--config", cfg, "simulate", "--B", "19"])
        assert args.B == 19

    def test_unknown_key(self, tmp_path):
        cfg = self.write(tmp_path, "schema_version = 1\nbogus = 3\n")
        assert main(["--config", cfg, "simulate"]) == 2

    def test_duplicate_key(self, tmp_path):
        cfg = self.write(tmp_path, "schema_version = 1\nB = 3\nB = 4\n")
        assert main(["--config", cfg, "simulate"]) == 2

    def test_missing_version(self, tmp_path):
        cfg = self.write(tmp_path, "B = 3\n")
        assert main(["--config", cfg, "simulate"]) == 2

    def test_bad_value(self, tmp_path):
        cfg = self.write(tmp_path, "schema_version = 1\nB = -3\n")
        assert main(["--config", cfg, "simulate"]) == 2

    def test_bad_flag(self):
        assert main(["simulate", "--design", "nope", "--reps", "0"]) == 2
        assert main(["simulate", "--stat", "wald"]) == 2


class TestPreprocess:
    def test_all_ones(self):
        np.testing.assert_array_equal(preprocess_rat(np.ones((4, 6))), np.zeros((4, 2)))

    def test_column_constant(self):
        body = np.tile([1.0, 2.0, 3.0, 4.0, 5.0, 6.0], (5, 1))
        np.testing.assert_allclose(preprocess_rat(body), 0.0, atol=1e-15)

    def test_three_row_fixture(self):
        logs = np.array([[0, 2, 1, 1, 1, 1], [1, 0, 0, 2, 0, 0], [2, 1, 3, 0, 1, 2]], float)
        # every column median of the logs is 1
        np.testing.assert_allclose(preprocess_rat(np.exp(logs)),
                                   [[0.0, 0.0], [-0.5, -0.5], [0.5, 0.5]], atol=1e-14)

    def test_nonpositive_location(self):
        body = np.ones((3, 6))
        body[1, 4] = 0.0
        with pytest.raises(DataError, match="row 2, column 5"):
            preprocess_rat(body)

    def test_command(self, tmp_path):
        src = tmp_path / "raw.csv"
        write_csv(src, [f"c{i}" for i in range(6)], [tuple(np.ones(6))] * 3)
        out = tmp_path / "z.csv"
        assert main(["preprocess-rat", str(src), "--out", str(out)]) == 0
        assert read_rows(out)[0] == ["z0", "z1"]


class TestTest:
    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text("")
        assert main(["test", "--data", str(path)]) == 3

    def test_missing_file(self, tmp_path):
        assert main(["test", "--data", str(tmp_path / "none.csv")]) == 3

    def test_sequential_report(self, tmp_path, two_cluster_csv, capsys):
        out, clusters = tmp_path / "report.csv", tmp_path / "clusters.csv"
        code = main(["test", "--data", str(two_cluster_csv), "--stat", "lrt-homo", "--B", "19",
                     "--max-m", "3", "--out", str(out), "--clusters", str(clusters)])
        assert code == 0
        rows = read_rows(out)
        assert tuple(rows[0]) == TEST_HEADER
        m0s = [int(r[0]) for r in rows[1:]]
        assert m0s == list(range(1, len(m0s) + 1))
        assert float(rows[1][2]) == 0.0
        assert m0s[-1] == 2
        cl = read_rows(clusters)
        assert tuple(cl[0]) == CLUSTER_HEADER and len(cl) == 81
        assert {r[1] for r in cl[1:]} == {"0", "1"}
        assert "selected M=2" in capsys.readouterr().out


class TestSimulateAndLimit:
    def test_zero_rep_dry_run(self, tmp_path):
        out = tmp_path / "sim.csv"
        assert main(["simulate", "--reps", "0", "--out", str(out)]) == 0
        assert read_rows(out) == [list(SimulationTable.HEADER)]

    def test_limit_deterministic(self, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        argv = ["limit", "--draws", "2000", "--n-mc", "20000", "--seed", "3", "--out"]
        assert main(argv + [str(a)]) == 0
        assert main(argv + [str(b)]) == 0
        rows = read_rows(a)
        assert tuple(rows[0]) == LIMIT_HEADER
        assert rows == read_rows(b)
        qs = [float(r[1]) for r in rows[1:]]
        assert qs == sorted(qs)

    @pytest.mark.slow
    def test_limit_chi_square_quantile(self, tmp_path, capsys):
        out = tmp_path / "q.csv"
        assert main(["limit", "--levels", "0.05", "--out", str(out)]) == 0
        assert abs(float(read_rows(out)[1][1]) - 5.9915) < 0.15


class TestDerivcheck:
    def test_passes(self, capsys):
        assert main(["derivcheck", "--cases", "20"]) == 0
        text = capsys.readouterr().out
        assert "FAIL" not in text
        assert "max relative error" in text

    def test_detects_sign_error(self, monkeypatch, capsys):
        table = list(mvn.PAIRING_TABLES[4])
        sign, pairs, singles = table[0]
        table[0] = (-sign, pairs, singles)
        monkeypatch.setitem(mvn.PAIRING_TABLES, 4, tuple(table))
        assert main(["derivcheck", "--cases", "10"]) == 4
        assert "FAIL" in capsys.readouterr().out
