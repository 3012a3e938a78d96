import csv
import json

import numpy as np
import pytest

from foldcf.cli import main, render_svg, read_trace_csv
from foldcf.cfengine import TraceRecord
from foldcf.exchange import write_matrix_csv

FAST = ["--steps-per-phase", "5"]


@pytest.fixture
def fasta(tmp_path):
    p = tmp_path / "toy.fa"
    p.write_text(">p1\nMKTAYIAKQRQISFVK\n>p2\nARNDCQEGHILKMFPS\n")
    return p


def explain(fasta, out, *extra):
    return main(["explain", "--mode", "deletion-necessary", "--fasta", str(fasta),
                 "--predictor", "surrogate", "--seed", "42", "--out", str(out), *FAST, *extra])


class TestExplain:
    def test_writes_report_per_record(self, fasta, tmp_path):
        assert explain(fasta, tmp_path / "runs") == 0
        for pid in ("p1", "p2"):
            d = json.loads((tmp_path / "runs" / f"{pid}.json").read_text())
            assert d["protein_id"] == pid and d["complete"] is True
            assert (tmp_path / "runs" / f"{pid}.trace.csv").exists()
            assert (tmp_path / "runs" / "logs" / f"{pid}.log").read_text().strip()

    def test_byte_identical_reruns(self, fasta, tmp_path):
        explain(fasta, tmp_path / "a")
        explain(fasta, tmp_path / "b", "--jobs", "2")
        for name in ("p1.json", "p2.json", "p1.trace.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_report_config_reproduces_run(self, fasta, tmp_path):
        explain(fasta, tmp_path / "a")
        cfg = json.loads((tmp_path / "a" / "p1.json").read_text())["config"]
        assert cfg["cf"]["steps_per_phase"] == 5
        assert cfg["predictor"]["seed"] == 42
        assert cfg["sequence"] == "MKTAYIAKQRQISFVK"

    def test_external_is_rejected(self, fasta, tmp_path, capsys):
        rc = main(["explain", "--mode", "substitution-radical", "--fasta", str(fasta),
                   "--predictor", "external", "--external-command", "true",
                   "--out", str(tmp_path)])
        assert rc == 1
        assert "external predictor is forward-only" in capsys.readouterr().err

    def test_env_default_out(self, fasta, tmp_path, monkeypatch):
        monkeypatch.setenv("FOLDCF_OUT", str(tmp_path / "envout"))
        assert main(["explain", "--mode", "deletion-sufficient", "--fasta", str(fasta), *FAST]) == 0
        assert (tmp_path / "envout" / "p1.json").exists()

    def test_bad_fasta(self, tmp_path, capsys):
        bad = tmp_path / "bad.fa"
        bad.write_text(">a\nAB\n")
        assert explain(bad, tmp_path / "o") == 1
        assert "line 2" in capsys.readouterr().err

    def test_missing_fasta(self, tmp_path):
        assert explain(tmp_path / "nope.fa", tmp_path / "o") == 1

    def test_bad_flag_is_user_error(self):
        assert main(["explain", "--mode", "bogus"]) == 1

    def test_msa_dir(self, fasta, tmp_path):
        msa = tmp_path / "msa"
        msa.mkdir()
        (msa / "p1.msa").write_text("MKTAYIAKQRQISFVK\nMKTAYIAK-RQISFVK\n")
        assert explain(fasta, tmp_path / "o", "--msa-dir", str(msa)) == 0

    def test_bad_msa(self, fasta, tmp_path):
        msa = tmp_path / "msa"
        msa.mkdir()
        (msa / "p1.msa").write_text("MKT\n")
        assert explain(fasta, tmp_path / "o", "--msa-dir", str(msa)) == 1

    def test_min_length_filters_all(self, fasta, tmp_path):
        assert explain(fasta, tmp_path / "o", "--min-length", "80") == 1


class TestEvaluate:
    def test_summary_and_baselines(self, fasta, tmp_path):
        explain(fasta, tmp_path / "runs")
        args = ["evaluate", "--fasta", str(fasta), "--reports", str(tmp_path / "runs"),
                "--baseline", "random", "--fraction", "0.33", "--seed", "7"]
        assert main(args + ["--out", str(tmp_path / "e1")]) == 0
        assert main(args + ["--out", str(tmp_path / "e2")]) == 0
        s1 = (tmp_path / "e1" / "summary.csv").read_text()
        assert s1 == (tmp_path / "e2" / "summary.csv").read_text()
        rows = list(csv.DictReader(s1.splitlines()))
        assert [(r["method"], r["criterion"]) for r in rows] == [
            ("ours", "PN"), ("random", "PN"), ("ours", "PS"), ("random", "PS")]

    def test_evolutionary_without_msa_gives_error_rows(self, fasta, tmp_path):
        rc = main(["evaluate", "--fasta", str(fasta), "--baseline", "evolutionary",
                   "--criterion", "PN", "--out", str(tmp_path)])
        assert rc == 1
        rows = json.loads((tmp_path / "per_protein.json").read_text())
        assert len(rows) == 2 and all("MSA" in r["error"] for r in rows)

    def test_missing_reports(self, fasta, tmp_path):
        (tmp_path / "empty").mkdir()
        assert main(["evaluate", "--fasta", str(fasta), "--reports", str(tmp_path / "empty"),
                     "--out", str(tmp_path / "o")]) == 1

    def test_nothing_to_do(self, fasta, tmp_path):
        assert main(["evaluate", "--fasta", str(fasta), "--out", str(tmp_path)]) == 1


class TestExchangeability:
    def test_fixture(self, tmp_path):
        assert main(["exchangeability", "--fixture", "paper", "--out", str(tmp_path)]) == 0
        text = (tmp_path / "conservative_exchangeability.csv").read_text()
        row_a = next(r for r in csv.reader(text.splitlines()) if r[0] == "A")
        assert float(row_a[2]) == 19 / 782

    def test_indicator_correlation(self, tmp_path):
        ind = tmp_path / "miyata.csv"
        ind.write_text(write_matrix_csv(np.random.default_rng(0).uniform(0.1, 3, (20, 20))))
        assert main(["exchangeability", "--fixture", "paper", "--indicator", str(ind),
                     "--out", str(tmp_path / "o")]) == 0
        rows = list(csv.DictReader((tmp_path / "o" / "correlations.csv").read_text().splitlines()))
        assert [r["exchangeability"] for r in rows] == ["conservative", "radical"]
        assert all(r["indicator"] == "miyata" and -1 <= float(r["pearson_r"]) <= 1 for r in rows)

    def test_malformed_indicator_names_cell(self, tmp_path, capsys):
        ind = tmp_path / "bad.csv"
        ind.write_text(write_matrix_csv(np.ones((20, 20))).replace("R,1.0,1.0", "R,1.0,x", 1))
        assert main(["exchangeability", "--fixture", "paper", "--indicator", str(ind),
                     "--out", str(tmp_path / "o")]) == 1
        assert "(R,R)" in capsys.readouterr().err

    def test_no_source(self, tmp_path):
        assert main(["exchangeability", "--out", str(tmp_path)]) == 1

    def test_from_reports(self, fasta, tmp_path):
        main(["explain", "--mode", "substitution-radical", "--fasta", str(fasta),
              "--out", str(tmp_path / "sub"), "--steps-per-phase", "20"])
        rc = main(["exchangeability", "--reports", str(tmp_path / "sub"), "--fasta", str(fasta),
                   "--out", str(tmp_path / "o")])
        assert rc == 0
        assert (tmp_path / "o" / "radical_counts.csv").exists()


class TestPlot:
    def trace(self, n=300, phases=3):
        per = n // phases
        return [TraceRecord(i, i // per, 1.0 - i / n, 1.0 - 0.5 * i / n, 0.1 * i) for i in range(n)]

    def test_phase_markers(self):
        svg = render_svg(self.trace())
        # one marker per boundary in each of the three panels
        assert svg.count('class="phase-boundary"') == 2 * 3
        assert svg.startswith("<svg") and svg.rstrip().endswith("</svg>")

    def test_deterministic(self, tmp_path):
        r = self.trace()
        assert render_svg(r) == render_svg(r)

    def test_cli_round_trip(self, fasta, tmp_path):
        explain(fasta, tmp_path / "runs")
        tr = tmp_path / "runs" / "p1.trace.csv"
        assert main(["plot", str(tr), "-o", str(tmp_path / "a.svg")]) == 0
        assert main(["plot", str(tr), "-o", str(tmp_path / "b.svg")]) == 0
        assert (tmp_path / "a.svg").read_bytes() == (tmp_path / "b.svg").read_bytes()
        assert len(read_trace_csv(tr.read_text())) == 15

    def test_empty_trace(self, tmp_path):
        p = tmp_path / "t.csv"
        p.write_text("step,phase,loss,tm,l1\n")
        assert main(["plot", str(p)]) == 1

    def test_missing_trace(self, tmp_path):
        assert main(["plot", str(tmp_path / "none.csv")]) == 1
