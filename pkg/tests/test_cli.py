import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from ntnsync.cli import main
from ntnsync.waveform import PreambleConfig, read_iq


def write_config(path, **kw):
    cfg = dict(snr_db_list=[3.0], trials_per_point=2, method="DiffCorr", master_seed=1)
    cfg.update(kw)
    path.write_text(json.dumps(cfg))
    return path


class TestRun:
    def test_run_and_summarize(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.json")
        assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o"), "--threads", "1"]) == 0
        csv_path = tmp_path / "o" / "records.csv"
        assert csv_path.exists()
        capsys.readouterr()
        assert main(["summarize", str(csv_path)]) == 0
        groups = json.loads(capsys.readouterr().out)
        assert groups[0]["method"] == "DiffCorr" and groups[0]["n_trials"] == 2
        assert "toa_cdf" not in groups[0]

    def test_summarize_to_file_with_cdf(self, tmp_path):
        cfg = write_config(tmp_path / "c.json")
        main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")])
        out = tmp_path / "s.json"
        assert main(["summarize", str(tmp_path / "o" / "records.csv"), "--out", str(out), "--cdf"]) == 0
        assert "toa_cdf" in json.loads(out.read_text())[0]

    def test_missing_config(self, tmp_path):
        assert main(["run", "--config", str(tmp_path / "nope.json")]) == 1

    def test_invalid_config(self, tmp_path):
        cfg = write_config(tmp_path / "c.json", trials_per_point=0)
        assert main(["run", "--config", str(cfg)]) == 1

    def test_unknown_key(self, tmp_path):
        cfg = write_config(tmp_path / "c.json", colour="blue")
        assert main(["run", "--config", str(cfg)]) == 1

    def test_missing_weights(self, tmp_path):
        cfg = write_config(tmp_path / "c.json")
        assert main(["run", "--config", str(cfg), "--tire-weights", str(tmp_path / "w.bin")]) == 1

    def test_bad_arguments(self):
        with pytest.raises(SystemExit) as exc:
            main(["run"])
        assert exc.value.code == 1

    def test_runtime_failure(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("trial_id\n0\n")
        assert main(["summarize", str(bad)]) == 2

    def test_console_script(self, tmp_path):
        r = subprocess.run([sys.executable, "-m", "ntnsync.cli", "summarize", str(tmp_path / "none.csv")],
                           capture_output=True, text=True)
        assert r.returncode == 1
        assert "config error" in r.stderr


class TestGen:
    def test_clean_preamble(self, tmp_path):
        pre = tmp_path / "p.json"
        pre.write_text(json.dumps(PreambleConfig(n_rep=1).to_dict()))
        iq = tmp_path / "x.iq"
        assert main(["gen", "--preamble", str(pre), "--iq", str(iq)]) == 0
        buf = read_iq(iq)
        assert len(buf) == 4 * 3072
        np.testing.assert_allclose(np.abs(buf.samples), 1.0, atol=1e-6)

    def test_impaired(self, tmp_path):
        pre = tmp_path / "p.json"
        pre.write_text(json.dumps(PreambleConfig(n_rep=1).to_dict()))
        iq = tmp_path / "x.iq"
        assert main(["gen", "--preamble", str(pre), "--iq", str(iq), "--toa-us", "100",
                     "--cfo-hz", "200", "--snr-db", "10", "--channel", "TdlC", "--seed", "3"]) == 0
        assert len(read_iq(iq)) > 4 * 3072

    def test_bad_preamble(self, tmp_path):
        pre = tmp_path / "p.json"
        pre.write_text(json.dumps({"n_rep": -1}))
        assert main(["gen", "--preamble", str(pre), "--iq", str(tmp_path / "x.iq")]) == 1


class TestDemoPhase:
    def test_fig3_trace(self, tmp_path):
        out = tmp_path / "phase.csv"
        assert main(["demo-phase", "--scenario", "fig3", "--csv", str(out)]) == 0
        with open(out, newline="") as fh:
            rows = list(csv.DictReader(fh))
        n = np.array([int(r["sample_index"]) for r in rows])
        phi = np.array([float(r["phase"]) for r in rows])
        assert np.all(np.diff(n) == 1)
        # nine decimals may round a value just below pi up to it
        assert np.all((phi >= -np.pi - 1e-9) & (phi <= np.pi + 1e-9))
        # inside the first symbol group the wraps are fs / 1500 Hz apart
        jumps = n[1:][np.abs(np.diff(phi)) > np.pi]
        first = jumps[(jumps > 200) & (jumps < 3072)]
        assert np.diff(first) == pytest.approx([1280], abs=1)

    def test_even_window_rejected(self, tmp_path):
        assert main(["demo-phase", "--csv", str(tmp_path / "p.csv"), "--window", "4"]) == 2
