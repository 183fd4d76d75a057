import json
import math
import random

import numpy as np
import pytest

from ntnsync import harness
from ntnsync.harness import (
    ConfigError,
    ExperimentConfig,
    Method,
    Status,
    TrialRecord,
    draw_trials,
    empirical_cdf,
    records_csv,
    run_campaign,
    summarize,
    trial_seed,
    worker_count,
)


def record(i=0, err=0.0, status="ok", method="Proposed", snr=3.0, cfo_err=0.0):
    return TrialRecord(i, method, snr, 8, "Awgn", 100.0, 50.0, 100.0 + err, 100.0 + err,
                       50.0 + cfo_err, status)


def small(**kw):
    base = dict(snr_db_list=[3.0, 0.0], trials_per_point=4, method="DiffCorr", master_seed=7, workers=1)
    base.update(kw)
    return ExperimentConfig(**base)


class TestExperimentConfig:
    def test_defaults(self):
        c = ExperimentConfig()
        assert c.trials_per_point == 200
        assert c.toa_prior_us == (0.0, 700.0)
        assert c.cfo_prior_hz == (-600.0, 600.0)
        assert c.method is Method.PROPOSED

    @pytest.mark.parametrize("kw", [
        {"trials_per_point": 0},
        {"toa_prior_us": (-1.0, 100.0)},
        {"toa_prior_us": (0.0, 701.0)},
        {"toa_prior_us": (300.0, 200.0)},
        {"cfo_prior_hz": (-700.0, 0.0)},
        {"method": "Oracle"},
        {"channels": ["Rician"]},
        {"snr_db_list": []},
        {"n_rep_list": [0]},
        {"rate_sigma": -1.0},
        {"workers": 0},
    ])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            ExperimentConfig(**kw)

    def test_none_snr_is_noiseless(self):
        assert ExperimentConfig(snr_db_list=[None]).snr_db_list == (math.inf,)

    def test_dict_round_trip(self):
        c = small(snr_db_list=[None, -3.0], channels=["TdlC"])
        assert ExperimentConfig.from_dict(json.loads(json.dumps(c.to_dict()))) == c

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown"):
            ExperimentConfig.from_dict({"trials": 3})

    def test_bad_json(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text("{not json")
        with pytest.raises(ConfigError):
            ExperimentConfig.from_json(p)
        p.write_text("[1, 2]")
        with pytest.raises(ConfigError):
            ExperimentConfig.from_json(p)


class TestSeeds:
    def test_independent_of_method(self):
        a = draw_trials(small(method="Proposed"))
        b = draw_trials(small(method="DwtCusum"))
        assert [(s.toa_us, s.cfo_hz, s.channel_seed) for s in a] == [(s.toa_us, s.cfo_hz, s.channel_seed) for s in b]

    def test_paired_across_points(self):
        c = small(snr_db_list=[3.0, -3.0], channels=["Awgn", "TdlC"], n_rep_list=[8, 32])
        draws = {}
        for s in draw_trials(c):
            draws.setdefault(s.trial_id, set()).add((s.toa_us, s.cfo_hz, s.rate_error, s.channel_seed))
        assert all(len(v) == 1 for v in draws.values())
        assert len({next(iter(v)) for v in draws.values()}) == c.trials_per_point

    def test_seed_depends_on_master(self):
        assert tuple(trial_seed(0, 1).generate_state(2)) != tuple(trial_seed(1, 1).generate_state(2))

    def test_priors_respected(self):
        specs = draw_trials(small(trials_per_point=50, toa_prior_us=(10.0, 20.0), cfo_prior_hz=(-5.0, 5.0)))
        assert all(10.0 <= s.toa_us <= 20.0 and -5.0 <= s.cfo_hz <= 5.0 for s in specs)

    def test_every_trial_once(self):
        c = small(snr_db_list=[3.0, 0.0, -3.0], channels=["Awgn", "TdlC"], n_rep_list=[8, 16])
        keys = [(s.channel, s.n_rep, s.snr_db, s.trial_id) for s in draw_trials(c)]
        assert len(keys) == len(set(keys)) == 3 * 2 * 2 * 4


class TestCampaign:
    def test_single_noiseless_trial(self):
        c = ExperimentConfig(snr_db_list=[None], trials_per_point=1, toa_prior_us=(250.0, 250.0),
                             cfo_prior_hz=(120.0, 120.0), rate_sigma=0.0, workers=1)
        (r,) = run_campaign(c)
        assert r.status == Status.OK
        assert r.toa_error_us < 1.0
        assert r.cfo_error_hz < 0.5

    def test_same_seed_same_bytes(self):
        assert records_csv(run_campaign(small())) == records_csv(run_campaign(small()))

    def test_worker_count_does_not_matter(self):
        assert records_csv(run_campaign(small(workers=1))) == records_csv(run_campaign(small(workers=2)))

    def test_seed_changes_output(self):
        assert records_csv(run_campaign(small())) != records_csv(run_campaign(small(master_seed=8)))

    def test_every_trial_once_in_output(self):
        rs = run_campaign(small(snr_db_list=[3.0, 0.0, -3.0]))
        keys = [r.key for r in rs]
        assert len(keys) == len(set(keys)) == 12
        assert keys == sorted(keys)

    def test_threads_env_caps(self, monkeypatch):
        monkeypatch.setenv("NTNSYNC_THREADS", "2")
        assert worker_count(16) == 2
        monkeypatch.setenv("NTNSYNC_THREADS", "many")
        with pytest.raises(ConfigError):
            worker_count(4)


class TestPersistence:
    def test_csv_round_trip(self, tmp_path):
        rs = [record(1, 2.5), record(0, -1.0, cfo_err=3.0), record(2, status="not_found")]
        rs[2].est_toa_us = math.nan
        p = tmp_path / "r.csv"
        harness.write_records(rs, p)
        back = harness.read_records(p)
        assert records_csv(back) == records_csv(rs)

    def test_csv_excludes_wall_time(self):
        a, b = record(), record()
        b.wall_ms = 123.0
        assert records_csv([a]) == records_csv([b])

    def test_missing_columns(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("trial_id,method\n0,Proposed\n")
        with pytest.raises(ValueError, match="missing columns"):
            harness.read_records(p)

    def test_write_outputs(self, tmp_path):
        c = small()
        out = harness.write_outputs(c, [record(0, 1.0), record(1, 3.0)], tmp_path / "o")
        names = {p.name for p in out.iterdir()}
        assert names == {"records.csv", "timing.csv", "summary.json", "toa_cdf.dat", "cfo_cdf.dat"}
        meta = json.loads((out / "summary.json").read_text())
        assert ExperimentConfig.from_dict(meta["config"]) == c
        assert meta["sample_rate_hz"] == 1.92e6
        # gnuplot blocks: two data lines plus the closing point
        block = (out / "toa_cdf.dat").read_text().split("\n\n\n")[0].splitlines()
        assert block[0].startswith("#")
        assert [list(map(float, ln.split())) for ln in block[1:]] == [
            [1.0, 1 / 3], [3.0, 2 / 3], [3.0, 1.0]]


class TestSummarize:
    def test_single_record(self):
        (g,) = summarize([record(err=5.0)])
        assert g["toa_error_us"]["mean"] == g["toa_error_us"]["max"] == 5.0
        assert g["n_ok"] == 1 and not g["empty"]

    def test_zero_errors_step_at_zero(self):
        cdf = empirical_cdf([0.0, 0.0, 0.0])
        assert all(e == 0.0 for e, _ in cdf)
        assert cdf[-1] == (0.0, 1.0)

    def test_rank_over_n_plus_one(self):
        assert empirical_cdf([3.0, 1.0]) == [(1.0, 1 / 3), (3.0, 2 / 3), (3.0, 1.0)]

    def test_empty_group_reported(self):
        gs = summarize([record(0, status="not_found", snr=0.0), record(1, status="failed", snr=0.0),
                        record(0, 1.0, snr=3.0)])
        empty = [g for g in gs if g["snr_db"] == 0.0]
        assert len(gs) == 2 and len(empty) == 1
        assert empty[0]["empty"] and empty[0]["n_not_found"] == 1 and empty[0]["n_failed"] == 1

    def test_order_independent(self):
        rs = [record(i, float(i), snr=s, method=m) for i in range(5) for s in (3.0, 0.0)
              for m in ("Proposed", "DiffCorr")]
        shuffled = rs[:]
        random.Random(1).shuffle(shuffled)
        assert summarize(rs) == summarize(shuffled)

    def test_cdf_monotone_ending_at_one(self):
        rng = np.random.default_rng(0)
        (g,) = summarize([record(i, float(rng.exponential())) for i in range(50)])
        e, p = np.array(g["toa_cdf"]).T
        assert np.all(np.diff(e) >= 0) and np.all(np.diff(p) > 0)
        assert p[-1] == 1.0

    def test_noiseless_snr_as_null(self):
        (g,) = summarize([record(snr=math.inf)])
        assert g["snr_db"] is None

    def test_cfo_percentiles(self):
        (g,) = summarize([record(i, cfo_err=float(i)) for i in range(101)])
        assert g["cfo_error_hz"]["p99"] == pytest.approx(99.0)
        assert g["cfo_error_hz"]["p100"] == 100.0
