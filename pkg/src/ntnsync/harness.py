"""Monte Carlo campaigns over SNR, repetition count and channel."""
from __future__ import annotations

import csv
import enum
import io
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .baselines import diff_corr_toa, dwt_cusum_toa
from .channel import SAMPLE_RATE, ChannelType, ImpairmentConfig, apply_impairments
from .estimator import DopplerMap, EstimationError, Estimator, PreambleNotFound
from .tire import TireModel
from .waveform import PreambleConfig

TOA_LIMIT_US = 700.0
CFO_LIMIT_HZ = 600.0
CFO_PERCENTILES = (50, 90, 95, 99, 100)
TOA_PERCENTILES = (50, 90, 99)


class Method(str, enum.Enum):
    PROPOSED = "Proposed"
    DIFF_CORR = "DiffCorr"
    DWT_CUSUM = "DwtCusum"


class Status(str, enum.Enum):
    OK = "ok"
    NOT_FOUND = "not_found"
    FAILED = "failed"


class ConfigError(ValueError):
    pass


def _snr(v) -> float:
    return math.inf if v is None else float(v)


@dataclass(frozen=True)
class ExperimentConfig:
    """One campaign. ``None`` in ``snr_db_list`` means noiseless.

    ``rate_sigma`` is the std (Hz/s) of the Doppler rate measurement handed
    to the estimator. ``workers`` of ``None`` uses every CPU, capped by
    ``NTNSYNC_THREADS``.
    """

    snr_db_list: tuple = (3.0, 0.0, -3.0)
    n_rep_list: tuple = (8,)
    channels: tuple = (ChannelType.AWGN,)
    trials_per_point: int = 200
    toa_prior_us: tuple = (0.0, TOA_LIMIT_US)
    cfo_prior_hz: tuple = (-CFO_LIMIT_HZ, CFO_LIMIT_HZ)
    method: Method = Method.PROPOSED
    master_seed: int = 0
    output_dir: str = "out"
    rate_sigma: float = 10.0
    workers: int | None = None
    # pre-trained TIRE weights; None trains on every received series
    tire_weights: str | None = None

    def __post_init__(self):
        set_ = object.__setattr__
        try:
            set_(self, "snr_db_list", tuple(_snr(s) for s in self.snr_db_list))
            set_(self, "n_rep_list", tuple(int(n) for n in self.n_rep_list))
            set_(self, "channels", tuple(ChannelType(c) for c in self.channels))
            set_(self, "method", Method(self.method))
            set_(self, "toa_prior_us", tuple(float(v) for v in self.toa_prior_us))
            set_(self, "cfo_prior_hz", tuple(float(v) for v in self.cfo_prior_hz))
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        if not (self.snr_db_list and self.n_rep_list and self.channels):
            raise ConfigError("snr_db_list, n_rep_list and channels must be non-empty")
        if any(math.isnan(s) for s in self.snr_db_list):
            raise ConfigError("snr_db_list contains NaN")
        if any(n < 1 for n in self.n_rep_list):
            raise ConfigError("n_rep values must be positive")
        if self.trials_per_point < 1:
            raise ConfigError("trials_per_point must be >= 1")
        lo, hi = self.toa_prior_us
        if not 0.0 <= lo <= hi <= TOA_LIMIT_US:
            raise ConfigError(f"toa_prior_us must lie within [0, {TOA_LIMIT_US}], got {self.toa_prior_us}")
        lo, hi = self.cfo_prior_hz
        if not -CFO_LIMIT_HZ <= lo <= hi <= CFO_LIMIT_HZ:
            raise ConfigError(f"cfo_prior_hz must lie within +-{CFO_LIMIT_HZ}, got {self.cfo_prior_hz}")
        if self.rate_sigma < 0:
            raise ConfigError("rate_sigma must be >= 0")
        if self.workers is not None and self.workers < 1:
            raise ConfigError("workers must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["snr_db_list"] = [None if math.isinf(s) else s for s in self.snr_db_list]
        d["channels"] = [c.value for c in self.channels]
        d["method"] = self.method.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path: str | Path) -> "ExperimentConfig":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        return cls.from_dict(d)


@dataclass
class TrialRecord:
    trial_id: int
    method: str
    snr_db: float
    n_rep: int
    channel: str
    true_toa_us: float
    true_cfo_hz: float
    coarse_toa_us: float
    est_toa_us: float
    est_cfo_hz: float
    status: str
    wall_ms: float = field(default=0.0, compare=False)

    @property
    def key(self) -> tuple:
        return (self.method, self.channel, self.n_rep, self.snr_db, self.trial_id)

    @property
    def toa_error_us(self) -> float:
        return abs(self.est_toa_us - self.true_toa_us) if self.status == Status.OK else math.nan

    @property
    def coarse_error_us(self) -> float:
        return abs(self.coarse_toa_us - self.true_toa_us) if self.status == Status.OK else math.nan

    @property
    def cfo_error_hz(self) -> float:
        return abs(self.est_cfo_hz - self.true_cfo_hz) if self.status == Status.OK else math.nan


@dataclass(frozen=True)
class TrialSpec:
    trial_id: int
    method: Method
    snr_db: float
    n_rep: int
    channel: ChannelType
    toa_us: float
    cfo_hz: float
    rate_error: float
    channel_seed: int
    tire_weights: str | None = None


def trial_seed(master_seed: int, trial_id: int) -> np.random.SeedSequence:
    """Seed of one trial.

    Only the trial id enters, so trial ``i`` draws the same ToA, CFO, rate
    error and channel seed at every grid point and for every method:
    comparisons across SNR, ``n_rep``, channel and method are paired.
    """
    return np.random.SeedSequence([master_seed, trial_id])


def draw_trials(cfg: ExperimentConfig) -> list[TrialSpec]:
    out = []
    for ch in cfg.channels:
        for n_rep in cfg.n_rep_list:
            for snr in cfg.snr_db_list:
                for i in range(cfg.trials_per_point):
                    rng = np.random.default_rng(trial_seed(cfg.master_seed, i))
                    toa = float(rng.uniform(*cfg.toa_prior_us))
                    cfo = float(rng.uniform(*cfg.cfo_prior_hz))
                    err = float(rng.standard_normal()) * cfg.rate_sigma
                    seed = int(rng.integers(2 ** 63))
                    out.append(TrialSpec(i, cfg.method, snr, n_rep, ch, toa, cfo, err, seed, cfg.tire_weights))
    return out


_ESTIMATORS: dict[tuple, Estimator] = {}


def _estimator(n_rep: int, weights: str | None = None) -> Estimator:
    key = (n_rep, weights)
    if key not in _ESTIMATORS:
        model = TireModel.load(weights) if weights else None
        _ESTIMATORS[key] = Estimator(PreambleConfig(n_rep=n_rep), model=model)
    return _ESTIMATORS[key]


def run_trial(spec: TrialSpec, dmap: DopplerMap = DopplerMap()) -> TrialRecord:
    """Generate, impair and estimate one trial."""
    t0 = time.perf_counter()
    est = _estimator(spec.n_rep, spec.tire_weights)
    cfg = est.cfg
    rate = float(dmap.rate(spec.toa_us))
    imp = ImpairmentConfig(toa_samples=spec.toa_us * 1e-6 * SAMPLE_RATE, cfo_hz=spec.cfo_hz,
                           doppler_rate_hz_per_s=rate, snr_db=spec.snr_db, channel=spec.channel,
                           seed=spec.channel_seed)
    rx = apply_impairments(est.replica, imp, block_len=cfg.sg_len)
    coarse = toa = cfo = math.nan
    status = Status.OK
    us = 1e6 / cfg.sample_rate
    try:
        if spec.method is Method.PROPOSED:
            r = est.estimate(rx, rate + spec.rate_error)
            coarse, toa, cfo = float(r.coarse_toa_us), float(r.fine_toa_us), float(r.cfo_hz)
        elif spec.method is Method.DIFF_CORR:
            d_max = int(math.ceil(TOA_LIMIT_US / us))
            toa = diff_corr_toa(rx, est.replica, cfg.fft_len, range(0, d_max + 1)) * us
        else:
            toa = float(dwt_cusum_toa(rx, est.replica)) * us
    except PreambleNotFound:
        status = Status.NOT_FOUND
    except EstimationError:
        status = Status.FAILED
    wall = (time.perf_counter() - t0) * 1e3
    return TrialRecord(spec.trial_id, spec.method.value, spec.snr_db, spec.n_rep, spec.channel.value,
                       spec.toa_us, spec.cfo_hz, coarse, toa, cfo, status.value, wall)


def worker_count(requested: int | None = None) -> int:
    n = requested or os.cpu_count() or 1
    cap = os.environ.get("NTNSYNC_THREADS")
    if cap:
        try:
            n = min(n, max(int(cap), 1))
        except ValueError as exc:
            raise ConfigError(f"NTNSYNC_THREADS must be an integer, got {cap!r}") from exc
    return n


def run_campaign(cfg: ExperimentConfig) -> list[TrialRecord]:
    """All trials of ``cfg``, sorted by (method, channel, n_rep, snr, trial)."""
    specs = draw_trials(cfg)
    n = min(worker_count(cfg.workers), len(specs))
    if n <= 1:
        records = [run_trial(s) for s in specs]
    else:
        with ProcessPoolExecutor(max_workers=n) as pool:
            records = list(pool.map(run_trial, specs, chunksize=max(len(specs) // (4 * n), 1)))
    return sorted(records, key=lambda r: r.key)


CSV_FIELDS = [f.name for f in fields(TrialRecord) if f.name != "wall_ms"]


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def records_csv(records: list[TrialRecord]) -> str:
    """Sorted records without wall time, so equal seeds give equal bytes."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for r in sorted(records, key=lambda r: r.key):
        w.writerow([_fmt(getattr(r, k)) for k in CSV_FIELDS])
    return buf.getvalue()


def write_records(records: list[TrialRecord], path: str | Path) -> None:
    Path(path).write_text(records_csv(records))


def write_timing(records: list[TrialRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "channel", "n_rep", "snr_db", "trial_id", "wall_ms"])
        for r in sorted(records, key=lambda r: r.key):
            w.writerow([*map(_fmt, r.key), f"{r.wall_ms:.3f}"])


def read_records(path: str | Path) -> list[TrialRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and set(CSV_FIELDS) - set(rows[0]):
        raise ValueError(f"{path}: missing columns {sorted(set(CSV_FIELDS) - set(rows[0]))}")
    out = []
    for row in rows:
        out.append(TrialRecord(
            trial_id=int(row["trial_id"]), method=row["method"], snr_db=float(row["snr_db"]),
            n_rep=int(row["n_rep"]), channel=row["channel"],
            **{k: float(row[k]) for k in ("true_toa_us", "true_cfo_hz", "coarse_toa_us",
                                          "est_toa_us", "est_cfo_hz")},
            status=row["status"]))
    return out


def empirical_cdf(errors) -> list[tuple[float, float]]:
    """Sorted errors against ``rank / (n + 1)``, closed by ``(max, 1)``."""
    e = np.sort(np.asarray(errors, dtype=np.float64))
    if e.size == 0:
        return []
    p = np.arange(1, e.size + 1) / (e.size + 1)
    return [*zip(e.tolist(), p.tolist()), (float(e[-1]), 1.0)]


def _stats(values, percentiles) -> dict:
    v = np.asarray(values, dtype=np.float64)
    v = v[np.isfinite(v)]
    if v.size == 0:
        return {"n": 0}
    out = {"n": int(v.size), "mean": float(v.mean()), "max": float(v.max())}
    out.update({f"p{p}": float(np.percentile(v, p)) for p in percentiles})
    return out


def summarize(records: list[TrialRecord]) -> list[dict]:
    """One entry per (method, snr, n_rep, channel); groups without ok trials say so."""
    groups: dict[tuple, list[TrialRecord]] = {}
    for r in sorted(records, key=lambda r: r.key):
        groups.setdefault((r.method, r.channel, r.n_rep, r.snr_db), []).append(r)
    out = []
    for (method, channel, n_rep, snr), rs in groups.items():
        ok = [r for r in rs if r.status == Status.OK]
        entry = {
            "method": method, "channel": channel, "n_rep": n_rep,
            "snr_db": None if math.isinf(snr) else snr,
            "n_trials": len(rs), "n_ok": len(ok),
            "n_not_found": sum(r.status == Status.NOT_FOUND for r in rs),
            "n_failed": sum(r.status == Status.FAILED for r in rs),
        }
        if not ok:
            entry["empty"] = True
            out.append(entry)
            continue
        entry["empty"] = False
        toa = [r.toa_error_us for r in ok]
        entry["toa_error_us"] = _stats(toa, TOA_PERCENTILES)
        entry["coarse_error_us"] = _stats([r.coarse_error_us for r in ok], TOA_PERCENTILES)
        entry["cfo_error_hz"] = _stats([r.cfo_error_hz for r in ok], CFO_PERCENTILES)
        entry["toa_cdf"] = empirical_cdf(toa)
        cfo = [r.cfo_error_hz for r in ok if math.isfinite(r.cfo_error_hz)]
        entry["cfo_cdf"] = empirical_cdf(cfo)
        out.append(entry)
    return out


def write_cdf_dat(summary: list[dict], path: str | Path, key: str = "toa_cdf") -> None:
    """Gnuplot data file: one block per group (``index i``), columns ``error probability``."""
    with open(path, "w") as fh:
        for g in summary:
            fh.write(f"# {g['method']} {g['channel']} n_rep={g['n_rep']} snr_db={g['snr_db']}\n")
            for e, p in g.get(key, []):
                fh.write(f"{e!r} {p!r}\n")
            fh.write("\n\n")


def write_outputs(cfg: ExperimentConfig, records: list[TrialRecord], out_dir: str | Path | None = None) -> Path:
    out = Path(out_dir if out_dir is not None else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_records(records, out / "records.csv")
    write_timing(records, out / "timing.csv")
    summary = summarize(records)
    meta = {"config": cfg.to_dict(), "sample_rate_hz": SAMPLE_RATE,
            "symbol_duration_us": 512 / SAMPLE_RATE * 1e6, "groups": summary}
    (out / "summary.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    write_cdf_dat(summary, out / "toa_cdf.dat", "toa_cdf")
    write_cdf_dat(summary, out / "cfo_cdf.dat", "cfo_cdf")
    return out
