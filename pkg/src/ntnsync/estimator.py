"""Two-stage ToA / CFO estimation from change points of the phase series.

Flow per sign hypothesis: inject a fixed frequency offset, dechirp against
the local replica, detect phase wraps and solve the coarse ToA candidates
from the first period. The candidate whose group edges best explain the
dechirped signal, weighed with the Doppler rate, is the coarse ToA. After
realigning the replica the wraps are re-detected per symbol group. The
pooled in-group wrap spacing gives the CFO; the wrap positions of all symbol
groups, whose phase intercepts differ by their subcarrier index, give the
fine ToA and a CFO correction, up to a one-symbol ambiguity that the
Doppler rate and the coarse value resolve.
"""
from __future__ import annotations

import enum
import itertools
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .phase import PhaseSeries, dechirp, extract_phase, segment_by_sg, wrap
from .tire import (ChangePointSet, TireConfig, TireModel, detect, matched_filter, peak_distance, pick_peaks,
                   raw_dissimilarity, relative_threshold, train_tire)
from .waveform import IqBuffer, PreambleConfig, build_schedule, gen_preamble

INJECTED_OFFSET_HZ = 1000.0
CFO_PRIOR_HZ = 600.0
RESIDUAL_TOA_US = 100.0


class EstimationError(RuntimeError):
    pass


class PreambleNotFound(EstimationError):
    pass


class DegenerateConfiguration(EstimationError):
    pass


class Hypothesis(str, enum.Enum):
    POS = "Pos"
    NEG = "Neg"

    @property
    def sign(self) -> int:
        return 1 if self is Hypothesis.POS else -1


@dataclass(frozen=True)
class DopplerMap:
    """Piecewise-linear ToA (us) -> Doppler rate (Hz/s), extrapolated linearly."""

    anchors: tuple[tuple[float, float], ...] = ((104.7, -297.0), (371.3, -252.0), (638.0, -215.0))

    def __post_init__(self):
        a = tuple((float(t), float(r)) for t, r in self.anchors)
        object.__setattr__(self, "anchors", a)
        if len(a) < 2:
            raise ValueError("DopplerMap needs at least two anchors")
        if any(t1 <= t0 for (t0, _), (t1, _) in zip(a, a[1:])):
            raise ValueError("DopplerMap anchors must be strictly increasing in ToA")

    def rate(self, toa_us):
        t = np.array([p[0] for p in self.anchors])
        r = np.array([p[1] for p in self.anchors])
        x = np.asarray(toa_us, dtype=np.float64)
        seg = np.clip(np.searchsorted(t, x) - 1, 0, t.size - 2)
        slope = (r[seg + 1] - r[seg]) / (t[seg + 1] - t[seg])
        out = r[seg] + slope * (x - t[seg])
        return float(out) if out.ndim == 0 else out


@dataclass
class SyncEstimate:
    coarse_toa_us: float
    fine_toa_us: float
    cfo_hz: float
    t_ph_samples: float
    first_wrap_index: float
    candidates: list[tuple[float, float]]
    chosen: int
    sign_hypothesis: Hypothesis
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sign_hypothesis"] = self.sign_hypothesis.value
        d["candidates"] = [list(c) for c in self.candidates]
        return d


@dataclass(frozen=True)
class EstimatorConfig:
    """Receiver knobs outside the TIRE detector."""

    smooth_window: int = 63
    guard: int = 192
    d_max_us: float = 700.0
    offset_hz: float = INJECTED_OFFSET_HZ
    cfo_prior_hz: float = CFO_PRIOR_HZ
    # replica delay used by the coarse stage; None puts it mid-prior
    coarse_shift: int | None = None
    # standard deviations used to fuse the Doppler rate with the delay estimates
    rate_sigma: float = 10.0
    coarse_sigma_us: float = 40.0
    # cap on the squared, normalised delay-prior term of the candidate cost
    prior_cap: float = 9.0
    # fraction of a period either side of a detected wrap used to refine it
    refine_span: float = 0.45
    min_refine_half: int = 48
    refine_passes: int = 4
    # CFO error (Hz) searched jointly with the fine ToA residual
    drift_hz: float = 20.0
    compensate_doppler: bool = True
    # coarse stage reruns with the fine slope while the periods differ by more than period_agree
    coarse_passes: int = 2
    # largest gap, in periods, between two change points bounding the coarse pair
    max_period_multiple: int = 3
    period_agree: float = 0.01
    # delays this far outside [0, d_max_us] still compete before clipping
    edge_margin_us: float = 10.0

    def __post_init__(self):
        if self.guard < 0:
            raise ValueError("guard must be >= 0")
        if self.d_max_us <= 0:
            raise ValueError("d_max_us must be positive")
        if not 0 < self.cfo_prior_hz < self.offset_hz:
            raise ValueError("cfo_prior_hz must lie in (0, offset_hz)")


def us_to_samples(us: float, fs: float) -> float:
    return us * 1e-6 * fs


def samples_to_us(n: float, fs: float) -> float:
    return n / fs * 1e6


def inject_offset(rx: IqBuffer, hypothesis: Hypothesis | str, offset_hz: float = INJECTED_OFFSET_HZ,
                  sample_rate: float = 1.92e6, ref_index: int | None = None) -> IqBuffer:
    """Rotate ``rx`` by ``+offset_hz`` (Pos) or ``-offset_hz`` (Neg).

    The rotation is zero-phase at absolute index ``ref_index`` (default the
    buffer start).
    """
    hyp = Hypothesis(hypothesis)
    ref = rx.base_index if ref_index is None else ref_index
    n = rx.base_index + np.arange(len(rx)) - ref
    df = hyp.sign * offset_hz / sample_rate
    return IqBuffer(rx.samples * np.exp(2j * np.pi * df * n), rx.base_index)


def remove_doppler_rate(rx: IqBuffer, rate_hz_per_s: float, sample_rate: float = 1.92e6,
                        ref_index: int = 0) -> IqBuffer:
    """Undo a linear frequency drift of ``rate_hz_per_s`` that is zero at ``ref_index``."""
    t = (rx.base_index + np.arange(len(rx)) - ref_index) / sample_rate
    return IqBuffer(rx.samples * np.exp(-1j * np.pi * rate_hz_per_s * t * t), rx.base_index)


def compensate_delay(rx: IqBuffer, coarse_toa_us: float, sample_rate: float = 1.92e6) -> IqBuffer:
    """Re-index ``rx`` so the replica lines up with a preamble delayed by the coarse ToA."""
    shift = int(round(us_to_samples(coarse_toa_us, sample_rate)))
    return IqBuffer(rx.samples, rx.base_index - shift)


def three_sigma(values, max_iter: int = 100) -> np.ndarray:
    """Iteratively drop values outside ``mean +- 3 std`` until nothing changes."""
    v = np.asarray(values, dtype=np.float64)
    for _ in range(max_iter):
        if v.size < 2:
            break
        mu, sd = v.mean(), v.std()
        keep = np.abs(v - mu) <= 3.0 * sd
        if keep.all():
            break
        v = v[keep]
    return v


def segment_distances(segments: list[ChangePointSet], t_ref: float | None = None,
                      gate: float = 0.25) -> np.ndarray:
    """Consecutive change point spacings inside each segment.

    With ``t_ref`` a spacing spanning several periods (missed wraps) is
    divided by its period count, and spacings further than ``gate`` (as a
    fraction) from a whole number of periods are dropped.
    """
    out = []
    for cps in segments:
        for d in np.diff(np.sort(cps.indices)):
            if t_ref is not None:
                k = int(round(d / t_ref))
                if k < 1 or abs(d / (k * t_ref) - 1.0) > gate:
                    continue
                d = d / k
            out.append(d)
    return np.asarray(out, dtype=np.float64)


def fine_cfo(segments: list[ChangePointSet], sample_rate: float = 1.92e6, sign: int = 1,
             t_ref: float | None = None) -> float:
    """CFO from the mean in-segment change point spacing after three-sigma rejection."""
    d = segment_distances(segments, t_ref)
    if d.size == 0:
        raise EstimationError("estimation failed: no segment holds two change points")
    kept = three_sigma(d)
    return math.copysign(sample_rate / kept.mean(), sign)


def segment_slope_cfo(segments: list[PhaseSeries], sample_rate: float, t_ref: float) -> float:
    """Frequency (Hz) of the phase slope pooled over segments, quarter-period lag."""
    lag = max(int(t_ref / 4), 1)
    acc = 0.0 + 0.0j
    for seg in segments:
        if len(seg) > lag:
            e = np.exp(1j * seg.phase)
            acc += np.sum(e[lag:] * np.conj(e[:-lag]))
    if acc == 0:
        raise EstimationError("estimation failed: segments too short for a slope estimate")
    return float(np.angle(acc)) / (2 * np.pi * lag) * sample_rate


def solve_toa_candidates(n_l: float, f_off_norm: float, n_sc0: int, cfg: PreambleConfig,
                         d_max_us: float, injected_norm: float = 0.0,
                         replica_shift: int = 0, margin_us: float = 0.0) -> list[float]:
    """Delays (us) in ``[-margin_us, d_max_us + margin_us]`` consistent with a wrap at ``n_l``.

    Where a symbol group on subcarrier ``k`` overlaps its replica (delayed by
    ``replica_shift``), the dechirped phase at ``u = n - n_start`` is
    ``2*pi*(f*u - (f - injected)*D - k*(D - shift)/N)``: an offset injected
    at the receiver does not travel with the delay. A wrap at ``u`` then
    gives ``D = (f*u - s/2 + k*shift/N + j) / (f - injected + k/N)`` for any
    integer ``j``, ``s = sign(f)``.
    """
    if f_off_norm == 0:
        raise ValueError("f_off_norm must be nonzero")
    den = f_off_norm - injected_norm + n_sc0 / cfg.fft_len
    if abs(den) < 1e-7:
        raise DegenerateConfiguration(
            f"intercept slope {den:.3g} too small: subcarrier {n_sc0} with this CFO carries no delay information")
    u = n_l - cfg.n_start
    sgn = 1.0 if f_off_norm > 0 else -1.0
    num0 = f_off_norm * u - sgn / 2.0 + n_sc0 * replica_shift / cfg.fft_len
    d_lo = -us_to_samples(margin_us, cfg.sample_rate)
    d_hi = us_to_samples(d_max_us + margin_us, cfg.sample_rate)
    lo, hi = sorted((d_lo * den - num0, d_hi * den - num0))
    js = np.arange(math.ceil(lo - 1e-9), math.floor(hi + 1e-9) + 1)
    ds = (num0 + js) / den
    ds = np.sort(ds[(ds >= d_lo - 1e-6) & (ds <= d_hi + 1e-6)])
    return [samples_to_us(float(d), cfg.sample_rate) for d in ds]


def select_candidate(candidates_us, dmap: DopplerMap, measured_rate: float, rate_sigma: float = 10.0,
                     prior_us: float | None = None, prior_sigma_us: float = 40.0,
                     prior_cap: float = math.inf) -> int:
    """Index of the candidate with the smallest combined Gaussian cost.

    Without a delay prior this is the candidate whose mapped Doppler rate is
    nearest the measured one. The delay term saturates at ``prior_cap`` so
    a grossly wrong prior cannot outvote the Doppler rate.
    """
    c = np.asarray(candidates_us, dtype=np.float64)
    if c.size == 0:
        raise EstimationError("no ToA candidates")
    cost = ((dmap.rate(c) - measured_rate) / rate_sigma) ** 2
    if prior_us is not None:
        cost = cost + np.minimum(((c - prior_us) / prior_sigma_us) ** 2, prior_cap)
    return int(np.argmin(cost))


def refine_wraps(ps: PhaseSeries, points, slope: float, span: float, min_half: int = 48) -> np.ndarray:
    """Sub-sample wrap positions around coarse change points.

    For each point ``c`` the phase at ``c`` is the circular mean of
    ``phi(n) - slope * (n - c)`` over a window symmetric about ``c`` of at
    most ``+- span`` samples; the wrap sits where a line of that slope through
    this phase meets ``+-pi``. The symmetric window keeps a slightly wrong
    slope from biasing the result. Points too close to the series edges to
    get ``min_half`` samples either side are dropped.
    """
    out = []
    for c in np.asarray(points, dtype=np.float64):
        ci = int(round(c))
        half = min(int(span), ci - ps.base_index, ps.end_index - 1 - ci)
        if half < min_half:
            continue
        lo = ci - half - ps.base_index
        n = np.arange(-half, half + 1) + ci
        phi = ps.phase[lo:lo + 2 * half + 1]
        b = np.angle(np.sum(np.exp(1j * (phi - slope * (n - ci)))))
        out.append(ci + wrap(np.pi - b) / slope)
    return np.asarray(out, dtype=np.float64)


def interval_frequency(ps: PhaseSeries, a: float, b: float, lag: int = 64) -> float:
    """Mean phase slope (cycles/sample) over ``[a, b)`` from the lag-``lag`` phase increments."""
    lo = max(int(math.ceil(a)), ps.base_index) - ps.base_index
    hi = min(int(b), ps.end_index) - ps.base_index
    if hi - lo <= lag:
        return 0.0
    e = np.exp(1j * ps.phase[lo:hi])
    return float(np.angle(np.sum(e[lag:] * np.conj(e[:-lag])))) / (2 * np.pi * lag)


def merge_close(points, min_gap: float) -> np.ndarray:
    """Sorted points with runs closer than ``min_gap`` replaced by their mean."""
    pts = np.sort(np.asarray(points, dtype=np.float64))
    if pts.size == 0:
        return pts
    groups = np.split(pts, np.nonzero(np.diff(pts) >= min_gap)[0] + 1)
    return np.array([g.mean() for g in groups])


def periodic_pairs(points, t_lo: float, t_hi: float, ps: PhaseSeries | None = None,
                   tol: float = 0.1, quarter_tol: float = 0.25, max_multiple: int = 1):
    """Consecutive change points whose spacing is an admissible period, in order.

    With ``ps`` the pair must also be one period of a single tone: the
    frequency measured between the points has to match their spacing to
    within ``tol``, and over the first and last quarter period between them
    to within ``quarter_tol``. The short end windows catch a second point
    that belongs to a different tone. After the single-period pairs and with
    ``max_multiple > 1``, consecutive points up to that many periods apart
    follow, since missed wraps leave gaps of whole periods; such a pair is
    yielded as the first point and one period after it.
    """
    pts = np.asarray(points, dtype=np.float64)
    for q in range(1, max_multiple + 1):
        if q > 1 and ps is None:
            break
        for a, b in zip(pts, pts[1:]):
            t = (b - a) / q
            if not t_lo <= t <= t_hi:
                continue
            if ps is not None:
                lag = max(int(t / 8), 1)
                checks = ((a, b, tol), (a, a + t / 4, quarter_tol), (b - t / 4, b, quarter_tol))
                if any(abs(abs(interval_frequency(ps, lo, hi, lag)) * t - 1.0) > k for lo, hi, k in checks):
                    continue
            yield float(a), float(a + t)


def anchored_pairs(points, ps: PhaseSeries, f: float, tol: float = 0.25):
    """Change points ``c`` lying inside a stretch of a tone of known frequency ``f``.

    The phase slope over a quarter period on each side of ``c`` has to match
    ``f`` within ``tol``; each such point is yielded as ``(c, c + 1/|f|)``.
    The point need not be a wrap itself, since the pair is refitted with the
    known slope and snapped to the nearest wrap.
    """
    t = 1.0 / abs(f)
    lag = max(int(t / 8), 1)
    for c in np.asarray(points, dtype=np.float64):
        if all(abs(interval_frequency(ps, lo, hi, lag) / f - 1.0) <= tol for lo, hi in ((c - t / 4, c), (c, c + t / 4))):
            yield float(c), float(c + t)


def overlap_frequency(ps: PhaseSeries, cfg: PreambleConfig, shift: int, d_max: float, lag: int = 128) -> float:
    """Tone frequency (cycles/sample) pooled over the guaranteed overlaps.

    With the replica delayed by ``shift`` and any delay in ``[0, d_max]``
    samples, every group overlaps its replica at least from ``slack`` to
    ``sg - slack`` after the replica group start, where ``slack`` is the
    largest possible ``|d - shift|``.
    """
    sg = cfg.sg_len
    slack = int(math.ceil(max(shift, d_max - shift)))
    acc = 0.0 + 0.0j
    for m in range(cfg.n_sg):
        lo = max(cfg.n_start + shift + m * sg + slack, ps.base_index) - ps.base_index
        hi = min(cfg.n_start + shift + (m + 1) * sg - slack, ps.end_index) - ps.base_index
        if hi - lo > lag:
            e = np.exp(1j * ps.phase[lo:hi])
            acc += np.sum(e[lag:] * np.conj(e[:-lag]))
    return float(np.angle(acc)) / (2 * np.pi * lag)


def first_periodic_pair(points, t_lo: float, t_hi: float, ps: PhaseSeries | None = None,
                        tol: float = 0.1, quarter_tol: float = 0.25,
                        max_multiple: int = 1) -> tuple[float, float] | None:
    """First pair of :func:`periodic_pairs`, or None."""
    return next(periodic_pairs(points, t_lo, t_hi, ps, tol, quarter_tol, max_multiple), None)


def fit_period(ps: PhaseSeries, a: float, b: float, agree: float = 0.02,
               f: float | None = None) -> tuple[float, float]:
    """Refit a one-period pair of wraps from the phase strictly between them.

    One end of the pair may sit past the edge of the tone, so the slope is
    the median of the four quarter-period slopes and only the quarters
    agreeing with it (within ``agree``) feed the intercept, a circular mean
    of the detrended phase. The returned wraps are where that line meets
    ``+-pi`` nearest ``a`` and one period later. A known slope ``f`` only
    leaves the intercept to fit.
    """
    t = b - a
    edges = a + t * np.arange(5) / 4
    fq = np.array([interval_frequency(ps, lo, hi, lag=max(int(t / 8), 1)) for lo, hi in zip(edges, edges[1:])])
    if f is None:
        f = float(np.median(fq))
    if f == 0.0:
        return a, b
    keep = np.abs(fq - f) <= agree * abs(f)
    mid = 0.5 * (a + b)
    acc = 0.0 + 0.0j
    for lo, hi in zip(edges[:-1][keep], edges[1:][keep]):
        i0 = max(int(math.ceil(lo)), ps.base_index) - ps.base_index
        i1 = min(int(hi), ps.end_index) - ps.base_index
        n = np.arange(i0, i1) + ps.base_index
        acc += np.sum(np.exp(1j * (ps.phase[i0:i1] - 2 * np.pi * f * (n - mid))))
    phi_mid = np.angle(acc)
    period = 1.0 / abs(f)
    first = mid + wrap(np.pi - phi_mid) / (2 * np.pi * f)
    first += round((a - first) / period) * period
    return float(first), float(first + period)


def piecewise_energy(r: IqBuffer, f: float, d: float, shift: float, cfg: PreambleConfig,
                     schedule) -> tuple[float, float, int]:
    """Energy of ``r`` explained by the tone pieces a delay ``d`` predicts.

    ``r`` is the received signal dechirped against the replica delayed by
    ``shift``. Where received group ``i`` meets replica group ``j`` the
    product is a tone of ``f + (k_i - k_j)/N`` cycles/sample with its own
    unknown gain, so each piece contributes ``|sum r e^{-j w n}|^2 / L``.
    Returns the explained energy, the total energy of the pieces and their
    sample count.
    """
    sg, big_n = cfg.sg_len, cfg.fft_len
    m = np.arange(cfg.n_sg + 1)
    edges = np.concatenate([cfg.n_start + d + m * sg, cfg.n_start + shift + m * sg]).round().astype(int)
    edges = np.unique(np.clip(edges, r.base_index, r.end_index))
    explained = total = 0.0
    count = 0
    for lo, hi in zip(edges, edges[1:]):
        mid = 0.5 * (lo + hi)
        i = int(math.floor((mid - cfg.n_start - d) / sg))
        j = int(math.floor((mid - cfg.n_start - shift) / sg))
        if hi <= lo or not (0 <= i < cfg.n_sg and 0 <= j < cfg.n_sg):
            continue
        x = r.window(lo, hi)
        w = f + (schedule[i] - schedule[j]) / big_n
        acc = np.sum(x * np.exp(-2j * np.pi * w * np.arange(lo, hi)))
        explained += abs(acc) ** 2 / (hi - lo)
        total += float(np.sum(np.abs(x) ** 2))
        count += hi - lo
    return explained, total, count


@dataclass
class CoarseResult:
    toa_us: float
    t_ph: float
    first_wrap: float
    sg_index: int
    candidates: list[float]
    # chi-square of the piecewise-tone fit per candidate, relative to the best
    fit_cost: list[float]


def bend_fit(phase, t, rate_sigma: float, reject: float = 3.0) -> float:
    """Start-frequency correction (Hz) of intercept phases that may bend quadratically.

    Fits ``phase ~ c + 2*pi*a*t + pi*b*t**2`` (``t`` in seconds) by least
    squares with a zero-mean Gaussian prior of std ``rate_sigma`` (Hz/s) on
    ``b``, so a bend the data cannot resolve stays near zero. The noise level
    comes from a straight-line fit; points beyond ``reject`` of it are
    dropped, in at most two passes. Returns ``a``.
    """
    y = np.asarray(phase, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if y.size < 4 or rate_sigma <= 0:
        return 0.0
    a = np.column_stack([np.ones_like(t), 2 * np.pi * t, np.pi * t ** 2])
    keep = np.ones(y.size, dtype=bool)
    for _ in range(2):
        lin, *_ = np.linalg.lstsq(a[keep, :2], y[keep], rcond=None)
        e = y - a[:, :2] @ lin
        var = float(np.sum(e[keep] ** 2)) / max(int(keep.sum()) - 2, 1)
        if var == 0.0:
            return float(lin[1])
        new = np.abs(e) <= reject * math.sqrt(var)
        if new.sum() < 4 or np.array_equal(new, keep):
            break
        keep = new
    ak, yk = a[keep], y[keep]
    x = np.linalg.solve(ak.T @ ak / var + np.diag([0.0, 0.0, 1.0 / rate_sigma ** 2]), ak.T @ yk / var)
    return float(x[1])


def _vertex(y: np.ndarray, j: int) -> float:
    """Offset (in grid steps) of the parabola vertex through ``y[j-1:j+2]``."""
    if not 0 < j < y.size - 1:
        return 0.0
    den = y[j - 1] - 2 * y[j] + y[j + 1]
    return 0.5 * (y[j - 1] - y[j + 1]) / den if den < 0 else 0.0


@dataclass
class _Branch:
    hypothesis: Hypothesis
    ok: bool = False
    reason: str = ""
    coarse: CoarseResult | None = None
    cfo_eff_hz: float = math.nan
    residual: float = math.nan
    fine_us: float = math.nan
    spread: float = math.inf
    n_dist: int = 0
    coherence: float = 0.0
    diag: dict = field(default_factory=dict)


class Estimator:
    """Reusable estimator bound to one preamble configuration."""

    def __init__(self, cfg: PreambleConfig, dmap: DopplerMap = DopplerMap(),
                 tire: TireConfig = TireConfig(), opts: EstimatorConfig = EstimatorConfig(),
                 model: TireModel | None = None):
        self.cfg = cfg
        self.dmap = dmap
        self.tire = tire
        self.opts = opts
        self.model = model
        self.schedule = build_schedule(cfg)
        self.replica = gen_preamble(cfg, self.schedule)
        d_max = us_to_samples(opts.d_max_us, cfg.sample_rate)
        self.coarse_shift = int(round(d_max / 2)) if opts.coarse_shift is None else opts.coarse_shift

    def _dechirp(self, rx: IqBuffer, shift: int) -> IqBuffer:
        return dechirp(rx, IqBuffer(self.replica.samples, self.replica.base_index + shift))

    def _phase(self, rx: IqBuffer, shift: int) -> PhaseSeries:
        return extract_phase(self._dechirp(rx, shift), self.opts.smooth_window, self.cfg.sg_len)

    def period_range(self) -> tuple[float, float]:
        """Admissible wrap spacing (samples) of the right hypothesis, with 10% slack."""
        fs, o = self.cfg.sample_rate, self.opts
        return fs / (o.offset_hz + o.cfo_prior_hz) * 0.9, fs / (o.offset_hz - o.cfo_prior_hz * 0.1) * 1.1

    def coarse(self, r: IqBuffer, ps: PhaseSeries, cps: ChangePointSet, hyp: Hypothesis, measured_rate: float,
               f_known: float | None = None) -> CoarseResult:
        """Coarse delay from one wrap pair of the series dechirped at the coarse shift.

        ``r`` is that dechirped signal before smoothing; ``ps`` its phase.
        """
        cfg, o = self.cfg, self.opts
        fs, sg, s = cfg.sample_rate, cfg.sg_len, self.coarse_shift
        t_lo, t_hi = self.period_range()
        inj = hyp.sign * o.offset_hz / fs
        # when no two change points qualify, single wraps of the pooled tone anchor instead
        fallback = ()
        f_pool = f_known if f_known is not None else overlap_frequency(ps, cfg, s, us_to_samples(o.d_max_us, fs))
        if f_pool != 0 and np.sign(f_pool) == hyp.sign and t_lo <= 1 / abs(f_pool) <= t_hi:
            fallback = anchored_pairs(cps.indices, ps, f_pool)
        for pair in itertools.chain(periodic_pairs(cps.indices, t_lo, t_hi, ps, max_multiple=o.max_period_multiple),
                                    fallback):
            a, b = fit_period(ps, *pair, f=f_known)
            t_ph = b - a
            f_eff = hyp.sign / t_ph
            # the pair lies where symbol group m overlaps its replica
            m = int((0.5 * (pair[0] + pair[1]) - cfg.n_start - s) // sg)
            m = min(max(m, 0), cfg.n_sg - 1)
            k = self.schedule[m]
            # on a group whose tone nearly cancels the residual CFO a wrap
            # error is amplified many times in the delay; anchor elsewhere
            if abs(f_eff - inj + k / cfg.fft_len) < 0.5 / cfg.fft_len:
                continue
            cands = solve_toa_candidates(a, f_eff, k, cfg, o.d_max_us, inj, s, o.coarse_sigma_us)
            if cands:
                break
        else:
            raise PreambleNotFound("preamble not found: no two periodic change points yield a delay in the prior")
        # every group edge moves with D; score each candidate by how much of
        # the dechirped signal its piecewise-tone model explains
        fits = [piecewise_energy(r, f_eff, us_to_samples(c, fs), s, cfg, self.schedule) for c in cands]
        e = np.array([x[0] for x in fits])
        best = int(np.argmax(e))
        _, total, count = fits[best]
        noise = max(total - e[best], 1e-12) / max(count, 1)
        fit_cost = 2.0 * (e[best] - e) / noise
        cost = fit_cost + ((self.dmap.rate(np.asarray(cands)) - measured_rate) / o.rate_sigma) ** 2
        i = int(np.argmin(cost))
        return CoarseResult(cands[i], t_ph, a, m, cands, fit_cost.tolist())

    def _segment_points(self, ps: PhaseSeries, model: TireModel) -> tuple[list[PhaseSeries], list[np.ndarray]]:
        """Per-group change points, thresholded on the pooled dissimilarity."""
        segs = segment_by_sg(ps, self.cfg, self.opts.guard, self.cfg.n_start)
        curves = []
        for seg in segs:
            idx, d = raw_dissimilarity(model, seg, self.tire)
            curves.append((idx, matched_filter(d, self.tire) if d.size else d))
        pooled = np.concatenate([d for _, d in curves])
        thr = relative_threshold(pooled, self.tire.prominence_k)
        dist = peak_distance(self.tire)
        pts = [np.array([p[0] for p in pick_peaks(idx, d, thr, self.tire.stride, dist)]) for idx, d in curves]
        return segs, pts

    def _refine_segments(self, segs: list[PhaseSeries], pts: list[np.ndarray], sign: int,
                         t_ph: float) -> list[ChangePointSet]:
        o = self.opts
        out = []
        for seg, p in zip(segs, pts):
            ref = refine_wraps(seg, p, sign * 2 * np.pi / t_ph, o.refine_span * t_ph, o.min_refine_half)
            out.append(ChangePointSet([(float(c), 0.0) for c in merge_close(ref, t_ph / 2)]))
        return out

    def fine_toa_residual(self, segs: list[PhaseSeries], sets: list[ChangePointSet],
                          f_eff: float) -> tuple[float, float, float]:
        """Residual delay (samples) maximising the coherence of all group intercepts.

        After realignment, a wrap at ``u`` in group ``m`` has
        ``2*pi*f*u - pi = 2*pi*(f_res + k_m/N)*r`` plus a phase common to all
        groups, where ``r`` is the residual delay. The modulus of
        ``sum_m exp(j*(beta_m - 2*pi*k_m*r/N))`` discards the common phase;
        a frequency error ``nu`` of ``f_eff`` adds ``2*pi*nu*u`` to each
        intercept and is searched jointly. Returns ``(r, coherence, nu_hz)``.
        """
        cfg, o = self.cfg, self.opts
        ks, ph, ts = [], [], []
        for seg, cps in zip(segs, sets):
            if len(cps) == 0:
                continue
            u = cps.indices - cfg.n_start
            ph.append(np.mean(np.exp(1j * (2 * np.pi * f_eff * u - np.pi))))
            ks.append(self.schedule[seg.sg_index])
            ts.append(float(np.mean(u)))
        if not ks:
            raise EstimationError("estimation failed: no symbol group with a detected wrap")
        p = np.asarray(ph)
        r = np.arange(-o.guard, o.guard + 0.5, 0.5)
        n_nu = 2 * int(math.ceil(o.drift_hz / 0.5)) + 1
        nu = np.linspace(-o.drift_hz, o.drift_hz, n_nu) / cfg.sample_rate
        drift = np.exp(-2j * np.pi * np.outer(nu, ts))
        steer = np.exp(-2j * np.pi * np.outer(ks, r) / cfg.fft_len)
        c = np.abs((drift * p) @ steer)
        j_nu, j_r = np.unravel_index(np.argmax(c), c.shape)
        row = c[j_nu]
        best = float(r[j_r]) + 0.5 * _vertex(row, j_r)
        nu_hz = (float(nu[j_nu]) + _vertex(c[:, j_r], j_nu) * (nu[1] - nu[0] if nu.size > 1 else 0.0)) * cfg.sample_rate
        # an error in the measured Doppler rate bends the intercepts
        # quadratically; the line alone would report the mid-preamble frequency
        t = np.asarray(ts)
        q = p * np.exp(-2j * np.pi * (nu_hz / cfg.sample_rate * t + np.asarray(ks) * best / cfg.fft_len))
        nu_hz += bend_fit(np.angle(q * np.conj(np.sum(q))), t / cfg.sample_rate, o.rate_sigma)
        return best, float(row[j_r] / np.sum(np.abs(p))), nu_hz

    def _fine(self, z: IqBuffer, co: CoarseResult, hyp: Hypothesis, model: TireModel):
        """Fine CFO (Hz, effective) and delay after compensating the coarse ToA."""
        cfg, o = self.cfg, self.opts
        fs = cfg.sample_rate
        # in the realigned frame the symbol groups start where the replica's do;
        # the shift only adds a phase common to all groups
        psc = self._phase(compensate_delay(z, co.toa_us, fs), 0)
        t = co.t_ph
        segs, pts = self._segment_points(psc, model)
        source = "distances"
        # each pass refines the wraps with the slope of the previous CFO
        for _ in range(o.refine_passes):
            sets = self._refine_segments(segs, pts, hyp.sign, t)
            try:
                f = fine_cfo(sets, fs, hyp.sign, t_ref=t)
            except EstimationError:
                # every group holds a single wrap (the period nearly divides
                # the group length); fall back to the in-group phase slope
                f = segment_slope_cfo(segs, fs, t)
                source = "slope"
            t_new = fs / abs(f)
            if abs(t_new - t) < 1e-3:
                break
            t = t_new
            pts = [c.indices for c in sets]
        resid, coh, nu_hz = self.fine_toa_residual(segs, sets, f / fs)
        # the intercepts span the whole preamble, so their drift pins the
        # frequency far tighter than the in-group spacings
        return f - nu_hz, resid, coh, sets, source

    def branch(self, rx: IqBuffer, hyp: Hypothesis, measured_rate: float) -> _Branch:
        cfg, o = self.cfg, self.opts
        fs = cfg.sample_rate
        br = _Branch(hyp)
        z = inject_offset(rx, hyp, o.offset_hz, fs, ref_index=cfg.n_start)
        r = self._dechirp(z, self.coarse_shift)
        ps = extract_phase(r, o.smooth_window, cfg.sg_len)
        model = self.model or train_tire(ps, self.tire)
        cps = detect(ps, self.tire, model)
        br.diag["n_change_points"] = len(cps)
        f_prev = None
        try:
            for attempt in range(o.coarse_passes):
                co = self.coarse(r, ps, cps, hyp, measured_rate, f_prev)
                f, resid, coh, sets, source = self._fine(z, co, hyp, model)
                # a coarse period far from the fine one means the coarse pair
                # was corrupted; redo the coarse stage with the fine slope
                if abs(fs / abs(f) - co.t_ph) <= o.period_agree * co.t_ph:
                    break
                f_prev = f / fs
        except EstimationError as exc:
            br.reason = str(exc)
            return br
        br.coarse = co
        br.diag.update(cfo_source=source, coarse_passes=attempt + 1)
        shift = int(round(us_to_samples(co.toa_us, fs)))
        t = fs / abs(f)
        d = three_sigma(segment_distances(sets, t))
        br.cfo_eff_hz = f
        br.n_dist = int(d.size)
        br.spread = float(d.std() / d.mean()) if d.size > 1 else math.inf
        br.residual = resid
        br.coherence = coh
        br.fine_us = samples_to_us(shift + resid, fs)
        br.diag.update(coherence=coh, n_segments_with_wraps=int(sum(len(s) > 0 for s in sets)))
        br.ok = True
        return br

    def estimate(self, rx: IqBuffer, measured_rate: float) -> SyncEstimate:
        cfg, o = self.cfg, self.opts
        fs = cfg.sample_rate
        if o.compensate_doppler:
            # the CFO refers to the preamble start; over a long preamble the
            # Doppler drift would otherwise bias the mean wrap spacing
            rx = remove_doppler_rate(rx, measured_rate, fs, cfg.n_start)
        branches = [self.branch(rx, h, measured_rate) for h in Hypothesis]
        good = [b for b in branches if b.ok]
        if not good:
            raise PreambleNotFound("preamble not found: " + "; ".join(
                f"{b.hypothesis.value}: {b.reason}" for b in branches))
        lo, hi = o.offset_hz - 1.1 * o.cfo_prior_hz, o.offset_hz + 1.1 * o.cfo_prior_hz
        # a wrong frequency scatters the group intercepts, so the branch whose
        # intercepts agree best carries the better estimate
        best = min(good, key=lambda b: (not lo <= abs(b.cfo_eff_hz) <= hi, -b.coherence, b.spread))
        co = best.coarse
        cfo = best.cfo_eff_hz - best.hypothesis.sign * o.offset_hz

        period_us = samples_to_us(cfg.fft_len, fs)
        # a delay just outside the prior can still be estimated there
        j_lo = math.ceil((-o.edge_margin_us - best.fine_us) / period_us - 1e-9)
        j_hi = math.floor((o.d_max_us + o.edge_margin_us - best.fine_us) / period_us + 1e-9)
        cands = [min(max(best.fine_us + j * period_us, 0.0), o.d_max_us)
                 for j in range(j_lo, j_hi + 1)] or [best.fine_us]
        chosen = select_candidate(cands, self.dmap, measured_rate, o.rate_sigma, co.toa_us, o.coarse_sigma_us,
                                  o.prior_cap)
        diag = dict(best.diag)
        diag.update(coarse_candidates=co.candidates, coarse_fit_cost=co.fit_cost, coarse_sg=co.sg_index,
                    residual_samples=best.residual, spread=best.spread, n_distances=best.n_dist,
                    branches={b.hypothesis.value: (b.reason or "ok") for b in branches})
        return SyncEstimate(
            coarse_toa_us=co.toa_us,
            fine_toa_us=float(cands[chosen]),
            cfo_hz=cfo,
            t_ph_samples=co.t_ph,
            first_wrap_index=co.first_wrap,
            candidates=[(c, float(self.dmap.rate(c))) for c in cands],
            chosen=chosen,
            sign_hypothesis=best.hypothesis,
            diagnostics=diag,
        )


def estimate(rx: IqBuffer, cfg: PreambleConfig, dmap: DopplerMap, measured_rate: float,
             tire: TireConfig = TireConfig(), opts: EstimatorConfig = EstimatorConfig(),
             model: TireModel | None = None) -> SyncEstimate:
    return Estimator(cfg, dmap, tire, opts, model).estimate(rx, measured_rate)


def _dominant_pair(points, t_lo: float, t_hi: float, tol: float,
                   slot_len: int, origin: int) -> tuple[float, float] | None:
    pts = np.asarray(points, dtype=np.float64)
    gaps = np.diff(pts)
    # a period lies inside one symbol group of the replica
    slot = np.floor((pts - origin) / slot_len)
    ok = np.flatnonzero((gaps >= t_lo) & (gaps <= t_hi) & (slot[1:] == slot[:-1]))
    if ok.size == 0:
        return None
    g = gaps[ok]
    support = (np.abs(g[:, None] - g[None, :]) <= tol * g[:, None]).sum(axis=1)
    ref = g[int(np.argmax(support))]
    j = ok[int(np.argmax(np.abs(g - ref) <= tol * ref))]
    return float(pts[j]), float(pts[j + 1])


def coarse_estimate(cps: ChangePointSet, cfg: PreambleConfig, dmap: DopplerMap, measured_rate: float,
                    hypothesis: Hypothesis | str = Hypothesis.POS,
                    offset_hz: float = INJECTED_OFFSET_HZ, d_max_us: float = 700.0,
                    rate_sigma: float = 10.0, cfo_prior_hz: float = CFO_PRIOR_HZ,
                    spacing_tol: float = 0.03, ps: PhaseSeries | None = None) -> tuple[float, float]:
    """Coarse ToA (us) and period (samples) from the first periodic pair of change points.

    The series is assumed dechirped against the unshifted replica. Wraps
    of one tone are evenly spaced while the onset and tone boundaries are
    not, so the period is the admissible spacing shared by the most
    consecutive pairs inside one symbol group (within ``spacing_tol``). The first pair with that
    spacing gives ``T_ph`` and ``n_l``. With the phase series ``ps`` the
    pair is instead the first one that is a period of a single tone, refit
    from the phase between its points; the symbol group holding them fixes the subcarrier
    of the candidate equation, and the candidate whose Doppler rate is
    nearest ``measured_rate`` wins among those that keep the pair inside
    that group's overlap with the replica.
    """
    if len(cps) < 2:
        raise PreambleNotFound("preamble not found: fewer than two change points")
    hyp = Hypothesis(hypothesis)
    fs, sg = cfg.sample_rate, cfg.sg_len
    t_lo = fs / (offset_hz + cfo_prior_hz) * 0.9
    t_hi = fs / (offset_hz - 0.1 * cfo_prior_hz) * 1.1
    if ps is None:
        pair = _dominant_pair(cps.indices, t_lo, t_hi, spacing_tol, sg, cfg.n_start)
    else:
        pair = first_periodic_pair(cps.indices, t_lo, t_hi, ps)
    if pair is None:
        raise PreambleNotFound("preamble not found: no two change points a period apart")
    a, b = pair if ps is None else fit_period(ps, *pair)
    t_ph = b - a
    m = min(max(int((0.5 * (a + b) - cfg.n_start) // sg), 0), cfg.n_sg - 1)
    inj = hyp.sign * offset_hz / fs
    cands = solve_toa_candidates(a, hyp.sign / t_ph, build_schedule(cfg)[m], cfg, d_max_us, inj)
    # the first wrap lies in the overlap [D + m*sg, (m+1)*sg) of group m with the replica
    lo = a - cfg.n_start - (m + 1) * sg - t_ph / 4
    hi = a - cfg.n_start - m * sg + t_ph / 4
    pool = [c for c in cands if lo <= us_to_samples(c, fs) <= hi] or cands
    if not pool:
        raise EstimationError("no coarse ToA candidate inside the prior")
    return pool[select_candidate(pool, dmap, measured_rate, rate_sigma)], t_ph
