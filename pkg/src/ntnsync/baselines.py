"""Reference ToA estimators: differential correlation and S-DWT + CUSUM."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import fftconvolve

from .phase import dechirp
from .waveform import IqBuffer


@dataclass(frozen=True)
class CusumConfig:
    """Gaussian mean change ``theta0 -> theta1`` with known std ``sigma``."""

    theta0: float
    theta1: float
    sigma: float
    levels: int = 8

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if self.theta0 == self.theta1:
            raise ValueError("theta0 and theta1 must differ")
        if self.levels < 1:
            raise ValueError("levels must be >= 1")


def diff_corr_toa(rx: IqBuffer, replica: IqBuffer, lag: int = 512, search: range = range(0, 1345)) -> int:
    """Delay (samples after ``replica.base_index``) maximising the differential correlation.

    For delay ``d`` the statistic is
    ``|sum_n p(n+d, n) * conj(p(n+d+lag, n+lag))|`` with
    ``p(m, n) = rx(m) * conj(replica(n))``. Any constant frequency offset
    only rotates every term by the same angle. Evaluated for all ``d`` at
    once as a cross-correlation.
    """
    if lag < 1:
        raise ValueError("lag must be >= 1")
    if len(search) == 0:
        raise ValueError("empty search range")
    if lag >= len(replica):
        raise ValueError(f"lag {lag} does not fit a replica of {len(replica)} samples")
    c = replica.samples
    q = np.conj(c[:-lag]) * c[lag:]
    n_q = q.size
    d0, d1 = min(search), max(search)
    start = replica.base_index + d0
    x = rx.window(start, replica.base_index + d1 + n_q + lag)
    r = x[:-lag] * np.conj(x[lag:])
    # corr[i] = sum_n r[n + i] * q[n]
    corr = fftconvolve(r, q[::-1], mode="valid")
    ds = np.asarray(search)
    mag = np.abs(corr[ds - d0])
    return int(ds[int(np.argmax(mag))])


@dataclass
class Sdwt:
    """Undecimated Haar transform; row ``j`` holds level ``j + 1``."""

    approx: np.ndarray
    detail: np.ndarray

    @property
    def levels(self) -> int:
        return self.approx.shape[0]


def sdwt(x, levels: int = 8) -> Sdwt:
    """Stationary (a trous) Haar decomposition with full-length levels.

    Level ``j`` combines samples ``2**(j-1)`` apart with the orthonormal
    taps ``1/sqrt(2)``. The filters are causal and the input is extended to
    the left with its first value, so a shift of the input shifts every
    coefficient sequence by the same amount.
    """
    a = np.asarray(x, dtype=np.float64)
    if levels < 1:
        raise ValueError("levels must be >= 1")
    if a.size < 2 ** levels:
        raise ValueError(f"series of {a.size} samples is shorter than 2**levels = {2 ** levels}")
    approx = np.empty((levels, a.size))
    detail = np.empty((levels, a.size))
    for j in range(levels):
        h = 2 ** j
        prev = np.concatenate([np.full(h, a[0]), a[:-h]])
        detail[j] = (a - prev) / np.sqrt(2.0)
        a = (a + prev) / np.sqrt(2.0)
        approx[j] = a
    return Sdwt(approx, detail)


def cusum_detect(x, cfg: CusumConfig) -> tuple[int, float]:
    """Change point and peak of the CUSUM statistic for a Gaussian mean change.

    ``S_k`` is the log-likelihood ratio of the first ``k`` samples and the
    CUSUM statistic is ``g_k = S_k - min_{j<=k} S_j``. At the argmax of
    ``g`` the change point estimate is where the preceding minimum of ``S``
    was reached: the first sample of the new regime.
    """
    x = np.asarray(x, dtype=np.float64)
    llr = (cfg.theta1 - cfg.theta0) / cfg.sigma ** 2 * (x - 0.5 * (cfg.theta0 + cfg.theta1))
    s = np.concatenate([[0.0], np.cumsum(llr)])
    g = s - np.minimum.accumulate(s)
    k = int(np.argmax(g))
    tau = int(np.argmin(s[:k + 1]))
    return tau, float(g[k])


def estimate_cusum_config(x, levels: int = 8, frac: float = 0.1) -> CusumConfig:
    """``theta0`` / ``theta1`` from the leading / trailing ``frac`` of ``x``, pooled std."""
    x = np.asarray(x, dtype=np.float64)
    n = max(int(frac * x.size), 2)
    head, tail = x[:n], x[-n:]
    sigma = float(np.sqrt(0.5 * (head.var() + tail.var())))
    t0, t1 = float(head.mean()), float(tail.mean())
    if t0 == t1:
        t1 = t0 + 1e-12
    return CusumConfig(t0, t1, max(sigma, 1e-12), levels)


def dwt_cusum_toa(rx: IqBuffer, replica: IqBuffer, cfg: CusumConfig | None = None,
                  span: int = 2688, levels: int = 8) -> float:
    """Preamble onset (samples after ``replica.base_index``) from the envelope.

    The envelope of the dechirped product over the first ``span`` samples
    is decomposed with :func:`sdwt`; CUSUM runs on the coarsest
    approximation. That level is a causal moving sum of ``2**L`` samples,
    so the detected change is moved back by half its length. The sum is
    started on the mean of its first support. Without ``cfg`` the regime
    means come from the leading and trailing tenths.
    """
    env = np.abs(dechirp(rx, replica).samples)
    lv = cfg.levels if cfg is not None else levels
    env = env[:span + 2 ** lv]
    # pad with the mean of the first support, not one replicated noisy sample
    pad = 2 ** lv - 1
    env = np.r_[np.full(pad, env[:pad + 1].mean()), env]
    coarse = sdwt(env, lv).approx[-1][pad:]
    if cfg is None:
        cfg = estimate_cusum_config(coarse, lv)
    tau, _ = cusum_detect(coarse, cfg)
    offset = max(rx.base_index - replica.base_index, 0)
    # a delay is never negative
    return max(tau - pad / 2.0, 0.0) + offset
