"""Dechirping and wrapped phase series."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .waveform import IqBuffer, PreambleConfig


@dataclass
class PhaseSeries:
    """Wrapped phase in ``[-pi, pi)`` starting at absolute sample ``base_index``.

    ``amplitude`` keeps the magnitude of the smoothed product when the
    series comes from :func:`extract_phase`; ``sg_index`` is set on segments.
    """

    phase: np.ndarray
    base_index: int
    sg_len: int = 0
    amplitude: np.ndarray | None = None
    sg_index: int | None = None

    def __post_init__(self):
        self.phase = np.asarray(self.phase, dtype=np.float64)

    def __len__(self) -> int:
        return self.phase.size

    @property
    def end_index(self) -> int:
        return self.base_index + self.phase.size

    @property
    def indices(self) -> np.ndarray:
        return self.base_index + np.arange(self.phase.size)

    def slice(self, start: int, stop: int) -> "PhaseSeries":
        """Sub-series covering absolute indices ``[start, stop)`` clipped to the series."""
        lo = max(start, self.base_index) - self.base_index
        hi = min(stop, self.end_index) - self.base_index
        hi = max(hi, lo)
        amp = None if self.amplitude is None else self.amplitude[lo:hi]
        return PhaseSeries(self.phase[lo:hi], self.base_index + lo, self.sg_len, amp, self.sg_index)


def wrap(phi):
    """Wrap to ``[-pi, pi)``."""
    return np.mod(np.asarray(phi) + np.pi, 2.0 * np.pi) - np.pi


def dechirp(rx: IqBuffer, replica: IqBuffer) -> IqBuffer:
    """``rx * conj(replica)`` over the overlap of the two buffers."""
    lo = max(rx.base_index, replica.base_index)
    hi = min(rx.end_index, replica.end_index)
    if hi <= lo:
        raise ValueError("received buffer and replica do not overlap")
    a = rx.samples[lo - rx.base_index:hi - rx.base_index]
    b = replica.samples[lo - replica.base_index:hi - replica.base_index]
    return IqBuffer(a * np.conj(b), base_index=lo)


def moving_average(x: np.ndarray, window: int) -> np.ndarray:
    """Length-``window`` boxcar mean, 'valid' part only."""
    c = np.concatenate([[0.0], np.cumsum(x)])
    return (c[window:] - c[:-window]) / window


def extract_phase(r: IqBuffer, smooth_window: int = 63, sg_len: int = 0) -> PhaseSeries:
    """Angle of the complex moving average of ``r``.

    Averaging I/Q before taking the angle avoids the breakdown of angle
    averaging at the wrap points.
    """
    if smooth_window < 1 or smooth_window % 2 == 0:
        raise ValueError(f"smooth_window must be a positive odd integer, got {smooth_window}")
    if len(r) < smooth_window:
        raise ValueError(f"buffer of {len(r)} samples is shorter than the window {smooth_window}")
    z = moving_average(r.samples, smooth_window)
    return PhaseSeries(wrap(np.angle(z)), r.base_index + (smooth_window - 1) // 2, sg_len, np.abs(z))


def segment_by_sg(ps: PhaseSeries, cfg: PreambleConfig, guard: int = 192,
                  origin: int | None = None) -> list[PhaseSeries]:
    """Cut ``ps`` into one piece per symbol group.

    Symbol group ``m`` spans ``[origin + m*sg_len, origin + (m+1)*sg_len)``;
    ``guard`` samples are dropped at both ends of each piece. Pieces that
    fall outside the series come back empty.
    """
    if origin is None:
        origin = cfg.n_start
    if 2 * guard >= cfg.sg_len:
        raise ValueError(f"guard {guard} leaves nothing of a {cfg.sg_len}-sample symbol group")
    out = []
    for m in range(cfg.n_sg):
        start = origin + m * cfg.sg_len
        seg = ps.slice(start + guard, start + cfg.sg_len - guard)
        seg.sg_len = cfg.sg_len
        seg.sg_index = m
        out.append(seg)
    return out


def write_phase_csv(ps: PhaseSeries, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_index", "phase"])
        for n, p in zip(ps.indices.tolist(), ps.phase.tolist()):
            w.writerow([n, f"{p:.9f}"])
