"""Change point detection with a time-invariant autoencoder representation.

Consecutive windows of the phase series are encoded by a one-hidden-layer
autoencoder. The first ``n_invariant`` hidden units are pushed towards
being constant across neighbouring windows; their distance between windows
one window length apart is the dissimilarity whose prominent peaks are the
change points.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import find_peaks

from .phase import PhaseSeries

_MAGIC = b"TIRE"
_VERSION = 1


@dataclass(frozen=True)
class TireConfig:
    window_len: int = 64
    stride: int = 4
    n_invariant: int = 1
    n_instant: int = 3
    hidden_act: str = "tanh"
    consistency_weight: float = 0.01
    epochs: int = 50
    lr: float = 1e-3
    prominence_k: float = 2.0
    seed: int = 0
    batch_size: int = 128
    # windows drawn per epoch; keeps per-trial training cheap on long series
    max_train_windows: int = 2048

    def __post_init__(self):
        if self.n_invariant < 1:
            raise ValueError("n_invariant must be >= 1")
        if self.n_instant < 0:
            raise ValueError("n_instant must be >= 0")
        if self.window_len < 8:
            raise ValueError("window_len must be >= 8")
        if not 1 <= self.stride <= self.window_len:
            raise ValueError("stride must lie in [1, window_len]")
        if self.window_len % self.stride:
            raise ValueError("window_len must be a multiple of stride")
        if self.hidden_act != "tanh":
            raise ValueError(f"unsupported activation {self.hidden_act!r}")
        if self.consistency_weight < 0:
            raise ValueError("consistency_weight must be >= 0")
        if self.epochs < 1 or self.lr <= 0:
            raise ValueError("epochs and lr must be positive")

    @property
    def hidden(self) -> int:
        return self.n_invariant + self.n_instant


@dataclass
class TireModel:
    """Trained weights. ``scale`` normalises windows before encoding."""

    w1: np.ndarray  # (window_len, hidden)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (hidden, window_len)
    b2: np.ndarray  # (window_len,)
    n_invariant: int
    scale: float = 1.0
    loss_history: list[float] = field(default_factory=list)

    @property
    def window_len(self) -> int:
        return self.w1.shape[0]

    def encode(self, x: np.ndarray) -> np.ndarray:
        return np.tanh(x @ self.w1 + self.b1)

    def invariant(self, x: np.ndarray) -> np.ndarray:
        return self.encode(x)[:, :self.n_invariant]

    def reconstruct(self, x: np.ndarray) -> np.ndarray:
        return self.encode(x) @ self.w2 + self.b2

    def save(self, path: str | Path) -> None:
        """Little-endian blob: magic, version, window_len, hidden, n_invariant, scale, f32 weights."""
        w, h = self.w1.shape
        head = _MAGIC + struct.pack("<IIIIf", _VERSION, w, h, self.n_invariant, self.scale)
        body = np.concatenate([a.ravel() for a in (self.w1, self.b1, self.w2, self.b2)]).astype("<f4")
        Path(path).write_bytes(head + body.tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "TireModel":
        raw = Path(path).read_bytes()
        if raw[:4] != _MAGIC:
            raise ValueError(f"{path}: not a TIRE weight file")
        version, w, h, n_inv, scale = struct.unpack("<IIIIf", raw[4:24])
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        vals = np.frombuffer(raw[24:], dtype="<f4").astype(np.float64)
        sizes = [w * h, h, h * w, w]
        if vals.size != sum(sizes):
            raise ValueError(f"{path}: expected {sum(sizes)} weights, found {vals.size}")
        parts = np.split(vals, np.cumsum(sizes)[:-1])
        return cls(parts[0].reshape(w, h), parts[1], parts[2].reshape(h, w), parts[3], n_inv, scale)


@dataclass
class ChangePointSet:
    """Detected change points (absolute index, prominence), ascending."""

    points: list[tuple[float, float]]
    dissimilarity: list[tuple[int, float]] = field(default_factory=list)
    threshold: float = 0.0

    @property
    def indices(self) -> np.ndarray:
        return np.array([p[0] for p in self.points], dtype=np.float64)

    @property
    def prominences(self) -> np.ndarray:
        return np.array([p[1] for p in self.points], dtype=np.float64)

    def __len__(self) -> int:
        return len(self.points)


def window_starts(n: int, cfg: TireConfig) -> np.ndarray:
    return np.arange(0, n - cfg.window_len + 1, cfg.stride)


def make_windows(phase: np.ndarray, cfg: TireConfig) -> np.ndarray:
    """Mean-removed windows, one row per stride step."""
    starts = window_starts(phase.size, cfg)
    if starts.size == 0:
        return np.empty((0, cfg.window_len))
    x = np.lib.stride_tricks.sliding_window_view(phase, cfg.window_len)[starts]
    return x - x.mean(axis=1, keepdims=True)


def train_tire(ps: PhaseSeries, cfg: TireConfig = TireConfig()) -> TireModel:
    """Fit the autoencoder on the series' own windows.

    Loss per window pair ``(n, n+1)`` (one stride apart): mean squared
    reconstruction error of both windows plus ``consistency_weight`` times
    the squared distance of their invariant features. Adam, mini-batches,
    deterministic for a given ``cfg.seed``.
    """
    if len(ps) < 4 * cfg.window_len:
        raise ValueError(f"series of {len(ps)} samples is shorter than 4 windows "
                         f"({4 * cfg.window_len})")
    x = make_windows(ps.phase, cfg)
    rms = float(np.sqrt(np.mean(x * x)))
    scale = 1.0 / rms if rms > 0 else 1.0
    x = x * scale
    rng = np.random.default_rng(cfg.seed)
    wl, h, k = cfg.window_len, cfg.hidden, cfg.n_invariant

    params = [
        rng.standard_normal((wl, h)) * np.sqrt(1.0 / wl),
        np.zeros(h),
        rng.standard_normal((h, wl)) * np.sqrt(1.0 / h),
        np.zeros(wl),
    ]
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    step = 0
    history = []
    n_pairs = x.shape[0] - 1
    per_epoch = min(n_pairs, cfg.max_train_windows)
    lam = cfg.consistency_weight

    for _ in range(cfg.epochs):
        order = rng.permutation(n_pairs)[:per_epoch]
        epoch_loss = 0.0
        for lo in range(0, per_epoch, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            b = idx.size
            xb = np.concatenate([x[idx], x[idx + 1]])
            w1, b1, w2, b2 = params
            hid = np.tanh(xb @ w1 + b1)
            out = hid @ w2 + b2
            err = out - xb
            ds = hid[:b, :k] - hid[b:, :k]
            rec = np.mean(err * err)
            con = np.sum(ds * ds) / b
            epoch_loss += (rec + lam * con) * b

            g_out = 2.0 * err / err.size
            g_w2 = hid.T @ g_out
            g_b2 = g_out.sum(axis=0)
            g_hid = g_out @ w2.T
            g_hid[:b, :k] += 2.0 * lam * ds / b
            g_hid[b:, :k] -= 2.0 * lam * ds / b
            g_pre = g_hid * (1.0 - hid * hid)
            g_w1 = xb.T @ g_pre
            g_b1 = g_pre.sum(axis=0)

            step += 1
            for p, g, mm, vv in zip(params, (g_w1, g_b1, g_w2, g_b2), m, v):
                mm *= beta1
                mm += (1 - beta1) * g
                vv *= beta2
                vv += (1 - beta2) * g * g
                mhat = mm / (1 - beta1 ** step)
                vhat = vv / (1 - beta2 ** step)
                p -= cfg.lr * mhat / (np.sqrt(vhat) + eps)
        history.append(epoch_loss / per_epoch)

    return TireModel(*params, n_invariant=k, scale=scale, loss_history=history)


def raw_dissimilarity(model: TireModel, ps: PhaseSeries, cfg: TireConfig) -> tuple[np.ndarray, np.ndarray]:
    """``||s_n - s_{n+W}||`` indexed at the boundary between the two windows."""
    x = make_windows(ps.phase, cfg) * model.scale
    lag = cfg.window_len // cfg.stride
    if x.shape[0] <= lag:
        return np.empty(0, dtype=np.int64), np.empty(0)
    s = model.invariant(x)
    d = np.linalg.norm(s[:-lag] - s[lag:], axis=1)
    idx = ps.base_index + window_starts(len(ps), cfg)[:-lag] + cfg.window_len
    return idx, d


def matched_filter(d: np.ndarray, cfg: TireConfig) -> np.ndarray:
    """Triangular smoothing of width two windows.

    A change between two windows shows up as a pair of bumps one window
    apart; the triangle merges them into one peak at the change.
    """
    k = cfg.window_len // cfg.stride
    tri = (k - np.abs(np.arange(-k + 1, k))).astype(np.float64)
    tri /= tri.sum()
    return np.convolve(d, tri, mode="same")


def dissimilarity(model: TireModel, ps: PhaseSeries, cfg: TireConfig,
                  smooth: bool = True) -> list[tuple[int, float]]:
    idx, d = raw_dissimilarity(model, ps, cfg)
    if smooth and d.size:
        d = matched_filter(d, cfg)
    return list(zip(idx.tolist(), d.tolist()))


# prominences below this are rounding noise of a flat dissimilarity
MIN_PROMINENCE = 1e-6


def relative_threshold(d: np.ndarray, k: float, floor: float = MIN_PROMINENCE) -> float:
    return max(float(np.mean(d) + k * np.std(d)), floor) if d.size else np.inf


def pick_peaks(idx: np.ndarray, d: np.ndarray, threshold: float, stride: int,
               distance: int | None = None) -> list[tuple[float, float]]:
    """Peaks with prominence >= threshold, refined by a parabola through three neighbours.

    ``distance`` (in curve points) keeps only the highest of peaks closer
    than that; a saturated feature gives flat-topped peaks whose rounding
    noise would otherwise split them.
    """
    if d.size < 3:
        return []
    peaks, props = find_peaks(d, prominence=threshold, distance=distance)
    out = []
    for p, prom in zip(peaks, props["prominences"]):
        pos = float(idx[p])
        y0, y1, y2 = d[p - 1], d[p], d[p + 1]
        den = y0 - 2.0 * y1 + y2
        if den < 0:
            pos += 0.5 * (y0 - y2) / den * stride
        out.append((pos, float(prom)))
    return out


def peak_distance(cfg: TireConfig) -> int:
    """One window, in curve points: closer changes cannot be told apart."""
    return max(cfg.window_len // cfg.stride, 1)


def detect(ps: PhaseSeries, cfg: TireConfig = TireConfig(), model: TireModel | None = None,
           threshold: float | None = None) -> ChangePointSet:
    """Change points of ``ps``.

    Trains a model on ``ps`` unless one is supplied. The prominence threshold
    defaults to ``mean(D) + prominence_k * std(D)`` of this series' own
    dissimilarity.
    """
    if model is None:
        model = train_tire(ps, cfg)
    idx, d = raw_dissimilarity(model, ps, cfg)
    if d.size == 0:
        return ChangePointSet([], [], np.inf)
    d = matched_filter(d, cfg)
    thr = relative_threshold(d, cfg.prominence_k) if threshold is None else threshold
    pts = pick_peaks(idx, d, thr, cfg.stride, peak_distance(cfg))
    return ChangePointSet(pts, list(zip(idx.tolist(), d.tolist())), thr)
