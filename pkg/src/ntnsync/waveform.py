"""NPRACH preamble synthesis.

A preamble is ``4 * n_rep`` symbol groups. Each symbol group is a cyclic
prefix followed by ``symbols_per_sg`` identical single-tone symbols on one
subcarrier of the 3.75 kHz NPRACH grid.
"""
from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

SG_PER_UNIT = 4
# hop applied to the first subcarrier of each 4-SG unit, see build_schedule
UNIT_HOPS = (1, 6, -1)
UNIT_STRIDE = 7


class PreambleFormat(str, enum.Enum):
    FORMAT0 = "Format0"
    FORMAT1 = "Format1"


@dataclass(frozen=True)
class PreambleConfig:
    """Static NPRACH configuration shared by transmitter and receiver.

    ``cp_len`` follows from the format: a quarter symbol for Format0,
    a full symbol for Format1.
    """

    format: PreambleFormat = PreambleFormat.FORMAT1
    n_rep: int = 8
    n_start: int = 0
    n_off: int = 1
    n_sc_total: int = 12
    fft_len: int = 512
    symbols_per_sg: int = 5
    sample_rate: float = 1.92e6

    def __post_init__(self):
        object.__setattr__(self, "format", PreambleFormat(self.format))
        if self.n_rep < 1:
            raise ValueError(f"n_rep must be positive, got {self.n_rep}")
        if self.fft_len < 4 or self.fft_len % 4:
            raise ValueError(f"fft_len must be a positive multiple of 4, got {self.fft_len}")
        if self.symbols_per_sg < 1:
            raise ValueError("symbols_per_sg must be positive")
        if self.n_sc_total < 7:
            # the {+1, +6, -1} hop needs at least 7 subcarriers to stay in range
            raise ValueError(f"n_sc_total must be >= 7, got {self.n_sc_total}")
        if not 0 <= self.n_off < self.n_sc_total:
            raise ValueError(f"n_off={self.n_off} outside [0, {self.n_sc_total})")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")

    @property
    def cp_len(self) -> int:
        if self.format is PreambleFormat.FORMAT0:
            return self.fft_len // 4
        return self.fft_len

    @property
    def sg_len(self) -> int:
        return self.cp_len + self.symbols_per_sg * self.fft_len

    @property
    def n_sg(self) -> int:
        return SG_PER_UNIT * self.n_rep

    @property
    def length(self) -> int:
        return self.n_sg * self.sg_len

    @property
    def subcarrier_spacing(self) -> float:
        return self.sample_rate / self.fft_len

    def to_dict(self) -> dict:
        d = asdict(self)
        d["format"] = self.format.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PreambleConfig":
        return cls(**d)

    @classmethod
    def from_json(cls, path: str | Path) -> "PreambleConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class SubcarrierSchedule:
    indices: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.indices)

    def __getitem__(self, m: int) -> int:
        return self.indices[m]


@dataclass
class IqBuffer:
    """Complex baseband samples; ``base_index`` is the absolute index of ``samples[0]``."""

    samples: np.ndarray
    base_index: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.complex128)
        if self.samples.ndim != 1:
            raise ValueError("IqBuffer samples must be one-dimensional")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("IqBuffer samples must be finite")

    def __len__(self) -> int:
        return self.samples.size

    @property
    def end_index(self) -> int:
        return self.base_index + self.samples.size

    def window(self, start: int, stop: int) -> np.ndarray:
        """Samples at absolute indices ``[start, stop)``; zeros outside the buffer."""
        out = np.zeros(max(stop - start, 0), dtype=np.complex128)
        lo = max(start, self.base_index)
        hi = min(stop, self.end_index)
        if hi > lo:
            out[lo - start:hi - start] = self.samples[lo - self.base_index:hi - self.base_index]
        return out


def build_schedule(cfg: PreambleConfig) -> SubcarrierSchedule:
    """Deterministic hopping pattern.

    Unit ``u`` starts on ``(n_off + 7u) mod n_sc_total`` and walks the hops
    ``+1, +6, -1``. When a hop would leave the grid the walking direction
    flips and stays flipped for the rest of the unit.
    """
    idx: list[int] = []
    for u in range(cfg.n_rep):
        k = (cfg.n_off + UNIT_STRIDE * u) % cfg.n_sc_total
        direction = 1
        idx.append(k)
        for hop in UNIT_HOPS:
            if not 0 <= k + direction * hop < cfg.n_sc_total:
                direction = -direction
            k += direction * hop
            idx.append(k)
    return SubcarrierSchedule(tuple(idx))


def sg_tone(k: int, cfg: PreambleConfig) -> np.ndarray:
    """One symbol group on subcarrier ``k``; the CP is the tail of the symbol."""
    q = np.arange(cfg.sg_len) - cfg.cp_len
    return np.exp(2j * np.pi * k * q / cfg.fft_len)


def gen_preamble(cfg: PreambleConfig, sched: SubcarrierSchedule | None = None) -> IqBuffer:
    if sched is None:
        sched = build_schedule(cfg)
    if len(sched) != cfg.n_sg:
        raise ValueError(f"schedule has {len(sched)} entries, expected {cfg.n_sg}")
    tones = {k: sg_tone(k, cfg) for k in set(sched.indices)}
    samples = np.concatenate([tones[k] for k in sched.indices])
    return IqBuffer(samples, base_index=cfg.n_start)


def write_iq(buf: IqBuffer, path: str | Path) -> None:
    """Raw interleaved little-endian float32 I/Q, no header."""
    iq = np.empty(2 * len(buf), dtype="<f4")
    iq[0::2] = buf.samples.real
    iq[1::2] = buf.samples.imag
    Path(path).write_bytes(iq.tobytes())


def read_iq(path: str | Path, base_index: int = 0) -> IqBuffer:
    raw = np.frombuffer(Path(path).read_bytes(), dtype="<f4")
    if raw.size % 2:
        raise ValueError(f"{path}: odd number of float32 values")
    return IqBuffer(raw[0::2].astype(np.float64) + 1j * raw[1::2], base_index=base_index)
