"""NTN uplink impairments: delay, CFO, Doppler rate, block fading, AWGN."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .waveform import IqBuffer

SAMPLE_RATE = 1.92e6


class ChannelType(str, enum.Enum):
    AWGN = "Awgn"
    TDLC = "TdlC"


class Fading(str, enum.Enum):
    RAYLEIGH = "Rayleigh"
    LOS = "LoS"


@dataclass(frozen=True)
class Tap:
    delay_samples: int
    avg_power: float
    fading: Fading = Fading.RAYLEIGH

    def __post_init__(self):
        object.__setattr__(self, "fading", Fading(self.fading))
        if self.delay_samples < 0:
            raise ValueError("tap delay must be >= 0")
        if self.avg_power < 0:
            raise ValueError("tap power must be >= 0")


@dataclass(frozen=True)
class TdlCProfile:
    taps: tuple[Tap, ...]

    def __post_init__(self):
        taps = tuple(t if isinstance(t, Tap) else Tap(**t) for t in self.taps)
        object.__setattr__(self, "taps", taps)
        if not taps:
            raise ValueError("profile needs at least one tap")
        total = sum(t.avg_power for t in taps)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"tap powers must sum to 1, got {total!r}")

    @classmethod
    def default(cls) -> "TdlCProfile":
        return cls((Tap(0, 0.65, Fading.LOS), Tap(2, 0.25), Tap(5, 0.10)))

    @property
    def max_delay(self) -> int:
        return max(t.delay_samples for t in self.taps)

    def to_dict(self) -> dict:
        return {"taps": [{"delay_samples": t.delay_samples, "avg_power": t.avg_power,
                          "fading": t.fading.value} for t in self.taps]}

    @classmethod
    def from_dict(cls, d: dict) -> "TdlCProfile":
        return cls(tuple(Tap(**t) for t in d["taps"]))


@dataclass(frozen=True)
class ImpairmentConfig:
    """Ground truth of one trial.

    ``toa_samples`` is the delay in sample periods, ``cfo_hz`` and
    ``doppler_rate_hz_per_s`` are physical and normalised by ``sample_rate``
    (resp. its square) when applied. ``snr_db`` is per complex sample for a
    unit-power signal; ``math.inf`` disables noise.
    """

    toa_samples: float = 0.0
    cfo_hz: float = 0.0
    doppler_rate_hz_per_s: float = 0.0
    snr_db: float = math.inf
    channel: ChannelType = ChannelType.AWGN
    seed: int = 0
    max_toa_samples: float = 1344.0
    sample_rate: float = SAMPLE_RATE
    profile: TdlCProfile | None = field(default=None)

    def __post_init__(self):
        object.__setattr__(self, "channel", ChannelType(self.channel))
        if self.toa_samples < 0:
            raise ValueError("toa_samples must be >= 0")
        if self.toa_samples > self.max_toa_samples:
            raise ValueError(f"toa_samples={self.toa_samples} exceeds the observation "
                             f"window max_toa_samples={self.max_toa_samples}")


def fractional_delay(x: np.ndarray, delay: float, out_len: int) -> np.ndarray:
    """Delay ``x`` by a real number of samples.

    The integer part is a shift. The fractional part is applied as a phase
    rotation using the local phase increment of ``x``, which is exact for
    piecewise single-tone signals such as NPRACH symbol groups.
    """
    shift = int(math.floor(delay))
    mu = delay - shift
    out = np.zeros(out_len, dtype=np.complex128)
    if mu == 0.0:
        n = min(x.size, out_len - shift)
        if n > 0:
            out[shift:shift + n] = x[:n]
        return out
    # w[j]: phase increment over the interval [j-1, j]
    w = np.empty(x.size)
    w[1:] = np.angle(x[1:] * np.conj(x[:-1]))
    w[0] = w[1] if x.size > 1 else 0.0
    # one more sample continuing the last tone, for the instant size - mu
    x = np.append(x, x[-1] * np.exp(1j * w[-1]))
    w = np.append(w, w[-1])
    same_tone = np.ones(x.size, dtype=bool)
    same_tone[:-1] = np.abs(np.angle(np.exp(1j * (w[1:] - w[:-1])))) < 1e-9
    prev = np.concatenate([[0.0 + 0.0j], x[:-1]])
    w_prev = np.concatenate([[w[0]], w[:-1]])
    # y[j] is x at the instant j - mu: inside a tone interpolate backwards
    # from x[j]; at a tone boundary that instant still belongs to the
    # previous tone. y[0] lies before the signal starts.
    y = np.where(same_tone, x * np.exp(-1j * w * mu), prev * np.exp(1j * w_prev * (1.0 - mu)))
    n = min(x.size - 1, out_len - shift - 1)
    if n > 0:
        out[shift + 1:shift + 1 + n] = y[1:n + 1]
    return out


def draw_block_gains(profile: TdlCProfile, n_blocks: int, rng: np.random.Generator) -> np.ndarray:
    """Per-block complex tap gains, shape ``(n_taps, n_blocks)``."""
    gains = np.empty((len(profile.taps), n_blocks), dtype=np.complex128)
    for i, tap in enumerate(profile.taps):
        amp = math.sqrt(tap.avg_power)
        if tap.fading is Fading.LOS:
            gains[i] = amp
        else:
            g = rng.standard_normal(n_blocks) + 1j * rng.standard_normal(n_blocks)
            gains[i] = amp * g / math.sqrt(2.0)
    return gains


def apply_impairments(x: IqBuffer, imp: ImpairmentConfig, profile: TdlCProfile | None = None,
                      block_len: int | None = None) -> IqBuffer:
    """Received samples for a transmitted buffer ``x``.

    The output shares ``x.base_index`` and is padded so a delay of up to
    ``imp.max_toa_samples`` plus the channel spread fits. For TdlC the tap
    gains are constant over blocks of ``block_len`` transmitted samples (one
    symbol group) and redrawn independently per block.
    """
    if len(x) == 0:
        raise ValueError("cannot impair an empty buffer")
    if profile is None:
        profile = imp.profile
    if imp.channel is ChannelType.TDLC and profile is None:
        profile = TdlCProfile.default()
    if imp.channel is ChannelType.AWGN:
        profile = None
    rng = np.random.default_rng(imp.seed)

    spread = profile.max_delay if profile is not None else 0
    out_len = len(x) + int(math.ceil(imp.max_toa_samples)) + spread
    d = imp.toa_samples
    xd = fractional_delay(x.samples, d, out_len)
    t = np.arange(out_len) - d
    f = imp.cfo_hz / imp.sample_rate
    a = imp.doppler_rate_hz_per_s / imp.sample_rate ** 2
    s = xd * np.exp(2j * np.pi * (f * t + 0.5 * a * t * t))

    if profile is None:
        y = s
    else:
        blen = block_len or len(x)
        n_blocks = -(-len(x) // blen)
        gains = draw_block_gains(profile, n_blocks, rng)
        # block index of the transmitted sample each output sample came from
        blk = np.clip(np.floor(t / blen).astype(np.int64), 0, n_blocks - 1)
        y = np.zeros(out_len, dtype=np.complex128)
        for i, tap in enumerate(profile.taps):
            tau = tap.delay_samples
            g = gains[i][blk]
            y[tau:] += g[:out_len - tau] * s[:out_len - tau]

    if math.isfinite(imp.snr_db):
        sigma = math.sqrt(10.0 ** (-imp.snr_db / 10.0) / 2.0)
        y = y + sigma * (rng.standard_normal(out_len) + 1j * rng.standard_normal(out_len))
    return IqBuffer(y, base_index=x.base_index)


def measure_snr(clean: IqBuffer, noisy: IqBuffer) -> float:
    """SNR in dB of ``noisy`` against ``clean``; ``inf`` when they are identical."""
    if len(clean) != len(noisy) or clean.base_index != noisy.base_index:
        raise ValueError("buffers must have the same length and base index")
    noise = noisy.samples - clean.samples
    p_noise = float(np.mean(np.abs(noise) ** 2))
    if p_noise == 0.0:
        return math.inf
    p_sig = float(np.mean(np.abs(clean.samples) ** 2))
    return 10.0 * math.log10(p_sig / p_noise)
