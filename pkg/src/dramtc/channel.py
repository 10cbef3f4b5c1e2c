"""Message encoding/decoding over defense-induced latency events, channel
metrics, and the activation-counter leak."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .core import DramAddress
from .defenses import DefenseConfig, DefenseKind
from .workloads import LatencyClass, ThresholdBands


class LengthMismatch(Exception):
    pass


class NoBackoff(Exception):
    """Counter-leak window elapsed without a back-off."""


@dataclass
class ChannelConfig:
    mechanism: DefenseKind = DefenseKind.PRAC
    window: int = 25_000
    radix: int = 2
    t_recv: int = 3
    refresh_filter: bool = False
    # accesses_until_event cutpoints for radix 3/4, ascending; filled by a
    # noiseless profiling run (see harness.calibrate_multibit)
    cutpoints: tuple = ()
    # counts beyond the slowest sender target are noise, not modulation
    reject_above: Optional[int] = None
    # per-symbol sender pacing (sleep_ns, period) for intensity modulation
    delta_table: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.radix not in (2, 3, 4):
            raise ValueError("radix must be 2, 3 or 4")
        if self.window <= 0:
            raise ValueError("window must be positive")

    @property
    def bits_per_symbol(self) -> float:
        return math.log2(self.radix)


@dataclass
class TransmissionWindow:
    index: int
    sent_symbol: int
    events_observed: int
    accesses_until_event: Optional[int]
    decoded_symbol: int


@dataclass
class ChannelReport:
    raw_bit_rate: float  # bits/s
    error_probability: float
    capacity: float      # bits/s

    def csv_row(self, mechanism: str, radix: int, window_ns: int,
                noise_intensity: float) -> str:
        return (f"{mechanism},{radix},{window_ns},{noise_intensity:.2f},"
                f"{self.raw_bit_rate:.3f},{self.error_probability:.6f},{self.capacity:.3f}")


CSV_HEADER = "mechanism,radix,window_ns,noise_intensity,raw_bps,error_prob,capacity_bps"


# -- encoding ------------------------------------------------------------------

_TERNARY_DIGITS = 6  # 3**6 = 729 >= 256, fixed-width digits per byte


def encode(message: bytes, radix: int) -> list:
    """Bytes to symbol schedule, most-significant bit/digit first."""
    symbols = []
    if radix == 2:
        for b in message:
            symbols.extend((b >> k) & 1 for k in range(7, -1, -1))
    elif radix == 4:
        for b in message:
            symbols.extend((b >> k) & 3 for k in range(6, -2, -2))
    elif radix == 3:
        for b in message:
            digits = []
            v = b
            for _ in range(_TERNARY_DIGITS):
                digits.append(v % 3)
                v //= 3
            symbols.extend(reversed(digits))
    else:
        raise ValueError("radix must be 2, 3 or 4")
    return symbols


def decode_symbols(symbols: Sequence[int], radix: int) -> bytes:
    out = bytearray()
    if radix == 2:
        for i in range(0, len(symbols) - len(symbols) % 8, 8):
            v = 0
            for s in symbols[i:i + 8]:
                v = (v << 1) | (s & 1)
            out.append(v)
    elif radix == 4:
        for i in range(0, len(symbols) - len(symbols) % 4, 4):
            v = 0
            for s in symbols[i:i + 4]:
                v = (v << 2) | (s & 3)
            out.append(v)
    else:
        n = len(symbols) - len(symbols) % _TERNARY_DIGITS
        for i in range(0, n, _TERNARY_DIGITS):
            v = 0
            for s in symbols[i:i + _TERNARY_DIGITS]:
                v = v * 3 + (s % 3)
            out.append(min(v, 255))
    return bytes(out)


def symbols_to_bits(symbols: Sequence[int], radix: int) -> list:
    """Expand symbols to the bit string they carry (for error accounting)."""
    bits = []
    if radix == 2:
        bits = [s & 1 for s in symbols]
    elif radix == 4:
        for s in symbols:
            bits.extend(((s >> 1) & 1, s & 1))
    else:
        for b in decode_symbols(symbols, 3):
            bits.extend((b >> k) & 1 for k in range(7, -1, -1))
    return bits


# -- per-window decoding -------------------------------------------------------


class RefreshFilter:
    """Modified attack for overlapped bands: treats every sufficiently slow
    sample as a candidate preventive action and discards the ones whose
    spacing from the previous candidate matches the refresh cadence.

    `min_lat` keeps plain queueing delays out of the candidate set: a real
    preventive action costs at least most of an RFM/REF window on top of the
    access itself, while waiting behind another process costs single
    services.
    """

    def __init__(self, trefi: int, min_lat: int = 0, tol: float = 0.06):
        self.trefi = trefi
        self.min_lat = min_lat
        self.tol = tol
        self.last_event: Optional[int] = None

    def survives(self, t: int) -> bool:
        prev = self.last_event
        self.last_event = t
        if prev is None:
            return True
        gap = t - prev
        k = round(gap / self.trefi)
        if 1 <= k <= 4 and abs(gap - k * self.trefi) <= self.tol * self.trefi:
            return False
        return True


def decode_prac_window(samples, cfg: ChannelConfig,
                       refresh_filter: Optional[RefreshFilter] = None):
    """Decode one PRAC window from its classified samples.

    Radix 2: symbol 1 iff at least one back-off-classified sample (with the
    refresh filter active, iff a high-latency event survives the periodicity
    filter). Radix 3/4: the receiver's access count before the first event is
    bucketed against the configured cutpoints; no event means symbol 0.
    """
    events = 0
    first_idx = None
    for i, (t, lat, cls) in enumerate(samples):
        if refresh_filter is not None:
            if (lat >= refresh_filter.min_lat
                    and cls in (LatencyClass.REFRESH, LatencyClass.BACKOFF, LatencyClass.RFM)):
                if refresh_filter.survives(t):
                    events += 1
                    if first_idx is None:
                        first_idx = i
        elif cls is LatencyClass.BACKOFF:
            events += 1
            if first_idx is None:
                first_idx = i
    if cfg.radix == 2:
        return (1 if events >= 1 else 0), events, first_idx
    if first_idx is None:
        return 0, 0, None
    count = first_idx  # accesses completed before the event landed
    if cfg.reject_above is not None and count > cfg.reject_above:
        return 0, events, count
    symbol = cfg.radix - 1
    for cut in cfg.cutpoints:
        if count <= cut:
            break
        symbol -= 1
    return max(symbol, 1), events, count


def decode_rfm_window(samples, t_recv: int):
    """Symbol 1 iff the window contains at least t_recv RFM-classified samples.

    A sample delayed by an RFM that stacked with a periodic refresh exceeds
    the refresh band and classifies as BACKOFF; it is still one observed
    preventive action, so it counts toward the threshold.
    """
    events = sum(1 for _, _, cls in samples
                 if cls is LatencyClass.RFM or cls is LatencyClass.BACKOFF)
    return (1 if events >= t_recv else 0), events, None


def slice_windows(samples, window: int, n_windows: int):
    """Bucket samples into transmission windows by their start timestamp."""
    buckets = [[] for _ in range(n_windows)]
    for s in samples:
        w = s[0] // window
        if 0 <= w < n_windows:
            buckets[w].append(s)
    return buckets


# -- metrics -------------------------------------------------------------------


def binary_entropy(e: float) -> float:
    if e <= 0.0 or e >= 1.0:
        return 0.0
    return -e * math.log2(e) - (1.0 - e) * math.log2(1.0 - e)


def channel_report(sent_symbols: Sequence[int], decoded_symbols: Sequence[int],
                   radix: int, window_ns: int) -> ChannelReport:
    if len(sent_symbols) != len(decoded_symbols) or not sent_symbols:
        raise LengthMismatch(f"{len(sent_symbols)} sent vs {len(decoded_symbols)} decoded")
    sent_bits = symbols_to_bits(sent_symbols, radix)
    got_bits = symbols_to_bits(decoded_symbols, radix)
    errors = sum(1 for a, b in zip(sent_bits, got_bits) if a != b)
    e = errors / len(sent_bits)
    raw = math.log2(radix) / window_ns * 1e9
    return ChannelReport(raw_bit_rate=raw, error_probability=e,
                         capacity=raw * (1.0 - binary_entropy(e)))


# -- counter leak --------------------------------------------------------------


@dataclass
class LeakEpisode:
    planted: int
    leaked: int
    raw_count: int
    episode_ns: int


def run_counter_leak(plants: Sequence[int], defense: DefenseConfig = None,
                     seed: int = 0, bank=(0, 0, 0, 0)) -> list:
    """Plant each counter value in a fresh simulation and leak it back.

    Row-level colocation: the attacker hammers the very row whose counter the
    victim pre-loaded, counting its own activations until the back-off, and
    reads the plant as the activation deficit relative to a clean-state
    calibration episode. One episode leaks log2(abo_th) bits.
    """
    from .controller import ControllerParams, Simulation
    from .harness import calibrate_bands_for
    from .workloads import CounterLeakAttacker, Planter

    defense = defense or DefenseConfig(kind=DefenseKind.PRAC)
    if defense.kind not in (DefenseKind.PRAC, DefenseKind.PRAC_BANK):
        raise ValueError("counter leak requires a per-row-counter defense")
    ch, rk, bg, b = bank
    shared = DramAddress(ch, rk, bg, b, row=10)
    victim_helper = DramAddress(ch, rk, bg, b, row=20)
    attacker_helper = DramAddress(ch, rk, bg, b, row=30)
    bands = calibrate_bands_for(defense, seed=seed)
    plant_budget = 2 * defense.abo_th * 120 + 2000  # worst-case plant time

    def episode(value: int) -> LeakEpisode:
        sim = Simulation(defense=defense, seed=seed)
        planter = Planter(shared, victim_helper, value)
        attacker = CounterLeakAttacker(shared, attacker_helper, defense.abo_th,
                                       bands=bands, start_at=plant_budget)
        sim.add_process(planter)
        sim.add_process(attacker)
        sim.run(plant_budget + 40 * defense.abo_th * 120)
        if attacker.backoff_count is None:
            raise NoBackoff(f"no back-off observed for plant {value}")
        return LeakEpisode(planted=value, leaked=0, raw_count=attacker.backoff_count,
                           episode_ns=attacker.backoff_time - plant_budget)

    baseline = episode(0)
    episodes = []
    for v in plants:
        ep = episode(v)
        ep.leaked = baseline.raw_count - ep.raw_count
        episodes.append(ep)
    return episodes
