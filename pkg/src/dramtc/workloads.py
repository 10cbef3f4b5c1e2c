"""Closed-loop request generators and latency-sample classification.

Every process is a cooperative actor on the single-threaded simulation loop.
Latency is measured the way a flush+load+timestamp loop measures it: the end
timestamp of one iteration is the start of the next, so the sample chain is
gapless and a preventive action can never fall between two measurements.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence

from .core import DramAddress
from .defenses import DefenseKind, PRAC_FAMILY


class ConfigError(Exception):
    pass


class OutOfRange(Exception):
    pass


class LatencyClass(Enum):
    HIT = "hit"
    CONFLICT = "conflict"
    REFRESH = "refresh"
    RFM = "rfm"
    BACKOFF = "backoff"


@dataclass
class ThresholdBands:
    """Latency decision thresholds, frozen from a calibration run.

    Order of evaluation: hit, conflict, rfm band, explicit back-off band,
    refresh, then anything above refresh_max counts as a back-off.
    """
    hit_max: int
    conflict_max: int
    refresh_max: int
    rfm_band: Optional[tuple] = None
    backoff_band: Optional[tuple] = None

    def __post_init__(self):
        if not self.conflict_max < self.refresh_max:
            raise ConfigError("conflict_max must be below refresh_max")

    def classify(self, lat: int) -> LatencyClass:
        if lat <= self.hit_max:
            return LatencyClass.HIT
        if lat <= self.conflict_max:
            return LatencyClass.CONFLICT
        if self.rfm_band is not None and self.rfm_band[0] <= lat <= self.rfm_band[1]:
            return LatencyClass.RFM
        if self.backoff_band is not None and self.backoff_band[0] <= lat <= self.backoff_band[1]:
            return LatencyClass.BACKOFF
        if lat <= self.refresh_max:
            return LatencyClass.REFRESH
        return LatencyClass.BACKOFF


# sample tuples: (start_ts, latency, LatencyClass or None)

class BaseProcess:
    kind = "process"

    def __init__(self, loop_overhead: int = 10, bands: Optional[ThresholdBands] = None,
                 start_at: int = 0, record: bool = True):
        self.loop_overhead = loop_overhead
        self.bands = bands
        self.start_at = start_at
        self.record = record
        self.pid = -1
        self.wake_time: Optional[int] = None
        self._served = None
        self._last_ts = start_at
        self.samples: list = []
        self.duration = 0

    def start(self, sim, duration: int):
        self.duration = duration
        self.wake_time = self.start_at
        self._last_ts = self.start_at

    def _issue(self, sim, now: int, addr: DramAddress):
        req = sim.enqueue(self, addr, now + self.loop_overhead)
        if req is None:
            # queue back-pressure: stall and retry one conflict-service later
            self.wake_time = now + sim.t.trc
        return req

    def _record(self, now: int) -> Optional[LatencyClass]:
        lat = now - self._last_ts
        cls = self.bands.classify(lat) if self.bands is not None else None
        if self.record:
            self.samples.append((self._last_ts, lat, cls))
        self._last_ts = now
        return cls

    def on_wake(self, sim, now: int):
        raise NotImplementedError

    def on_complete(self, sim, now: int, req):
        raise NotImplementedError


class Receiver(BaseProcess):
    """Latency-measurement loop (one row for the covert channel, two rows
    alternating `i % 2` for standalone characterization)."""
    kind = "receiver"

    def __init__(self, rows: Sequence[DramAddress], window: Optional[int] = None,
                 stop_class: Optional[LatencyClass] = None, **kw):
        super().__init__(**kw)
        if not rows:
            raise ConfigError("receiver needs at least one row")
        self.rows = list(rows)
        self.window = window
        self.stop_class = stop_class
        self._i = 0

    def _next_addr(self) -> DramAddress:
        addr = self.rows[self._i % len(self.rows)]
        self._i += 1
        return addr

    def on_wake(self, sim, now: int):
        self._last_ts = now
        self._issue(sim, now, self._next_addr())

    def on_complete(self, sim, now: int, req):
        start = self._last_ts
        cls = self._record(now)
        if (self.stop_class is not None and self.window is not None
                and cls is self.stop_class):
            # sleep out the window this sample belongs to (by its start)
            boundary = (start // self.window + 1) * self.window
            self.wake_time = max(boundary, now)
            return
        self._issue(sim, now, self._next_addr())


class Sender(BaseProcess):
    """Window-synchronized transmitter.

    Symbol 0 idles the window. Symbols >= 1 hammer the sender's own rows
    (two rows self-conflict, giving one activation per access) with a
    per-symbol inter-access sleep that modulates how many accesses the
    receiver performs before the preventive action lands. Under the PRAC
    family the sender watches its own latencies and sleeps out the rest of
    the window once it observes the back-off.
    """
    kind = "sender"

    def __init__(self, rows: Sequence[DramAddress], schedule: Sequence[int],
                 window: int, mechanism: DefenseKind = DefenseKind.PRAC,
                 delta_table: Optional[dict] = None, **kw):
        super().__init__(**kw)
        if not rows:
            raise ConfigError("sender needs at least one row")
        self.rows = list(rows)
        self.schedule = list(schedule)
        self.window = window
        self.mechanism = mechanism
        self.delta_table = delta_table or {}
        self._i = 0
        self.requests_issued = 0

    def _symbol_at(self, now: int) -> Optional[int]:
        w = now // self.window
        if w >= len(self.schedule):
            return None
        return self.schedule[w]

    def _window_end(self, now: int) -> int:
        return (now // self.window + 1) * self.window

    def on_wake(self, sim, now: int):
        self._last_ts = now
        sym = self._symbol_at(now)
        if sym is None:
            self.wake_time = None  # message done
            return
        if sym == 0:
            self.wake_time = self._window_end(now)
            return
        self._issue_next(sim, now)

    def _issue_next(self, sim, now: int):
        addr = self.rows[self._i % len(self.rows)]
        self._i += 1
        self.requests_issued += 1
        self._issue(sim, now, addr)

    def on_complete(self, sim, now: int, req):
        start = self._last_ts
        cls = self._record(now)
        if self.mechanism in PRAC_FAMILY and cls is LatencyClass.BACKOFF:
            # bit delivered; idle out the window this sample started in
            self.wake_time = max(self._window_end(start), now)
            return
        end = self._window_end(now)
        if now >= end:
            self.on_wake(sim, now)
            return
        sym = self._symbol_at(now)
        if sym is None or sym == 0:
            self.wake_time = end
            return
        delta = self.delta_table.get(sym)
        if delta:
            # (sleep_ns, period): sleep after every period-th access, giving
            # duty-cycled intensity modulation
            sleep, period = delta
            if sleep and self._i % period == 0:
                self.wake_time = now + sleep
                return
        self._issue_next(sim, now)


class NoiseGen(BaseProcess):
    """Alternates two private rows with a fixed sleep between activations."""
    kind = "noise"

    SWEEP_MIN = 200
    SWEEP_MAX = 2000

    def __init__(self, rows: Sequence[DramAddress], sleep: int,
                 enforce_sweep_range: bool = False, **kw):
        kw.setdefault("record", False)
        super().__init__(**kw)
        if enforce_sweep_range and not (self.SWEEP_MIN <= sleep <= self.SWEEP_MAX):
            raise OutOfRange(f"noise sleep {sleep} outside [{self.SWEEP_MIN}, {self.SWEEP_MAX}]")
        self.rows = list(rows)
        self.sleep = sleep
        self._i = 0

    def on_wake(self, sim, now: int):
        self._last_ts = now
        addr = self.rows[self._i % len(self.rows)]
        self._i += 1
        self._issue(sim, now, addr)

    def on_complete(self, sim, now: int, req):
        self._record(now)
        if self.sleep == 0:
            self.on_wake(sim, now)
        else:
            self.wake_time = now + self.sleep


def noise_intensity(sleep_ns: int) -> float:
    """Linear map of the generator's inter-activation sleep onto 1..100%."""
    lo, hi = NoiseGen.SWEEP_MIN, NoiseGen.SWEEP_MAX
    return (1.0 - (sleep_ns - lo) / (hi - lo)) * 99.0 + 1.0


class Fingerprinter(BaseProcess):
    """Round-robins over n test rows, t accesses each, staying below the
    back-off threshold on every row it owns."""
    kind = "fingerprinter"

    def __init__(self, rows: Sequence[DramAddress], t_accesses: int,
                 abo_th: Optional[int] = None, **kw):
        super().__init__(**kw)
        if not rows:
            raise ConfigError("fingerprinter needs at least one row")
        if abo_th is not None and t_accesses >= abo_th:
            raise ConfigError(f"t_accesses {t_accesses} must stay below abo_th {abo_th}")
        self.rows = list(rows)
        self.t_accesses = t_accesses
        self._i = 0

    def _next_addr(self):
        addr = self.rows[(self._i // self.t_accesses) % len(self.rows)]
        self._i += 1
        return addr

    def on_wake(self, sim, now: int):
        self._last_ts = now
        self._issue(sim, now, self._next_addr())

    def on_complete(self, sim, now: int, req):
        self._record(now)
        self._issue(sim, now, self._next_addr())


@dataclass
class ProfilePhase:
    duration: int
    sleep: Optional[int]  # None = idle phase
    rows: Sequence[DramAddress] = ()


class SiteProfile(BaseProcess):
    """Replays a parameterized phase sequence with seeded jitter, standing in
    for a browser loading one particular site."""
    kind = "site"

    def __init__(self, phases: Sequence[ProfilePhase], seed: int = 0,
                 jitter: float = 0.10, **kw):
        kw.setdefault("record", False)
        super().__init__(**kw)
        if not phases:
            raise ConfigError("profile needs at least one phase")
        self.phases = list(phases)
        self.rng = random.Random(seed)
        self.jitter = jitter
        self._i = 0
        self._idx = 0
        self._starts = []
        t = kw.get("start_at", 0)
        for ph in self.phases:
            self._starts.append(t)
            t += ph.duration
        self._end = t

    def _phase_at(self, now: int) -> Optional[ProfilePhase]:
        while (self._idx < len(self.phases)
               and now >= self._starts[self._idx] + self.phases[self._idx].duration):
            self._idx += 1
        if self._idx >= len(self.phases):
            return None
        return self.phases[self._idx]

    def _sleep_for(self, ph: ProfilePhase) -> int:
        if self.jitter <= 0:
            return ph.sleep
        lo = 1.0 - self.jitter / 2
        return max(0, int(ph.sleep * (lo + self.jitter * self.rng.random())))

    def on_wake(self, sim, now: int):
        ph = self._phase_at(now)
        if ph is None:
            self.wake_time = None
            return
        if ph.sleep is None or not ph.rows:
            self.wake_time = self._starts[self._idx] + ph.duration
            return
        self._last_ts = now
        addr = ph.rows[self._i % len(ph.rows)]
        self._i += 1
        self._issue(sim, now, addr)

    def on_complete(self, sim, now: int, req):
        self._record(now)
        ph = self._phase_at(now)
        if ph is None:
            self.wake_time = None
            return
        if ph.sleep is None:
            self.on_wake(sim, now)
            return
        self.wake_time = now + self._sleep_for(ph)


class SyntheticApp(BaseProcess):
    """Generic interference: seeded random rows over a bank set at a fixed
    per-iteration sleep."""
    kind = "app"

    def __init__(self, banks: Sequence[tuple], rows_per_bank: int = 64,
                 sleep: int = 500, seed: int = 0, **kw):
        kw.setdefault("record", False)
        super().__init__(**kw)
        self.banks = list(banks)
        self.rows_per_bank = rows_per_bank
        self.sleep = sleep
        self.rng = random.Random(seed)

    def _next_addr(self):
        ch, rk, bg, b = self.banks[self.rng.randrange(len(self.banks))]
        return DramAddress(ch, rk, bg, b, row=self.rng.randrange(self.rows_per_bank))

    def on_wake(self, sim, now: int):
        self._last_ts = now
        self._issue(sim, now, self._next_addr())

    def on_complete(self, sim, now: int, req):
        self._record(now)
        self.wake_time = now + self.sleep


class CounterLeakAttacker(BaseProcess):
    """Hammers the shared row, counting its own activations of it until the
    back-off lands."""
    kind = "leak"

    def __init__(self, shared_row: DramAddress, helper_row: DramAddress,
                 abo_th: int, **kw):
        super().__init__(**kw)
        self.shared = shared_row
        self.helper = helper_row
        self.abo_th = abo_th
        self._i = 0
        self.shared_count = 0
        self.backoff_count: Optional[int] = None
        self.backoff_time: Optional[int] = None

    def on_wake(self, sim, now: int):
        self._last_ts = now
        self._issue_next(sim, now)

    def _issue_next(self, sim, now: int):
        addr = self.shared if self._i % 2 == 0 else self.helper
        self._i += 1
        self._issue(sim, now, addr)

    def on_complete(self, sim, now: int, req):
        cls = self._record(now)
        if req.addr.row == self.shared.row:
            self.shared_count += 1
        if cls is LatencyClass.BACKOFF:
            self.backoff_count = self.shared_count
            self.backoff_time = now
            self.wake_time = None
            return
        if self.shared_count > 4 * self.abo_th:
            self.wake_time = None  # no back-off; surfaced as NoBackoff upstream
            return
        self._issue_next(sim, now)


class Planter(BaseProcess):
    """Victim stand-in: loads the shared row's activation counter to a known
    value, then goes quiet."""
    kind = "planter"

    def __init__(self, shared_row: DramAddress, helper_row: DramAddress,
                 value: int, **kw):
        kw.setdefault("record", False)
        super().__init__(**kw)
        self.shared = shared_row
        self.helper = helper_row
        self.value = value
        self._i = 0

    def on_wake(self, sim, now: int):
        if self.value == 0:
            self.wake_time = None
            return
        self._last_ts = now
        self._issue_next(sim, now)

    def _issue_next(self, sim, now: int):
        addr = self.shared if self._i % 2 == 0 else self.helper
        self._i += 1
        self._issue(sim, now, addr)

    def on_complete(self, sim, now: int, req):
        self._record(now)
        if self._i >= 2 * self.value:
            self.wake_time = None
            return
        self._issue_next(sim, now)


# -- band calibration ----------------------------------------------------------


def _cluster(latencies: Sequence[int], rel: float = 0.02):
    """Group sorted exact latencies into clusters closer than `rel`."""
    uniq = sorted(set(latencies))
    clusters = []
    for v in uniq:
        if clusters and v <= clusters[-1][1] * (1 + rel):
            clusters[-1][1] = v
        else:
            clusters.append([v, v])
    return [(lo, hi) for lo, hi in clusters]


def _near(cluster, refresh_cluster, ratio: float) -> bool:
    lo, hi = cluster
    rlo, rhi = refresh_cluster
    if hi < rlo:
        return rlo / hi <= ratio
    if lo > rhi:
        return lo / rhi <= ratio
    return True  # overlapping ranges


def _overlaps(start: int, end: int, windows) -> bool:
    for lo, hi in windows:
        if start < hi and end > lo:
            return True
    return False


def fit_bands(samples, timing, defense_kind: DefenseKind, ref_windows=(),
              preventive_windows=(), loop_overhead: int = 10,
              ctrl_overhead: int = 10, conflict_slack: Optional[int] = None,
              refresh_merge: float = 1.2, queue_slack: Optional[int] = None) -> ThresholdBands:
    """Derive ThresholdBands from a characterization run.

    Clusters the exact latencies and takes the most frequent cluster as the
    row-conflict band, padded by one in-flight service (`conflict_slack`) so
    queue-delayed conflicts stay conflicts. Above-conflict clusters are
    labeled refresh or preventive by overlap with the run's REF and RFM
    windows (the attacker calibrates on a machine it controls). A preventive
    cluster within `refresh_merge` of a refresh cluster is folded into the
    refresh band: those magnitudes are not separable, which is exactly the
    1-RFM degradation. Preventive bands are widened upward by `queue_slack`
    to absorb requests queued behind other processes.
    """
    lats = [s[1] for s in samples]
    if not lats:
        raise ConfigError("calibration run produced no samples")
    if conflict_slack is None:
        conflict_slack = timing.trc // 2
    if queue_slack is None:
        queue_slack = 3 * timing.trc
    clusters = _cluster(lats)
    counts = {c: 0 for c in clusters}
    for v in lats:
        for c in clusters:
            if c[0] <= v <= c[1]:
                counts[c] += 1
                break
    conflict = max(clusters, key=lambda c: counts[c])
    hit_max = loop_overhead + ctrl_overhead + timing.tcl + 4
    conflict_max = conflict[1] + conflict_slack
    refresh_clusters = []
    preventive = []
    for c in clusters:
        if c[0] <= conflict_max:
            continue
        spans = [(s[0], s[0] + s[1]) for s in samples if c[0] <= s[1] <= c[1]]
        prev_votes = sum(1 for sp in spans if _overlaps(sp[0], sp[1], preventive_windows))
        if prev_votes * 2 >= len(spans):
            preventive.append(c)
        else:
            refresh_clusters.append(c)
    survivors = [c for c in preventive
                 if not any(_near(c, r, refresh_merge) for r in refresh_clusters)]
    if refresh_clusters:
        refresh_top = max(hi for _, hi in refresh_clusters)
    else:
        refresh_top = conflict_max
    refresh_max = int(refresh_top * refresh_merge)
    rfm_band = None
    backoff_band = None
    below = [c for c in survivors if c[0] <= refresh_max]
    if below:
        # calibration measures events behind a row conflict; behind a row hit
        # the same event arrives tRP+tRCD sooner, so the band reaches down by
        # that much (and must stop short of the refresh band's hit variant)
        lo = min(c[0] for c in below) - timing.trp - timing.trcd - 4
        lo = max(lo, conflict_max + 2)
        hi = max(c[1] for c in below) + queue_slack
        if refresh_clusters:
            hit_variant = min(rlo for rlo, _ in refresh_clusters) - timing.trp - timing.trcd
            hi = min(hi, hit_variant - 2)
        band = (lo, hi)
        if defense_kind in (DefenseKind.PRFM, DefenseKind.FR_RFM):
            rfm_band = band
        else:
            backoff_band = band
    return ThresholdBands(hit_max=hit_max, conflict_max=conflict_max,
                          refresh_max=refresh_max, rfm_band=rfm_band,
                          backoff_band=backoff_band)
