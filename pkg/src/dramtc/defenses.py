"""RowHammer defense trigger algorithms and the ground-truth security oracle.

The trigger machines are driven by the controller through three hooks:
``on_activate`` (every ACT), ``on_precharge`` (every row close) and
``service_rfm`` (one preventive-refresh slot granted by the controller).
They never look at the clock themselves except through the timestamps the
controller passes in, which keeps them pure and replayable.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

from .core import TimingParams


class DefenseKind(Enum):
    NONE = "none"
    PRAC = "prac"
    PRFM = "prfm"
    FR_RFM = "frrfm"
    PRAC_RIAC = "riac"
    PRAC_BANK = "pracbank"


PRAC_FAMILY = {DefenseKind.PRAC, DefenseKind.PRAC_RIAC, DefenseKind.PRAC_BANK}


@dataclass
class DefenseConfig:
    kind: DefenseKind = DefenseKind.PRAC
    abo_th: int = 128
    # Rows are guaranteed safe up to nrh activations between victim refreshes.
    # The grace window lets a hot row pick up a few closes past abo_th, so the
    # default keeps the JEDEC-style margin (abo_th = 80% of nrh).
    nrh: int = 160
    rfm_th: int = 40
    riac_max: Optional[int] = None  # default: abo_th
    # Number of per-chip counter replicas modeled for RIAC. Each chip draws its
    # own uniform init; the earliest-triggering chip (max draw) defines the
    # observable counter. 1 collapses to a single uniform draw; 8 matches an
    # x8 rank.
    riac_chips: int = 8
    # Overrides the whole recovery block with a synthetic preventive-action
    # latency (sensitivity sweeps). None = rfms_per_backoff * tRFM.
    preventive_latency: Optional[int] = None

    def effective_riac_max(self) -> int:
        return self.riac_max if self.riac_max is not None else self.abo_th


class DefenseEventKind(Enum):
    ABO_ASSERT = "abo"
    RFM_ISSUED = "rfm"
    VICTIM_REFRESH = "vref"


@dataclass
class DefenseEvent:
    kind: DefenseEventKind
    t_start: int
    t_end: int
    scope: str  # "channel" or "bank"
    bank_key: Optional[tuple] = None
    trigger_row: Optional[int] = None

    def csv_row(self) -> str:
        bank = "-1" if self.bank_key is None else str(self.bank_key[3] + self.bank_key[2] * 100)
        row = "-1" if self.trigger_row is None else str(self.trigger_row)
        return f"{self.t_start},{self.t_end},{self.kind.value},{self.scope},{bank},{row}"


class PracPhase(Enum):
    ARMED = "armed"
    ASSERTED = "asserted"
    SERVICING = "servicing"
    COOLDOWN = "cooldown"


@dataclass
class AboRequest:
    """Pending alert raised toward the controller."""
    assert_time: int
    scope_key: Optional[tuple]  # None = whole channel, else single bank


class DefenseEngine:
    """One trigger machine instance per simulation."""

    def __init__(self, cfg: DefenseConfig, timing: TimingParams, seed: int = 0):
        self.cfg = cfg
        self.timing = timing
        self.kind = cfg.kind
        # Sparse per-row activation counters (bank_key -> row -> count). Kept
        # for every defense: PRAC-family triggers on them, PRFM/FR-RFM use
        # them only to pick the victim each RFM slot refreshes.
        self.counters: dict = {}
        self.bank_counters: dict = {}  # PRFM trigger state
        self.events: list[DefenseEvent] = []
        self.phase: dict = {}  # scope key (None or bank_key) -> PracPhase
        self.cooldown_until: dict = {}
        self._riac_rng = random.Random(seed ^ 0x5DEECE66D)
        self._riac_chips = max(1, cfg.riac_chips)
        self._riac_max = cfg.effective_riac_max()
        self.frrfm_period = cfg.rfm_th * timing.trc
        self.next_frrfm = self.frrfm_period

    # -- counter helpers ---------------------------------------------------

    def _bank_map(self, bank_key):
        m = self.counters.get(bank_key)
        if m is None:
            m = self.counters[bank_key] = {}
        return m

    def _riac_draw(self) -> int:
        best = 0
        for _ in range(self._riac_chips):
            v = self._riac_rng.randrange(self._riac_max)
            if v > best:
                best = v
        return best

    def counter(self, bank_key, row) -> int:
        m = self.counters.get(bank_key)
        if m is None:
            return 0
        v = m.get(row)
        if v is None:
            if self.kind is DefenseKind.PRAC_RIAC:
                # Boot-time random init, drawn lazily on first touch.
                v = m[row] = self._riac_draw()
            else:
                v = m[row] = 0
        return v

    # -- hooks -------------------------------------------------------------

    def on_activate(self, bank_key, row, now) -> Optional[tuple]:
        """Returns ("rfm", scope_key) when PRFM demands an RFM for this bank."""
        if self.kind is DefenseKind.PRFM:
            c = self.bank_counters.get(bank_key, 0) + 1
            if c >= self.cfg.rfm_th:
                self.bank_counters[bank_key] = 0
                return ("rfm", bank_key)
            self.bank_counters[bank_key] = c
        return None

    def on_precharge(self, bank_key, row, now) -> Optional[AboRequest]:
        """Row `row` in `bank_key` is being closed; bump its counter and, for
        the PRAC family, raise the alert when it crosses abo_th."""
        if self.kind is DefenseKind.NONE:
            return None
        m = self._bank_map(bank_key)
        prev = m.get(row)
        if prev is None:
            prev = self._riac_draw() if self.kind is DefenseKind.PRAC_RIAC else 0
        m[row] = prev + 1
        if self.kind not in PRAC_FAMILY:
            return None
        if m[row] < self.cfg.abo_th:
            return None
        scope = bank_key if self.kind is DefenseKind.PRAC_BANK else None
        if self.phase.get(scope, PracPhase.ARMED) is not PracPhase.ARMED:
            return None
        self.phase[scope] = PracPhase.ASSERTED
        assert_time = now + self.timing.tabo_delay
        self.events.append(DefenseEvent(
            DefenseEventKind.ABO_ASSERT, assert_time,
            assert_time + self.timing.tabo_act + self.recovery_block(),
            "bank" if scope is not None else "channel",
            bank_key=scope, trigger_row=row))
        return AboRequest(assert_time, scope)

    def recovery_block(self) -> int:
        if self.cfg.preventive_latency is not None:
            return self.cfg.preventive_latency
        return self.timing.rfms_per_backoff * self.timing.trfm

    # -- servicing ---------------------------------------------------------

    def begin_service(self, scope_key):
        self.phase[scope_key] = PracPhase.SERVICING

    def service_rfm(self, scope_banks, t_start, t_end) -> None:
        """One RFM slot: each bank in scope refreshes the victims of its
        highest-counted row and resets that counter (to zero, or to a fresh
        random value under RIAC). All-zero banks burn the slot refreshing
        nothing."""
        for bank_key in scope_banks:
            m = self.counters.get(bank_key)
            row = None
            if m:
                row, top = None, 0
                for r, c in m.items():
                    if c > top:
                        row, top = r, c
            if row is None:
                self.events.append(DefenseEvent(
                    DefenseEventKind.VICTIM_REFRESH, t_start, t_end, "bank",
                    bank_key=bank_key, trigger_row=None))
                continue
            if self.kind is DefenseKind.PRAC_RIAC:
                m[row] = self._riac_draw()
            else:
                m[row] = 0
            self.events.append(DefenseEvent(
                DefenseEventKind.VICTIM_REFRESH, t_start, t_end, "bank",
                bank_key=bank_key, trigger_row=row))

    def end_service(self, scope_key, now) -> Optional[AboRequest]:
        """Recovery finished: enter cooldown; when cooldown expires the caller
        invokes `end_cooldown`."""
        self.phase[scope_key] = PracPhase.COOLDOWN
        self.cooldown_until[scope_key] = now + self.timing.tcooldown
        return None

    def end_cooldown(self, scope_key, now) -> Optional[AboRequest]:
        """Re-arm. If some counter is already at/over abo_th, re-assert at once."""
        self.phase[scope_key] = PracPhase.ARMED
        if self.kind not in PRAC_FAMILY:
            return None
        banks = ([scope_key] if scope_key is not None else list(self.counters.keys()))
        for bank_key in banks:
            m = self.counters.get(bank_key)
            if not m:
                continue
            for row, c in m.items():
                if c >= self.cfg.abo_th:
                    self.phase[scope_key] = PracPhase.ASSERTED
                    assert_time = now
                    self.events.append(DefenseEvent(
                        DefenseEventKind.ABO_ASSERT, assert_time,
                        assert_time + self.timing.tabo_act + self.recovery_block(),
                        "bank" if scope_key is not None else "channel",
                        bank_key=scope_key, trigger_row=row))
                    return AboRequest(assert_time, scope_key)
        return None

    def note_rfm_issued(self, scope_banks, t_start, t_end, scope_label):
        key = scope_banks[0] if len(scope_banks) == 1 else None
        self.events.append(DefenseEvent(
            DefenseEventKind.RFM_ISSUED, t_start, t_end, scope_label, bank_key=key))

    # -- FR-RFM ------------------------------------------------------------

    def frrfm_advance(self):
        self.next_frrfm += self.frrfm_period


class ScheduleMiss(Exception):
    """FR-RFM could not issue at its exact period boundary."""


@dataclass
class OracleViolation:
    bank_key: tuple
    row: int
    count: int
    time: int


def oracle_check(act_log, victim_refreshes, nrh: int) -> Optional[OracleViolation]:
    """Brute-force ground truth: recompute every row's activation count since
    the last refresh of its victims and flag the first row that gets hammered
    more than `nrh` times.

    `act_log` is a sequence of (time, bank_key, row) ACT records and
    `victim_refreshes` a sequence of (time, bank_key, row) reset records;
    both must be time-sorted. This path deliberately shares no state with the
    defense machines it audits.
    """
    counts: dict = {}
    vr = list(victim_refreshes)
    vi = 0
    for t, bank_key, row in act_log:
        while vi < len(vr) and vr[vi][0] <= t:
            _, vb, vrow = vr[vi]
            counts[(vb, vrow)] = 0
            vi += 1
        key = (bank_key, row)
        c = counts.get(key, 0) + 1
        counts[key] = c
        if c > nrh:
            return OracleViolation(bank_key, row, c, t)
    return None
