"""Memory-controller model and the single-threaded simulation loop.

Requests are served per bank with FR-FCFS (row hits first, oldest first,
column cap forcing starved conflicts) and condensed into their PRE/ACT/RD
command sequence at dispatch time. Refresh, PRAC back-off recovery, PRFM
and FR-RFM preventive actions are modeled as blocking windows over a bank
set; the grace window of a back-off (180 ns) always exceeds the longest
condensed request (48 ns), so a registered window can never overlap a
command that was already scheduled.

Banks operate independently (no command/data-bus contention is modeled);
REF keeps row buffers intact and simply makes the rank unavailable for
tRFC per issued command.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Optional

from .core import (AccessClass, BankState, Command, CommandKind, DramAddress,
                   Geometry, TimingParams, apply_command, classify_access)
from .defenses import (DefenseConfig, DefenseEngine, DefenseEventKind,
                       DefenseKind, PRAC_FAMILY, ScheduleMiss)


class RefreshOverrun(Exception):
    """A periodic refresh slipped past its one-tREFI postponement budget."""


class Incomplete(Exception):
    """Latency requested for a request that has not completed."""


@dataclass
class ControllerParams:
    queue_depth: int = 64          # per direction
    column_cap: int = 16
    ctrl_overhead: int = 10        # fixed on-chip queuing/decode cost per request
    postpone_refresh: bool = True
    # a rank counts as busy for refresh postponement until it has been idle
    # this long (closed-loop gaps between iterations are not "idle time")
    refresh_idle_gap: int = 100


@dataclass(slots=True)
class MemRequest:
    rid: int
    pid: int
    addr: DramAddress
    is_write: bool = False
    arrival: int = 0
    service_start: int = -1
    completion: int = -1


def request_latency(req: MemRequest) -> int:
    if req.completion < 0:
        raise Incomplete(f"request {req.rid} not completed")
    return req.completion - req.arrival


@dataclass
class RefreshState:
    next_deadline: int
    postponed: int = 0
    refs_issued_in_window: int = 0


class AboPhase:
    IDLE = "idle"
    GRACE = "grace"
    RECOVERY = "recovery"
    COOLDOWN = "cooldown"


@dataclass
class AboServiceState:
    phase: str = AboPhase.IDLE
    phase_end: int = 0
    pending_rfms: int = 0


class _Bank:
    __slots__ = ("key", "state", "busy_until", "queue", "streak_row", "streak",
                 "plan", "plan_version")

    def __init__(self, key):
        self.key = key
        self.state = BankState()
        self.busy_until = 0
        self.queue: list[MemRequest] = []
        self.streak_row = -1
        self.streak = 0
        self.plan = None           # cached (start, done, req)
        self.plan_version = -1     # blocker epoch the plan was computed under


# timer priorities: defense/refresh bookkeeping fires before process wakes
_PRIO_TIMER = 0
_PRIO_PROC = 1
_PRIO_DISPATCH = 2

_INF = 1 << 62


class Simulation:
    """One deterministic run: geometry + timings + one defense + processes."""

    def __init__(self, geometry: Geometry = None, timing: TimingParams = None,
                 defense: DefenseConfig = None, ctrl: ControllerParams = None,
                 seed: int = 0, log_commands: bool = False, log_acts: bool = False):
        self.geo = geometry or Geometry()
        self.t = timing or TimingParams()
        self.defense_cfg = defense or DefenseConfig()
        self.ctrl = ctrl or ControllerParams()
        self.seed = seed
        self.defense = DefenseEngine(self.defense_cfg, self.t, seed)
        self.now = 0
        self.processes: list = []
        self.banks: dict = {}
        self.rank_banks: dict = {}
        for ch in range(self.geo.channels):
            for rk in range(self.geo.ranks_per_channel):
                keys = []
                for bg in range(self.geo.bank_groups):
                    for b in range(self.geo.banks_per_group):
                        key = (ch, rk, bg, b)
                        self.banks[key] = _Bank(key)
                        keys.append(key)
                self.rank_banks[(ch, rk)] = keys
        self.channel_banks = {ch: [k for k in self.banks if k[0] == ch]
                              for ch in range(self.geo.channels)}
        self.refresh = {rank: RefreshState(next_deadline=self.t.trefi)
                        for rank in self.rank_banks}
        self.abo = AboServiceState()
        self._timers: list = []
        self._timer_seq = 0
        self._rid = 0
        self._read_q = 0
        self._write_q = 0
        self._pending_banks: dict = {}
        self._block_epoch = 0
        # blocking windows: lists of [start, end], purged as time passes
        self._channel_blocks: dict = {ch: [] for ch in range(self.geo.channels)}
        self._rank_blocks: dict = {rank: [] for rank in self.rank_banks}
        self._bank_blocks: dict = {}
        self.log_commands = log_commands
        self.cmd_log: list = []
        self.log_acts = log_acts
        self.act_log: list = []
        for rank in self.rank_banks:
            self._add_timer(self.t.trefi, "ref_deadline", rank)
        if self.defense_cfg.kind is DefenseKind.FR_RFM:
            self._add_timer(self.defense.next_frrfm - self.t.trp, "frrfm_pre", None)
            self._add_timer(self.defense.next_frrfm, "frrfm_issue", None)

    # -- wiring ------------------------------------------------------------

    def add_process(self, proc) -> None:
        proc.pid = len(self.processes)
        self.processes.append(proc)

    def _add_timer(self, time, kind, payload):
        self._timer_seq += 1
        heapq.heappush(self._timers, (time, self._timer_seq, kind, payload))

    def _log_cmd(self, time, kind, key, row, cause):
        if self.log_commands:
            self.cmd_log.append((time, kind, key[0], key[1], key[2], key[3], row, cause))

    # -- request intake ------------------------------------------------------

    def enqueue(self, proc, addr: DramAddress, now: int, is_write: bool = False) -> Optional[MemRequest]:
        """Admit a request, or return None when the per-direction queue is full
        (back-pressure: the issuing process must retry)."""
        if is_write:
            if self._write_q >= self.ctrl.queue_depth:
                return None
            self._write_q += 1
        else:
            if self._read_q >= self.ctrl.queue_depth:
                return None
            self._read_q += 1
        self._rid += 1
        req = MemRequest(self._rid, proc.pid if proc else -1, addr, is_write, arrival=now)
        bank = self.banks[addr.bank_key]
        bank.queue.append(req)
        bank.plan = None
        self._pending_banks[addr.bank_key] = bank
        return req

    # -- blocking windows ----------------------------------------------------

    def _blocks_for(self, key) -> list:
        out = list(self._channel_blocks[key[0]])
        out += self._rank_blocks[(key[0], key[1])]
        bb = self._bank_blocks.get(key)
        if bb:
            out += bb
        if self.defense_cfg.kind is DefenseKind.FR_RFM:
            nxt = self.defense.next_frrfm
            out.append((nxt - self.t.trp, nxt + self.t.trfm))
        return out

    def _purge_blocks(self):
        now = self.now
        for ch, blocks in self._channel_blocks.items():
            self._channel_blocks[ch] = [b for b in blocks if b[1] > now]
        for rank, blocks in self._rank_blocks.items():
            self._rank_blocks[rank] = [b for b in blocks if b[1] > now]
        dead = []
        for key, blocks in self._bank_blocks.items():
            live = [b for b in blocks if b[1] > now]
            if live:
                self._bank_blocks[key] = live
            else:
                dead.append(key)
        for key in dead:
            del self._bank_blocks[key]

    @staticmethod
    def _fit(start: int, duration: int, intervals: list) -> int:
        """Earliest s >= start such that [s, s+duration) avoids every interval."""
        s = start
        moved = True
        while moved:
            moved = False
            for lo, hi in intervals:
                if s < hi and s + duration > lo:
                    s = hi
                    moved = True
        return s

    def _block_banks(self, keys, start, end):
        self._block_epoch += 1
        for key in keys:
            self._bank_blocks.setdefault(key, []).append((start, end))

    # -- FR-FCFS dispatch ----------------------------------------------------

    def _choose(self, bank: _Bank) -> MemRequest:
        open_row = bank.state.open_row
        queue = bank.queue
        if open_row is not None:
            hit = None
            conflict = None
            for req in queue:
                if req.addr.row == open_row:
                    if hit is None:
                        hit = req
                else:
                    if conflict is None:
                        conflict = req
            if hit is not None:
                if conflict is not None and bank.streak >= self.ctrl.column_cap:
                    return conflict
                return hit
            if conflict is not None:
                return conflict
        return queue[0]

    def _dispatch_plan(self, bank: _Bank):
        """(start_of_first_command, completion, request) for the bank head.

        Cached until the bank's queue, its timing state, or any blocking
        window changes; the plan itself does not depend on the current time.
        """
        if bank.plan is not None and bank.plan_version == self._block_epoch:
            return bank.plan
        req = self._choose(bank)
        state = bank.state
        t = self.t
        intervals = self._blocks_for(bank.key)
        s0 = bank.busy_until
        if req.arrival > s0:
            s0 = req.arrival
        row = req.addr.row
        open_row = state.open_row
        while True:
            if open_row == row:
                kind = 0  # hit
                first = max(s0, state.next_rdwr_time)
                done = first + t.tcl
            elif open_row is None:
                kind = 1  # closed
                first = max(s0, state.next_act_time)
                done = first + t.trcd + t.tcl
            else:
                kind = 2  # conflict
                first = max(s0, state.next_pre_time)
                act = max(first + t.trp, state.next_act_time)
                done = act + t.trcd + t.tcl
            shifted = self._fit(first, done - first, intervals)
            if shifted == first:
                bank.plan = (first, done, req, kind)
                bank.plan_version = self._block_epoch
                return bank.plan
            s0 = shifted

    def _dispatch(self, bank: _Bank):
        first, done, req, kind = self._dispatch_plan(bank)
        bank.plan = None
        state = bank.state
        t = self.t
        key = bank.key
        row = req.addr.row
        # hot path: inlined ACT/PRE/RD state transitions (apply_command is the
        # reference implementation; the replay validator re-checks every log)
        if kind == 2:
            closed_row = state.open_row
            if first < state.next_pre_time:
                raise TimingViolation(f"PRE at {first} before {state.next_pre_time}")
            state.open_row = None
            if self.log_commands:
                self._log_cmd(first, "PRE", key, closed_row, "demand")
            abo = self.defense.on_precharge(key, closed_row, first)
            if abo is not None:
                self._add_timer(abo.assert_time, "abo_assert", abo.scope_key)
            act_t = max(first + t.trp, state.next_act_time)
            self._issue_act(req, act_t, state, key)
            rd_t = act_t + t.trcd
        elif kind == 1:
            self._issue_act(req, first, state, key)
            rd_t = first + t.trcd
        else:
            rd_t = max(first, state.next_rdwr_time)
            if state.open_row != row:
                raise IllegalCommand(f"RD row {row} != open {state.open_row}")
        if self.log_commands:
            self._log_cmd(rd_t, "WR" if req.is_write else "RD", key, row, "demand")
        if state.open_row == bank.streak_row:
            bank.streak += 1
        else:
            bank.streak_row = state.open_row
            bank.streak = 1
        bank.busy_until = done
        bank.queue.remove(req)
        if not bank.queue:
            self._pending_banks.pop(key, None)
        if req.is_write:
            self._write_q -= 1
        else:
            self._read_q -= 1
        req.service_start = first
        req.completion = done + self.ctrl.ctrl_overhead
        pid = req.pid
        if pid >= 0:
            proc = self.processes[pid]
            proc._served = req
            proc.wake_time = req.completion

    def _issue_act(self, req, act_t, state, key):
        if state.open_row is not None:
            raise IllegalCommand(f"ACT while row {state.open_row} open")
        if act_t < state.next_act_time:
            raise TimingViolation(f"ACT at {act_t} before {state.next_act_time}")
        t = self.t
        row = req.addr.row
        state.open_row = row
        state.next_act_time = act_t + t.trc
        state.next_pre_time = act_t + t.tras
        state.next_rdwr_time = act_t + t.trcd
        state.act_count_in_window += 1
        if self.log_commands:
            self._log_cmd(act_t, "ACT", key, row, "demand")
        if self.log_acts:
            self.act_log.append((act_t, key, row))
        demand = self.defense.on_activate(key, row, act_t)
        if demand is not None:
            self._schedule_prfm_rfm(demand[1], act_t)

    # -- preventive actions ----------------------------------------------------

    def _scope_banks(self, scope_key):
        if scope_key is None:
            return self.channel_banks[0]
        return [scope_key]

    def _schedule_prfm_rfm(self, bank_key, act_t):
        """RFM for `bank_key`'s bank index across every bank group."""
        ch, rk, bg, b = bank_key
        scope = [(ch, rk, g, b) for g in range(self.geo.bank_groups)]
        t = self.t
        start = act_t + t.trcd + t.tcl  # let the triggering access finish
        for key in scope:
            start = max(start, self.banks[key].busy_until)
        intervals = []
        for key in scope:
            intervals += self._blocks_for(key)
        start = self._fit(start, t.trfm, intervals)
        end = start + t.trfm
        self._block_banks(scope, start, end)
        self._log_cmd(start, "RFM", bank_key, 0, "prfm")
        self.defense.note_rfm_issued(scope, start, end, "bank-set")
        self.defense.service_rfm(scope, start, end)

    def _handle_abo_assert(self, scope_key, assert_time):
        t = self.t
        grace_end = assert_time + t.tabo_act
        block = self.defense.recovery_block()
        scope = self._scope_banks(scope_key)
        if scope_key is None:
            self._channel_blocks[0].append((grace_end, grace_end + block))
            self._block_epoch += 1
        else:
            self._block_banks(scope, grace_end, grace_end + block)
        self.abo.phase = AboPhase.GRACE
        self.abo.phase_end = grace_end
        self.abo.pending_rfms = t.rfms_per_backoff
        self._add_timer(grace_end, "abo_recover", scope_key)

    def _handle_abo_recover(self, scope_key, grace_end):
        t = self.t
        self.defense.begin_service(scope_key)
        self.abo.phase = AboPhase.RECOVERY
        scope = self._scope_banks(scope_key)
        synthetic = self.defense_cfg.preventive_latency is not None
        slots = t.rfms_per_backoff
        for i in range(slots):
            if synthetic:
                s = e = grace_end
            else:
                s = grace_end + i * t.trfm
                e = s + t.trfm
                self._log_cmd(s, "RFM", scope[0], 0, "abo-recovery")
            self.defense.service_rfm(scope, s, e)
            self.abo.pending_rfms -= 1
        end = grace_end + self.defense.recovery_block()
        self.abo.phase_end = end
        self._add_timer(end, "abo_end", scope_key)

    def _handle_abo_end(self, scope_key, now):
        self.defense.end_service(scope_key, now)
        self.abo.phase = AboPhase.COOLDOWN
        self.abo.phase_end = self.defense.cooldown_until[scope_key]
        self._add_timer(self.abo.phase_end, "abo_cooldown_end", scope_key)

    def _handle_cooldown_end(self, scope_key, now):
        self.abo.phase = AboPhase.IDLE
        abo = self.defense.end_cooldown(scope_key, now)
        if abo is not None:
            self._handle_abo_assert(abo.scope_key, abo.assert_time)

    def _rank_busy(self, rank) -> int:
        busy = 0
        for key in self.rank_banks[rank]:
            b = self.banks[key].busy_until
            if b > busy:
                busy = b
        return busy

    def _rank_has_demand(self, rank) -> bool:
        horizon = self.now - self.ctrl.refresh_idle_gap
        for key in self.rank_banks[rank]:
            bank = self.banks[key]
            if bank.queue or bank.busy_until > horizon:
                return True
        return False

    def _handle_ref_deadline(self, rank, deadline):
        st = self.refresh[rank]
        if self.ctrl.postpone_refresh and st.postponed == 0 and self._rank_has_demand(rank):
            st.postponed = 1
            st.next_deadline = deadline + self.t.trefi
            self._add_timer(st.next_deadline, "ref_deadline", rank)
            return
        n = 1 + st.postponed
        start = max(deadline, self._rank_busy(rank))
        intervals = list(self._channel_blocks[rank[0]]) + self._rank_blocks[rank]
        if self.defense_cfg.kind is DefenseKind.FR_RFM:
            nxt = self.defense.next_frrfm
            intervals.append((nxt - self.t.trp, nxt + self.t.trfm))
        start = self._fit(start, n * self.t.trfc, intervals)
        if start > deadline + self.t.trefi:
            raise RefreshOverrun(f"REF for rank {rank} slipped to {start}, deadline {deadline}")
        for i in range(n):
            s = start + i * self.t.trfc
            self._log_cmd(s, "REF", (rank[0], rank[1], 0, 0), 0, "refresh")
        self._rank_blocks[rank].append((start, start + n * self.t.trfc))
        self._block_epoch += 1
        st.refs_issued_in_window += n
        st.postponed = 0
        st.next_deadline = deadline + self.t.trefi
        self._add_timer(st.next_deadline, "ref_deadline", rank)

    def _handle_frrfm_pre(self, now):
        for key in self.channel_banks[0]:
            bank = self.banks[key]
            row = bank.state.open_row
            if row is None:
                continue
            if bank.busy_until > now:
                raise ScheduleMiss(f"bank {key} busy at FR-RFM precharge point {now}")
            apply_command(Command(CommandKind.PRE, DramAddress(*key, row=row)),
                          now, bank.state, self.t)
            self._log_cmd(now, "PRE", key, row, "frrfm")
            self.defense.on_precharge(key, row, now)
            bank.streak_row = -1
            bank.streak = 0
        self._block_epoch += 1

    def _handle_frrfm_issue(self, now):
        for key in self.channel_banks[0]:
            if self.banks[key].busy_until > now:
                raise ScheduleMiss(f"bank {key} busy at FR-RFM issue time {now}")
        end = now + self.t.trfm
        self._channel_blocks[0].append((now, end))
        self._block_epoch += 1
        self._log_cmd(now, "RFM", (0, 0, 0, 0), 0, "frrfm")
        scope = list(self.defense.counters.keys())
        self.defense.note_rfm_issued(scope or [(0, 0, 0, 0)], now, end, "all-banks")
        self.defense.service_rfm(scope, now, end)
        self.defense.frrfm_advance()
        self._add_timer(self.defense.next_frrfm - self.t.trp, "frrfm_pre", None)
        self._add_timer(self.defense.next_frrfm, "frrfm_issue", None)

    _TIMER_HANDLERS = {
        "abo_assert": "_handle_abo_assert",
        "abo_recover": "_handle_abo_recover",
        "abo_end": "_handle_abo_end",
        "abo_cooldown_end": "_handle_cooldown_end",
    }

    # -- main loop ---------------------------------------------------------------

    def run(self, duration: int) -> None:
        procs = self.processes
        for proc in procs:
            proc.start(self, duration)
        timers = self._timers
        dispatch_plan = self._dispatch_plan
        purge_at = 0
        while True:
            t_next = _INF
            what = 0
            if timers:
                t_next = timers[0][0]
                what = 1
            for proc in procs:
                w = proc.wake_time
                if w is not None and w < t_next:
                    t_next = w
                    what = 2
            best_bank = None
            epoch = self._block_epoch
            for key, bank in self._pending_banks.items():
                plan = bank.plan
                if plan is None or bank.plan_version != epoch:
                    plan = dispatch_plan(bank)
                start = plan[0]
                if start < t_next or (start == t_next and what == 3 and key < best_bank.key):
                    t_next = start
                    what = 3
                    best_bank = bank
            if t_next >= duration or what == 0:
                self.now = duration
                return
            self.now = t_next
            if t_next > purge_at:
                self._purge_blocks()
                purge_at = t_next + 100_000
            if what == 1:
                _, _, kind, payload = heapq.heappop(timers)
                if kind == "ref_deadline":
                    self._handle_ref_deadline(payload, t_next)
                elif kind == "abo_assert":
                    self._handle_abo_assert(payload, t_next)
                elif kind == "abo_recover":
                    self._handle_abo_recover(payload, t_next)
                elif kind == "abo_end":
                    self._handle_abo_end(payload, t_next)
                elif kind == "abo_cooldown_end":
                    self._handle_cooldown_end(payload, t_next)
                elif kind == "frrfm_pre":
                    self._handle_frrfm_pre(t_next)
                elif kind == "frrfm_issue":
                    self._handle_frrfm_issue(t_next)
            elif what == 2:
                for proc in procs:
                    if proc.wake_time == t_next:
                        proc.wake_time = None
                        served = proc._served
                        if served is not None:
                            proc._served = None
                            proc.on_complete(self, t_next, served)
                        else:
                            proc.on_wake(self, t_next)
            else:
                self._dispatch(best_bank)
