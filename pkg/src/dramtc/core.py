"""DRAM geometry, per-bank row-buffer state and command-level timing rules.

All times are integer nanoseconds. The bank state machine is deliberately
small: ACT/PRE/RD/WR obey tRC/tRAS/tRP/tRCD, REF and RFM are modeled as
rank- or bank-set-level blocking windows by the controller and only appear
here as log records for the replay validator.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional


class IllegalCommand(Exception):
    """Command does not fit the bank state machine (e.g. RD on a closed bank)."""


class TimingViolation(Exception):
    """Command issued before a timing constraint expired. Signals a scheduler bug."""


@dataclass(frozen=True)
class Geometry:
    channels: int = 1
    ranks_per_channel: int = 2
    bank_groups: int = 8
    banks_per_group: int = 4
    rows_per_bank: int = 131072
    columns_per_row: int = 1024

    def __post_init__(self):
        for name in ("channels", "ranks_per_channel", "bank_groups",
                     "banks_per_group", "rows_per_bank", "columns_per_row"):
            if getattr(self, name) < 1:
                raise ValueError(f"geometry field {name} must be >= 1")

    @property
    def banks_per_rank(self) -> int:
        return self.bank_groups * self.banks_per_group


@dataclass(frozen=True)
class DramAddress:
    channel: int = 0
    rank: int = 0
    bank_group: int = 0
    bank: int = 0
    row: int = 0
    column: int = 0

    def validate(self, geo: Geometry) -> "DramAddress":
        bounds = (
            (self.channel, geo.channels, "channel"),
            (self.rank, geo.ranks_per_channel, "rank"),
            (self.bank_group, geo.bank_groups, "bank_group"),
            (self.bank, geo.banks_per_group, "bank"),
            (self.row, geo.rows_per_bank, "row"),
            (self.column, geo.columns_per_row, "column"),
        )
        for value, bound, name in bounds:
            if not 0 <= value < bound:
                raise ValueError(f"{name}={value} out of range [0, {bound})")
        return self

    @property
    def bank_key(self) -> tuple:
        return (self.channel, self.rank, self.bank_group, self.bank)

    def fmt(self) -> str:
        return f"{self.channel}.{self.rank}.{self.bank_group}.{self.bank}.{self.row}"

    @staticmethod
    def parse(text: str) -> "DramAddress":
        parts = [int(p) for p in text.strip().split(".")]
        if len(parts) != 5:
            raise ValueError(f"address must be ch.rank.group.bank.row, got {text!r}")
        return DramAddress(parts[0], parts[1], parts[2], parts[3], parts[4])


@dataclass(frozen=True)
class TimingParams:
    """DDR5-class defaults. tRP/tRCD/tCL are not dictated by the modeled spec
    sheets; 16/16/16 keeps tRC = tRP + tRCD + tCL so an alternating two-row
    loop is paced by tRC exactly."""

    trc: int = 48
    tras: int = 32
    trp: int = 16
    trcd: int = 16
    tcl: int = 16
    trfc: int = 295
    trefi: int = 3900
    trefw: int = 32_000_000
    trfm: int = 350
    tabo_act: int = 180
    tabo_delay: int = 5
    tcooldown: int = 384
    rfms_per_backoff: int = 4

    def __post_init__(self):
        for name in ("trc", "tras", "trp", "trcd", "tcl", "trfc", "trefi",
                     "trefw", "trfm", "tabo_act", "tabo_delay", "tcooldown"):
            if getattr(self, name) <= 0:
                raise ValueError(f"timing {name} must be > 0")
        if self.rfms_per_backoff < 1:
            raise ValueError("rfms_per_backoff must be >= 1")
        if self.trc < self.tras + self.trp:
            raise ValueError("tRC must be >= tRAS + tRP")
        if self.trefw // self.trefi < 2:
            raise ValueError("refresh window must fit multiple tREFI intervals")

    @property
    def backoff_block(self) -> int:
        """Channel-blocking time of one full ABO recovery."""
        return self.rfms_per_backoff * self.trfm


class CommandKind(Enum):
    ACT = "ACT"
    PRE = "PRE"
    RD = "RD"
    WR = "WR"
    REF = "REF"
    RFM = "RFM"


class RfmScope(Enum):
    SAME_BANK_ALL_GROUPS = "sb"
    SINGLE_BANK = "1b"
    ALL_BANKS = "ab"


@dataclass
class Command:
    kind: CommandKind
    target: DramAddress
    scope: Optional[RfmScope] = None


class AccessClass(Enum):
    HIT = "hit"
    CLOSED = "closed"
    CONFLICT = "conflict"


@dataclass
class BankState:
    open_row: Optional[int] = None
    next_act_time: int = 0
    next_pre_time: int = 0
    next_rdwr_time: int = 0
    act_count_in_window: int = 0


def classify_access(addr: DramAddress, bank: BankState) -> AccessClass:
    """Pure function of (open_row, addr.row)."""
    if bank.open_row is None:
        return AccessClass.CLOSED
    if bank.open_row == addr.row:
        return AccessClass.HIT
    return AccessClass.CONFLICT


def apply_command(cmd: Command, now: int, bank: BankState, t: TimingParams) -> int:
    """Apply one command to a bank at `now`, returning its completion time.

    Raises IllegalCommand when the command does not fit the bank state and
    TimingViolation when `now` precedes a timing constraint; either one means
    the caller's scheduler is broken and the run must abort.
    """
    kind = cmd.kind
    if kind is CommandKind.ACT:
        if bank.open_row is not None:
            raise IllegalCommand(f"ACT while row {bank.open_row} open")
        if now < bank.next_act_time:
            raise TimingViolation(f"ACT at {now} before {bank.next_act_time}")
        bank.open_row = cmd.target.row
        bank.next_act_time = now + t.trc
        bank.next_pre_time = now + t.tras
        bank.next_rdwr_time = now + t.trcd
        bank.act_count_in_window += 1
        return now + t.trcd
    if kind is CommandKind.PRE:
        if now < bank.next_pre_time:
            raise TimingViolation(f"PRE at {now} before {bank.next_pre_time}")
        bank.open_row = None
        bank.next_act_time = max(bank.next_act_time, now + t.trp)
        return now + t.trp
    if kind in (CommandKind.RD, CommandKind.WR):
        if bank.open_row is None:
            raise IllegalCommand(f"{kind.value} on closed bank")
        if bank.open_row != cmd.target.row:
            raise IllegalCommand(f"{kind.value} row {cmd.target.row} != open {bank.open_row}")
        if now < bank.next_rdwr_time:
            raise TimingViolation(f"{kind.value} at {now} before {bank.next_rdwr_time}")
        return now + t.tcl
    if kind is CommandKind.REF:
        return now + t.trfc
    if kind is CommandKind.RFM:
        return now + t.trfm
    raise IllegalCommand(f"unknown command {kind}")


# Command-log records are plain tuples so multi-million-command runs stay cheap:
#   (time, kind_str, channel, rank, bank_group, bank, row, cause)
LOG_CAUSES = ("demand", "refresh", "prfm", "frrfm", "abo-recovery")


def format_log_record(rec: tuple) -> str:
    t, kind, ch, rank, bg, bank, row, cause = rec
    return f"{t},{kind},{ch}.{rank}.{bg}.{bank}.{row},{cause}"


def parse_log_record(line: str) -> tuple:
    t, kind, addr, cause = line.strip().split(",")
    ch, rank, bg, bank, row = (int(p) for p in addr.split("."))
    return (int(t), kind, ch, rank, bg, bank, row, cause)


def validate_command_log(records: Iterable[tuple], t: TimingParams) -> None:
    """Replay a command log against fresh bank state machines.

    Every simulation's emitted log must pass; any IllegalCommand or
    TimingViolation exposes a controller bug. REF blocks the whole rank and
    RFM its scoped bank set, so demand commands inside those windows also
    fail the replay.
    """
    banks: dict = {}
    rank_blocked: dict = {}
    bank_blocked: dict = {}
    for rec in records:
        now, kind, ch, rank, bg, bank, row, cause = rec
        rank_key = (ch, rank)
        if kind == "REF":
            start = rank_blocked.get(rank_key, 0)
            if now < start:
                raise TimingViolation(f"REF at {now} inside blocked window ending {start}")
            rank_blocked[rank_key] = now + t.trfc
            continue
        if kind == "RFM":
            # cause encodes the scope via the bank set the controller chose;
            # a single record per affected bank keeps the log flat.
            bank_blocked[(ch, rank, bg, bank)] = now + t.trfm
            continue
        key = (ch, rank, bg, bank)
        if now < rank_blocked.get(rank_key, 0):
            raise TimingViolation(f"{kind} at {now} during rank REF window")
        if now < bank_blocked.get(key, 0):
            raise TimingViolation(f"{kind} at {now} during bank RFM window")
        state = banks.get(key)
        if state is None:
            state = banks[key] = BankState()
        apply_command(Command(CommandKind[kind], DramAddress(ch, rank, bg, bank, row)), now, state, t)
