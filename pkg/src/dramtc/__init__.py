"""Deterministic DDR5-like memory-subsystem simulator with pluggable
RowHammer defenses, covert/side-channel workloads and channel metrics."""

from .core import (AccessClass, BankState, Command, CommandKind, DramAddress,
                   Geometry, IllegalCommand, TimingParams, TimingViolation,
                   classify_access, apply_command, validate_command_log)
from .defenses import (DefenseConfig, DefenseEngine, DefenseEvent,
                       DefenseEventKind, DefenseKind, ScheduleMiss,
                       OracleViolation, oracle_check)
from .controller import (ControllerParams, Incomplete, MemRequest,
                         RefreshOverrun, Simulation, request_latency)
from .workloads import (ConfigError, Fingerprinter, LatencyClass, NoiseGen,
                        OutOfRange, Receiver, Sender, SiteProfile,
                        ThresholdBands, fit_bands, noise_intensity)
from .channel import (ChannelConfig, ChannelReport, LengthMismatch, NoBackoff,
                      TransmissionWindow, binary_entropy, channel_report,
                      decode_prac_window, decode_rfm_window, decode_symbols,
                      encode, run_counter_leak)
from .harness import (ExperimentConfig, parse_config, run_experiment,
                      run_sweep, run_oracle_trial)

__version__ = "0.1.0"
