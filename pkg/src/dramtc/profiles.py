"""Built-in synthetic site profiles.

Each profile is a fixed rhythm of hammer/idle phases over a 10 ms load,
aligned to 16 execution windows of 625 us. Phase intensity levels:
0 = idle, 1 = light (800 ns between activations), 2 = medium (300 ns),
3 = heavy (back-to-back). Distinct level vectors give distinct back-off
rhythms; per-run seeds only jitter the sleeps.
"""

from __future__ import annotations

from .core import DramAddress
from .workloads import ConfigError, ProfilePhase, SiteProfile

WINDOW_NS = 625_000
N_WINDOWS = 16

_LEVEL_SLEEP = {0: None, 1: 800, 2: 300, 3: 0}

# 16 intensity levels per profile, pairwise distinct in several windows.
_PROFILE_LEVELS = {
    "site00": (3, 3, 0, 0, 3, 3, 0, 0, 3, 3, 0, 0, 3, 3, 0, 0),
    "site01": (3, 0, 3, 0, 3, 0, 3, 0, 3, 0, 3, 0, 3, 0, 3, 0),
    "site02": (3, 3, 3, 3, 0, 0, 0, 0, 2, 2, 2, 2, 0, 0, 0, 0),
    "site03": (2, 2, 2, 2, 2, 2, 2, 2, 0, 0, 0, 0, 0, 0, 0, 0),
    "site04": (3, 2, 1, 0, 3, 2, 1, 0, 3, 2, 1, 0, 3, 2, 1, 0),
    "site05": (1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1),
    "site06": (0, 0, 0, 0, 3, 3, 3, 3, 3, 3, 3, 3, 0, 0, 0, 0),
    "site07": (2, 0, 0, 2, 0, 0, 2, 0, 0, 2, 0, 0, 2, 0, 0, 2),
    "site08": (3, 1, 3, 1, 0, 2, 0, 2, 3, 1, 3, 1, 0, 2, 0, 2),
    "site09": (0, 1, 2, 3, 3, 2, 1, 0, 0, 1, 2, 3, 3, 2, 1, 0),
}


class UnknownProfile(ConfigError):
    pass


def profile_names() -> list:
    return sorted(_PROFILE_LEVELS)


def build_profile(name: str, seed: int, bank=(0, 0, 0, 0),
                  loop_overhead: int = 10) -> SiteProfile:
    levels = _PROFILE_LEVELS.get(name)
    if levels is None:
        raise UnknownProfile(f"profile {name!r} not registered")
    ch, rk, bg, b = bank
    rows = (DramAddress(ch, rk, bg, b, row=600), DramAddress(ch, rk, bg, b, row=700))
    phases = [ProfilePhase(WINDOW_NS, _LEVEL_SLEEP[lv], rows if lv else ())
              for lv in levels]
    return SiteProfile(phases, seed=seed, loop_overhead=loop_overhead)
