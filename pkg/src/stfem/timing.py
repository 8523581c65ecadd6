"""Exclusive section timers for profiling runs."""
from __future__ import annotations

import time
from contextlib import contextmanager

__all__ = ["SectionTimer", "SECTION_NAMES"]

# internal key -> reported label
SECTION_NAMES = {
    "gmg": "GMG w/o Smoother",
    "smoother": "Smoother",
    "operator": "Operator w/o GMG",
    "other": "Other",
}


class SectionTimer:
    """Wall-clock timer with nested, exclusive sections.

    Time spent in a nested section is charged to that section only, so the
    named sections plus ``other`` add up to the total wall time.
    """

    def __init__(self, clock=time.perf_counter):
        self.clock = clock
        self.totals = {k: 0.0 for k in SECTION_NAMES}
        self._stack = []
        self._t_start = None
        self._t_total = 0.0
        self._mark = None

    def start(self):
        self._t_start = self.clock()
        self._mark = self._t_start
        return self

    def stop(self):
        if self._t_start is not None:
            self._t_total += self.clock() - self._t_start
            self._t_start = None

    def _charge(self, now):
        if self._stack:
            self.totals[self._stack[-1]] += now - self._mark
        self._mark = now

    @contextmanager
    def section(self, name):
        if name not in self.totals:
            raise KeyError(f"unknown section {name!r}")
        if self._t_start is None:
            yield
            return
        self._charge(self.clock())
        self._stack.append(name)
        try:
            yield
        finally:
            self._charge(self.clock())
            self._stack.pop()

    @property
    def total(self) -> float:
        extra = self.clock() - self._t_start if self._t_start is not None else 0.0
        return self._t_total + extra

    def breakdown(self) -> dict:
        """Absolute seconds per reported section; ``Other`` closes the sum."""
        total = self.total
        named = {k: v for k, v in self.totals.items() if k != "other"}
        out = {SECTION_NAMES[k]: v for k, v in named.items()}
        out[SECTION_NAMES["other"]] = max(total - sum(named.values()), 0.0)
        return out
