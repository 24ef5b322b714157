"""Blended potentials H(s) = (1-s) * aux + s * target and switch schedules.

The schedule value s(t) is evaluated once per Euler step and held constant
within it, which makes the drift piecewise constant in time.  While s = 0 the
auxiliary potential alone is evaluated and the work counts as free calls;
once s > 0 each blended evaluation needs the target, so it counts as one
forward call per particle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import EmptySchedule, Potential


class HomotopyPotential(Potential):
    """Convex combination of an auxiliary and a target potential.

    ``s`` is mutable on purpose: the runner re-pins it each step from the
    schedule.  Call accounting lives on the wrapped potentials; the blend
    itself never counts.
    """

    def __init__(self, aux: Potential, target: Potential, s: float = 0.0):
        self.aux = aux
        self.target = target
        self.s = s
        super().__init__(self._blend_value, self._blend_grad,
                         name=f"homotopy({aux.name},{target.name})")

    def _blend_value(self, Y):
        s = self.s
        if s == 0.0:
            return self.aux.raw_value(Y)
        if s == 1.0:
            return self.target.raw_value(Y)
        return (1.0 - s) * self.aux.raw_value(Y) + s * self.target.raw_value(Y)

    def _blend_grad(self, Y):
        s = self.s
        if s == 0.0:
            return self.aux.raw_grad(Y)
        if s == 1.0:
            return self.target.raw_grad(Y)
        return (1.0 - s) * self.aux.raw_grad(Y) + s * self.target.raw_grad(Y)

    def _count(self, n: int):
        # s = 0: only the auxiliary is touched, book the work as free calls.
        # s > 0: the target forward model is required, book one forward call
        # per particle on the target; the auxiliary admixture is not charged
        # separately.
        if self.s == 0.0:
            self.aux._count(n)
        else:
            self.target._count(n)

    def reset_counters(self):
        self.aux.reset_counters()
        self.target.reset_counters()

    @property
    def forward_calls(self) -> int:
        return self.aux.forward_calls + self.target.forward_calls

    @forward_calls.setter
    def forward_calls(self, value):
        if value != 0:
            raise AttributeError("set counters on aux/target directly")

    @property
    def free_calls(self) -> int:
        return self.aux.free_calls + self.target.free_calls

    @free_calls.setter
    def free_calls(self, value):
        if value != 0:
            raise AttributeError("set counters on aux/target directly")


_KINDS = ("constant", "linear", "convex", "concave")


@dataclass(frozen=True)
class HomotopySchedule:
    """Monotone map t -> s(t) in [0, 1] with a flat head and tail.

    s(t) = 0 for t <= t_start and s(t) = 1 for t >= t_end; in between the
    ramp is linear, quartic convex ((t-t_start)^4 scaled), or quartic concave
    (1 - (t_end-t)^4 scaled).  "constant" is s == 1 everywhere (no homotopy).
    """

    kind: str
    horizon: float
    t_start: float = 0.0
    t_end: float = 0.0
    order: int = 4

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        if self.kind != "constant" and not self.t_start < self.t_end:
            raise ValueError("need t_start < t_end")

    @classmethod
    def constant(cls, horizon: float) -> "HomotopySchedule":
        return cls("constant", horizon)

    @classmethod
    def linear(cls, horizon: float, t_start: float | None = None,
               t_end: float | None = None) -> "HomotopySchedule":
        if t_start is None:
            t_start = 0.2 * horizon
        if t_end is None:
            t_end = 0.9 * horizon
        return cls("linear", horizon, t_start, t_end)

    @classmethod
    def concave(cls, horizon: float, t_start: float | None = None,
                t_end: float | None = None) -> "HomotopySchedule":
        if t_start is None:
            t_start = 0.1 * horizon
        if t_end is None:
            t_end = 0.9 * horizon
        return cls("concave", horizon, t_start, t_end)

    @classmethod
    def convex(cls, horizon: float, t_start: float, t_end: float) -> "HomotopySchedule":
        return cls("convex", horizon, t_start, t_end)

    def value(self, t: float) -> float:
        if self.kind == "constant":
            return 1.0
        if t <= self.t_start:
            return 0.0
        if t >= self.t_end:
            return 1.0
        width = self.t_end - self.t_start
        if self.kind == "linear":
            return (t - self.t_start) / width
        if self.kind == "convex":
            return ((t - self.t_start) / width) ** self.order
        return 1.0 - ((self.t_end - t) / width) ** self.order


def schedule_value(sched: HomotopySchedule, t: float) -> float:
    if t < 0:
        raise ValueError("time must be nonnegative")
    return sched.value(t)


def enrichment_times_from_switch(sched: HomotopySchedule, K_parts: int,
                                 gamma: float, dt: float) -> list:
    """Enrichment times derived from the switch schedule.

    For each interior level s_i = i/K_parts (i = 1..K_parts-1), returns the
    grid time (multiple of dt up to the horizon) minimizing |s(t) - s_i^gamma|,
    ties broken toward the smaller time.
    """
    if K_parts < 2:
        raise ValueError("K_parts must be at least 2")
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    if sched.kind == "constant":
        raise EmptySchedule("constant schedule has no interior switch levels")
    n_steps = int(round(sched.horizon / dt))
    grid = np.arange(n_steps + 1) * dt
    svals = np.array([sched.value(t) for t in grid])
    times = []
    for i in range(1, K_parts):
        target = (i / K_parts) ** gamma
        # np.argmin returns the first minimizer, which is the smallest time
        j = int(np.argmin(np.abs(svals - target)))
        times.append(float(grid[j]))
    return times
