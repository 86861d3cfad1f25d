"""Closed-loop controller: histogram -> steering command -> wheel speeds,
and the drive loop that runs a vehicle against a spike-protocol session.

Class order on the wire and in histograms is (Left, Forward, Right).
Argmax ties prefer Forward, then Left: dithering between Forward and a
turn otherwise oscillates the chassis.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from enum import IntEnum

from .protocol import SessionError, SessionTimeout
from .vision import frame_to_spikes, to_xyf_array

INNER_WHEEL_FACTOR = 0.2  # inner-wheel speed ratio while arcing a turn
TIMEOUT_HOLD_CYCLES = 3


class DriveCommand(IntEnum):
    LEFT = 0
    FORWARD = 1
    RIGHT = 2
    STOP = 3  # operator/safety only; never produced by the classifier path

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def from_label(cls, label: str) -> "DriveCommand":
        return cls[label.upper()]


@dataclass(frozen=True)
class WheelSpeeds:
    """Left/right wheel speed ratios in [-1, 1]."""

    left: float
    right: float

    def __post_init__(self):
        if not (abs(self.left) <= 1.0 and abs(self.right) <= 1.0):
            raise ValueError(f"wheel ratios out of [-1,1]: {self}")


_TIE_PREFERENCE = (DriveCommand.FORWARD, DriveCommand.LEFT, DriveCommand.RIGHT)


def decide(counts) -> DriveCommand:
    """Steering command for one class histogram: the most active output
    population wins; exact ties fall to Forward, then Left."""
    counts = tuple(counts)
    if len(counts) != 3:
        raise ValueError(f"expected 3 class counts, got {len(counts)}")
    best = max(counts)
    for cmd in _TIE_PREFERENCE:
        if counts[cmd.value] == best:
            return cmd
    raise AssertionError("unreachable")


def to_wheels(cmd: DriveCommand, v: float) -> WheelSpeeds:
    """Differential wheel ratios for a command at base speed ratio v."""
    if not (0.0 < v <= 1.0):
        raise ValueError(f"base speed must be in (0,1], got {v}")
    inner = INNER_WHEEL_FACTOR * v
    if cmd == DriveCommand.FORWARD:
        return WheelSpeeds(v, v)
    if cmd == DriveCommand.LEFT:
        return WheelSpeeds(inner, v)
    if cmd == DriveCommand.RIGHT:
        return WheelSpeeds(v, inner)
    return WheelSpeeds(0.0, 0.0)


@dataclass
class DriveLogEntry:
    tick: int
    counts: tuple[int, ...] | None
    command: DriveCommand
    pose: tuple[float, float, float] | None = None
    intervention: bool = False

    def to_json(self) -> str:
        rec = {
            "tick": self.tick,
            "counts": list(self.counts) if self.counts is not None else None,
            "command": self.command.label,
        }
        if self.pose is not None:
            rec["pose"] = list(self.pose)
        if self.intervention:
            rec["intervention"] = True
        return json.dumps(rec)


@dataclass
class DriveLog:
    entries: list[DriveLogEntry] = field(default_factory=list)
    interventions: int = 0
    distance_m: float = 0.0
    completed: bool = False
    aborted: str | None = None

    def save(self, path) -> None:
        with open(path, "w") as fh:
            for e in self.entries:
                fh.write(e.to_json() + "\n")

    def summary(self) -> dict:
        return {
            "cycles": len(self.entries),
            "interventions": self.interventions,
            "distance_m": round(self.distance_m, 2),
            "completed": self.completed,
            "aborted": self.aborted,
        }


@dataclass
class DriveConfig:
    base_speed: float = 0.8
    dt: float = 1.0 / 30.0
    max_cycles: int = 100_000
    real_time: bool = False  # pace cycles to dt wall-clock


def drive_loop(session, vehicle, spec, config: DriveConfig | None = None) -> DriveLog:
    """Repeated frame -> preprocess -> send -> histogram -> decide -> actuate.

    `vehicle` supplies frames and takes wheel commands (simulated or real):
        capture() -> (rgb array 144x176x3, timestamp_ms)
        actuate(wheels, dt) -> meters advanced
        maybe_reset() -> bool     (auto-reset after leaving the trail)
        done() -> bool            (end of trail reached)

    On a protocol timeout the last command is held for up to
    TIMEOUT_HOLD_CYCLES cycles, then the vehicle is stopped; the loop keeps
    polling the link. Session loss ends the loop with a partial log.
    """
    cfg = config or DriveConfig()
    log = DriveLog()
    last_cmd = DriveCommand.STOP
    consecutive_timeouts = 0
    for tick in range(cfg.max_cycles):
        if vehicle.done():
            log.completed = True
            break
        start = time.perf_counter()
        pixels, _ts = vehicle.capture()
        spikes = to_xyf_array(frame_to_spikes(pixels, spec))
        counts = None
        try:
            hist = session.send_frame(spikes, tick)
        except SessionTimeout:
            consecutive_timeouts += 1
            cmd = last_cmd if consecutive_timeouts <= TIMEOUT_HOLD_CYCLES else DriveCommand.STOP
        except SessionError as exc:
            log.aborted = str(exc)
            break
        else:
            consecutive_timeouts = 0
            counts = hist.counts
            cmd = decide(counts)
        log.distance_m += vehicle.actuate(to_wheels(cmd, cfg.base_speed), cfg.dt)
        reset = vehicle.maybe_reset()
        if reset:
            log.interventions += 1
        log.entries.append(
            DriveLogEntry(tick, counts, cmd, getattr(vehicle, "pose_tuple", lambda: None)(),
                          intervention=reset)
        )
        last_cmd = cmd
        if cfg.real_time:
            leftover = cfg.dt - (time.perf_counter() - start)
            if leftover > 0:
                time.sleep(leftover)
    return log
