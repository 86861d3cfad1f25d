import itertools

import numpy as np
import pytest

from neurotrail.pilot import (
    DriveCommand,
    DriveConfig,
    DriveLog,
    WheelSpeeds,
    decide,
    drive_loop,
    to_wheels,
)
from neurotrail.protocol import ClassHistogram, SessionError, SessionTimeout
from neurotrail.trinary_net import default_architecture, randomize_weights


class TestDecide:
    def test_argmax(self):
        assert decide((5, 9, 2)) == DriveCommand.FORWARD
        assert decide((9, 5, 2)) == DriveCommand.LEFT
        assert decide((1, 5, 12)) == DriveCommand.RIGHT

    def test_tie_prefers_forward_then_left(self):
        assert decide((7, 7, 1)) == DriveCommand.FORWARD
        assert decide((7, 1, 7)) == DriveCommand.RIGHT if False else decide((7, 1, 7)) == DriveCommand.LEFT
        assert decide((1, 7, 7)) == DriveCommand.FORWARD
        assert decide((7, 7, 7)) == DriveCommand.FORWARD
        assert decide((7, 1, 7)) == DriveCommand.LEFT

    def test_scale_invariance(self, rng):
        for _ in range(100):
            h = tuple(int(v) for v in rng.integers(0, 30, size=3))
            for k in (2, 3, 10):
                assert decide(tuple(k * v for v in h)) == decide(h)

    def test_permutation_covariance_on_strict_argmax(self, rng):
        for _ in range(100):
            h = tuple(int(v) for v in rng.integers(0, 50, size=3))
            if sorted(h)[1] == sorted(h)[2]:
                continue  # tie rule takes over
            for perm in itertools.permutations(range(3)):
                permuted = tuple(h[perm[i]] for i in range(3))
                assert permuted[decide(permuted).value] == max(h)

    def test_wrong_arity(self):
        with pytest.raises(ValueError):
            decide((1, 2))
        with pytest.raises(ValueError):
            decide((1, 2, 3, 4))

    def test_never_stop(self, rng):
        for _ in range(200):
            h = tuple(int(v) for v in rng.integers(0, 30, size=3))
            assert decide(h) != DriveCommand.STOP


class TestWheels:
    def test_forward(self):
        assert to_wheels(DriveCommand.FORWARD, 0.5) == WheelSpeeds(0.5, 0.5)

    def test_stop(self):
        assert to_wheels(DriveCommand.STOP, 0.9) == WheelSpeeds(0.0, 0.0)

    def test_left_right_mirror(self):
        for v in (0.2, 0.5, 1.0):
            l = to_wheels(DriveCommand.LEFT, v)
            r = to_wheels(DriveCommand.RIGHT, v)
            assert (l.left, l.right) == (r.right, r.left)

    def test_speed_range_checked(self):
        with pytest.raises(ValueError):
            to_wheels(DriveCommand.FORWARD, 0.0)
        with pytest.raises(ValueError):
            to_wheels(DriveCommand.FORWARD, 1.1)

    def test_ratios_always_in_unit_range(self, rng):
        for _ in range(100):
            v = float(rng.uniform(0.01, 1.0))
            cmd = DriveCommand(int(rng.integers(0, 4)))
            w = to_wheels(cmd, v)
            assert abs(w.left) <= 1.0 and abs(w.right) <= 1.0

    def test_wheelspeeds_validated(self):
        with pytest.raises(ValueError):
            WheelSpeeds(1.2, 0.0)


class FakeVehicle:
    def __init__(self, cycles=1000):
        self.frame = np.full((144, 176, 3), 128, dtype=np.uint8)
        self.commands = []
        self.cycles = cycles
        self.t = 0

    def capture(self):
        self.t += 33
        return self.frame, self.t

    def actuate(self, wheels, dt):
        self.commands.append(wheels)
        return 0.04

    def maybe_reset(self):
        return False

    def done(self):
        return len(self.commands) >= self.cycles


class FakeSession:
    """Histogram always favors Forward; scripted ticks raise instead."""

    def __init__(self, timeouts=(), fail_at=None):
        self.timeouts = set(timeouts)
        self.fail_at = fail_at
        self.calls = 0

    def send_frame(self, spikes, tick):
        self.calls += 1
        if self.fail_at is not None and tick >= self.fail_at:
            raise SessionError("link lost")
        if tick in self.timeouts:
            raise SessionTimeout("no reply")
        return ClassHistogram(tick, (1, 5, 2))


@pytest.fixture(scope="module")
def spec():
    return randomize_weights(default_architecture(), np.random.default_rng(5))


class TestDriveLoop:
    def test_one_entry_per_cycle_monotone_ticks(self, spec):
        vehicle = FakeVehicle(cycles=100)
        log = drive_loop(FakeSession(), vehicle, spec, DriveConfig(max_cycles=100))
        assert len(log.entries) == 100
        assert [e.tick for e in log.entries] == list(range(100))
        assert all(e.command == DriveCommand.FORWARD for e in log.entries)

    def test_exactly_one_command_per_histogram(self, spec):
        vehicle = FakeVehicle(cycles=50)
        session = FakeSession()
        log = drive_loop(session, vehicle, spec, DriveConfig(max_cycles=50))
        assert session.calls == len(vehicle.commands) == len(log.entries) == 50

    def test_timeout_holds_then_stops(self, spec):
        # timeouts from tick 10 onward: hold last command 3 cycles, then stop
        vehicle = FakeVehicle(cycles=20)
        session = FakeSession(timeouts=set(range(10, 20)))
        log = drive_loop(session, vehicle, spec, DriveConfig(max_cycles=20))
        cmds = [e.command for e in log.entries]
        assert cmds[9] == DriveCommand.FORWARD
        assert cmds[10:13] == [DriveCommand.FORWARD] * 3  # held
        assert all(c == DriveCommand.STOP for c in cmds[13:])

    def test_recovery_after_brief_timeout(self, spec):
        vehicle = FakeVehicle(cycles=10)
        session = FakeSession(timeouts={3, 4})
        log = drive_loop(session, vehicle, spec, DriveConfig(max_cycles=10))
        cmds = [e.command for e in log.entries]
        assert cmds[3] == cmds[4] == DriveCommand.FORWARD  # held, not stopped
        assert cmds[5] == DriveCommand.FORWARD
        assert log.entries[5].counts is not None

    def test_session_loss_partial_log(self, spec):
        vehicle = FakeVehicle(cycles=100)
        log = drive_loop(FakeSession(fail_at=7), vehicle, spec,
                         DriveConfig(max_cycles=100))
        assert len(log.entries) == 7
        assert log.aborted is not None
        assert not log.completed

    def test_log_jsonl_roundtrip(self, spec, tmp_path):
        import json

        vehicle = FakeVehicle(cycles=5)
        log = drive_loop(FakeSession(), vehicle, spec, DriveConfig(max_cycles=5))
        log.save(tmp_path / "log.jsonl")
        lines = (tmp_path / "log.jsonl").read_text().splitlines()
        assert len(lines) == 5
        rec = json.loads(lines[0])
        assert rec["command"] == "forward"
        assert rec["counts"] == [1, 5, 2]
