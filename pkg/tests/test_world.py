import json
import math
from dataclasses import replace

import numpy as np
import pytest

from neurotrail.pilot import DriveCommand, WheelSpeeds, to_wheels
from neurotrail.world import (
    CollectConfig,
    DatasetError,
    EndOfTrailError,
    OracleConfig,
    RobotPose,
    SimVehicle,
    TrailMap,
    collect_oracle,
    load_dataset,
    load_frame_pixels,
    oracle_pilot,
    record,
    render,
    split_dataset,
    step,
    wrap_angle,
)


class TestWrapAngle:
    def test_range(self):
        assert wrap_angle(math.pi) == pytest.approx(math.pi)
        assert wrap_angle(-math.pi) == pytest.approx(math.pi)
        assert wrap_angle(3 * math.pi / 2) == pytest.approx(-math.pi / 2)
        for a in np.linspace(-20, 20, 401):
            w = wrap_angle(float(a))
            assert -math.pi < w <= math.pi


class TestKinematics:
    def test_equal_wheels_straight(self):
        pose = RobotPose(1.0, 2.0, 0.7)
        out = step(pose, WheelSpeeds(0.6, 0.6), 0.5)
        d = 0.6 * pose.v_max * 0.5
        assert out.heading == pose.heading
        assert out.x == pytest.approx(pose.x + d * math.cos(0.7))
        assert out.y == pytest.approx(pose.y + d * math.sin(0.7))

    def test_opposite_wheels_pure_rotation(self):
        pose = RobotPose(1.0, 2.0, 0.0)
        out = step(pose, WheelSpeeds(-0.4, 0.4), 0.3)
        assert out.x == pytest.approx(pose.x, abs=1e-12)
        assert out.y == pytest.approx(pose.y, abs=1e-12)
        assert out.heading != pose.heading

    def test_arc_matches_fine_euler(self):
        pose = RobotPose(0.0, 0.0, 0.3)
        wheels = WheelSpeeds(0.2, 1.0)
        dt = 0.2
        exact = step(pose, wheels, dt)
        # turn radius of the closed form
        r = pose.track_width * (wheels.right + wheels.left) / (
            2 * (wheels.right - wheels.left)
        )
        v = 0.5 * (wheels.left + wheels.right) * pose.v_max
        om = (wheels.right - wheels.left) * pose.v_max / pose.track_width
        assert v / om == pytest.approx(r)
        # fine Euler integration
        n = 200_000
        x, y, h = pose.x, pose.y, pose.heading
        for _ in range(n):
            x += v * math.cos(h) * dt / n
            y += v * math.sin(h) * dt / n
            h += om * dt / n
        assert exact.x == pytest.approx(x, abs=1e-6)
        assert exact.y == pytest.approx(y, abs=1e-6)
        assert exact.heading == pytest.approx(h, abs=1e-9)

    def test_bad_dt(self):
        with pytest.raises(ValueError):
            step(RobotPose(0, 0, 0), WheelSpeeds(0.1, 0.1), 0.0)

    def test_heading_normalized(self):
        pose = RobotPose(0, 0, 3.0)
        out = step(pose, WheelSpeeds(-1.0, 1.0), 1.0)
        assert -math.pi < out.heading <= math.pi


class TestTrailMap:
    def test_generation_deterministic(self):
        a = TrailMap.generate(seed=9, length=120)
        b = TrailMap.generate(seed=9, length=120)
        assert np.array_equal(a.points, b.points)
        c = TrailMap.generate(seed=10, length=120)
        assert not np.array_equal(a.points, c.points)

    def test_save_load_roundtrip(self, tmp_path):
        m = TrailMap.generate(seed=4, length=80)
        m.save(tmp_path / "m.json")
        back = TrailMap.load(tmp_path / "m.json")
        assert np.allclose(back.points, m.points, atol=1e-8)
        assert back.width == m.width and back.seed == m.seed

    def test_locate_sign_convention(self):
        m = TrailMap.straight(50.0)
        # trail runs along +x; negative y is to the right
        s, e, heading, _ = m.locate(10.0, -0.5)
        assert s == pytest.approx(10.0)
        assert e == pytest.approx(0.5)  # right of trail: positive
        assert heading == pytest.approx(0.0)
        _, e2, _, _ = m.locate(10.0, 0.5)
        assert e2 == pytest.approx(-0.5)

    def test_pose_at_lateral(self):
        m = TrailMap.straight(50.0)
        p = m.pose_at(5.0, lateral=0.4)
        assert p.x == pytest.approx(5.0)
        assert p.y == pytest.approx(-0.4)  # positive lateral is right

    def test_self_separation(self):
        for seed in (1, 7, 99):
            m = TrailMap.generate(seed=seed, length=400)
            pts = m.points
            for i in range(40, len(pts), 7):
                old = pts[: i - 30]
                assert np.hypot(*(old - pts[i]).T).min() > 4.0

    def test_min_length(self):
        with pytest.raises(ValueError):
            TrailMap(np.zeros((1, 2)), 2.0)


class TestRender:
    def test_shape_and_determinism(self):
        m = TrailMap.generate(seed=3, length=60)
        pose = m.pose_at(5.0)
        a = render(m, pose)
        b = render(m, pose)
        assert a.shape == (144, 176, 3) and a.dtype == np.uint8
        assert np.array_equal(a, b)

    def test_bottom_row_mirror_symmetric_noise_free(self):
        m = TrailMap.straight(80.0)
        img = render(m, m.pose_at(5.0), noise=False)
        assert np.array_equal(img[-1], img[-1][::-1])
        below_horizon = img[60:]
        assert np.array_equal(below_horizon, below_horizon[:, ::-1])

    def test_off_trail_no_road_pixels(self):
        m = TrailMap.straight(80.0)
        pose = RobotPose(5.0, 80.0, math.pi / 2)  # far left, facing away
        img = render(m, pose, noise=False)
        road = (img == np.array(m.road_color, dtype=np.uint8)).all(axis=2)
        assert road.sum() == 0

    def test_road_redder_than_green(self):
        m = TrailMap.straight(80.0)
        img = render(m, m.pose_at(5.0), noise=False)
        road = (img == np.array(m.road_color, dtype=np.uint8)).all(axis=2)
        assert road.sum() > 500
        assert img[road][:, 0].mean() > img[road][:, 1].mean()

    def test_sky_band_above_horizon(self):
        m = TrailMap.straight(80.0)
        img = render(m, m.pose_at(5.0), noise=False)
        assert (img[0] == np.array(m.sky_color, dtype=np.uint8)).all()

    def test_noise_is_world_anchored(self):
        m = TrailMap.generate(seed=3, length=60)
        a = render(m, m.pose_at(5.0))
        b = render(m, m.pose_at(5.0))
        assert np.array_equal(a, b)
        c = render(m, m.pose_at(5.5))
        assert not np.array_equal(a, c)


class TestOracle:
    def test_centered_aligned_forward(self):
        m = TrailMap.straight(50.0)
        assert oracle_pilot(m, m.pose_at(10.0)) == DriveCommand.FORWARD

    def test_displaced_right_steers_left(self):
        m = TrailMap.straight(50.0)
        pose = replace(m.pose_at(10.0), y=-0.5)  # right of centerline
        assert oracle_pilot(m, pose) == DriveCommand.LEFT

    def test_displaced_left_steers_right(self):
        m = TrailMap.straight(50.0)
        pose = replace(m.pose_at(10.0), y=0.5)
        assert oracle_pilot(m, pose) == DriveCommand.RIGHT

    def test_end_of_trail_signalled(self):
        m = TrailMap.straight(50.0)
        with pytest.raises(EndOfTrailError):
            oracle_pilot(m, m.pose_at(49.9))

    def test_closed_loop_stays_on_trail(self):
        m = TrailMap.generate(seed=21, length=200)
        pose = m.pose_at(1.0)
        max_e = 0.0
        for i in range(60_000):
            try:
                cmd = oracle_pilot(m, pose)
            except EndOfTrailError:
                break
            pose = step(pose, to_wheels(cmd, 0.8), 1 / 30)
            _, e, _, _ = m.locate(pose.x, pose.y)
            max_e = max(max_e, abs(e))
        else:
            pytest.fail("oracle never reached the end of the trail")
        assert max_e < m.width / 2


class TestRecord:
    def test_80_20_split_indices(self):
        frames = [(i * 33, f"frame{i}") for i in range(100)]
        commands = [(i * 33, DriveCommand.FORWARD) for i in range(100)]
        ds = record(frames, commands)
        assert len(ds) == 100
        train, test = split_dataset(ds)
        assert len(train) == 80 and len(test) == 20
        test_stamps = {s.timestamp_ms for s in test.samples}
        assert test_stamps == {i * 33 for i in range(4, 100, 5)}

    def test_all_stop_session_empty(self):
        frames = [(i * 33, i) for i in range(50)]
        commands = [(i * 33, DriveCommand.STOP) for i in range(50)]
        assert len(record(frames, commands)) == 0

    def test_at_or_before_pairing(self):
        frames = [(990, "early"), (1010, "late")]
        ds = record(frames, [(1000, DriveCommand.LEFT)])
        assert ds.samples[0].frame == "early"
        ds = record(frames, [(1010, DriveCommand.LEFT)])
        assert ds.samples[0].frame == "late"

    def test_command_before_first_frame_dropped(self):
        ds = record([(100, "f")], [(50, DriveCommand.LEFT)])
        assert len(ds) == 0

    def test_unordered_timestamps_rejected(self):
        with pytest.raises(DatasetError):
            record([(5, "a"), (3, "b")], [])
        with pytest.raises(DatasetError):
            record([(1, "a")], [(9, DriveCommand.LEFT), (2, DriveCommand.LEFT)])


@pytest.fixture(scope="module")
def small_collect(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds")
    trail = TrailMap.generate(seed=33, length=80)
    ds = collect_oracle(trail, out, seed=1,
                        cfg=CollectConfig(n_frames=240, noise=True))
    return out, ds


class TestCollect:
    def test_layout_and_loadback(self, small_collect):
        out, ds = small_collect
        assert (out / "labels.jsonl").exists()
        assert len(list((out / "frames").glob("*.png"))) >= len(ds)
        back = load_dataset(out)
        assert len(back) == len(ds)
        assert [s.command for s in back.samples] == [s.command for s in ds.samples]
        pixels = load_frame_pixels(back.samples[0])
        assert pixels.shape == (144, 176, 3)

    def test_no_stop_samples(self, small_collect):
        _, ds = small_collect
        assert all(s.command != DriveCommand.STOP for s in ds.samples)

    def test_deterministic(self, tmp_path):
        trail = TrailMap.generate(seed=33, length=80)
        cfg = CollectConfig(n_frames=60)
        a = tmp_path / "a"
        b = tmp_path / "b"
        collect_oracle(trail, a, seed=1, cfg=cfg)
        collect_oracle(trail, b, seed=1, cfg=cfg)
        assert (a / "labels.jsonl").read_bytes() == (b / "labels.jsonl").read_bytes()
        for i in (0, 30, 59):
            fa = (a / "frames" / f"{i:06d}.png").read_bytes()
            fb = (b / "frames" / f"{i:06d}.png").read_bytes()
            assert fa == fb

    def test_class_balance_on_default_map(self):
        # full default-scale command stream, render-free for speed
        from neurotrail.world import oracle_run

        trail = TrailMap.generate(seed=11)
        counts = {c: 0 for c in DriveCommand}
        for _, _, cmd in oracle_run(trail, seed=2, cfg=CollectConfig(n_frames=5400)):
            counts[cmd] += 1
        total = sum(counts.values())
        assert total >= 5000
        for cmd in (DriveCommand.LEFT, DriveCommand.FORWARD, DriveCommand.RIGHT):
            assert counts[cmd] / total >= 0.10, counts


class TestSimVehicle:
    def test_capture_and_actuate(self):
        trail = TrailMap.generate(seed=5, length=60)
        v = SimVehicle(trail)
        img, t0 = v.capture()
        assert img.shape == (144, 176, 3)
        moved = v.actuate(WheelSpeeds(0.8, 0.8), 1 / 30)
        assert moved == pytest.approx(0.8 * v.pose.v_max / 30, rel=1e-6)
        assert v.clock_ms == 33

    def test_reset_when_off_trail(self):
        trail = TrailMap.straight(60.0)
        v = SimVehicle(trail)
        v.pose = replace(v.pose, y=-(trail.width / 2 + 0.5))
        assert v.maybe_reset()
        _, e, _, _ = trail.locate(v.pose.x, v.pose.y)
        assert abs(e) < 0.01

    def test_done_at_trail_end(self):
        trail = TrailMap.straight(10.0)
        v = SimVehicle(trail, pose=trail.pose_at(8.2))
        assert not v.done()
        v.actuate(WheelSpeeds(1.0, 1.0), 1.0)
        assert v.done()

    def test_render_oracle_consistency(self):
        # when the oracle says Forward on a straight noise-free trail, the
        # road centroid column sits within 2 px of image center
        trail = TrailMap.straight(80.0)
        v = SimVehicle(trail, noise=False)
        assert oracle_pilot(trail, v.pose) == DriveCommand.FORWARD
        img, _ = v.capture()
        road = (img == np.array(trail.road_color, dtype=np.uint8)).all(axis=2)
        ys, xs = np.nonzero(road)
        assert abs(xs.mean() - 87.5) <= 2.0
