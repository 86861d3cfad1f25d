"""Deterministic synthetic trail world: a red-hued dirt road through green
borders, differential-drive kinematics, a ground-plane perspective camera,
an oracle driver with ground-truth geometry, and dataset recording.

Everything is a pure function of (map seed, pose, inputs): renders, poses,
and recorded datasets are bit-identical across runs.
"""

from __future__ import annotations

import bisect
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .pilot import DriveCommand, WheelSpeeds
from .vision import FRAME_H, FRAME_W, read_png, write_png

MAP_VERSION = 1


class EndOfTrailError(Exception):
    """Pose has passed the end of the centerline."""


class DatasetError(ValueError):
    pass


def wrap_angle(a: float) -> float:
    """Normalize to (-pi, pi]."""
    return math.pi - (math.pi - a) % (2.0 * math.pi)


# ---------------------------------------------------------------------------
# Map


@dataclass(eq=False)
class TrailMap:
    """Centerline polyline (~1 m spacing) plus road geometry and colors."""

    points: np.ndarray  # (n, 2) meters
    width: float
    road_color: tuple[int, int, int] = (150, 74, 56)
    off_color: tuple[int, int, int] = (64, 126, 58)
    sky_color: tuple[int, int, int] = (138, 170, 214)
    noise_amp: int = 18
    seed: int = 0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[0] < 2:
            raise ValueError("centerline needs at least 2 points")
        deltas = np.diff(self.points, axis=0)
        self._seg_len = np.hypot(deltas[:, 0], deltas[:, 1])
        if (self._seg_len <= 0).any():
            raise ValueError("degenerate centerline segment")
        self._cum = np.concatenate([[0.0], np.cumsum(self._seg_len)])
        self._dirs = deltas / self._seg_len[:, None]
        self._headings = np.arctan2(self._dirs[:, 1], self._dirs[:, 0])

    @property
    def length(self) -> float:
        return float(self._cum[-1])

    @classmethod
    def generate(
        cls,
        seed: int,
        length: float = 300.0,
        width: float = 2.0,
        max_curvature: float = 0.50,
        curvature_noise: float = 0.09,
        min_separation: float = 12.0,
        **kwargs,
    ) -> "TrailMap":
        """Random smooth trail: curvature follows a mean-reverting seeded
        walk, so straights, gentle bends, and tighter turns all occur.

        The walk is self-avoiding (no point comes within `min_separation`
        of the trail more than 30 m back), so projection onto the
        centerline is unambiguous and other stretches of trail stay out
        of the camera's view."""
        rng = np.random.default_rng(seed)
        ds = 1.0
        n = int(math.ceil(length / ds)) + 1
        pts = np.zeros((n, 2))
        heading = 0.0
        kappa = 0.0
        lookback = 30
        for i in range(1, n):
            for _ in range(24):
                cand_kappa = 0.92 * kappa + float(rng.normal(0.0, curvature_noise))
                cand_kappa = max(-max_curvature, min(max_curvature, cand_kappa))
                cand_heading = heading + cand_kappa * ds
                cand = pts[i - 1] + ds * np.array(
                    [math.cos(cand_heading), math.sin(cand_heading)]
                )
                old = pts[: max(0, i - lookback)]
                if old.size == 0 or np.hypot(
                    *(old - cand).T
                ).min() >= min_separation:
                    break
            else:
                # trapped: bend hard away from the closest old point
                old = pts[: max(1, i - lookback)]
                j = int(np.argmin(np.hypot(*(old - pts[i - 1]).T)))
                away = pts[i - 1] - old[j]
                side = math.cos(heading) * away[1] - math.sin(heading) * away[0]
                cand_kappa = max_curvature if side > 0 else -max_curvature
                cand_heading = heading + cand_kappa * ds
                cand = pts[i - 1] + ds * np.array(
                    [math.cos(cand_heading), math.sin(cand_heading)]
                )
            kappa, heading, pts[i] = cand_kappa, cand_heading, cand
        return cls(pts, width, seed=seed, **kwargs)

    @classmethod
    def straight(cls, length: float = 100.0, width: float = 2.0, **kwargs) -> "TrailMap":
        n = int(length) + 1
        pts = np.column_stack([np.arange(n, dtype=np.float64), np.zeros(n)])
        return cls(pts, width, **kwargs)

    def locate(self, x: float, y: float) -> tuple[float, float, float, int]:
        """Project (x, y) onto the centerline.

        Returns (arc position s, signed lateral offset e, trail heading,
        segment index). e > 0 when the point is to the RIGHT of the trail
        direction."""
        p = np.array([x, y])
        a = self.points[:-1]
        d = self._dirs
        rel = p - a
        t = np.clip((rel * d).sum(axis=1), 0.0, self._seg_len)
        foot = a + d * t[:, None]
        dist2 = ((p - foot) ** 2).sum(axis=1)
        i = int(np.argmin(dist2))
        off = p - foot[i]
        e = float(d[i, 1] * off[0] - d[i, 0] * off[1])
        s = float(self._cum[i] + t[i])
        return s, e, float(self._headings[i]), i

    def pose_at(self, s: float, lateral: float = 0.0) -> "RobotPose":
        """Pose on (or laterally offset from) the centerline at arc s."""
        s = max(0.0, min(s, self.length - 1e-9))
        i = min(int(np.searchsorted(self._cum, s, side="right")) - 1,
                len(self._seg_len) - 1)
        t = s - self._cum[i]
        base = self.points[i] + self._dirs[i] * t
        # lateral > 0 is right of the trail direction
        right = np.array([self._dirs[i, 1], -self._dirs[i, 0]])
        pt = base + right * lateral
        return RobotPose(float(pt[0]), float(pt[1]), float(self._headings[i]))

    def save(self, path) -> None:
        doc = {
            "version": MAP_VERSION,
            "width": self.width,
            "road_color": list(self.road_color),
            "off_color": list(self.off_color),
            "sky_color": list(self.sky_color),
            "noise_amp": self.noise_amp,
            "seed": self.seed,
            "control_points": [[round(float(x), 9), round(float(y), 9)]
                               for x, y in self.points],
        }
        with open(path, "w") as fh:
            json.dump(doc, fh)

    @classmethod
    def load(cls, path) -> "TrailMap":
        with open(path) as fh:
            doc = json.load(fh)
        if doc.get("version") != MAP_VERSION:
            raise ValueError(f"unsupported map version {doc.get('version')}")
        return cls(
            np.array(doc["control_points"], dtype=np.float64),
            width=float(doc["width"]),
            road_color=tuple(doc["road_color"]),
            off_color=tuple(doc["off_color"]),
            sky_color=tuple(doc.get("sky_color", (138, 170, 214))),
            noise_amp=int(doc["noise_amp"]),
            seed=int(doc["seed"]),
        )


# ---------------------------------------------------------------------------
# Robot kinematics


@dataclass(frozen=True)
class RobotPose:
    x: float
    y: float
    heading: float  # radians, normalized to (-pi, pi]
    track_width: float = 0.50
    v_max: float = 1.5  # m/s at wheel ratio 1.0

    def __post_init__(self):
        object.__setattr__(self, "heading", wrap_angle(self.heading))


def step(pose: RobotPose, wheels: WheelSpeeds, dt: float) -> RobotPose:
    """Exact constant-input differential-drive update (arc integration)."""
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    v = 0.5 * (wheels.left + wheels.right) * pose.v_max
    omega = (wheels.right - wheels.left) * pose.v_max / pose.track_width
    if abs(omega) < 1e-12:
        return replace(
            pose,
            x=pose.x + v * math.cos(pose.heading) * dt,
            y=pose.y + v * math.sin(pose.heading) * dt,
        )
    r = v / omega
    h2 = pose.heading + omega * dt
    return replace(
        pose,
        x=pose.x + r * (math.sin(h2) - math.sin(pose.heading)),
        y=pose.y - r * (math.cos(h2) - math.cos(pose.heading)),
        heading=h2,
    )


# ---------------------------------------------------------------------------
# Camera and rendering


@dataclass(frozen=True)
class CameraModel:
    height: float = 0.30  # meters above ground
    pitch: float = math.radians(-10.0)
    hfov: float = math.radians(60.0)
    width: int = FRAME_W
    img_height: int = FRAME_H


_RAY_CACHE: dict = {}


def _ray_grid(cam: CameraModel):
    """Per-pixel ground intersection in the robot frame (x forward, y left),
    pose-independent; cached per camera model."""
    key = cam
    if key in _RAY_CACHE:
        return _RAY_CACHE[key]
    w, h = cam.width, cam.img_height
    fx = (w / 2.0) / math.tan(cam.hfov / 2.0)
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    u = (np.arange(w) - cx) / fx
    v = (np.arange(h) - cy) / fx
    xc, yc = np.meshgrid(u, v)
    sd, cd = math.sin(cam.pitch), math.cos(cam.pitch)
    dir_x = yc * sd + cd
    dir_y = -xc
    dir_z = -yc * cd + sd
    ground = dir_z < -1e-9
    t = np.where(ground, -cam.height / np.where(ground, dir_z, -1.0), 0.0)
    lx = t * dir_x
    ly = t * dir_y
    _RAY_CACHE[key] = (ground, lx, ly)
    return _RAY_CACHE[key]


def _cell_noise(gx: np.ndarray, gy: np.ndarray, seed: int, amp: int) -> np.ndarray:
    """World-anchored per-pixel noise: integer hash of the 0.25 m ground
    cell, three channels, in [-amp, amp]."""
    ix = np.floor(gx * 4.0).astype(np.int64).astype(np.uint64)
    iy = np.floor(gy * 4.0).astype(np.int64).astype(np.uint64)
    out = np.empty((*gx.shape, 3), dtype=np.int16)
    for c in range(3):
        h = ix * np.uint64(0x9E3779B97F4A7C15) ^ iy * np.uint64(0xC2B2AE3D27D4EB4F)
        h ^= np.uint64((seed * 1469598103934665603 + c * 1099511628211) & 0xFFFFFFFFFFFFFFFF)
        h ^= h >> np.uint64(33)
        h *= np.uint64(0xFF51AFD7ED558CCD)
        h ^= h >> np.uint64(33)
        out[..., c] = (h % np.uint64(2 * amp + 1)).astype(np.int16) - amp
    return out


def render(trail: TrailMap, pose: RobotPose, cam: CameraModel = CameraModel(),
           noise: bool = True) -> np.ndarray:
    """Ground-plane render of the trail from the robot's camera.

    Deterministic for (map, pose): road/off-road membership of each pixel's
    ground point, plus world-anchored cell noise; sky above the horizon.
    Returns (144, 176, 3) uint8."""
    ground, lx, ly = _ray_grid(cam)
    cosh, sinh_ = math.cos(pose.heading), math.sin(pose.heading)
    gx = (pose.x + lx * cosh - ly * sinh_)[ground]
    gy = (pose.y + lx * sinh_ + ly * cosh)[ground]
    # road membership of each ground point, restricted to a window of
    # centerline segments around the robot (the camera sees ~35 m)
    _, _, _, seg_i = trail.locate(pose.x, pose.y)
    lo = max(0, seg_i - 15)
    hi = min(len(trail._seg_len), seg_i + 60)
    px = gx.astype(np.float32)
    py = gy.astype(np.float32)
    on_road = np.zeros(px.shape, dtype=bool)
    r2 = np.float32((trail.width / 2.0) ** 2)
    for i in range(lo, hi):
        ax, ay = trail.points[i]
        dx, dy = trail._dirs[i]
        relx = px - np.float32(ax)
        rely = py - np.float32(ay)
        t = relx * np.float32(dx) + rely * np.float32(dy)
        np.clip(t, 0.0, np.float32(trail._seg_len[i]), out=t)
        fx = relx - t * np.float32(dx)
        fy = rely - t * np.float32(dy)
        on_road |= fx * fx + fy * fy <= r2

    img = np.empty((cam.img_height, cam.width, 3), dtype=np.int16)
    img[~ground] = np.array(trail.sky_color, dtype=np.int16)
    ground_colors = np.where(
        on_road[:, None],
        np.array(trail.road_color, dtype=np.int16),
        np.array(trail.off_color, dtype=np.int16),
    )
    if noise and trail.noise_amp > 0:
        ground_colors = ground_colors + _cell_noise(gx, gy, trail.seed, trail.noise_amp)
    img[ground] = ground_colors
    return np.clip(img, 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# Oracle pilot


@dataclass(frozen=True)
class OracleConfig:
    heading_gain: float = 1.6  # meters of cross-track error per radian
    deadband: float = 0.12


def oracle_pilot(trail: TrailMap, pose: RobotPose,
                 cfg: OracleConfig = OracleConfig()) -> DriveCommand:
    """Scripted driver with ground-truth geometry: steer back toward the
    centerline using cross-track error e (positive right) and heading
    error. A pure function of (map, pose), so recorded commands are fully
    determined by what the camera sees. Raises EndOfTrailError past the
    end of the centerline."""
    s, e, trail_heading, _ = trail.locate(pose.x, pose.y)
    if s >= trail.length - 1.0:
        raise EndOfTrailError(f"arc position {s:.1f} of {trail.length:.1f} m")
    psi = wrap_angle(trail_heading - pose.heading)
    signal = e + cfg.heading_gain * psi
    if signal > cfg.deadband:
        return DriveCommand.LEFT
    if signal < -cfg.deadband:
        return DriveCommand.RIGHT
    return DriveCommand.FORWARD


# ---------------------------------------------------------------------------
# Dataset recording


@dataclass(frozen=True)
class DriveSample:
    timestamp_ms: int
    frame: object  # ndarray, path, or any opaque reference
    command: DriveCommand


@dataclass
class DriveDataset:
    samples: list[DriveSample] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)

    def class_counts(self) -> dict[str, int]:
        out = {c.label: 0 for c in (DriveCommand.LEFT, DriveCommand.FORWARD,
                                    DriveCommand.RIGHT)}
        for s in self.samples:
            out[s.command.label] += 1
        return out


def record(frames, commands) -> DriveDataset:
    """Pair command events with frames: each command attaches to the most
    recent frame at-or-before its timestamp; Stop and pre-first-frame
    commands are dropped.

    frames: iterable of (timestamp_ms, frame_ref), nondecreasing timestamps.
    commands: iterable of (timestamp_ms, DriveCommand), nondecreasing."""
    frames = list(frames)
    commands = list(commands)
    for name, stream in (("frame", frames), ("command", commands)):
        ts = [t for t, _ in stream]
        if any(b < a for a, b in zip(ts, ts[1:])):
            raise DatasetError(f"{name} timestamps are not nondecreasing")
    frame_ts = [t for t, _ in frames]
    samples = []
    for t, cmd in commands:
        if cmd == DriveCommand.STOP:
            continue
        i = bisect.bisect_right(frame_ts, t) - 1
        if i < 0:
            continue
        samples.append(DriveSample(int(t), frames[i][1], DriveCommand(cmd)))
    return DriveDataset(samples)


def split_dataset(ds: DriveDataset) -> tuple[DriveDataset, DriveDataset]:
    """Every fifth sample (indices 4, 9, ...) becomes test data: 20%."""
    train, test = [], []
    for i, s in enumerate(ds.samples):
        (test if i % 5 == 4 else train).append(s)
    return DriveDataset(train), DriveDataset(test)


class DatasetWriter:
    """Incremental recorder for a dataset directory:
    frames/NNNNNN.png + labels.jsonl."""

    def __init__(self, root):
        self.root = Path(root)
        (self.root / "frames").mkdir(parents=True, exist_ok=True)
        self._frames: list[tuple[int, int]] = []  # (timestamp_ms, index)
        self._commands: list[tuple[int, DriveCommand]] = []
        self._n = 0

    def add_frame(self, pixels: np.ndarray, timestamp_ms: int) -> int:
        idx = self._n
        self._n += 1
        write_png(self.root / "frames" / f"{idx:06d}.png", pixels)
        self._frames.append((timestamp_ms, idx))
        return idx

    def add_command(self, cmd: DriveCommand, timestamp_ms: int) -> None:
        self._commands.append((timestamp_ms, cmd))

    def finalize(self) -> DriveDataset:
        ds = record(self._frames, self._commands)  # frame refs are indices
        with open(self.root / "labels.jsonl", "w") as fh:
            for s in ds.samples:
                fh.write(json.dumps({
                    "index": s.frame,
                    "timestamp_ms": s.timestamp_ms,
                    "command": s.command.label,
                }) + "\n")
        return DriveDataset([
            DriveSample(s.timestamp_ms,
                        self.root / "frames" / f"{s.frame:06d}.png",
                        s.command)
            for s in ds.samples
        ])


def load_dataset(root) -> DriveDataset:
    """Read labels.jsonl; frame refs become PNG paths (decoded lazily)."""
    root = Path(root)
    labels = root / "labels.jsonl"
    if not labels.exists():
        raise DatasetError(f"no labels.jsonl under {root}")
    samples = []
    with open(labels) as fh:
        for line in fh:
            rec = json.loads(line)
            samples.append(DriveSample(
                int(rec["timestamp_ms"]),
                root / "frames" / f"{int(rec['index']):06d}.png",
                DriveCommand.from_label(rec["command"]),
            ))
    return DriveDataset(samples)


def load_frame_pixels(sample: DriveSample) -> np.ndarray:
    if isinstance(sample.frame, np.ndarray):
        return sample.frame
    return read_png(sample.frame)


# ---------------------------------------------------------------------------
# Simulated vehicle for the drive loop, and the oracle collector


class SimVehicle:
    """Adapter giving the drive loop a camera and wheels inside the world.

    Off-trail (|lateral| beyond half width plus margin) triggers an
    auto-reset onto the centerline at the current arc position."""

    def __init__(self, trail: TrailMap, pose: RobotPose | None = None,
                 cam: CameraModel = CameraModel(), noise: bool = True,
                 reset_margin: float = 0.25):
        self.trail = trail
        self.pose = pose or trail.pose_at(1.0)
        self.cam = cam
        self.noise = noise
        self.reset_margin = reset_margin
        self.clock_ms = 0
        self._done = False

    def capture(self) -> tuple[np.ndarray, int]:
        return render(self.trail, self.pose, self.cam, self.noise), self.clock_ms

    def actuate(self, wheels: WheelSpeeds, dt: float) -> float:
        before = self.pose
        self.pose = step(self.pose, wheels, dt)
        self.clock_ms += int(round(dt * 1000))
        s, _, _, _ = self.trail.locate(self.pose.x, self.pose.y)
        if s >= self.trail.length - 1.5:
            self._done = True
        return math.hypot(self.pose.x - before.x, self.pose.y - before.y)

    def maybe_reset(self) -> bool:
        s, e, _, _ = self.trail.locate(self.pose.x, self.pose.y)
        if abs(e) > self.trail.width / 2.0 + self.reset_margin:
            self.pose = self.trail.pose_at(s + 0.5)
            return True
        return False

    def done(self) -> bool:
        return self._done

    def pose_tuple(self) -> tuple[float, float, float]:
        return (self.pose.x, self.pose.y, self.pose.heading)


@dataclass
class CollectConfig:
    n_frames: int = 5400
    fps: int = 30
    base_speed: float = 0.8
    noise: bool = True
    # the data-collection driver is deliberately human-like: it re-decides
    # every `commit_frames` (a ~300 ms reaction time) and turns gently
    # (`turn_inner`), so commands persist for whole corrections instead of
    # dithering frame to frame
    commit_frames: int = 10
    turn_inner: float = 0.70
    # recovery nudges: small seeded pose perturbations so the oracle also
    # demonstrates steering back from off-center states
    nudge_every: int = 30
    nudge_lateral: float = 0.45
    nudge_heading: float = 0.30


def _collect_wheels(cmd: DriveCommand, v: float, inner: float) -> WheelSpeeds:
    """Gentler differential than the deployed pilot's, used only while
    collecting data (the stand-in for a human's soft joystick turns)."""
    if cmd == DriveCommand.LEFT:
        return WheelSpeeds(inner * v, v)
    if cmd == DriveCommand.RIGHT:
        return WheelSpeeds(v, inner * v)
    if cmd == DriveCommand.FORWARD:
        return WheelSpeeds(v, v)
    return WheelSpeeds(0.0, 0.0)


def oracle_run(trail: TrailMap, seed: int,
               cfg: CollectConfig = CollectConfig(),
               oracle_cfg: OracleConfig = OracleConfig()):
    """Drive the oracle along the trail at `fps`, yielding
    (timestamp_ms, pose, command) per frame. Periodic seeded nudges
    displace the pose so recovery steering appears in the stream.
    Deterministic for (map, seed, config); stops at the trail end."""
    rng = np.random.default_rng(seed)
    pose = trail.pose_at(1.0)
    dt = 1.0 / cfg.fps
    cmd = DriveCommand.FORWARD
    for i in range(cfg.n_frames):
        t_ms = i * 1000 // cfg.fps
        if cfg.nudge_every and i and i % cfg.nudge_every == 0:
            s, _, trail_heading, _ = trail.locate(pose.x, pose.y)
            lateral = float(rng.uniform(-cfg.nudge_lateral, cfg.nudge_lateral))
            dh = float(rng.uniform(-cfg.nudge_heading, cfg.nudge_heading))
            nudged = trail.pose_at(s, lateral)
            pose = replace(pose, x=nudged.x, y=nudged.y,
                           heading=wrap_angle(trail_heading + dh))
        if i % cfg.commit_frames == 0:
            try:
                cmd = oracle_pilot(trail, pose, oracle_cfg)
            except EndOfTrailError:
                return
        yield t_ms, pose, cmd
        pose = step(pose, _collect_wheels(cmd, cfg.base_speed, cfg.turn_inner), dt)


def collect_oracle(trail: TrailMap, out_dir, seed: int,
                   cfg: CollectConfig = CollectConfig(),
                   oracle_cfg: OracleConfig = OracleConfig()) -> DriveDataset:
    """Headless data collection: render and record every frame of an
    oracle drive with the command active at that instant."""
    writer = DatasetWriter(out_dir)
    for t_ms, pose, cmd in oracle_run(trail, seed, cfg, oracle_cfg):
        writer.add_frame(render(trail, pose, noise=cfg.noise), t_ms)
        writer.add_command(cmd, t_ms)
    return writer.finalize()
