"""Scripted teleoperation sessions.

A Schmitt-trigger driver steers the simulated robot to the goal the way a
human operator would: committed turns, straight drives, a dwell at the goal,
and a backup maneuver when the marker looms too close.  Each session appends
newline-delimited capture records; camera frames ride on their own jittered
timestamps so downstream synchronization has real work to do.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import sim
from .data import CaptureRecord, append_capture, save_image
from .grammar import SafetyCaps
from .policy import DEFAULT_ACTION_TABLE

# The driver is memoryless in pose: every frame's command is the expert
# command for the visible scene, so velocity-derived labels never conflict
# with what the camera saw.  (A hysteretic driver would label the same
# bearing band differently depending on approach history.)

CONTROL_RATE_HZ = 20.0
CAMERA_RATE_HZ = 10.0
ACTION_TS_JITTER_NS = 2_000_000    # +/-2 ms
CAMERA_TS_JITTER_NS = 5_000_000    # +/-5 ms


@dataclass
class SessionStats:
    path: str
    frames: int
    label_counts: dict


class ScriptedDriver:
    """Pose-driven session controller: expert command per frame.

    The flavor decides when the clip ends: "full" dwells at the goal then
    stops recording; "turn" ends once the initial turn completes; "drive"
    ends on reaching the goal; "overshoot" ends once backed out to a
    comfortable distance; "dwell" holds in the stop zone for the dwell
    budget.
    """

    def __init__(self, world: sim.WorldSpec, dwell_ticks: int, flavor: str = "full"):
        self.world = world
        self.dwell_left = dwell_ticks
        self.flavor = flavor

    def step(self, state: sim.RobotState):
        beta, rho = sim.goal_bearing_distance(state, self.world)
        verb = sim.expert_command(state, self.world).verb
        if self.flavor == "turn" and abs(beta) < sim.TURN_THRESHOLD_RAD - 0.02:
            return None
        if self.flavor == "drive" and rho <= self.world.goal_radius:
            return None
        if self.flavor == "overshoot" and verb != "backward":
            return None
        if verb == "stop" or self.flavor == "dwell":
            self.dwell_left -= 1
            if self.dwell_left < 0:
                return None  # session ends
        return verb


# Operator stick speeds: a human drives near the caps, so the robot sweeps
# through decision boundaries in a frame or two instead of loitering there.
# (The trained policy still emits the slower table magnitudes; only the verb
# labels matter for training.)
TELEOP_FORWARD_MS = 0.35
TELEOP_BACKWARD_MS = 0.3
TELEOP_TURN_RADS = 0.65


def _phase_velocities(phase: str, rng: np.random.Generator, caps: SafetyCaps):
    if phase == "forward":
        v, w = TELEOP_FORWARD_MS, 0.0
    elif phase == "backward":
        v, w = -TELEOP_BACKWARD_MS, 0.0
    elif phase == "turn_left":
        v, w = 0.0, TELEOP_TURN_RADS
    elif phase == "turn_right":
        v, w = 0.0, -TELEOP_TURN_RADS
    else:
        v, w = 0.0, 0.0
    # joystick jitter: small enough to stay on the right side of the
    # labeling deadbands
    v += float(rng.normal(0.0, 0.008))
    w += float(rng.normal(0.0, 0.008))
    v = min(max(v, -caps.linear), caps.linear)
    w = min(max(w, -caps.angular), caps.angular)
    return v, w


def record_session(out_dir, session_id: int, world: sim.WorldSpec,
                   start: sim.RobotState, rng: np.random.Generator, *,
                   image_size: int = 32, max_seconds: float = 40.0,
                   dwell_seconds: float = 1.2, base_ts_ns: int = 0,
                   caps: SafetyCaps = SafetyCaps(), flavor: str = "full",
                   image_format: str = "png") -> SessionStats:
    """Drive one session and append it to <out_dir>/session_<id>.jsonl."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    frames_dir = out_dir / f"frames_{session_id:04d}"
    frames_dir.mkdir(exist_ok=True)
    log_path = out_dir / f"session_{session_id:04d}.jsonl"

    control_period_ns = int(1e9 / CONTROL_RATE_HZ)
    camera_every = int(round(CONTROL_RATE_HZ / CAMERA_RATE_HZ))
    driver = ScriptedDriver(world, dwell_ticks=int(dwell_seconds * CONTROL_RATE_HZ),
                            flavor=flavor)
    state = start
    n_ticks = int(max_seconds * CONTROL_RATE_HZ)
    label_counts: dict = {}
    frames = 0
    records = []
    for tick in range(n_ticks):
        phase = driver.step(state)
        if phase is None:
            break
        v, w = _phase_velocities(phase, rng, caps)
        t_nominal = base_ts_ns + tick * control_period_ns
        t_action = t_nominal + int(rng.integers(-ACTION_TS_JITTER_NS,
                                                ACTION_TS_JITTER_NS + 1))
        records.append(CaptureRecord(t_action, "", v, w))
        if tick % camera_every == 0:
            img = sim.render_scene(state, world, image_size)
            ext = "npy" if image_format == "npy" else "png"
            ref = str(frames_dir / f"frame_{tick:06d}.{ext}")
            save_image(ref, img)
            t_cam = t_nominal + int(rng.integers(-CAMERA_TS_JITTER_NS,
                                                 CAMERA_TS_JITTER_NS + 1))
            records.append(CaptureRecord(t_cam, ref, v, w))
            label_counts[phase] = label_counts.get(phase, 0) + 1
            frames += 1
        state = sim.simulate_step(state, v, w, 1.0 / CONTROL_RATE_HZ, world)
    records.sort(key=lambda r: r.ts_ns)  # jitter may locally reorder
    with open(log_path, "w") as fh:
        for rec in records:
            append_capture(fh, rec)
    return SessionStats(path=str(log_path), frames=frames, label_counts=label_counts)


def _spawn_for_flavor(flavor: str, world: sim.WorldSpec, rng: np.random.Generator):
    if flavor == "overshoot":
        rho = float(rng.uniform(0.05, sim.BACKUP_DISTANCE - 0.03))
    elif flavor == "dwell":
        rho = float(rng.uniform(sim.BACKUP_DISTANCE + 0.04, world.goal_radius - 0.02))
    elif flavor == "turn":
        rho = float(rng.uniform(0.9, 2.6))
    else:  # drive
        rho = float(rng.uniform(0.6, 2.6))
    for _ in range(128):
        ang = float(rng.uniform(-math.pi, math.pi))
        x = world.goal_x - rho * math.cos(ang)
        y = world.goal_y - rho * math.sin(ang)
        if abs(x) <= 0.92 * world.half_extent and abs(y) <= 0.92 * world.half_extent:
            break
    aim = math.atan2(world.goal_y - y, world.goal_x - x)
    if flavor == "turn":
        off = float(rng.uniform(0.45, sim.FOV_HALF_RAD * 0.95))
        off *= 1 if rng.random() < 0.5 else -1
    else:
        off = float(rng.uniform(-0.27, 0.27))
    return sim.RobotState(x=x, y=y, theta=sim.wrap_angle(aim - off))


def generate_sessions(out_dir, *, target_frames: int = 6000,
                      backward_fraction: float = 0.088, seed: int = 0,
                      image_size: int = 32, image_format: str = "png") -> list:
    """Scripted sessions until the frame budget is met, steering the flavor
    mix so backward motion stays a minority class (the rest roughly even)."""
    rng = np.random.default_rng(seed)
    counts = {"forward": 0, "backward": 0, "turn_left": 0, "turn_right": 0, "stop": 0}
    stats = []
    session_id = 0
    base_ts = 1_700_000_000_000_000_000  # fixed epoch keeps logs deterministic
    while sum(counts.values()) < target_frames:
        want_backward = counts["backward"] < backward_fraction * max(
            sum(counts.values()), target_frames)
        others = {k: v for k, v in counts.items() if k != "backward"}
        lacking = min(others, key=others.get)
        if want_backward:
            flavor = "overshoot"
        elif lacking == "stop":
            flavor = "dwell"
        elif lacking in ("turn_left", "turn_right"):
            flavor = "turn"
        else:
            flavor = "drive"
        world = sim.random_world(rng)
        start = _spawn_for_flavor(flavor, world, rng)
        st = record_session(out_dir, session_id, world, start, rng,
                            image_size=image_size, base_ts_ns=base_ts,
                            image_format=image_format)
        base_ts += 120 * 1_000_000_000  # sessions two minutes apart
        for k, v in st.label_counts.items():
            key = {"stop": "stop", "forward": "forward", "backward": "backward",
                   "turn_left": "turn_left", "turn_right": "turn_right"}[k]
            counts[key] = counts.get(key, 0) + v
        stats.append(st)
        session_id += 1
        if session_id > 4000:
            raise RuntimeError("session generation failed to converge on the frame budget")
    return stats
