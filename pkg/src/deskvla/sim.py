"""Differential-drive simulator with a synthetic forward-facing camera.

Unicycle kinematics under semi-implicit Euler, an arena with wall clamping,
and a deterministic rasterizer that draws the goal marker into the robot's
view.  The renderer is exactly mirror-symmetric: reflecting the world about
the robot's heading axis flips the image bitwise, which is what makes
horizontal-flip augmentation label-safe.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .grammar import ActionCommand, SafetyCaps

FOV_HALF_RAD = math.radians(50.0)   # horizontal half field of view
MARKER_SCALE = 4.0                  # apparent marker radius in px at 1 m
MARKER_MIN_PX = 1.0
MARKER_MAX_FRACTION = 0.75          # of image width; close markers must keep growing

SKY_RGB = (0.55, 0.70, 0.85)
FLOOR_NEAR_RGB = (0.42, 0.40, 0.38)
FLOOR_FAR_RGB = (0.22, 0.21, 0.20)
GOAL_RGB = (0.90, 0.12, 0.10)
OBSTACLE_RGB = (0.15, 0.15, 0.18)


def wrap_angle(theta: float) -> float:
    """Wrap to (-pi, pi]."""
    t = math.fmod(theta + math.pi, 2.0 * math.pi)
    if t <= 0.0:
        t += 2.0 * math.pi
    return t - math.pi


@dataclass(frozen=True)
class RobotState:
    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0   # rad, wrapped to (-pi, pi]
    v: float = 0.0       # commanded linear, m/s
    omega: float = 0.0   # commanded angular, rad/s


@dataclass(frozen=True)
class WorldSpec:
    half_extent: float = 2.0  # square arena [-h, h] x [-h, h]
    goal_x: float = 1.0
    goal_y: float = 0.0
    goal_radius: float = 0.3
    obstacles: tuple = ()     # ((x, y, radius), ...)

    def __post_init__(self):
        if abs(self.goal_x) > self.half_extent or abs(self.goal_y) > self.half_extent:
            raise ValueError("goal must lie inside the arena bounds")

    def mirrored(self) -> "WorldSpec":
        return replace(self, goal_y=-self.goal_y,
                       obstacles=tuple((x, -y, r) for x, y, r in self.obstacles))


def mirror_state(state: RobotState) -> RobotState:
    return RobotState(state.x, -state.y, -state.theta, state.v, -state.omega)


def simulate_step(state: RobotState, linear: float, angular: float,
                  dt: float, world: WorldSpec) -> RobotState:
    """Semi-implicit Euler update, clamped to the arena walls."""
    if dt < 0:
        raise ValueError("dt must be non-negative")
    if dt == 0.0:
        return replace(state, v=linear, omega=angular)
    theta = wrap_angle(state.theta + angular * dt)
    x = state.x + linear * math.cos(theta) * dt
    y = state.y + linear * math.sin(theta) * dt
    h = world.half_extent
    x = min(max(x, -h), h)
    y = min(max(y, -h), h)
    return RobotState(x=x, y=y, theta=theta, v=linear, omega=angular)


def goal_bearing_distance(state: RobotState, world: WorldSpec):
    dx = world.goal_x - state.x
    dy = world.goal_y - state.y
    rho = math.hypot(dx, dy)
    beta = wrap_angle(math.atan2(dy, dx) - state.theta)
    return beta, rho


def marker_geometry(state: RobotState, world: WorldSpec, image_size: int):
    """(visible, center_col, center_row, radius_px) of the goal marker.

    center_col decreases strictly as the bearing moves left-to-right; out of
    view (|bearing| >= half FOV or the goal underfoot) reports invisible.
    """
    beta, rho = goal_bearing_distance(state, world)
    if rho < 1e-6 or abs(beta) >= FOV_HALF_RAD:
        return False, 0.0, 0.0, 0.0
    w = image_size
    c0 = (w - 1) / 2.0
    col = c0 - (beta / FOV_HALF_RAD) * c0
    radius = min(max(MARKER_SCALE / rho, MARKER_MIN_PX), MARKER_MAX_FRACTION * w)
    horizon = 0.38 * (image_size - 1)
    row = horizon + 0.35 * radius
    return True, col, row, radius


def _disk(img: np.ndarray, col: float, row: float, radius: float, rgb) -> None:
    h, w, _ = img.shape
    jj = np.arange(w, dtype=np.float64)
    ii = np.arange(h, dtype=np.float64)
    d = np.sqrt((ii[:, None] - row) ** 2 + (jj[None, :] - col) ** 2)
    alpha = np.clip(radius + 0.5 - d, 0.0, 1.0).astype(np.float32)  # soft edge
    for c in range(3):
        img[:, :, c] = img[:, :, c] * (1.0 - alpha) + np.float32(rgb[c]) * alpha


def render_scene(state: RobotState, world: WorldSpec, image_size: int = 32) -> np.ndarray:
    """Deterministic (H, W, 3) float32 view in [0, 1] from the robot's pose."""
    h = w = image_size
    img = np.empty((h, w, 3), dtype=np.float32)
    horizon = int(0.38 * (image_size - 1))
    rows = np.arange(h, dtype=np.float32)[:, None]
    for c in range(3):
        sky = np.float32(SKY_RGB[c])
        near, far = np.float32(FLOOR_NEAR_RGB[c]), np.float32(FLOOR_FAR_RGB[c])
        t = np.clip((rows - horizon) / max(h - 1 - horizon, 1), 0.0, 1.0).astype(np.float32)
        img[:, :, c] = np.where(rows <= horizon, sky, far + (near - far) * t)
    # farther blobs first so nearer ones overdraw them
    blobs = []
    for ox, oy, orad in world.obstacles:
        ob_world = WorldSpec(half_extent=world.half_extent, goal_x=ox, goal_y=oy)
        vis, col, row, rpx = marker_geometry(state, ob_world, image_size)
        if vis:
            _, rho = goal_bearing_distance(state, ob_world)
            blobs.append((rho, col, row, rpx * (orad / 0.3), OBSTACLE_RGB))
    vis, col, row, rpx = marker_geometry(state, world, image_size)
    if vis:
        _, rho = goal_bearing_distance(state, world)
        blobs.append((rho, col, row, rpx, GOAL_RGB))
    for rho, col, row, rpx, rgb in sorted(blobs, key=lambda b: -b[0]):
        _disk(img, col, row, rpx, rgb)
    return img


# ---- scripted expert ---------------------------------------------------------

TURN_THRESHOLD_RAD = 0.35
BACKUP_DISTANCE = 0.18  # closer than this to the goal center: back off


def expert_command(state: RobotState, world: WorldSpec,
                   table: Optional[dict] = None) -> ActionCommand:
    """Deterministic drive-to-goal behavior: orient, drive, stop inside the
    goal radius, and back off when the marker is overwhelmingly close."""
    from .policy import DEFAULT_ACTION_TABLE
    table = table or DEFAULT_ACTION_TABLE
    beta, rho = goal_bearing_distance(state, world)
    if rho < BACKUP_DISTANCE:
        mag, dur = table["backward"]
        return ActionCommand("backward", mag, dur)
    if rho <= world.goal_radius:
        mag, dur = table["stop"]
        return ActionCommand("stop", mag, dur)
    if beta > TURN_THRESHOLD_RAD:
        mag, dur = table["turn_left"]
        return ActionCommand("turn_left", mag, dur)
    if beta < -TURN_THRESHOLD_RAD:
        mag, dur = table["turn_right"]
        return ActionCommand("turn_right", mag, dur)
    mag, dur = table["forward"]
    return ActionCommand("forward", mag, dur)


def random_world(rng: np.random.Generator, half_extent: float = 2.0) -> WorldSpec:
    return WorldSpec(
        half_extent=half_extent,
        goal_x=float(rng.uniform(-0.75, 0.75) * half_extent),
        goal_y=float(rng.uniform(-0.75, 0.75) * half_extent),
    )


def spawn_facing_goal(rng: np.random.Generator, world: WorldSpec,
                      max_abs_bearing: float = FOV_HALF_RAD * 0.9,
                      min_distance: float = 0.35,
                      max_distance: float = 3.0) -> RobotState:
    """Random pose with the goal roughly in view, inside the arena."""
    h = world.half_extent
    for _ in range(256):
        x = float(rng.uniform(-0.9 * h, 0.9 * h))
        y = float(rng.uniform(-0.9 * h, 0.9 * h))
        rho = math.hypot(world.goal_x - x, world.goal_y - y)
        if not (min_distance <= rho <= max_distance):
            continue
        aim = math.atan2(world.goal_y - y, world.goal_x - x)
        theta = wrap_angle(aim + float(rng.uniform(-max_abs_bearing, max_abs_bearing)))
        return RobotState(x=x, y=y, theta=theta)
    return RobotState(x=-0.5 * h, y=0.0, theta=0.0)
