"""Low-level controller turning agent-frame waypoints into driving actions.

Sign conventions: waypoints are (x right, y forward) in metres; ``steer > 0``
turns left.  Throttle and brake are never both positive.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .config import ControllerConfig


def _clamp(x, lo, hi) -> float:
    x = float(x)
    return x if lo <= x <= hi else (lo if x < lo else hi if x > hi else x)


@dataclass(frozen=True)
class Action:
    steer: float = 0.0
    throttle: float = 0.0
    brake: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "steer", _clamp(self.steer, -1.0, 1.0))
        object.__setattr__(self, "throttle", _clamp(self.throttle, 0.0, 1.0))
        object.__setattr__(self, "brake", _clamp(self.brake, 0.0, 1.0))
        if self.throttle > 0.0 and self.brake > 0.0:
            raise ValueError("throttle and brake are mutually exclusive")

    @classmethod
    def stop(cls) -> "Action":
        return cls(0.0, 0.0, 1.0)


@dataclass(frozen=True)
class PidState:
    integrator: float = 0.0
    prev_speed_error: float | None = None
    prev_heading_error: float | None = None
    gains: ControllerConfig = field(default_factory=ControllerConfig)


def target_speed(waypoints: np.ndarray, waypoint_dt: float) -> float:
    """Mean spacing of origin + waypoints divided by their time step."""
    w = np.vstack([np.zeros((1, 2)), np.asarray(waypoints, dtype=float)])
    return float(np.mean(np.linalg.norm(np.diff(w, axis=0), axis=1)) / waypoint_dt)


def heading_error(point) -> float:
    """Left-positive angle from the forward axis to an agent-frame point."""
    x, y = float(point[0]), float(point[1])
    return math.atan2(-x, y)


def control(waypoints, speed: float, pid: PidState, dt: float = 0.1,
            waypoint_dt: float = 0.5) -> tuple[Action, PidState]:
    w = np.asarray(waypoints, dtype=float)
    if not np.all(np.isfinite(w)):
        raise ValueError("waypoints must be finite")
    g = pid.gains

    err = target_speed(w, waypoint_dt) - speed
    integ = float(np.clip(pid.integrator + err * dt, -g.windup, g.windup))
    d_err = 0.0 if pid.prev_speed_error is None else (err - pid.prev_speed_error) / dt
    u = g.kp * err + g.ki * integ + g.kd * d_err
    if u > 0.0:
        throttle, brake = min(u, 1.0), 0.0
    elif u < -g.brake_deadband:
        throttle, brake = 0.0, min(-u, 1.0)
    else:
        throttle = brake = 0.0

    look = w[min(g.lookahead_index, len(w) - 1)]
    phi = heading_error(look) if math.hypot(look[0], look[1]) >= g.min_lookahead_dist else 0.0
    d_phi = 0.0 if pid.prev_heading_error is None else (phi - pid.prev_heading_error) / dt
    steer = g.lat_kp * phi + g.lat_kd * d_phi

    new = replace(pid, integrator=integ, prev_speed_error=err, prev_heading_error=phi)
    return Action(steer, throttle, brake), new
