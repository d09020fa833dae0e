"""UAV state, input limits and fixed-step integration of the 3-D kinematic model.

State is (p, v, theta, psi): position, speed, pitch and yaw. Input is
(a, gamma, omega): longitudinal acceleration, pitch rate and yaw rate.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

TWO_PI = 2.0 * np.pi


def wrap_angle(angle):
    """Wrap to (-pi, pi]."""
    wrapped = np.mod(np.asarray(angle, dtype=float) + np.pi, TWO_PI) - np.pi
    wrapped = np.where(wrapped == -np.pi, np.pi, wrapped)
    return wrapped if np.ndim(wrapped) else float(wrapped)


def wrap_yaw(angle):
    """Wrap to [0, 2*pi)."""
    wrapped = np.mod(np.asarray(angle, dtype=float), TWO_PI)
    # np.mod can return exactly 2*pi for tiny negative inputs
    wrapped = np.where(wrapped >= TWO_PI, 0.0, wrapped)
    return wrapped if np.ndim(wrapped) else float(wrapped)


@dataclass(frozen=True)
class UavLimits:
    v_min: float
    v_max: float
    a_min: float = -1.0
    a_max: float = 1.0
    theta_min: float = -np.pi / 2
    theta_max: float = np.pi / 2
    gamma_min: float = -np.pi / 36
    gamma_max: float = np.pi / 36
    psi_min: float = 0.0
    psi_max: float = TWO_PI
    omega_min: float = -np.pi / 18
    omega_max: float = np.pi / 18
    radius: float = 2.0

    def __post_init__(self):
        pairs = [
            ("v", self.v_min, self.v_max),
            ("a", self.a_min, self.a_max),
            ("theta", self.theta_min, self.theta_max),
            ("gamma", self.gamma_min, self.gamma_max),
            ("psi", self.psi_min, self.psi_max),
            ("omega", self.omega_min, self.omega_max),
        ]
        for name, lo, hi in pairs:
            if not lo < hi:
                raise ValueError(f"{name}_min must be < {name}_max, got {lo} >= {hi}")
        if self.v_min <= 0:
            raise ValueError(f"v_min must be positive, got {self.v_min}")
        if self.radius <= 0:
            raise ValueError(f"safety radius must be positive, got {self.radius}")

    @classmethod
    def from_vmax(cls, v_max: float, radius: float = 2.0, **overrides) -> "UavLimits":
        """Default limits with v_min = v_max / 4."""
        return cls(v_min=v_max / 4.0, v_max=v_max, radius=radius, **overrides)

    @property
    def u_min(self) -> np.ndarray:
        return np.array([self.a_min, self.gamma_min, self.omega_min])

    @property
    def u_max(self) -> np.ndarray:
        return np.array([self.a_max, self.gamma_max, self.omega_max])


@dataclass(frozen=True)
class UavState:
    position: np.ndarray
    speed: float
    pitch: float
    yaw: float

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=float).reshape(3)
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "speed", float(self.speed))
        object.__setattr__(self, "pitch", float(self.pitch))
        object.__setattr__(self, "yaw", float(self.yaw))

    def as_array(self) -> np.ndarray:
        return np.array([*self.position, self.speed, self.pitch, self.yaw])

    @classmethod
    def from_array(cls, x) -> "UavState":
        x = np.asarray(x, dtype=float)
        return cls(x[:3], x[3], x[4], x[5])


@dataclass(frozen=True)
class ControlInput:
    accel: float = 0.0
    pitch_rate: float = 0.0
    yaw_rate: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.accel, self.pitch_rate, self.yaw_rate])

    @classmethod
    def from_array(cls, u) -> "ControlInput":
        u = np.asarray(u, dtype=float)
        return cls(float(u[0]), float(u[1]), float(u[2]))


def velocity_components(speed, pitch, yaw) -> np.ndarray:
    """Broadcasting velocity vector; trailing axis has length 3."""
    speed, pitch, yaw = np.broadcast_arrays(
        np.asarray(speed, float), np.asarray(pitch, float), np.asarray(yaw, float))
    cp = np.cos(pitch)
    return np.stack(
        [speed * cp * np.cos(yaw), speed * cp * np.sin(yaw), speed * np.sin(pitch)],
        axis=-1)


def velocity_vector(state: UavState) -> np.ndarray:
    return velocity_components(state.speed, state.pitch, state.yaw)


def clamp_input(u: ControlInput, limits: UavLimits) -> ControlInput:
    clipped = np.clip(u.as_array(), limits.u_min, limits.u_max)
    return ControlInput.from_array(clipped)


def step(state: UavState, u: ControlInput, limits: UavLimits, dt: float) -> UavState:
    """One explicit Euler step: integrate, clamp speed and pitch, wrap yaw."""
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    position = state.position + dt * velocity_vector(state)
    speed = min(max(state.speed + dt * u.accel, limits.v_min), limits.v_max)
    pitch = min(max(state.pitch + dt * u.pitch_rate, limits.theta_min), limits.theta_max)
    yaw = wrap_yaw(state.yaw + dt * u.yaw_rate)
    return UavState(position, speed, pitch, yaw)


@dataclass
class Fleet:
    """Struct-of-arrays view of n UAVs, used by the vectorised simulator."""

    position: np.ndarray  # (n, 3)
    speed: np.ndarray
    pitch: np.ndarray
    yaw: np.ndarray
    v_min: np.ndarray
    v_max: np.ndarray
    radius: np.ndarray
    u_min: np.ndarray = field(default=None)  # (n, 3)
    u_max: np.ndarray = field(default=None)
    theta_min: np.ndarray = field(default=None)
    theta_max: np.ndarray = field(default=None)

    def __len__(self):
        return len(self.speed)

    @classmethod
    def from_lists(cls, states, limits) -> "Fleet":
        return cls(
            position=np.array([s.position for s in states], dtype=float).reshape(-1, 3),
            speed=np.array([s.speed for s in states], dtype=float),
            pitch=np.array([s.pitch for s in states], dtype=float),
            yaw=np.array([s.yaw for s in states], dtype=float),
            v_min=np.array([lim.v_min for lim in limits], dtype=float),
            v_max=np.array([lim.v_max for lim in limits], dtype=float),
            radius=np.array([lim.radius for lim in limits], dtype=float),
            u_min=np.array([lim.u_min for lim in limits], dtype=float).reshape(-1, 3),
            u_max=np.array([lim.u_max for lim in limits], dtype=float).reshape(-1, 3),
            theta_min=np.array([lim.theta_min for lim in limits], dtype=float),
            theta_max=np.array([lim.theta_max for lim in limits], dtype=float),
        )

    def velocity(self) -> np.ndarray:
        return velocity_components(self.speed, self.pitch, self.yaw)

    def state(self, i: int) -> UavState:
        return UavState(self.position[i], self.speed[i], self.pitch[i], self.yaw[i])

    def states(self) -> list[UavState]:
        return [self.state(i) for i in range(len(self))]

    def subset(self, idx) -> "Fleet":
        idx = np.asarray(idx)
        return replace(self, **{
            name: getattr(self, name)[idx]
            for name in self.__dataclass_fields__
        })

    def copy(self) -> "Fleet":
        return replace(self, **{
            name: getattr(self, name).copy() for name in self.__dataclass_fields__
        })

    def advance(self, u: np.ndarray, dt: float, mask=None) -> "Fleet":
        """Euler step of every UAV (or only those in ``mask``); ``u`` is (n, 3)."""
        nxt = self.copy()
        vel = self.velocity()
        sel = slice(None) if mask is None else np.asarray(mask)
        nxt.position[sel] = self.position[sel] + dt * vel[sel]
        nxt.speed[sel] = np.clip(self.speed[sel] + dt * u[sel, 0],
                                 self.v_min[sel], self.v_max[sel])
        nxt.pitch[sel] = np.clip(self.pitch[sel] + dt * u[sel, 1],
                                 self.theta_min[sel], self.theta_max[sel])
        nxt.yaw[sel] = wrap_yaw(self.yaw[sel] + dt * u[sel, 2])
        return nxt
