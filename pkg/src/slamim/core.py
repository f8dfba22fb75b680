"""Shared state containers, frames and rotation helpers.

Everything lives in ECEF. Vehicle attitude is a roll/pitch/yaw triple
describing the body (= camera) frame relative to a local east-north-up
frame anchored at a fixed reference point.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Hashable, Sequence

import numpy as np

VEHICLE_DIM = 11
SATELLITE_DIM = 8
LANDMARK_DIM = 3

# slices into the 11-vector [pos, clk_bias, vel, clk_drift, att]
POS = slice(0, 3)
CLK = 3
VEL = slice(4, 7)
DRIFT = 7
ATT = slice(8, 11)


def wrap_angle(a):
    """Wrap angles to (-pi, pi]."""
    a = np.asarray(a, dtype=float)
    w = np.mod(a + np.pi, 2.0 * np.pi) - np.pi
    # mod maps +pi to -pi; push it back to the closed end
    w = np.where(w <= -np.pi, w + 2.0 * np.pi, w)
    return w


def wrap_attitude(att) -> np.ndarray:
    att = np.asarray(att, dtype=float)
    if att.shape != (3,):
        raise ValueError(f"attitude must be a 3-vector, got shape {att.shape}")
    if not np.all(np.isfinite(att)):
        raise ValueError("attitude contains non-finite values")
    return wrap_angle(att)


# --------------------------------------------------------------------------
# rotations

def rot_x(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _drot_x(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[0.0, 0.0, 0.0], [0.0, -s, -c], [0.0, c, -s]])


def _drot_y(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[-s, 0.0, c], [0.0, 0.0, 0.0], [-c, 0.0, -s]])


def _drot_z(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 0.0]])


def euler_to_rotation(att) -> np.ndarray:
    """Body-to-local rotation R = Rz(yaw) Ry(pitch) Rx(roll)."""
    roll, pitch, yaw = att
    return rot_z(yaw) @ rot_y(pitch) @ rot_x(roll)


def euler_rotation_derivatives(att):
    """Partial derivatives of :func:`euler_to_rotation` w.r.t. roll, pitch, yaw."""
    roll, pitch, yaw = att
    Rx, Ry, Rz = rot_x(roll), rot_y(pitch), rot_z(yaw)
    return (
        Rz @ Ry @ _drot_x(roll),
        Rz @ _drot_y(pitch) @ Rx,
        _drot_z(yaw) @ Ry @ Rx,
    )


def rotation_to_euler(R) -> np.ndarray:
    """Inverse of :func:`euler_to_rotation` (pitch kept in [-pi/2, pi/2])."""
    R = np.asarray(R, dtype=float)
    pitch = -np.arcsin(np.clip(R[2, 0], -1.0, 1.0))
    roll = np.arctan2(R[2, 1], R[2, 2])
    yaw = np.arctan2(R[1, 0], R[0, 0])
    return wrap_angle(np.array([roll, pitch, yaw]))


def enu_rotation(ref_ecef) -> np.ndarray:
    """Rotation taking ENU vectors at ``ref_ecef`` into ECEF.

    Uses the spherical up direction (no ellipsoid); the frame only has to be
    a fixed local-level reference for the attitude angles.
    """
    ref = np.asarray(ref_ecef, dtype=float)
    lon = np.arctan2(ref[1], ref[0])
    lat = np.arctan2(ref[2], np.hypot(ref[0], ref[1]))
    sl, cl = np.sin(lat), np.cos(lat)
    so, co = np.sin(lon), np.cos(lon)
    east = np.array([-so, co, 0.0])
    north = np.array([-sl * co, -sl * so, cl])
    up = np.array([cl * co, cl * so, sl])
    return np.column_stack([east, north, up])


# --------------------------------------------------------------------------
# states

@dataclass
class VehicleState:
    pos: np.ndarray
    clk_bias: float = 0.0
    vel: np.ndarray = field(default_factory=lambda: np.zeros(3))
    clk_drift: float = 0.0
    att: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.pos = np.asarray(self.pos, dtype=float).reshape(3)
        self.vel = np.asarray(self.vel, dtype=float).reshape(3)
        self.att = wrap_attitude(self.att)
        self.clk_bias = float(self.clk_bias)
        self.clk_drift = float(self.clk_drift)
        if not (np.all(np.isfinite(self.pos)) and np.all(np.isfinite(self.vel))
                and np.isfinite(self.clk_bias) and np.isfinite(self.clk_drift)):
            raise ValueError("vehicle state has non-finite components")

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.pos, [self.clk_bias], self.vel, [self.clk_drift], self.att])

    @classmethod
    def from_vector(cls, v) -> "VehicleState":
        v = np.asarray(v, dtype=float)
        return cls(pos=v[POS], clk_bias=v[CLK], vel=v[VEL], clk_drift=v[DRIFT], att=v[ATT])

    def copy(self) -> "VehicleState":
        return VehicleState.from_vector(self.to_vector())


@dataclass
class SatelliteState:
    pos: np.ndarray
    clk_bias: float = 0.0
    vel: np.ndarray = field(default_factory=lambda: np.zeros(3))
    clk_drift: float = 0.0
    prn: int | None = None

    def __post_init__(self):
        self.pos = np.asarray(self.pos, dtype=float).reshape(3)
        self.vel = np.asarray(self.vel, dtype=float).reshape(3)
        self.clk_bias = float(self.clk_bias)
        self.clk_drift = float(self.clk_drift)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.pos, [self.clk_bias], self.vel, [self.clk_drift]])

    @classmethod
    def from_vector(cls, v, prn=None) -> "SatelliteState":
        v = np.asarray(v, dtype=float)
        return cls(pos=v[0:3], clk_bias=v[3], vel=v[4:7], clk_drift=v[7], prn=prn)


@dataclass
class PixelLandmark:
    world_pos: np.ndarray
    source_pixel: np.ndarray
    keyframe_id: Hashable = None

    def __post_init__(self):
        self.world_pos = np.asarray(self.world_pos, dtype=float).reshape(3)
        self.source_pixel = np.asarray(self.source_pixel, dtype=float).reshape(2)
        if not np.all(np.isfinite(self.world_pos)):
            raise ValueError("landmark position must be finite")


@dataclass(frozen=True)
class Dimensions:
    """State/measurement bookkeeping shared by the optimizer and the monitor.

    ``n_states`` is l, ``n_meas`` is n and ``redundancy`` is k = n - l.
    """

    n_sats: int
    n_landmarks: int = 0
    n_meas: int | None = None

    @property
    def n_states(self) -> int:
        return VEHICLE_DIM + SATELLITE_DIM * self.n_sats + LANDMARK_DIM * self.n_landmarks

    @property
    def redundancy(self) -> int:
        if self.n_meas is None:
            raise ValueError("measurement count not recorded")
        return self.n_meas - self.n_states

    def satellite_slice(self, k: int) -> slice:
        start = VEHICLE_DIM + SATELLITE_DIM * k
        return slice(start, start + SATELLITE_DIM)

    def landmark_slice(self, j: int) -> slice:
        start = VEHICLE_DIM + SATELLITE_DIM * self.n_sats + LANDMARK_DIM * j
        return slice(start, start + LANDMARK_DIM)


@dataclass
class OverallState:
    vehicle: VehicleState
    satellites: list[SatelliteState]
    landmarks: list[PixelLandmark] = field(default_factory=list)

    @property
    def dims(self) -> Dimensions:
        return Dimensions(len(self.satellites), len(self.landmarks))

    def copy(self) -> "OverallState":
        return unflatten(flatten(self), self)


def flatten(state: OverallState) -> np.ndarray:
    parts = [state.vehicle.to_vector()]
    parts += [s.to_vector() for s in state.satellites]
    parts += [lm.world_pos for lm in state.landmarks]
    return np.concatenate(parts)


def unflatten(vec, template: OverallState) -> OverallState:
    """Rebuild a state from ``vec`` using ``template`` for the non-numeric parts
    (PRNs, landmark source pixels and keyframe ids)."""
    vec = np.asarray(vec, dtype=float)
    dims = template.dims
    if vec.shape != (dims.n_states,):
        raise ValueError(f"expected vector of length {dims.n_states}, got {vec.shape}")
    veh = VehicleState.from_vector(vec[:VEHICLE_DIM])
    sats = [
        SatelliteState.from_vector(vec[dims.satellite_slice(k)], prn=s.prn)
        for k, s in enumerate(template.satellites)
    ]
    lms = [
        PixelLandmark(vec[dims.landmark_slice(j)], lm.source_pixel.copy(), lm.keyframe_id)
        for j, lm in enumerate(template.landmarks)
    ]
    return OverallState(veh, sats, lms)


def states_equal(a: OverallState, b: OverallState, atol: float = 0.0) -> bool:
    if a.dims != b.dims:
        return False
    if [s.prn for s in a.satellites] != [s.prn for s in b.satellites]:
        return False
    for la, lb in zip(a.landmarks, b.landmarks):
        if la.keyframe_id != lb.keyframe_id or not np.array_equal(la.source_pixel, lb.source_pixel):
            return False
    return bool(np.allclose(flatten(a), flatten(b), rtol=0.0, atol=atol))


def position_selector(n_states: int) -> np.ndarray:
    """3 x l matrix picking the vehicle position out of a flattened state."""
    alpha = np.zeros((3, n_states))
    alpha[:, :3] = np.eye(3)
    return alpha


def stack_states(states: Sequence[OverallState]) -> np.ndarray:
    return np.stack([flatten(s) for s in states])
