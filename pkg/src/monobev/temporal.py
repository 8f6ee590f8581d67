"""Ego-motion temporal fusion: align history BEV features into the
current frame and aggregate them with a 1x1 convolution.

Poses live in a fixed planar world frame (x, z, yaw); yaw is the
counterclockwise angle (seen from above, x right / z forward) from the
world +z axis to the ego +z axis. A feature at previous-frame grid
coordinates maps into the reference frame by rotating about the camera
origin and then translating, matching the relative-pose composition.
History features are read from the bank detached: they feed forward
passes but never receive gradient.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Value


def wrap_angle(a):
    """Normalize an angle to (-pi, pi]."""
    a = (a + np.pi) % (2.0 * np.pi) - np.pi
    if isinstance(a, np.ndarray):
        a[a == -np.pi] = np.pi
        return a
    return np.pi if a == -np.pi else a


def _rot(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class EgoPose:
    x: float
    z: float
    yaw: float
    scene_id: str = "scene0"
    t: int = 0

    def __post_init__(self):
        object.__setattr__(self, "yaw", float(wrap_angle(self.yaw)))

    def to_world(self, pts):
        """Ego-frame (x, z) points (N, 2) -> world frame."""
        return pts @ _rot(self.yaw).T + np.array([self.x, self.z])

    def to_ego(self, pts):
        return (pts - np.array([self.x, self.z])) @ _rot(self.yaw)


@dataclass(frozen=True)
class MotionDelta:
    """Rigid planar map from a previous frame's grid coords to the
    reference frame's: p_ref = R(rot) p_prev + shift."""

    rot: float
    shift: tuple

    def apply(self, pts):
        return np.asarray(pts) @ _rot(self.rot).T + np.asarray(self.shift)


def relative_motion(pose_prev, pose_ref):
    """Transform mapping frame-prev metric coordinates into frame-ref."""
    rot = wrap_angle(pose_prev.yaw - pose_ref.yaw)
    shift = _rot(-pose_ref.yaw) @ np.array([pose_prev.x - pose_ref.x, pose_prev.z - pose_ref.z])
    return MotionDelta(rot=float(rot), shift=(float(shift[0]), float(shift[1])))


def compose(first, second):
    """Delta equivalent to applying `first` then `second`."""
    shift = _rot(second.rot) @ np.asarray(first.shift) + np.asarray(second.shift)
    return MotionDelta(rot=float(wrap_angle(first.rot + second.rot)), shift=(float(shift[0]), float(shift[1])))


def warp_coords(delta, spec):
    """Source (row, col) sample positions for the inverse-mapped warp.

    For each destination cell center, the pre-image under the delta is
    found by rotating about the metric origin (the camera position) and
    untranslating, then converted to fractional grid indices. Positions
    within 1e-9 of a cell center snap onto it, so center-aligned warps
    (identity, quarter turns on symmetric grids) are exact index
    permutations instead of 1-ulp bilinear blends.
    """
    z = spec.row_centers_z()
    x = spec.col_centers_x()
    xx, zz = np.meshgrid(x, z)
    pts = np.stack([xx.ravel(), zz.ravel()], axis=1)
    src = (pts - np.asarray(delta.shift)) @ _rot(-delta.rot).T
    rr, cc = spec.metric_to_index(src[:, 0], src[:, 1])
    coords = np.stack([rr.reshape(zz.shape), cc.reshape(zz.shape)])
    snapped = np.round(coords)
    near = np.abs(coords - snapped) < 1e-9
    coords[near] = snapped[near]
    return coords


def warp_in_bounds(delta, spec):
    """Destination cells whose bilinear source footprint is fully inside."""
    coords = warp_coords(delta, spec)
    r, c = coords[0], coords[1]
    return (r >= 0) & (r <= spec.Z - 1) & (c >= 0) & (c <= spec.X - 1)


def align_history(b_prev, delta, scene_match, b_ref, spec):
    """Warp a history BEV feature grid into the reference frame.

    Rotation about the camera origin, then translation, realized as one
    inverse-mapped bilinear resampling pass with zero padding. On a scene
    change the reference features pass through unchanged instead.
    """
    if b_prev.shape != b_ref.shape:
        raise ShapeError(f"history shape {b_prev.shape} != reference shape {b_ref.shape}")
    if not scene_match:
        return b_ref
    if b_prev.shape[1:] != (spec.Z, spec.X):
        raise ShapeError(f"feature cells {b_prev.shape[1:]} != grid ({spec.Z}, {spec.X})")
    return ad.bilinear_sample(b_prev, warp_coords(delta, spec))


def aggregate(aligned, b_calib, phi_w, phi_b=None, n_his=None):
    """Channel-concat aligned history (oldest first) with the reference
    features and mix with the 1x1 convolution phi.

    When the bank held fewer than n_his entries the missing oldest slots
    are filled with the reference features, keeping phi's input arity
    fixed. Gradients reach phi and the reference features only; bank
    entries arrive detached.
    """
    if n_his is None:
        n_his = len(aligned)
    if len(aligned) > n_his:
        raise ShapeError(f"{len(aligned)} aligned grids exceed history window {n_his}")
    for a in aligned:
        if a.shape != b_calib.shape:
            raise ShapeError(f"aligned shape {a.shape} != reference shape {b_calib.shape}")
    slots = [b_calib] * (n_his - len(aligned)) + list(aligned) + [b_calib]
    stacked = ad.concat(slots, axis=0) if len(slots) > 1 else b_calib
    c_in = (n_his + 1) * b_calib.shape[0]
    if phi_w.shape != (b_calib.shape[0], c_in):
        raise ShapeError(f"phi weights {phi_w.shape} != ({b_calib.shape[0]}, {c_in})")
    out = ad.conv1x1(stacked, phi_w)
    if phi_b is not None:
        out = out + ad.reshape(phi_b, (phi_b.shape[0], 1, 1))
    return out


class MemoryBank:
    """Fixed-capacity FIFO of (calibrated BEV features, pose).

    Push evicts the oldest entry beyond capacity; read returns detached
    copies oldest first and never mutates the bank.
    """

    def __init__(self, capacity):
        if capacity < 0:
            raise ValueError(f"bank capacity must be >= 0, got {capacity}")
        self.capacity = capacity
        self._entries = deque(maxlen=capacity)

    def __len__(self):
        return len(self._entries)

    def push(self, features, pose):
        data = features.data if isinstance(features, Value) else np.asarray(features)
        self._entries.append((data.copy(), pose))

    def read(self):
        """Detached copies, oldest first."""
        return [(Value(feat.copy(), requires_grad=False), pose) for feat, pose in self._entries]

    def clear(self):
        self._entries.clear()


def fuse_history(bank, b_calib, pose_ref, spec, phi_w, phi_b=None, n_his=None):
    """Read, align, and aggregate the bank against the current frame."""
    aligned = []
    for feat, pose in bank.read():
        delta = relative_motion(pose, pose_ref)
        aligned.append(align_history(feat, delta, pose.scene_id == pose_ref.scene_id, b_calib, spec))
    return aggregate(aligned, b_calib, phi_w, phi_b, n_his=n_his)


def save_pose_trace(path, poses):
    """One line per frame: `t scene_id x z yaw` (SI units, radians)."""
    with open(path, "w") as fh:
        for p in poses:
            fh.write(f"{p.t} {p.scene_id} {p.x:.9g} {p.z:.9g} {p.yaw:.9g}\n")


def load_pose_trace(path):
    poses = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            t, scene_id, x, z, yaw = line.split()
            poses.append(EgoPose(x=float(x), z=float(z), yaw=float(yaw), scene_id=scene_id, t=int(t)))
    return poses
