"""Procedural synthetic driving world.

Generates paired (perspective image, BEV ground truth, visibility mask,
ego trajectory) sequences so training and evaluation need no external
dataset. The world is a flat ground plane carrying class-labelled
rectangles (a road band, crossing stripes) plus dynamic agents rendered
as extruded boxes, which gives real parallax and occlusion. Rendering is
per-pixel analytic ray/ground intersection, so tests can recompute every
pixel independently.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .temporal import EgoPose, wrap_angle


class WorldError(ValueError):
    pass


@dataclass(frozen=True)
class ClassSpec:
    name: str
    static: bool
    color: tuple


DEFAULT_CLASSES = [
    ClassSpec("drivable", True, (95, 95, 100)),
    ClassSpec("crossing", True, (235, 235, 240)),
    ClassSpec("car", False, (50, 90, 210)),
    ClassSpec("ped", False, (220, 70, 60)),
]

OFFROAD_COLOR = (70, 110, 60)
SKY_COLOR = (140, 185, 235)


@dataclass(frozen=True)
class Rect:
    """Rotated rectangle on the ground plane (center, half sizes, yaw)."""

    cx: float
    cz: float
    half_w: float
    half_l: float
    yaw: float = 0.0

    def contains(self, pts):
        pts = np.atleast_2d(pts)
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        dx = pts[:, 0] - self.cx
        dz = pts[:, 1] - self.cz
        # Rotate into the rect frame.
        lx = c * dx + s * dz
        lz = -s * dx + c * dz
        return (np.abs(lx) <= self.half_w) & (np.abs(lz) <= self.half_l)

    def corners(self):
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        local = np.array([[-self.half_w, -self.half_l], [self.half_w, -self.half_l],
                          [self.half_w, self.half_l], [-self.half_w, self.half_l]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array([self.cx, self.cz])


@dataclass(frozen=True)
class Agent:
    cls_index: int
    rect: Rect
    height: float
    vel: tuple = (0.0, 0.0)

    def rect_at(self, t):
        if self.vel == (0.0, 0.0) or t == 0:
            return self.rect
        return replace(self.rect, cx=self.rect.cx + self.vel[0] * t, cz=self.rect.cz + self.vel[1] * t)


@dataclass
class WorldConfig:
    classes: list = field(default_factory=lambda: list(DEFAULT_CLASSES))
    road_half_width: tuple = (3.0, 5.0)
    road_center_x: tuple = (-1.5, 1.5)
    road_z_extent: tuple = (-20.0, 80.0)
    n_crossings: tuple = (1, 3)
    crossing_half_depth: tuple = (0.75, 1.5)
    crossing_z: tuple = (5.0, 45.0)
    n_cars: tuple = (1, 3)
    car_half_size: tuple = (1.0, 2.3)
    car_height: tuple = (1.5, 1.8)
    car_speed: tuple = (0.0, 0.8)
    n_peds: tuple = (0, 2)
    ped_half_size: float = 0.5
    ped_height: float = 1.8
    agent_z_range: tuple = (4.0, 40.0)
    cam_height: float = 1.4
    # When set, the first car parks just in front of a crossing, offset from
    # the road center, so the stripe behind it is occluded as the ego passes.
    occluder_bias: bool = False

    def class_index(self, name):
        for i, c in enumerate(self.classes):
            if c.name == name:
                return i
        raise WorldError(f"no class named {name!r}")


@dataclass
class WorldScene:
    scene_id: str
    classes: list
    static_rects: list  # (class index, Rect)
    agents: list
    road: Rect
    cam_height: float


@dataclass
class FrameSample:
    image: np.ndarray  # uint8 (3, H, W)
    gt: np.ndarray  # float32 (N_c, Z, X), binary
    visibility: np.ndarray  # bool (Z, X)
    pose: EgoPose


def generate_scene(seed, config=None):
    """Deterministic world layout for one sequence."""
    cfg = config or WorldConfig()
    rng = np.random.default_rng(seed)
    if cfg.road_half_width[1] <= 0 or cfg.road_z_extent[1] <= cfg.road_z_extent[0]:
        raise WorldError(f"infeasible world config: road {cfg.road_half_width}, {cfg.road_z_extent}")

    half_w = rng.uniform(*cfg.road_half_width)
    center = rng.uniform(*cfg.road_center_x)
    z_lo, z_hi = cfg.road_z_extent
    road = Rect(cx=center, cz=(z_lo + z_hi) / 2, half_w=half_w, half_l=(z_hi - z_lo) / 2)
    statics = [(cfg.class_index("drivable"), road)]

    crossings = []
    n_cross = int(rng.integers(cfg.n_crossings[0], cfg.n_crossings[1] + 1))
    for _ in range(n_cross):
        cz = rng.uniform(*cfg.crossing_z)
        stripe = Rect(cx=center, cz=cz, half_w=half_w, half_l=rng.uniform(*cfg.crossing_half_depth))
        crossings.append(stripe)
        statics.append((cfg.class_index("crossing"), stripe))

    agents = []
    n_cars = int(rng.integers(cfg.n_cars[0], cfg.n_cars[1] + 1))
    car_idx = cfg.class_index("car") if n_cars else None
    for i in range(n_cars):
        hw, hl = cfg.car_half_size
        hw = hw * rng.uniform(0.9, 1.1)
        hl = hl * rng.uniform(0.9, 1.1)
        if cfg.occluder_bias and i == 0 and crossings:
            stripe = crossings[int(rng.integers(len(crossings)))]
            cx = center + rng.choice([-1.0, 1.0]) * rng.uniform(0.8, half_w - hw - 0.2)
            cz = stripe.cz - stripe.half_l - hl - rng.uniform(0.5, 2.0)
            speed = 0.0
        else:
            cx = center + rng.uniform(-(half_w - hw - 0.1), half_w - hw - 0.1)
            cz = rng.uniform(*cfg.agent_z_range)
            speed = rng.uniform(*cfg.car_speed) * rng.choice([-1.0, 1.0])  # both travel directions
        yaw = rng.normal(0.0, 0.05)
        vel = (-speed * np.sin(yaw), speed * np.cos(yaw)) if speed else (0.0, 0.0)
        agents.append(Agent(car_idx, Rect(cx, cz, hw, hl, yaw), rng.uniform(*cfg.car_height), vel))

    n_peds = int(rng.integers(cfg.n_peds[0], cfg.n_peds[1] + 1))
    ped_idx = cfg.class_index("ped") if n_peds else None
    for _ in range(n_peds):
        h = cfg.ped_half_size * rng.uniform(0.8, 1.2)
        cx = center + rng.uniform(-(half_w - h), half_w - h)
        cz = rng.uniform(*cfg.agent_z_range)
        agents.append(Agent(ped_idx, Rect(cx, cz, h, h, rng.uniform(-np.pi, np.pi)), cfg.ped_height))

    return WorldScene(
        scene_id=f"scene{seed}",
        classes=list(cfg.classes),
        static_rects=statics,
        agents=agents,
        road=road,
        cam_height=cfg.cam_height,
    )


def _convex_hull(pts):
    """Andrew monotone chain; pts (N, 2) -> hull vertices CCW."""
    pts = sorted(map(tuple, pts))
    if len(pts) <= 2:
        return np.asarray(pts)

    def half(points):
        out = []
        for p in points:
            while len(out) >= 2:
                ox, oz = out[-2]
                ax, az = out[-1]
                if (ax - ox) * (p[1] - oz) - (az - oz) * (p[0] - ox) <= 0:
                    out.pop()
                else:
                    break
            out.append(p)
        return out

    lower = half(pts)
    upper = half(pts[::-1])
    return np.asarray(lower[:-1] + upper[:-1])


def _fill_convex(canvas, hull, color):
    """Paint hull interior (inclusive) on an (H, W, 3) canvas."""
    if len(hull) < 3:
        return
    h, w = canvas.shape[:2]
    xmin = max(int(np.floor(hull[:, 0].min())), 0)
    xmax = min(int(np.ceil(hull[:, 0].max())), w - 1)
    ymin = max(int(np.floor(hull[:, 1].min())), 0)
    ymax = min(int(np.ceil(hull[:, 1].max())), h - 1)
    if xmin > xmax or ymin > ymax:
        return
    xs, ys = np.meshgrid(np.arange(xmin, xmax + 1), np.arange(ymin, ymax + 1))
    inside = np.ones(xs.shape, dtype=bool)
    n = len(hull)
    for i in range(n):
        x1, y1 = hull[i]
        x2, y2 = hull[(i + 1) % n]
        inside &= (x2 - x1) * (ys - y1) - (y2 - y1) * (xs - x1) >= -1e-9
    canvas[ys[inside], xs[inside]] = color


def classify_ground(scene, pts_world):
    """Highest-priority static class index at each world point, -1 offroad."""
    out = np.full(pts_world.shape[0], -1, dtype=int)
    for cls_idx, rect in scene.static_rects:
        mask = rect.contains(pts_world)
        out[mask] = np.maximum(out[mask], cls_idx)
    return out


def render_pv(scene, pose, cam, t=0):
    """Analytic perspective render: ground classes by ray/plane
    intersection, agents as painter-sorted extruded boxes."""
    h, w = cam.image_h, cam.image_w
    v0 = h / 2.0
    img = np.empty((h, w, 3), dtype=np.uint8)
    img[:] = SKY_COLOR

    vs = np.arange(h)
    ground_rows = vs[vs > v0 + 0.5]
    if ground_rows.size:
        us = np.arange(w)
        uu, vv = np.meshgrid(us, ground_rows)
        z_c = cam.f * scene.cam_height / (vv - v0)
        x_c = (uu - cam.u0) * z_c / cam.f
        pts = np.stack([x_c.ravel(), z_c.ravel()], axis=1)
        world = pose.to_world(pts)
        cls = classify_ground(scene, world).reshape(vv.shape)
        colors = np.array([OFFROAD_COLOR] + [c.color for c in scene.classes], dtype=np.uint8)
        img[ground_rows[0]:, :] = colors[cls + 1]

    # Painter's algorithm over agents, far to near.
    order = []
    for agent in scene.agents:
        rect = agent.rect_at(t)
        corners_w = rect.corners()
        corners_e = pose.to_ego(corners_w)
        if corners_e[:, 1].min() < 0.2:
            continue  # behind or grazing the camera
        order.append((float(np.hypot(*corners_e.mean(axis=0))), agent, corners_e))
    order.sort(key=lambda it: -it[0])
    for _, agent, corners_e in order:
        pts = []
        for y in (scene.cam_height, scene.cam_height - agent.height):
            u = cam.f * corners_e[:, 0] / corners_e[:, 1] + cam.u0
            v = v0 + cam.f * y / corners_e[:, 1]
            pts.append(np.stack([u, v], axis=1))
        hull = _convex_hull(np.concatenate(pts))
        _fill_convex(img, hull, scene.classes[agent.cls_index].color)
    return img


def make_gt(scene, pose, spec, t=0):
    """Rasterize the world into the ego BEV window; visibility by 2D ray
    casting (cells strictly behind an agent footprint are occluded)."""
    z = spec.row_centers_z()
    x = spec.col_centers_x()
    xx, zz = np.meshgrid(x, z)
    pts_ego = np.stack([xx.ravel(), zz.ravel()], axis=1)
    pts_world = pose.to_world(pts_ego)

    n_c = len(scene.classes)
    gt = np.zeros((n_c, spec.Z, spec.X), dtype=np.float32)
    for cls_idx, rect in scene.static_rects:
        gt[cls_idx] += rect.contains(pts_world).reshape(spec.Z, spec.X)
    footprints = []
    for agent in scene.agents:
        rect = agent.rect_at(t)
        footprints.append(rect)
        gt[agent.cls_index] += rect.contains(pts_world).reshape(spec.Z, spec.X)
    gt = (gt > 0).astype(np.float32)

    visibility = np.ones(spec.Z * spec.X, dtype=bool)
    cam_world = np.array([pose.x, pose.z])
    for rect in footprints:
        c, s = np.cos(rect.yaw), np.sin(rect.yaw)
        rot = np.array([[c, s], [-s, c]])  # world -> rect frame
        o = rot @ (cam_world - np.array([rect.cx, rect.cz]))
        p = (pts_world - np.array([rect.cx, rect.cz])) @ rot.T
        d = p - o
        d = np.where(np.abs(d) < 1e-12, 1e-12, d)
        half = np.array([rect.half_w, rect.half_l])
        t1 = (-half - o) / d
        t2 = (half - o) / d
        t_enter = np.minimum(t1, t2).max(axis=1)
        t_exit = np.maximum(t1, t2).min(axis=1)
        # Strict inequality: a ray grazing a corner does not occlude.
        occluded = (t_enter < t_exit) & (t_exit > 0) & (t_exit < 1.0 - 1e-9)
        visibility &= ~occluded
    return gt, visibility.reshape(spec.Z, spec.X)


def simulate_trajectory(scene, length, motion_model="wander", seed=0):
    """Smooth ego poses along the road (step <= 2 m, yaw rate <= 0.2 rad)."""
    if length < 1:
        raise WorldError(f"trajectory length must be >= 1, got {length}")
    rng = np.random.default_rng(seed)
    x = scene.road.cx + rng.uniform(-1.0, 1.0)
    z = rng.uniform(-2.0, 2.0)
    yaw = rng.normal(0.0, 0.03)
    if motion_model == "straight":
        speed = rng.uniform(0.8, 1.5)
    elif motion_model != "wander":
        raise WorldError(f"unknown motion model {motion_model!r}")

    poses = []
    for t in range(length):
        poses.append(EgoPose(x=float(x), z=float(z), yaw=float(wrap_angle(yaw)), scene_id=scene.scene_id, t=t))
        if motion_model == "straight":
            step = speed
            yaw_rate = 0.0
        else:
            pull = -0.06 * (x - scene.road.cx) - 0.8 * yaw
            yaw_rate = float(np.clip(rng.normal(0.0, 0.03) + pull, -0.2, 0.2))
            step = float(np.clip(rng.normal(1.1, 0.25), 0.3, 1.9))
        yaw = wrap_angle(yaw + yaw_rate)
        x += -step * np.sin(yaw)
        z += step * np.cos(yaw)
    return poses


def build_sequence(scene, poses, cam, gt_spec):
    """Render and rasterize every pose of a trajectory."""
    frames = []
    for pose in poses:
        img = render_pv(scene, pose, cam, t=pose.t)
        gt, vis = make_gt(scene, pose, gt_spec, t=pose.t)
        frames.append(FrameSample(image=img.transpose(2, 0, 1).copy(), gt=gt, visibility=vis, pose=pose))
    return frames


def generate_sequence(seed, cam, gt_spec, length, config=None, motion_model="wander"):
    scene = generate_scene(seed, config)
    poses = simulate_trajectory(scene, length, motion_model=motion_model, seed=seed + 10_000)
    return scene, build_sequence(scene, poses, cam, gt_spec)


# -- dataset dump ----------------------------------------------------------


def _write_pgm(path, mask):
    arr = (np.asarray(mask) > 0).astype(np.uint8) * 255
    with open(path, "wb") as fh:
        fh.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode())
        fh.write(arr.tobytes())


def _read_pgm(path):
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"P5":
            raise WorldError(f"{path}: not a binary PGM")
        dims = fh.readline().split()
        w, h = int(dims[0]), int(dims[1])
        fh.readline()  # maxval
        data = np.frombuffer(fh.read(w * h), dtype=np.uint8)
    return (data.reshape(h, w) > 127)


def dump_sequence(seq_dir, frames, class_names):
    """One directory per sequence: PNG images, per-class PGM ground truth,
    a visibility PGM per frame, and the pose trace."""
    from PIL import Image

    from .temporal import save_pose_trace

    seq_dir.mkdir(parents=True, exist_ok=True)
    for i, fr in enumerate(frames):
        Image.fromarray(fr.image.transpose(1, 2, 0)).save(seq_dir / f"frame_{i:04d}.png")
        for k, name in enumerate(class_names):
            _write_pgm(seq_dir / f"frame_{i:04d}_gt_{k}_{name}.pgm", fr.gt[k])
        _write_pgm(seq_dir / f"frame_{i:04d}_vis.pgm", fr.visibility)
    save_pose_trace(seq_dir / "poses.txt", [fr.pose for fr in frames])
    with open(seq_dir / "classes.txt", "w") as fh:
        fh.write("\n".join(class_names) + "\n")


def load_sequence(seq_dir):
    from pathlib import Path

    from PIL import Image

    from .temporal import load_pose_trace

    seq_dir = Path(seq_dir)
    poses = load_pose_trace(seq_dir / "poses.txt")
    class_names = (seq_dir / "classes.txt").read_text().split()
    frames = []
    for i, pose in enumerate(poses):
        img = np.asarray(Image.open(seq_dir / f"frame_{i:04d}.png")).transpose(2, 0, 1)
        gt = np.stack([
            _read_pgm(seq_dir / f"frame_{i:04d}_gt_{k}_{name}.pgm").astype(np.float32)
            for k, name in enumerate(class_names)
        ])
        vis = _read_pgm(seq_dir / f"frame_{i:04d}_vis.pgm")
        frames.append(FrameSample(image=img.copy(), gt=gt, visibility=vis, pose=pose))
    return frames, class_names


def dump_dataset(out_dir, seeds, cam, gt_spec, length, config=None, motion_model="wander"):
    from pathlib import Path

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = config or WorldConfig()
    names = [c.name for c in cfg.classes]
    rows = []
    for seed in seeds:
        _, frames = generate_sequence(seed, cam, gt_spec, length, cfg, motion_model)
        name = f"seq_{seed:05d}"
        dump_sequence(out_dir / name, frames, names)
        rows.append(f"{name} {len(frames)}")
    (out_dir / "manifest.txt").write_text("\n".join(rows) + "\n")
    return rows


def load_dataset(data_dir):
    from pathlib import Path

    data_dir = Path(data_dir)
    manifest = data_dir / "manifest.txt"
    if not manifest.exists():
        raise WorldError(f"no manifest.txt under {data_dir}")
    sequences = []
    class_names = None
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        name, _ = line.split()
        frames, names = load_sequence(data_dir / name)
        class_names = names
        sequences.append(frames)
    return sequences, class_names
