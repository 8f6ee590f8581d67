"""Synthetic world tests: determinism, render/GT consistency via
project-and-probe, occlusion ray casting, and dataset round-trips."""

import numpy as np
import pytest

from monobev.geometry import BevGridSpec, CameraModel
from monobev.temporal import EgoPose, relative_motion
from monobev.world import (
    OFFROAD_COLOR,
    SKY_COLOR,
    Agent,
    Rect,
    WorldConfig,
    WorldError,
    WorldScene,
    build_sequence,
    classify_ground,
    dump_dataset,
    generate_scene,
    generate_sequence,
    load_dataset,
    make_gt,
    render_pv,
    simulate_trajectory,
)

CAM = CameraModel(f=48.0, u0=64.0, image_h=128, image_w=128)
GT_SPEC = BevGridSpec(Z=48, X=40, cell_m=0.25, z_min=1.0)


def empty_scene(cam_height=1.4):
    cfg = WorldConfig()
    return WorldScene("scene0", list(cfg.classes), [], [], Rect(0, 30, 4, 50), cam_height)


class TestGenerateScene:
    def test_deterministic(self):
        a = generate_scene(42)
        b = generate_scene(42)
        assert a.scene_id == b.scene_id
        assert len(a.agents) == len(b.agents)
        for ra, rb in zip(a.agents, b.agents):
            assert ra.rect == rb.rect and ra.height == rb.height

    def test_zero_density_gives_layout_only(self):
        cfg = WorldConfig(n_cars=(0, 0), n_peds=(0, 0))
        scene = generate_scene(7, cfg)
        assert scene.agents == []
        assert len(scene.static_rects) >= 2  # road plus at least one crossing

    def test_agent_counts_within_bounds_over_many_seeds(self):
        cfg = WorldConfig(n_cars=(1, 3), n_peds=(0, 2))
        lows, highs = 10, -1
        for seed in range(1000):
            scene = generate_scene(seed, cfg)
            cars = sum(1 for a in scene.agents if a.cls_index == 2)
            peds = sum(1 for a in scene.agents if a.cls_index == 3)
            assert 1 <= cars <= 3
            assert 0 <= peds <= 2
            lows = min(lows, cars)
            highs = max(highs, cars)
        assert lows == 1 and highs == 3  # both bounds actually hit

    def test_agents_on_drivable(self):
        for seed in range(20):
            scene = generate_scene(seed)
            for agent in scene.agents:
                assert scene.road.contains(np.array([[agent.rect.cx, agent.rect.cz]]))[0]

    def test_infeasible_config(self):
        with pytest.raises(WorldError):
            generate_scene(0, WorldConfig(road_half_width=(0.0, 0.0)))


class TestRenderPv:
    def test_empty_scene_is_ground_and_sky(self):
        scene = empty_scene()
        img = render_pv(scene, EgoPose(0, 0, 0), CAM)
        assert img.shape == (128, 128, 3)
        np.testing.assert_array_equal(img[0, 0], SKY_COLOR)
        np.testing.assert_array_equal(img[64, :], np.broadcast_to(SKY_COLOR, (128, 3)))
        # No painted rects: everything below the horizon is plain ground.
        below = img[66:]
        assert (below.reshape(-1, 3) == OFFROAD_COLOR).all(axis=-1).all()

    def test_ground_point_probe(self):
        # A painted ground point at (x, z) appears at u = f*x/z + u0 (+-1 px).
        scene = generate_scene(3, WorldConfig(n_cars=(0, 0), n_peds=(0, 0)))
        pose = EgoPose(0.5, 1.0, 0.05, scene_id=scene.scene_id)
        img = render_pv(scene, pose, CAM)
        rng = np.random.default_rng(0)
        checked = hits = 0
        for _ in range(100):
            z = rng.uniform(2.0, 12.0)
            x = rng.uniform(-0.9, 0.9) * z * (CAM.image_w / 2) / CAM.f
            u = CAM.f * x / z + CAM.u0
            v = CAM.image_h / 2 + CAM.f * scene.cam_height / z
            ui, vi = int(round(u)), int(round(v))
            if not (0 <= ui < 128 and 0 <= vi < 128):
                continue
            world = pose.to_world(np.array([[x, z]]))
            cls = classify_ground(scene, world)[0]
            expected = OFFROAD_COLOR if cls < 0 else scene.classes[cls].color
            # Exempt class-boundary points: probe a slightly shrunk and grown
            # neighborhood and require agreement.
            near = pose.to_world(np.array([[x + dx, z + dz] for dx in (-0.08, 0.08) for dz in (-0.08, 0.08)]))
            if not np.all(classify_ground(scene, near) == cls):
                continue
            checked += 1
            if tuple(img[vi, ui]) == tuple(expected):
                hits += 1
        assert checked >= 30
        assert hits / checked >= 0.95

    def test_nearer_box_occludes_farther(self):
        cfg = WorldConfig()
        scene = empty_scene()
        far = Agent(2, Rect(0.0, 10.0, 1.0, 1.0), 1.6)
        near = Agent(3, Rect(0.0, 6.0, 1.0, 1.0), 1.8)
        scene.agents = [far, near]
        img = render_pv(scene, EgoPose(0, 0, 0), CAM)
        # Columns where both boxes project: x in [-1, 1] at z=6 -> u within
        # 48*1/6 = 8 px of center; near box color must win there.
        ped_color = scene.classes[3].color
        car_color = scene.classes[2].color
        strip = img[:, 60:68]
        assert (strip == ped_color).all(axis=-1).any()
        # The far (car) box is fully hidden in the shared columns: it may only
        # appear outside or not at all; check the overlap columns directly.
        u_lo = int(CAM.u0 - CAM.f * 1.0 / 6.0) + 1
        u_hi = int(CAM.u0 + CAM.f * 1.0 / 6.0) - 1
        overlap = img[:, u_lo:u_hi + 1]
        assert not (overlap == car_color).all(axis=-1).any()

    def test_per_pixel_box_cross_section(self):
        # Constructed case: a single box, checked per pixel against
        # hand-projected corner geometry along the central column.
        scene = empty_scene()
        scene.agents = [Agent(2, Rect(0.0, 8.0, 1.0, 1.0), 1.5)]
        img = render_pv(scene, EgoPose(0, 0, 0), CAM)
        color = scene.classes[2].color
        v0 = 64.0
        # Near face at z=7: bottom v = v0 + 48*1.4/7, top v = v0 + 48*(-0.1)/7.
        v_bottom = v0 + 48 * 1.4 / 7
        v_top = v0 + 48 * (1.4 - 1.5) / 7
        col = img[:, 64]
        box_rows = np.nonzero((col == color).all(axis=-1))[0]
        assert box_rows.min() == pytest.approx(np.ceil(v_top), abs=1)
        assert box_rows.max() == pytest.approx(np.floor(v_bottom), abs=1)


class TestMakeGt:
    def test_rectangle_area_matches_analytic(self):
        scene = empty_scene()
        rect = Rect(0.0, 6.0, 1.5, 2.0)  # fully inside the window
        scene.static_rects = [(0, rect)]
        gt, vis = make_gt(scene, EgoPose(0, 0, 0), GT_SPEC)
        cells = gt[0].sum()
        expected = (2 * 1.5) * (2 * 2.0) / GT_SPEC.cell_m ** 2
        perimeter_cells = 2 * ((2 * 1.5 + 2 * 2.0) / GT_SPEC.cell_m) + 4
        assert abs(cells - expected) <= perimeter_cells

    def test_no_agents_all_visible(self):
        scene = generate_scene(5, WorldConfig(n_cars=(0, 0), n_peds=(0, 0)))
        _, vis = make_gt(scene, EgoPose(0, 0, 0, scene_id=scene.scene_id), GT_SPEC)
        assert vis.all()

    def test_single_agent_shadow(self):
        scene = empty_scene()
        scene.agents = [Agent(2, Rect(0.0, 10.0, 1.0, 1.0), 1.6)]
        gt, vis = make_gt(scene, EgoPose(0, 0, 0), GT_SPEC)
        z = GT_SPEC.row_centers_z()
        x = GT_SPEC.col_centers_x()
        # Straight ahead beyond the box's far edge (z > 11): occluded.
        col0 = int(np.argmin(np.abs(x)))
        behind = z > 11.2
        assert not vis[behind, col0].any()
        # Laterally clear cells stay visible (x = +-4 at z ~ 10).
        col_side = int(np.argmin(np.abs(x - 4.0)))
        assert vis[:, col_side].all()
        # In front of the box: visible.
        front = z < 8.8
        assert vis[front, col0].all()

    def test_hand_raycast_coarse_grid(self):
        scene = empty_scene()
        scene.agents = [Agent(2, Rect(1.0, 5.0, 0.5, 0.5), 1.6)]
        spec = BevGridSpec(Z=12, X=12, cell_m=1.0, z_min=1.0)
        _, vis = make_gt(scene, EgoPose(0, 0, 0), spec)
        z = spec.row_centers_z()
        x = spec.col_centers_x()
        for r in range(12):
            for c in range(12):
                # Hand ray cast: segment (0,0)->(x,z) vs square [0.5,1.5]x[4.5,5.5]
                px, pz = x[c], z[r]
                ts = np.linspace(1e-3, 1.0, 4001)
                sx, sz = px * ts, pz * ts
                inside = (np.abs(sx - 1.0) <= 0.5) & (np.abs(sz - 5.0) <= 0.5)
                expected_occ = inside.any() and not inside[-1] and not (
                    (abs(px - 1.0) <= 0.5) and (abs(pz - 5.0) <= 0.5)
                )
                if inside.any() and inside[-1]:
                    expected_occ = False  # cell center itself inside footprint
                assert vis[r, c] == (not expected_occ), (r, c, px, pz)

    def test_render_gt_consistency_on_visible_cells(self):
        for seed in (1, 4, 9):
            scene = generate_scene(seed)
            poses = simulate_trajectory(scene, 3, seed=seed)
            checked = hits = 0
            for pose in poses:
                img = render_pv(scene, pose, CAM, t=pose.t)
                gt, vis = make_gt(scene, pose, GT_SPEC, t=pose.t)
                z = GT_SPEC.row_centers_z()
                x = GT_SPEC.col_centers_x()
                for r in range(GT_SPEC.Z):
                    for c in range(GT_SPEC.X):
                        if not vis[r, c]:
                            continue
                        # Edge exemption scaled to the pixel's metric footprint:
                        # rounding to integer pixels moves the sampled ground
                        # point by up to half a pixel, which at depth z spans
                        # ~z^2/(f*h) meters along z and ~z/f across.
                        dz = z[r] ** 2 / (CAM.f * scene.cam_height)
                        dx = z[r] / CAM.f
                        wr = int(np.ceil(dz / GT_SPEC.cell_m)) + 1
                        wc = int(np.ceil(dx / GT_SPEC.cell_m)) + 1
                        r0, r1 = max(r - wr, 0), min(r + wr + 1, GT_SPEC.Z)
                        c0, c1 = max(c - wc, 0), min(c + wc + 1, GT_SPEC.X)
                        block = gt[:, r0:r1, c0:c1]
                        if not np.all(block == block[:, r - r0:r - r0 + 1, c - c0:c - c0 + 1]):
                            continue
                        if gt[2:, r, c].any():
                            continue  # agent cells are rendered as boxes, not ground
                        u = CAM.f * x[c] / z[r] + CAM.u0
                        v = CAM.image_h / 2 + CAM.f * scene.cam_height / z[r]
                        ui, vi = int(round(u)), int(round(v))
                        if not (1 <= ui < 127 and CAM.image_h / 2 + 1 <= vi < 127):
                            continue
                        if gt[1, r, c]:
                            expected = scene.classes[1].color
                        elif gt[0, r, c]:
                            expected = scene.classes[0].color
                        else:
                            expected = OFFROAD_COLOR
                        checked += 1
                        if tuple(img[vi, ui]) == tuple(expected):
                            hits += 1
            assert checked >= 100
            assert hits / checked >= 0.95, f"seed {seed}: {hits}/{checked}"


class TestTrajectory:
    def test_single_pose(self):
        scene = generate_scene(0)
        poses = simulate_trajectory(scene, 1, seed=0)
        assert len(poses) == 1
        assert poses[0].t == 0

    def test_motion_bounds(self):
        scene = generate_scene(1)
        poses = simulate_trajectory(scene, 40, seed=3)
        for prev, cur in zip(poses, poses[1:]):
            d = relative_motion(prev, cur)
            assert np.hypot(*d.shift) <= 2.0 + 1e-9
            assert abs(d.rot) <= 0.2 + 1e-9
            assert cur.scene_id == prev.scene_id

    def test_straight_model(self):
        scene = generate_scene(2)
        poses = simulate_trajectory(scene, 10, motion_model="straight", seed=1)
        yaws = {p.yaw for p in poses}
        assert len(yaws) == 1
        steps = [np.hypot(b.x - a.x, b.z - a.z) for a, b in zip(poses, poses[1:])]
        np.testing.assert_allclose(steps, steps[0], atol=1e-9)

    def test_deterministic(self):
        scene = generate_scene(3)
        a = simulate_trajectory(scene, 10, seed=5)
        b = simulate_trajectory(scene, 10, seed=5)
        assert all(pa == pb for pa, pb in zip(a, b))


class TestWarpConsistency:
    def test_static_gt_warp_iou(self):
        # Warping frame t-1's GT by the relative motion matches frame t's GT
        # on cells in bounds in both, for static classes.
        from monobev.autodiff import Value
        from monobev.temporal import align_history, warp_in_bounds

        ious = []
        for seed in range(5):
            scene = generate_scene(seed, WorldConfig(n_cars=(0, 0), n_peds=(0, 0)))
            poses = simulate_trajectory(scene, 4, seed=seed)
            frames = build_sequence(scene, poses, CAM, GT_SPEC)
            for prev, cur in zip(frames, frames[1:]):
                delta = relative_motion(prev.pose, cur.pose)
                warped = align_history(Value(prev.gt[:2]), delta, True, Value(cur.gt[:2]), GT_SPEC)
                ok = warp_in_bounds(delta, GT_SPEC)
                for k in range(2):
                    a = warped.data[k][ok] >= 0.5
                    b = cur.gt[k][ok] >= 0.5
                    union = np.logical_or(a, b).sum()
                    if union:
                        ious.append(np.logical_and(a, b).sum() / union)
        assert np.mean(ious) >= 0.95
        assert min(ious) >= 0.85


def test_dataset_dump_roundtrip(tmp_path):
    rows = dump_dataset(tmp_path / "data", seeds=[0, 1], cam=CAM, gt_spec=GT_SPEC, length=3)
    assert len(rows) == 2
    sequences, names = load_dataset(tmp_path / "data")
    assert names == ["drivable", "crossing", "car", "ped"]
    assert len(sequences) == 2 and len(sequences[0]) == 3
    _, fresh = generate_sequence(0, CAM, GT_SPEC, 3)
    for a, b in zip(fresh, sequences[0]):
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.gt, b.gt)
        np.testing.assert_array_equal(a.visibility, b.visibility)
        assert a.pose.scene_id == b.pose.scene_id
        assert abs(a.pose.x - b.pose.x) < 1e-8
