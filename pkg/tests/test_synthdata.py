import numpy as np
import pytest

from streetsdf.space import PinholeCamera, RigidPose
from streetsdf.synthdata import (
    DatasetOptions,
    MonoCueOptions,
    Primitive,
    build_preset_scene,
    generate_dataset,
    lidar_beams_for_pose,
    load_dataset,
    render_gt_frame,
    scene_sdf,
    value_noise,
)


class TestPrimitiveSdf:
    def test_box_center_value(self):
        box = Primitive("box", center=(0, 0, 0), half_extents=(1, 1, 1))
        assert box.sdf(np.zeros((1, 3)))[0] == pytest.approx(-1.0)

    def test_plane(self):
        plane = Primitive("plane")
        assert plane.sdf(np.array([[5.0, 5.0, 2.0]]))[0] == pytest.approx(2.0)

    def test_union_is_min(self):
        scene = build_preset_scene("unit-tests", seed=0)
        pts = np.random.default_rng(0).uniform(-5, 15, size=(64, 3))
        vals = np.stack([p.sdf(pts) for p in scene.primitives])
        np.testing.assert_allclose(scene_sdf(scene, pts), vals.min(axis=0))

    def test_cylinder_axis_point(self):
        cyl = Primitive("cylinder", center=(0, 0, 0), radius=2.0, half_height=3.0)
        assert cyl.sdf(np.array([[0.0, 0.0, 0.0]]))[0] == pytest.approx(-2.0)
        assert cyl.sdf(np.array([[4.0, 0.0, 0.0]]))[0] == pytest.approx(2.0)

    def test_rotated_box(self):
        box = Primitive("box", center=(0, 0, 0), half_extents=(2, 1, 1),
                        yaw=np.pi / 2)
        # the long axis now points along y
        assert box.sdf(np.array([[0.0, 3.0, 0.0]]))[0] == pytest.approx(1.0)
        assert box.sdf(np.array([[3.0, 0.0, 0.0]]))[0] == pytest.approx(2.0)

    @pytest.mark.parametrize("name", ["unit-tests", "straight-street"])
    def test_scene_sdf_is_one_lipschitz(self, name):
        scene = build_preset_scene(name, seed=3)
        rng = np.random.default_rng(1)
        a = rng.uniform(-30, 130, size=(512, 3))
        b = a + rng.normal(scale=2.0, size=a.shape)
        da = scene_sdf(scene, a)
        db = scene_sdf(scene, b)
        lhs = np.abs(da - db)
        rhs = np.linalg.norm(a - b, axis=1) + 1e-9
        assert (lhs <= rhs).all()


class TestPresets:
    def test_deterministic_given_name_seed(self):
        a = build_preset_scene("straight-street", seed=7)
        b = build_preset_scene("straight-street", seed=7)
        assert a.close == b.close and a.backdrop == b.backdrop
        assert a.sun_dir == b.sun_dir
        np.testing.assert_array_equal(a.trajectory.positions(),
                                      b.trajectory.positions())

    def test_different_seeds_differ(self):
        a = build_preset_scene("straight-street", seed=1)
        b = build_preset_scene("straight-street", seed=2)
        assert a.close != b.close

    def test_unit_tests_preset_shape(self):
        s = build_preset_scene("unit-tests", seed=0)
        kinds = sorted(p.kind for p in s.close)
        assert kinds == ["box", "plane"]
        assert len(s.trajectory) == 4
        assert len(s.cameras) == 1

    def test_unknown_preset(self):
        with pytest.raises(ValueError):
            build_preset_scene("nope", seed=0)

    def test_backdrop_beyond_200m(self):
        s = build_preset_scene("straight-street", seed=0)
        traj = s.trajectory.positions()
        for prim in s.backdrop:
            d = np.linalg.norm(np.asarray(prim.center)[:2] - traj[:, :2], axis=1)
            assert d.min() > 200.0

    def test_value_noise_deterministic_and_bounded(self):
        pts = np.random.default_rng(2).uniform(-100, 100, size=(256, 3))
        a = value_noise(pts, 2.0, salt=5)
        b = value_noise(pts, 2.0, salt=5)
        np.testing.assert_array_equal(a, b)
        assert (a >= 0).all() and (a < 1).all()


class TestRenderGtFrame:
    def make_wall_scene(self):
        wall = Primitive("box", center=(5.0 + 0.5, 0.0, 0.0),
                         half_extents=(0.5, 50.0, 50.0))
        cam = PinholeCamera(fx=60.0, fy=60.0, cx=32.0, cy=24.0, width=64, height=48)
        # camera at origin looking +x
        r = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
        pose = RigidPose(r, np.zeros(3))
        scene = build_preset_scene("unit-tests", seed=0)
        scene = type(scene)(scene.name, (wall,), (), scene.sun_dir,
                            trajectory=scene.trajectory, cameras=((cam, pose),),
                            ego_height=1.6)
        return scene, cam, pose

    def test_center_depth_five_meters(self):
        scene, cam, pose = self.make_wall_scene()
        rgb, depth, n_cam, sky = render_gt_frame(scene, cam, pose)
        assert depth[24, 32] == pytest.approx(5.0, abs=1e-3)
        assert not sky[24, 32]
        # wall normal faces the camera: -x world = +z... in camera coords -z
        np.testing.assert_allclose(n_cam[24, 32], [0, 0, -1], atol=1e-2)

    def test_upward_pixels_are_sky(self):
        scene = build_preset_scene("unit-tests", seed=0)
        cam, mount = scene.cameras[0]
        # tilt the camera up (camera +y points down, so positive x-rotation)
        tilt = np.array([[1.0, 0.0, 0.0],
                         [0.0, np.cos(0.8), -np.sin(0.8)],
                         [0.0, np.sin(0.8), np.cos(0.8)]])
        pose = scene.trajectory.poses[0].compose(
            RigidPose(mount.rotation @ tilt, mount.translation))
        rgb, depth, n_cam, sky = render_gt_frame(scene, cam, pose)
        assert sky[0, :].all()
        assert np.isnan(depth[0, 0])

    def test_deterministic(self):
        scene = build_preset_scene("unit-tests", seed=0)
        cam, mount = scene.cameras[0]
        pose = scene.trajectory.poses[0].compose(mount)
        a = render_gt_frame(scene, cam, pose)
        b = render_gt_frame(scene, cam, pose)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)

    def test_sky_mask_agrees_with_trace_miss(self):
        scene = build_preset_scene("unit-tests", seed=0)
        cam, mount = scene.cameras[0]
        pose = scene.trajectory.poses[1].compose(mount)
        from streetsdf.synthdata import camera_rays
        o, d = camera_rays(cam, pose)
        hit, _, _, _, _ = scene.trace(o, d)
        _, _, _, sky = render_gt_frame(scene, cam, pose)
        np.testing.assert_array_equal(sky.ravel(), ~hit)


@pytest.mark.slow
class TestDataset:
    @pytest.fixture(scope="class")
    def dataset(self, tmp_path_factory):
        scene = build_preset_scene("unit-tests", seed=0)
        out = tmp_path_factory.mktemp("ds")
        ds = generate_dataset(scene, out, DatasetOptions(
            lidar=True, masks=True,
            mono=MonoCueOptions(scale=2.0, shift=1.0, noise=0.0),
            lidar_azimuth_step_deg=6.0, lidar_elevations=8))
        return scene, ds

    def test_counts_and_files(self, dataset):
        scene, ds = dataset
        assert ds.n_frames == 4 and ds.n_cams == 1
        assert ds.images.shape == (4, 1, 48, 64, 3)
        assert len(ds.lidar) == 4
        for f in range(4):
            assert (ds.root / "images" / f"{f:04d}_0.png").exists()
            assert (ds.root / "lidar" / f"{f:04d}.bin").exists()

    def test_mono_cues_exact_affine_of_depth(self, dataset):
        scene, ds = dataset
        valid = np.isfinite(ds.gt_depth)
        np.testing.assert_allclose(ds.mono_depth[valid],
                                   2.0 * ds.gt_depth[valid] + 1.0, rtol=1e-6)

    def test_pose_roundtrip_lossless(self, dataset):
        scene, ds = dataset
        for f, ego in enumerate(scene.trajectory.poses):
            for c, (cam, mount) in enumerate(scene.cameras):
                expect = ego.compose(mount)
                np.testing.assert_allclose(ds.camera_poses[f][c].matrix(),
                                           expect.matrix(), atol=1e-9)

    def test_lidar_ranges_match_trace(self, dataset):
        scene, ds = dataset
        o, d, r = ds.lidar[0]
        hit, t, _, _, _ = scene.trace(o, d)
        valid = r > 0
        np.testing.assert_allclose(r[valid], t[valid], atol=1e-2)
        # no-return beams are flagged with range <= 0
        assert ((~hit) | (t > 120.0))[~valid].all()

    def test_mask_pixels_match_sky(self, dataset):
        scene, ds = dataset
        cam, mount = scene.cameras[0]
        pose = scene.trajectory.poses[0].compose(mount)
        _, _, _, sky = render_gt_frame(scene, cam, pose)
        np.testing.assert_array_equal(ds.masks[0, 0], sky)

    def test_images_lossless_roundtrip(self, dataset):
        scene, ds = dataset
        cam, mount = scene.cameras[0]
        pose = scene.trajectory.poses[2].compose(mount)
        rgb, _, _, _ = render_gt_frame(scene, cam, pose)
        quantized = np.round(rgb * 255.0) / 255.0
        np.testing.assert_allclose(ds.images[2, 0], quantized, atol=1e-7)


class TestLidarPattern:
    def test_beam_geometry(self):
        pose = RigidPose(np.eye(3), np.array([1.0, 2.0, 1.6]))
        o, d = lidar_beams_for_pose(pose, n_elevations=4, azimuth_step_deg=30.0)
        assert len(o) == 5 * 4  # azimuths -60..60 step 30 -> 5 columns
        np.testing.assert_allclose(o[0], [1.0, 2.0, 1.6])
        np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1.0, atol=1e-12)
        az = np.degrees(np.arctan2(d[:, 1], d[:, 0]))
        assert az.min() >= -60.0 - 1e-6 and az.max() <= 60.0 + 1e-6
        el = np.degrees(np.arcsin(np.clip(d[:, 2], -1, 1)))
        assert el.min() >= -15.0 - 1e-6 and el.max() <= 5.0 + 1e-6
