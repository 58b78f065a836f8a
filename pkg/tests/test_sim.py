import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from graspucb import sim
from graspucb.sim import GraspAction, Material, ObjectSpec, Scene, Shape


def one_object_scene(obj, seed=3):
    return Scene((64, 64), (obj,), seed)


def flat_box(material=Material.OPAQUE, height=5.0, grasp=0.95, row=32.0, col=32.0):
    return ObjectSpec(0, Shape.BOX, (row, col, 0.0), (12.0, 10.0, height), material, grasp)


def all_footprints(scene):
    return [sim.footprint(o, scene.grid_size) for o in scene.objects]


class TestGenerateScene:
    def test_empty(self):
        scene = sim.generate_scene(7, 0, "easy")
        assert scene.objects == ()
        assert scene.bin_mask.sum() == 60 * 60

    def test_deterministic(self):
        a = sim.generate_scene(7, 5, "easy")
        b = sim.generate_scene(7, 5, "easy")
        assert a == b
        assert sim.dumps_scene(a) == sim.dumps_scene(b)

    def test_seventeen_mixed_disjoint(self):
        scene = sim.generate_scene(7, 17, "mixed")
        assert len(scene) == 17
        feet = all_footprints(scene)
        for i in range(len(feet)):
            assert not (feet[i] & ~scene.bin_mask).any()
            for j in range(i + 1, len(feet)):
                assert not (feet[i] & feet[j]).any(), (i, j)

    def test_easy_is_opaque_and_hard_is_not(self):
        easy = sim.generate_scene(11, 8, "easy")
        hard = sim.generate_scene(11, 8, "hard")
        assert {o.material for o in easy.objects} == {Material.OPAQUE}
        assert Material.OPAQUE not in {o.material for o in hard.objects}

    def test_overflow(self):
        with pytest.raises(sim.SceneOverflowError, match="scene overflow"):
            sim.generate_scene(1, 30, "mixed")

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            sim.generate_scene(1, 31)

    def test_round_trip_text(self, tmp_path):
        scene = sim.generate_scene(5, 9, "mixed")
        sim.save_scene(scene, tmp_path / "s.txt")
        assert sim.load_scene(tmp_path / "s.txt") == scene


class TestRender:
    def test_empty_scene_is_floor(self):
        obs = sim.render(Scene((64, 64), (), 1))
        assert np.all(obs.height == 0.0)
        np.testing.assert_array_equal(obs.normals, np.broadcast_to([0.0, 0.0, 1.0], (64, 64, 3)))

    def test_opaque_box_exact(self):
        scene = one_object_scene(flat_box(height=5.0))
        obs = sim.render(scene)
        foot = sim.footprint(scene.objects[0], scene.grid_size)
        interior = foot.copy()
        for axis in (0, 1):
            for shift in (1, -1):
                interior &= np.roll(foot, shift, axis=axis)
        assert interior.sum() > 20
        assert np.all(obs.height[interior] == 5.0)
        np.testing.assert_array_equal(obs.normals[interior], np.broadcast_to([0.0, 0.0, 1.0], (interior.sum(), 3)))
        assert np.all(obs.height[~foot] == 0.0)

    def test_deterministic_and_cached_values(self):
        scene = sim.generate_scene(2, 12, "mixed")
        assert sim.render(scene).equals(sim.render(Scene(scene.grid_size, scene.objects, scene.rng_seed)))

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 2**32), st.integers(1, 12))
    def test_observation_invariants(self, seed, n):
        scene = sim.generate_scene(seed, n, "mixed")
        obs = sim.render(scene)
        assert np.all(obs.height >= 0.0)
        np.testing.assert_allclose(np.linalg.norm(obs.normals, axis=-1), 1.0, atol=1e-6)
        assert np.all((obs.intensity >= 0) & (obs.intensity <= 1))

    def test_transparent_corruption(self):
        obj = flat_box(Material.TRANSPARENT, height=4.0, grasp=0.9)
        scene = one_object_scene(obj)
        obs = sim.render(scene)
        foot = sim.footprint(obj, scene.grid_size)
        holes = foot & (obs.height == 0.0)
        frac = holes.sum() / foot.sum()
        assert 0.25 < frac < 0.55
        np.testing.assert_array_equal(obs.normals[holes], np.broadcast_to([0.0, 0.0, 1.0], (holes.sum(), 3)))
        kept = foot & (obs.height > 0)
        assert np.std(obs.height[kept] - 4.0) == pytest.approx(0.15 * 4.0, rel=0.25)

    def test_dome_normals_follow_slope(self):
        obj = ObjectSpec(0, Shape.DOME, (32.0, 32.0, 0.3), (12.0, 10.0, 2.0), Material.OPAQUE, 0.95)
        foot, z, n = sim.object_surface(obj, (64, 64))
        gy, gx = np.gradient(z)
        inner = foot.copy()
        for axis in (0, 1):
            for shift in (1, -1, 2, -2):
                inner &= np.roll(foot, shift, axis=axis)
        # analytic slope angle against a numeric estimate of the same surface
        tilt = np.degrees(np.arccos(n[..., 2]))
        est = np.degrees(np.arctan(np.hypot(gx, gy)))
        smooth = inner & (np.abs(np.gradient(gx)[1]) < 0.05) & (np.abs(np.gradient(gy)[0]) < 0.05)
        np.testing.assert_allclose(tilt[smooth], est[smooth], atol=3.0)
        cap = inner & (z == 2.0)
        np.testing.assert_allclose(n[cap], np.broadcast_to([0.0, 0.0, 1.0], (cap.sum(), 3)), atol=1e-12)

    def test_observation_export(self, tmp_path):
        from graspucb.maps import export_observation, read_csv_grid

        obs = sim.render(sim.generate_scene(4, 6, "mixed"))
        export_observation(obs, tmp_path)
        np.testing.assert_array_equal(read_csv_grid(tmp_path / "height.csv"), obs.height)
        np.testing.assert_array_equal(read_csv_grid(tmp_path / "normal_z.csv"), obs.normals[..., 2])


class TestSuccessModel:
    def test_floor_is_zero(self):
        scene = one_object_scene(flat_box())
        assert sim.true_success_prob(scene, GraspAction(5, 5)) == 0.0

    def test_flat_top_saturates(self):
        scene = one_object_scene(flat_box(grasp=0.95))
        assert sim.true_success_prob(scene, GraspAction(32, 32)) == pytest.approx(0.95, abs=1e-12)

    def test_perpendicular_approach_is_zero(self):
        # the flat top's inward normal is -z; an approach along +x is 90 degrees off
        assert sim.alignment(np.array([0.0, 0.0, 1.0]), np.array([1.0, 0.0, 0.0])) == 0.0
        assert sim.alignment(np.array([0.0, 0.0, 1.0]), sim.approach_vector(0.0, 0.0)) == 1.0
        # a 45 degree normal approached 45 degrees the other way is also perpendicular
        n = np.array([math.sin(math.pi / 4), 0.0, math.cos(math.pi / 4)])
        assert sim.alignment(n, sim.approach_vector(0.0, -math.pi / 4)) == pytest.approx(0.0, abs=1e-15)

    def test_approach_vector_is_unit(self):
        for a in np.linspace(-math.pi / 4, math.pi / 4, 7):
            for b in np.linspace(-math.pi / 4, math.pi / 4, 7):
                assert np.linalg.norm(sim.approach_vector(a, b)) == pytest.approx(1.0)

    def test_normal_to_tilt_inverts_approach(self):
        rng = np.random.default_rng(0)
        for a, b in rng.uniform(-0.7, 0.7, size=(50, 2)):
            n = -sim.approach_vector(a, b)
            np.testing.assert_allclose(sim.normal_to_tilt(n), [a, b], atol=1e-12)
        np.testing.assert_array_equal(sim.normal_to_tilt(np.array([0.0, 0.0, 1.0])), [0.0, 0.0])

    def test_corruption_does_not_change_physics(self):
        glass = flat_box(Material.TRANSPARENT, grasp=0.9)
        scene = one_object_scene(glass)
        clean = Scene(scene.grid_size, (flat_box(Material.OPAQUE, grasp=0.9),), scene.rng_seed)
        for r, c in [(32, 32), (30, 28), (27, 37)]:
            a = GraspAction(r, c, 0.1, -0.2)
            assert sim.true_success_prob(scene, a) == sim.true_success_prob(clean, a)

    def test_outside_bin_rejected(self):
        with pytest.raises(ValueError):
            sim.true_success_prob(one_object_scene(flat_box()), GraspAction(0, 10))
        with pytest.raises(ValueError):
            GraspAction(10, 10, alpha=1.0)


class TestExecuteGrasp:
    def test_empty_pixel(self):
        scene = one_object_scene(flat_box())
        out, after = sim.execute_grasp(scene, GraspAction(5, 5), 0)
        assert out.reward == 0 and out.removed_object_id is None and after is scene

    def test_certain_success_removes(self):
        scene = one_object_scene(flat_box(grasp=1.0))
        out, after = sim.execute_grasp(scene, GraspAction(32, 32), 0)
        assert out.reward == 1 and out.removed_object_id == 0
        assert len(after) == len(scene) - 1

    def test_monte_carlo_rate(self):
        scene = one_object_scene(flat_box(grasp=0.7), seed=99)
        action = GraspAction(32, 32)
        assert sim.true_success_prob(scene, action) == pytest.approx(0.7)
        m = 10_000
        wins = sum(sim.execute_grasp(scene, action, k)[0].reward for k in range(m))
        assert abs(wins / m - 0.7) < 3 / math.sqrt(m)

    def test_conservation(self):
        scene = sim.generate_scene(8, 10, "easy")
        obs = sim.render(scene)
        n = len(scene)
        for k in range(40):
            if not len(scene):
                break
            flat = int(np.argmax(np.where(scene.bin_mask, obs.height, -1)))
            r, c = divmod(flat, 64)
            out, scene = sim.execute_grasp(scene, GraspAction(r, c), k)
            assert len(scene) == n - out.reward
            n = len(scene)
            obs = sim.render(scene)


def test_clearing_rate():
    assert sim.clearing_rate(17, 17) == 0.0
    assert sim.clearing_rate(17, 0) == 1.0
    assert sim.clearing_rate(17, 5) == pytest.approx(12 / 17)
    with pytest.raises(ValueError, match="empty bin"):
        sim.clearing_rate(0, 0)
