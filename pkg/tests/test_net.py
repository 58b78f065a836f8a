import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from graspucb import net, sim
from graspucb.net import AdamState, GradientBundle, MlpParams

from .gradcheck import max_rel_error, numeric_param_grads


def small_params(seed=0, sizes=(6, 5, 4, 3)):
    return net.init_params(seed, sizes)


def uniform_obs(value=0.3, shape=(8, 8)):
    h = np.full(shape, value)
    n = np.zeros(shape + (3,))
    n[..., 2] = 1.0
    return sim.Observation(h, n, np.full(shape, 0.5))


class TestPatches:
    def test_single_pixel_floor(self):
        obs = sim.render(sim.Scene((32, 32), (), 0))
        np.testing.assert_array_equal(net.extract_patch(obs, 10, 10, 1), [0.0, 0.0, 0.0, 1.0, 0.1])

    def test_corner_replicates_edge(self):
        obs = sim.render(sim.generate_scene(3, 6, "mixed"))
        p = net.extract_patch(obs, 0, 0, 3).reshape(3, 3, 5)
        corner = obs.channels()[0, 0]
        for cell in [(0, 0), (0, 1), (1, 0)]:
            np.testing.assert_array_equal(p[cell], corner)
        np.testing.assert_array_equal(p[2, 2], obs.channels()[1, 1])

    def test_uniform_scene(self):
        p = net.extract_patch(uniform_obs(), 4, 4, 3).reshape(9, 5)
        assert np.all(p == p[0])

    def test_even_window(self):
        with pytest.raises(ValueError, match="window must be odd"):
            net.extract_patch(uniform_obs(), 1, 1, 4)

    def test_all_patches_match_single(self):
        obs = sim.render(sim.generate_scene(5, 8, "mixed"))
        allp = net.extract_patches(obs, 5)
        for r, c in [(0, 0), (63, 63), (10, 40), (33, 2)]:
            np.testing.assert_array_equal(allp[r * 64 + c], net.extract_patch(obs, r, c, 5))


class TestForward:
    def test_zero_network(self):
        p = small_params()
        z = p.with_arrays([np.zeros_like(a) for a in p.arrays()])
        np.testing.assert_array_equal(net.forward(z, np.ones(6)), np.zeros(3))

    def test_single_linear_layer(self):
        w = np.arange(12.0).reshape(4, 3)
        p = MlpParams.from_arrays([w], [np.zeros(3)])
        np.testing.assert_array_equal(net.forward(p, np.ones(4)), w.sum(axis=0))

    def test_batch_matches_rows(self):
        p = small_params(1)
        x = np.random.default_rng(0).normal(size=(7, 6))
        batch = net.forward(p, x)
        for i in range(7):
            np.testing.assert_allclose(batch[i], net.forward(p, x[i]), rtol=0, atol=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            net.forward(small_params(), np.ones(5))

    def test_lipschitz_bound(self):
        p = small_params(2)
        rng = np.random.default_rng(1)
        bound = np.prod([np.linalg.norm(w, 2) for w in p.weights])
        for _ in range(50):
            a, b = rng.normal(size=(2, 6))
            assert np.linalg.norm(net.forward(p, a) - net.forward(p, b)) <= bound * np.linalg.norm(a - b) + 1e-12


class TestBackward:
    def test_zero_upstream(self):
        p = small_params()
        g = net.backward(p, np.ones(6), np.zeros(3))
        assert all(np.all(a == 0) for a in g.arrays())

    def test_linear_layer_outer_product(self):
        rng = np.random.default_rng(3)
        p = MlpParams.from_arrays([rng.normal(size=(4, 2))], [np.zeros(2)])
        x, up = rng.normal(size=4), rng.normal(size=2)
        g = net.backward(p, x, up)
        np.testing.assert_allclose(g.weights[0], np.outer(x, up))
        np.testing.assert_allclose(g.biases[0], up)
        np.testing.assert_allclose(g.input, p.weights[0] @ up)

    def test_finite_differences(self):
        rng = np.random.default_rng(4)
        worst = 0.0
        for draw in range(20):
            p = net.init_params(draw, (5, 4, 3, 2))
            x = rng.normal(size=(3, 5))
            up = rng.normal(size=(3, 2))

            def f(q, x=x, up=up):
                return float(np.sum(net.forward(q, x) * up))

            g = net.backward(p, x, up)
            worst = max(worst, max_rel_error(g.arrays(), numeric_param_grads(f, p)))
        assert worst < 1e-5

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            net.backward(small_params(), np.ones(6), np.ones(2))


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        p = small_params()
        zero = GradientBundle(tuple(np.zeros_like(w) for w in p.weights), tuple(np.zeros_like(b) for b in p.biases),
                              np.zeros(6))
        new, state = net.adam_step(p, zero, 0.1, AdamState.zeros(p))
        for a, b in zip(new.arrays(), p.arrays()):
            np.testing.assert_array_equal(a, b)
        assert state.t == 1

    def test_first_step_moves_by_lr(self):
        p = MlpParams.from_arrays([np.ones((1, 1))], [np.zeros(1)])
        g = GradientBundle((np.ones((1, 1)),), (np.zeros(1),), np.zeros(1))
        new, _ = net.adam_step(p, g, 0.1, AdamState.zeros(p))
        assert new.weights[0][0, 0] == pytest.approx(0.9, abs=1e-6)

    def test_pure_function(self):
        p = small_params()
        g = net.backward(p, np.ones(6), np.ones(3))
        s = AdamState.zeros(p)
        a, _ = net.adam_step(p, g, 1e-3, s)
        b, _ = net.adam_step(p, g, 1e-3, s)
        assert a.checksum() == b.checksum()

    def test_diverged(self):
        p = small_params()
        g = net.backward(p, np.ones(6), np.ones(3))
        bad = GradientBundle((g.weights[0] * np.nan,) + g.weights[1:], g.biases, g.input)
        with pytest.raises(FloatingPointError, match="diverged"):
            net.adam_step(p, bad, 1e-3, AdamState.zeros(p))


class TestInit:
    def test_deterministic_and_distinct(self):
        sizes = (125, 64, 64, 2)
        assert net.init_params(3, sizes).checksum() == net.init_params(3, sizes).checksum()
        assert net.init_params(3, sizes).checksum() != net.init_params(4, sizes).checksum()

    def test_bounds(self):
        p = net.init_params(0, (125, 64, 64, 4))
        for w, b in zip(p.weights, p.biases):
            assert np.abs(w).max() <= np.sqrt(6.0 / w.shape[0])
            assert np.all(b == 0)

    def test_params_are_read_only(self):
        p = small_params()
        with pytest.raises(ValueError):
            p.weights[0][0, 0] = 1.0


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        p = net.init_params(9, (127, 64, 64, 20))
        net.save_params(p, tmp_path / "c.bin")
        q = net.load_params(tmp_path / "c.bin")
        assert q.sizes == p.sizes and q.checksum() == p.checksum()
        assert (tmp_path / "c.bin.json").exists()

    def test_layout(self):
        p = MlpParams.from_arrays([np.array([[1.0, 2.0]])], [np.array([3.0, 4.0])])
        data = net.params_to_bytes(p)
        assert data[:8] == net.CHECKPOINT_MAGIC
        assert np.frombuffer(data[-32:], dtype="<f8").tolist() == [1.0, 2.0, 3.0, 4.0]

    def test_rejects_garbage(self):
        with pytest.raises(ValueError):
            net.params_from_bytes(b"not a checkpoint at all")
        data = net.params_to_bytes(small_params())
        with pytest.raises(ValueError):
            net.params_from_bytes(data + b"\x00")


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 6), st.integers(0, 1000))
def test_backward_input_gradient(width, heads, seed):
    p = net.init_params(seed, (width, 3, heads))
    rng = np.random.default_rng(seed)
    x, up = rng.normal(size=width), rng.normal(size=heads)
    g = net.backward(p, x, up).input
    h = 1e-6
    num = np.array([
        (np.dot(net.forward(p, x + h * e), up) - np.dot(net.forward(p, x - h * e), up)) / (2 * h)
        for e in np.eye(width)
    ])
    np.testing.assert_allclose(g, num, rtol=1e-6, atol=1e-9)
