import numpy as np
import pytest

from streetsdf.diffcore import (
    AdamState,
    GradientError,
    HashGridSpec,
    MlpSpec,
    ParamStore,
    adam_step,
    dir_encode,
    dir_encode_backward,
    dir_encode_cached,
    finite_diff_check,
    hash_allocate,
    hash_backward,
    hash_encode,
    hash_forward,
    hash_input_jacobian,
    hash_second_backward,
    mlp_allocate,
    mlp_apply,
    mlp_forward,
    mlp_value_and_input_grad,
    mlp_vig_backward,
    mlp_weights,
)


def make_store_with_mlp(spec, seed=0):
    store = ParamStore(np.float64)
    mlp_allocate(store, "net", spec, np.random.default_rng(seed))
    return store


class TestParamStore:
    def test_allocate_and_views(self):
        store = ParamStore(np.float64)
        store.allocate("a", (2, 3), np.arange(6).reshape(2, 3))
        store.allocate("b", (4,))
        assert len(store) == 10
        w = store.view("a")
        w[0, 0] = 99.0
        assert store.values[0] == 99.0  # views alias flat storage
        assert store.segments["b"].offset == 6

    def test_duplicate_name(self):
        store = ParamStore()
        store.allocate("a", (2,))
        with pytest.raises(KeyError):
            store.allocate("a", (2,))

    def test_save_load_roundtrip(self, tmp_path):
        store = ParamStore(np.float32)
        rng = np.random.default_rng(3)
        store.allocate("x", (5,), rng.normal(size=5))
        store.allocate("y", (2, 2), rng.normal(size=(2, 2)))
        path = tmp_path / "params.bin"
        store.save(path, specs={"kind": "test"})
        loaded, specs = ParamStore.load(path)
        np.testing.assert_array_equal(loaded.values, store.values)
        assert loaded.segments["y"].shape == (2, 2)
        assert specs == {"kind": "test"}

    def test_blob_is_little_endian_float32(self, tmp_path):
        store = ParamStore(np.float32)
        store.allocate("x", (3,), [1.0, 2.0, 3.0])
        path = tmp_path / "p.bin"
        store.save(path)
        raw = path.read_bytes()
        assert raw[:4] == b"SSDF"
        assert raw[-12:] == np.array([1, 2, 3], dtype="<f4").tobytes()


class TestMlp:
    def test_zero_weights_bias_path(self):
        spec = MlpSpec((3, 8, 2), activation="softplus")
        store = make_store_with_mlp(spec)
        for k in range(spec.n_layers):
            store.view(f"net/W{k}")[...] = 0.0
        store.view("net/b1")[...] = [0.5, -0.25]
        y = mlp_apply(spec, store, "net", np.array([1.0, 2.0, 3.0]))
        np.testing.assert_allclose(y, [0.5, -0.25])

    def test_identity_initialized_net(self):
        spec = MlpSpec((3, 3, 3), activation="relu")
        store = make_store_with_mlp(spec)
        store.view("net/W0")[...] = np.eye(3)
        store.view("net/b0")[...] = 0.0
        store.view("net/W1")[...] = np.eye(3)
        store.view("net/b1")[...] = 0.0
        x = np.array([0.3, 1.2, 0.01])  # positive, so relu passes through
        np.testing.assert_allclose(mlp_apply(spec, store, "net", x), x)

    def test_width_mismatch(self):
        spec = MlpSpec((3, 4, 2))
        store = make_store_with_mlp(spec)
        with pytest.raises(ValueError, match="width"):
            mlp_apply(spec, store, "net", np.zeros(5))

    @pytest.mark.parametrize("spec", [
        MlpSpec((4, 16, 3), activation="softplus", beta=100.0),
        MlpSpec((5, 8, 8, 2), activation="softplus", beta=1.0),
        MlpSpec((3, 8, 2), activation="relu", out_activation="sigmoid"),
    ])
    def test_input_jacobian_matches_fd(self, spec):
        store = make_store_with_mlp(spec, seed=4)
        rng = np.random.default_rng(5)
        x = rng.normal(size=spec.n_in) * 0.5
        y, _, dy_dx = mlp_apply(spec, store, "net", x, want_grads=True)
        probe = rng.normal(size=spec.n_out)

        def f(xv):
            return float(probe @ mlp_apply(spec, store, "net", xv))

        err = finite_diff_check(f, probe @ dy_dx, x, h=1e-6)
        assert err < 1e-4

    def test_param_jacobian_matches_fd(self):
        spec = MlpSpec((4, 10, 3), activation="softplus", beta=10.0)
        store = make_store_with_mlp(spec, seed=6)
        rng = np.random.default_rng(7)
        x = rng.normal(size=4)
        probe = rng.normal(size=3)
        _, dy_dp, _ = mlp_apply(spec, store, "net", x, want_grads=True)

        theta0 = store.values.copy()

        def f(theta):
            store.values[...] = theta
            y = mlp_apply(spec, store, "net", x)
            store.values[...] = theta0
            return float(probe @ y)

        err = finite_diff_check(f, probe @ dy_dp, theta0, h=1e-6)
        assert err < 1e-4

    def test_double_backward_matches_fd(self):
        # loss mixing the value and its input gradient exercises the
        # second-order parameter path
        spec = MlpSpec((4, 12, 8, 3), activation="softplus", beta=8.0)
        store = make_store_with_mlp(spec, seed=8)
        rng = np.random.default_rng(9)
        x = rng.normal(size=(6, 4)) * 0.4
        a = rng.normal(size=(6, 3))
        b = rng.normal(size=(6, 4))
        theta0 = store.values.copy()

        def loss(theta):
            store.values[...] = theta
            weights = mlp_weights(store, "net", spec)
            y, u0, _ = mlp_value_and_input_grad(spec, weights, x)
            store.values[...] = theta0
            return float((a * y).sum() + (b * u0).sum())

        store.zero_grads()
        weights = mlp_weights(store, "net", spec)
        y, u0, cache = mlp_value_and_input_grad(spec, weights, x)
        mlp_vig_backward(spec, weights, cache, a, b, store, "net")
        err = finite_diff_check(loss, store.grads.copy(), theta0, h=1e-6)
        store.zero_grads()
        assert err < 1e-4

    def test_input_grad_consistent_with_jacobian(self):
        spec = MlpSpec((3, 9, 2), activation="softplus", beta=20.0)
        store = make_store_with_mlp(spec, seed=10)
        x = np.random.default_rng(11).normal(size=(1, 3))
        weights = mlp_weights(store, "net", spec)
        _, u0, _ = mlp_value_and_input_grad(spec, weights, x, out_index=0)
        _, _, dy_dx = mlp_apply(spec, store, "net", x[0], want_grads=True)
        np.testing.assert_allclose(u0[0], dy_dx[0], rtol=1e-12, atol=1e-12)


DENSE_SPEC = HashGridSpec(levels=1, features_per_level=2, base_res=(2, 2, 2),
                          per_level_scale=1.5, table_size_log2=10)


def dense_trilinear_oracle(spec, table, x):
    """Direct trilinear interpolation over the dense vertex lattice."""
    res = spec.level_res(0)
    p = np.clip(x, 0, 1) * res
    c = np.minimum(p.astype(int), res - 1)
    f = p - c
    out = np.zeros(spec.features_per_level)
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                v = c + [dx, dy, dz]
                idx = (v[0] * (res[1] + 1) + v[1]) * (res[2] + 1) + v[2]
                w = ((f[0] if dx else 1 - f[0]) * (f[1] if dy else 1 - f[1])
                     * (f[2] if dz else 1 - f[2]))
                out += w * table[idx]
    return out


class TestHashGrid:
    def test_zero_table_zero_output(self):
        store = ParamStore(np.float64)
        store.allocate("grid", (DENSE_SPEC.table_rows, 2))
        feat, clamped, jac = hash_encode(DENSE_SPEC, store, "grid",
                                         np.array([0.3, 0.7, 0.2]), want_grads=True)
        np.testing.assert_array_equal(feat, 0.0)
        np.testing.assert_array_equal(jac, 0.0)
        assert not clamped

    def test_collision_free_matches_dense_oracle(self):
        store = ParamStore(np.float64)
        rng = np.random.default_rng(12)
        hash_allocate(store, "grid", DENSE_SPEC, rng, scale=1.0)
        table = store.view("grid")
        for _ in range(32):
            x = rng.uniform(0, 1, size=3)
            feat, _ = hash_encode(DENSE_SPEC, store, "grid", x)
            np.testing.assert_allclose(feat, dense_trilinear_oracle(DENSE_SPEC, table, x),
                                       rtol=1e-12, atol=1e-12)

    def test_vertex_point_returns_table_entry(self):
        store = ParamStore(np.float64)
        rng = np.random.default_rng(13)
        hash_allocate(store, "grid", DENSE_SPEC, rng, scale=1.0)
        res = DENSE_SPEC.level_res(0)
        # vertex (1, 2, 0) of a 2x2x2-cell lattice
        x = np.array([1 / res[0], 2 / res[1], 0.0])
        feat, _ = hash_encode(DENSE_SPEC, store, "grid", x)
        idx = (1 * (res[1] + 1) + 2) * (res[2] + 1) + 0
        np.testing.assert_allclose(feat, store.view("grid")[idx], atol=1e-12)

    def test_out_of_range_clamped_and_flagged(self):
        store = ParamStore(np.float64)
        hash_allocate(store, "grid", DENSE_SPEC, np.random.default_rng(0), scale=1.0)
        f_out, clamped = hash_encode(DENSE_SPEC, store, "grid", np.array([1.4, 0.5, 0.5]))
        f_edge, _ = hash_encode(DENSE_SPEC, store, "grid", np.array([1.0, 0.5, 0.5]))
        assert clamped
        np.testing.assert_allclose(f_out, f_edge, atol=1e-12)

    def test_deterministic(self):
        spec = HashGridSpec(4, 2, (7, 5, 3), 1.7, 8)  # hashed fine levels
        store = ParamStore(np.float32)
        hash_allocate(store, "grid", spec, np.random.default_rng(14), scale=1.0)
        x = np.array([0.31, 0.77, 0.13], dtype=np.float32)
        a, _ = hash_encode(spec, store, "grid", x)
        b, _ = hash_encode(spec, store, "grid", x)
        np.testing.assert_array_equal(a, b)

    @pytest.mark.parametrize("spec", [
        HashGridSpec(3, 2, (4, 3, 5), 1.6, 16),
        HashGridSpec(2, 2, (3, 3, 3, 8), 1.5, 16),  # 4D
        HashGridSpec(4, 2, (9, 9, 9), 1.9, 6),      # forced collisions
    ])
    def test_table_gradient_matches_fd(self, spec):
        store = ParamStore(np.float64)
        rng = np.random.default_rng(15)
        hash_allocate(store, "grid", spec, rng, scale=1.0)
        x = rng.uniform(0.05, 0.95, size=(5, spec.dim))
        probe = rng.normal(size=(5, spec.out_dim))
        theta0 = store.values.copy()

        def f(theta):
            store.values[...] = theta
            feat, _ = hash_forward(spec, store.view("grid"), x, want_dweights=False)
            store.values[...] = theta0
            return float((probe * feat).sum())

        store.zero_grads()
        feat, cache = hash_forward(spec, store.view("grid"), x)
        hash_backward(spec, cache, store.view("grid"), probe, store.grad_view("grid"))
        err = finite_diff_check(f, store.grads.copy(), theta0, h=1e-6,
                                rng=np.random.default_rng(0))
        store.zero_grads()
        assert err < 1e-7  # encoding is linear in the table

    def test_input_jacobian_matches_fd_away_from_cell_edges(self):
        spec = HashGridSpec(2, 2, (4, 4, 4), 1.5, 16)
        store = ParamStore(np.float64)
        rng = np.random.default_rng(16)
        hash_allocate(store, "grid", spec, rng, scale=1.0)
        table = store.view("grid")
        # sample strictly inside cells of both levels
        x = (np.array([[1.0, 2.0, 3.0]]) + rng.uniform(0.2, 0.8, size=(1, 3))) / 6.0
        feat, cache = hash_forward(spec, table, x)
        jac = hash_input_jacobian(spec, table, cache)
        probe = rng.normal(size=spec.out_dim)

        def f(xv):
            feat2, _ = hash_forward(spec, table, xv.reshape(1, -1), want_dweights=False)
            return float(probe @ feat2[0])

        err = finite_diff_check(f, probe @ jac[0], x[0], h=1e-7)
        assert err < 1e-4

    def test_second_backward_matches_fd(self):
        # loss built from the spatial gradient: L = gbar . (J(T,x)^T u)
        spec = HashGridSpec(3, 2, (4, 5, 3), 1.4, 16)
        store = ParamStore(np.float64)
        rng = np.random.default_rng(17)
        hash_allocate(store, "grid", spec, rng, scale=1.0)
        x = rng.uniform(0.1, 0.9, size=(4, 3))
        u = rng.normal(size=(4, spec.out_dim))
        gbar = rng.normal(size=(4, 3))
        theta0 = store.values.copy()

        def f(theta):
            store.values[...] = theta
            _, cache = hash_forward(spec, store.view("grid"), x)
            jac = hash_input_jacobian(spec, store.view("grid"), cache)
            store.values[...] = theta0
            g = np.einsum("nea,ne->na", jac, u)
            return float((gbar * g).sum())

        store.zero_grads()
        _, cache = hash_forward(spec, store.view("grid"), x)
        hash_second_backward(spec, cache, u, gbar, store.grad_view("grid"))
        err = finite_diff_check(f, store.grads.copy(), theta0, h=1e-6,
                                rng=np.random.default_rng(1))
        store.zero_grads()
        assert err < 1e-7  # J is linear in the table

    def test_level_mask_zeroes_features_and_grads(self):
        spec = HashGridSpec(3, 2, (4, 4, 4), 1.5, 16)
        store = ParamStore(np.float64)
        hash_allocate(store, "grid", spec, np.random.default_rng(18), scale=1.0)
        x = np.array([[0.4, 0.3, 0.6]])
        mask = np.array([True, False, False])
        feat, cache = hash_forward(spec, store.view("grid"), x, level_mask=mask)
        assert np.any(feat[0, :2] != 0)
        np.testing.assert_array_equal(feat[0, 2:], 0.0)
        store.zero_grads()
        hash_backward(spec, cache, store.view("grid"), np.ones_like(feat),
                      store.grad_view("grid"))
        sizes = [spec.level_table_size(l) for l in range(3)]
        g = store.grad_view("grid")
        assert np.any(g[:sizes[0]] != 0)
        np.testing.assert_array_equal(g[sizes[0]:], 0.0)


class TestDirEncode:
    def test_worked_example(self):
        enc, flagged = dir_encode(np.array([0.0, 0.0, 1.0]), n_freq=1)
        np.testing.assert_allclose(enc[0], [0, 0, 0, 1, 1, -1], atol=1e-12)
        assert not flagged[0]

    def test_zero_freq_empty(self):
        enc, _ = dir_encode(np.array([0.0, 0.0, 1.0]), n_freq=0)
        assert enc.shape == (1, 0)

    def test_opposite_directions_differ(self):
        a, _ = dir_encode(np.array([0.3, -0.5, 0.81]) / np.linalg.norm([0.3, -0.5, 0.81]), 2)
        b, _ = dir_encode(-np.array([0.3, -0.5, 0.81]) / np.linalg.norm([0.3, -0.5, 0.81]), 2)
        assert np.abs(a - b).max() > 0.1

    def test_non_unit_flagged_and_normalized(self):
        enc, flagged = dir_encode(np.array([0.0, 0.0, 2.0]), 1)
        assert flagged[0]
        ref, _ = dir_encode(np.array([0.0, 0.0, 1.0]), 1)
        np.testing.assert_allclose(enc, ref, atol=1e-12)

    def test_jacobian_matches_fd(self):
        rng = np.random.default_rng(19)
        v = rng.normal(size=3)
        v /= np.linalg.norm(v)
        enc, denc = dir_encode_cached(v.reshape(1, 3), 3)
        probe = rng.normal(size=enc.shape[1])
        vbar = dir_encode_backward(denc, probe.reshape(1, -1))

        def f(vv):
            return float(probe @ _raw_encode(vv, 3))

        err = finite_diff_check(f, vbar[0], v, h=1e-7)
        assert err < 1e-4


def _raw_encode(v, n_freq):
    from streetsdf.diffcore.encoding import _encode
    return _encode(np.atleast_2d(v), n_freq)[0]


class TestAdam:
    def test_first_step_is_signed_lr(self):
        store = ParamStore(np.float64)
        store.allocate("w", (4,), np.zeros(4))
        state = AdamState(store, lr=0.01, eps=1e-15)
        store.grads[...] = [1.0, -2.0, 0.5, -0.1]
        adam_step(state, store)
        np.testing.assert_allclose(store.values, [-0.01, 0.01, -0.01, 0.01], rtol=1e-6)

    def test_zero_gradient_no_change(self):
        store = ParamStore(np.float64)
        store.allocate("w", (3,), [1.0, 2.0, 3.0])
        state = AdamState(store, lr=0.1)
        adam_step(state, store)
        np.testing.assert_array_equal(store.values, [1.0, 2.0, 3.0])

    def test_two_steps_differ_from_one_double_step(self):
        def run(steps):
            store = ParamStore(np.float64)
            store.allocate("w", (1,), [0.0])
            state = AdamState(store, lr=0.1)
            for g in steps:
                store.grads[...] = g
                adam_step(state, store)
            return store.values[0]

        assert run([1.0, 1.0]) != pytest.approx(run([2.0]), abs=1e-12)

    def test_nonfinite_gradient_names_segment(self):
        store = ParamStore(np.float64)
        store.allocate("good", (2,))
        store.allocate("bad_segment", (2,))
        state = AdamState(store)
        store.grads[2] = np.nan
        with pytest.raises(GradientError, match="bad_segment"):
            adam_step(state, store)

    def test_grads_zeroed_after_step(self):
        store = ParamStore(np.float64)
        store.allocate("w", (2,))
        state = AdamState(store)
        store.grads[...] = 1.0
        adam_step(state, store)
        np.testing.assert_array_equal(store.grads, 0.0)

    def test_lr_scale_freezes_segments(self):
        store = ParamStore(np.float64)
        store.allocate("train", (2,), [0.0, 0.0])
        store.allocate("frozen", (2,), [5.0, 5.0])
        state = AdamState(store, lr=0.1, lr_scales={"frozen": 0.0})
        store.grads[...] = 1.0
        adam_step(state, store)
        assert np.all(store.view("train") != 0.0)
        np.testing.assert_array_equal(store.view("frozen"), [5.0, 5.0])


class TestFiniteDiffCheck:
    def test_linear_function_near_exact(self):
        rng = np.random.default_rng(20)
        a = rng.normal(size=8)
        err = finite_diff_check(lambda p: float(a @ p), lambda p: a, rng.normal(size=8))
        assert err < 1e-10

    def test_quadratic_small_error(self):
        rng = np.random.default_rng(21)
        q = rng.normal(size=(6, 6))
        q = q + q.T
        p0 = rng.normal(size=6)
        err = finite_diff_check(lambda p: float(0.5 * p @ q @ p), lambda p: q @ p0, p0)
        assert err < 1e-8

    def test_detects_wrong_gradient(self):
        a = np.ones(4)
        err = finite_diff_check(lambda p: float(a @ p), lambda p: 2 * a, np.zeros(4))
        assert err > 0.3
