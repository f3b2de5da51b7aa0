import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from dbgdgm import autodiff as ad
from dbgdgm.autodiff import GRU_WEIGHTS, ParamStore, Tensor, grad_check

finite = st.floats(-2.0, 2.0, allow_nan=False)


def vec(n):
    return hnp.arrays(np.float64, n, elements=finite)


def store_with(**arrays) -> ParamStore:
    s = ParamStore(0)
    for k, v in arrays.items():
        s.add(k, v)
    return s


def scalar_gru(x, h, w):
    """Independent scalar-loop evaluation of the three GRU formulas."""
    H = len(h)
    sig = lambda a: 1.0 / (1.0 + math.exp(-a))
    r = [sig(sum(w["W_r"][i][j] * x[j] + w["U_r"][i][j] * h[j] for j in range(H)) + w["b_r"][i]) for i in range(H)]
    u = [sig(sum(w["W_u"][i][j] * x[j] + w["U_u"][i][j] * h[j] for j in range(H)) + w["b_u"][i]) for i in range(H)]
    c = [math.tanh(sum(w["W_h"][i][j] * x[j] + w["U_h"][i][j] * r[j] * h[j] for j in range(H)) + w["b_h"][i])
         for i in range(H)]
    return [(1 - u[i]) * h[i] + u[i] * c[i] for i in range(H)]


def uniform_draws(seed, *shapes, n=20):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        yield [rng.uniform(-2.0, 2.0, size=shape) for shape in shapes]


class TestPrimitiveGradients:
    """Every primitive against central differences on random inputs in [-2, 2]."""

    UNARY = {
        "tanh": ad.tanh,
        "sigmoid": ad.sigmoid,
        "softplus": ad.softplus,
        "exp": ad.exp,
        "square": ad.square,
        "softmax": lambda x: ad.softmax(x) * np.arange(1.0, 6.0),
        "log_softmax": lambda x: ad.log_softmax(x) * np.arange(1.0, 6.0),
        "logsumexp": ad.logsumexp,
        "sum": ad.sum,
        "mean": ad.mean,
        "reshape": lambda x: ad.reshape(x, (5, 1)) * np.arange(5.0)[:, None],
        "take": lambda x: x[np.array([0, 0, 3])] * np.array([1.0, 2.0, 3.0]),
    }

    @pytest.mark.parametrize("name", sorted(UNARY))
    def test_unary(self, name):
        f = self.UNARY[name]
        for (x,) in uniform_draws(1, (5,)):
            assert grad_check(lambda s: ad.sum(f(s["x"])), store_with(x=x)) <= 1e-6

    def test_log(self):
        for (x,) in uniform_draws(2, (5,)):
            store = store_with(x=np.abs(x) + 0.5)
            assert grad_check(lambda s: ad.sum(ad.log(s["x"])), store) <= 1e-6

    def test_binary(self):
        f = lambda s: ad.sum(ad.elementwise_product(s["x"], s["y"]) + s["x"] - s["y"] * 3.0)
        for x, y in uniform_draws(3, (4,), (4,)):
            assert grad_check(f, store_with(x=x, y=y)) <= 1e-6

    def test_affine(self):
        f = lambda s: ad.sum(ad.affine(s["x"], s["W"], s["b"]) * np.array([1.0, -0.5]))
        for x, W, b in uniform_draws(4, (3,), (2, 3), (2,)):
            assert grad_check(f, store_with(x=x, W=W, b=b)) <= 1e-6

    def test_batched_affine(self):
        f = lambda s: ad.sum(ad.tanh(ad.affine(s["x"], s["W"], s["b"])))
        for x, W, b in uniform_draws(5, (4, 3), (2, 3), (2,)):
            assert grad_check(f, store_with(x=x, W=W, b=b)) <= 1e-6

    def test_concat_and_stack(self):
        w = np.arange(1.0, 6.0)
        f = lambda s: ad.sum(ad.concat([s["x"], s["y"]]) * w) + ad.sum(ad.stack([s["x"], s["x"] * 2.0]))
        for x, y in uniform_draws(6, (3,), (2,)):
            assert grad_check(f, store_with(x=x, y=y)) <= 1e-6

    def test_broadcast_add(self):
        store = store_with(x=np.ones((3, 2)), b=np.array([0.5, -1.0]))
        f = lambda s: ad.sum(ad.square(s["x"] + s["b"]))
        assert grad_check(f, store) <= 1e-6

    def test_sum_is_exact(self):
        # dyadic inputs and a power-of-two step make the central difference exact
        store = store_with(x=np.array([0.5, -1.25, 2.0, 0.125]))
        assert grad_check(lambda s: ad.sum(s["x"]), store, step=2.0 ** -16) == 0.0

    def test_log_softmax_composite(self):
        store = store_with(x=np.random.default_rng(3).normal(size=5))
        f = lambda s: ad.sum(ad.log_softmax(s["x"]) * np.array([1.0, -2.0, 0.5, 3.0, 0.0]))
        assert grad_check(f, store, step=1e-5) <= 1e-6

    def test_repeated_use_accumulates(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        y = ad.sum(x * x + x)
        y.backward()
        np.testing.assert_allclose(x.grad, 2 * x.data + 1)


class TestForwardIdentities:
    @given(x=hnp.arrays(np.float64, (3, 6), elements=st.floats(-20, 20)))
    def test_softmax_is_distribution(self, x):
        p = ad.softmax(Tensor(x)).data
        assert (p >= 0).all()
        np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)

    @given(x=hnp.arrays(np.float64, 6, elements=st.floats(-20, 20)))
    def test_log_softmax_matches_log_of_softmax(self, x):
        np.testing.assert_allclose(ad.log_softmax(Tensor(x)).data, np.log(ad.softmax(Tensor(x)).data), atol=1e-10)

    def test_log_rejects_nonpositive(self):
        with pytest.raises(FloatingPointError):
            ad.log(Tensor([1.0, 0.0]))

    def test_division_by_tensor_refused(self):
        with pytest.raises(TypeError):
            Tensor(1.0) / Tensor(2.0)

    def test_no_grad_records_nothing(self):
        x = Tensor([1.0], requires_grad=True)
        with ad.no_grad():
            y = ad.tanh(x)
        assert not y.requires_grad and y._parents == ()


class TestGRU:
    def weights(self, rng, H, scale=1.0):
        w = {}
        for name in GRU_WEIGHTS:
            shape = (H,) if name.startswith("b") else (H, H)
            w[name] = rng.normal(scale=scale, size=shape)
        return w

    def test_zero_weights_halve_state(self, rng):
        H = 4
        w = {k: Tensor(np.zeros((H,) if k.startswith("b") else (H, H))) for k in GRU_WEIGHTS}
        h = rng.normal(size=H)
        out = ad.gru_cell(Tensor(rng.normal(size=H)), Tensor(h), w)
        np.testing.assert_allclose(out.data, h / 2, atol=1e-15)

    def test_saturated_update_gives_zero(self, rng):
        H = 3
        w = {k: Tensor(v) for k, v in self.weights(rng, H).items()}
        w["b_u"] = Tensor(np.full(H, 60.0))
        w["W_h"] = Tensor(np.zeros((H, H)))
        w["U_h"] = Tensor(np.zeros((H, H)))
        w["b_h"] = Tensor(np.zeros(H))
        out = ad.gru_cell(Tensor(rng.normal(size=H)), Tensor(rng.normal(size=H)), w)
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_matches_scalar_oracle(self, rng):
        H = 3
        w = self.weights(rng, H)
        x, h = rng.normal(size=H), rng.normal(size=H)
        out = ad.gru_cell(Tensor(x), Tensor(h), {k: Tensor(v) for k, v in w.items()})
        np.testing.assert_allclose(out.data, scalar_gru(x, h, w), rtol=1e-12)

    def test_gradients(self, rng):
        H = 3
        store = ParamStore(0)
        for k, v in self.weights(rng, H, 0.7).items():
            store.add(k, v)
        store.add("x", rng.normal(size=H))
        store.add("h", rng.normal(size=(2, H)))
        f = lambda s: ad.sum(ad.gru_cell(s["x"], s["h"], {k: s[k] for k in GRU_WEIGHTS}) * np.array([1.0, -2.0, 0.5]))
        assert grad_check(f, store) <= 1e-5

    def test_shape_mismatch(self):
        w = {k: Tensor(np.zeros((2,) if k.startswith("b") else (2, 2))) for k in GRU_WEIGHTS}
        with pytest.raises(ValueError):
            ad.gru_cell(Tensor(np.zeros(3)), Tensor(np.zeros(2)), w)


class TestReparam:
    def test_zero_noise_returns_mean(self):
        mu = np.array([0.3, -1.0])
        np.testing.assert_array_equal(ad.gaussian_reparam(Tensor(mu), Tensor([1.0, 2.0]), np.zeros(2)).data, mu)

    def test_sample_mean_clt(self):
        eps = np.random.default_rng(11).standard_normal(100_000)
        x = ad.gaussian_reparam(Tensor(0.0), Tensor(1.0), eps).data
        assert abs(x.mean()) <= 3 / math.sqrt(100_000)

    def test_seeded_draws_identical(self):
        a = ad.gaussian_reparam(Tensor(1.0), Tensor(0.5), np.random.default_rng(5).standard_normal(10)).data
        b = ad.gaussian_reparam(Tensor(1.0), Tensor(0.5), np.random.default_rng(5).standard_normal(10)).data
        assert a.tobytes() == b.tobytes()

    def test_nonpositive_sigma(self):
        with pytest.raises(ValueError):
            ad.gaussian_reparam(Tensor(0.0), Tensor([1.0, 0.0]), np.zeros(2))

    @given(mu=vec(3), raw=vec(3), eps=vec(3))
    def test_mu_gradient_equals_sample_gradient(self, mu, raw, eps):
        m = Tensor(mu, requires_grad=True)
        sigma = ad.positive_sigma(Tensor(raw, requires_grad=True))
        x = ad.gaussian_reparam(m, sigma, eps)
        w = np.array([1.0, -1.5, 2.0])
        ad.sum(ad.tanh(x) * w).backward()
        np.testing.assert_allclose(m.grad, w * (1 - np.tanh(x.data) ** 2), rtol=1e-12)

    def test_sigma_gradient_is_eps(self):
        mu = Tensor(np.zeros(3), requires_grad=True)
        sigma = Tensor(np.ones(3), requires_grad=True)
        eps = np.array([0.5, -1.0, 2.0])
        ad.sum(ad.gaussian_reparam(mu, sigma, eps)).backward()
        np.testing.assert_array_equal(mu.grad, 1.0)
        np.testing.assert_array_equal(sigma.grad, eps)


class TestGumbel:
    @given(logits=vec(4), u=hnp.arrays(np.float64, 4, elements=st.floats(1e-9, 1 - 1e-9)),
           tau=st.floats(0.05, 5.0))
    def test_simplex(self, logits, u, tau):
        y = ad.gumbel_softmax(Tensor(logits), tau, u).data
        assert (y > 0).all()
        assert abs(y.sum() - 1.0) <= 1e-12

    def test_low_temperature_concentrates(self):
        y = ad.gumbel_softmax(Tensor([10.0, 0.0, 0.0]), 0.01, np.full(3, 0.5)).data
        assert y.max() >= 0.999

    def test_gumbel_max_frequencies(self):
        logits = np.array([1.0, 0.0, -0.5])
        u = np.random.default_rng(2).uniform(size=(100_000, 3))
        y = ad.gumbel_softmax(Tensor(np.broadcast_to(logits, u.shape)), 0.1, u).data
        freq = np.bincount(y.argmax(axis=1), minlength=3) / len(u)
        np.testing.assert_allclose(freq, ad.softmax(Tensor(logits)).data, atol=0.02)

    @pytest.mark.parametrize("tau", [0.0, -1.0])
    def test_bad_tau(self, tau):
        with pytest.raises(ValueError):
            ad.gumbel_softmax(Tensor([0.0, 1.0]), tau, np.array([0.3, 0.4]))

    @pytest.mark.parametrize("u", [[0.0, 0.5], [0.5, 1.0], [1.2, 0.5]])
    def test_bad_uniforms(self, u):
        with pytest.raises(ValueError):
            ad.gumbel_softmax(Tensor([0.0, 1.0]), 1.0, np.array(u))

    def test_gradient(self):
        store = store_with(x=np.array([0.2, -0.4, 1.0]))
        u = np.array([0.3, 0.6, 0.9])
        f = lambda s: ad.sum(ad.gumbel_softmax(s["x"], 0.7, u) * np.array([1.0, 2.0, -1.0]))
        assert grad_check(f, store) <= 1e-6


class TestParamStore:
    def test_insertion_order_and_uniqueness(self):
        s = ParamStore(0)
        s.add("b", [1.0])
        s.add("a", [2.0])
        assert list(s) == ["b", "a"]
        with pytest.raises(KeyError):
            s.add("a", [0.0])

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            ParamStore(0).add("x", [np.nan])

    def test_glorot_bounds_and_seed(self):
        a, b = ParamStore(9), ParamStore(9)
        Wa, Wb = a.add_weight("W", (20, 30)).data, b.add_weight("W", (20, 30)).data
        assert np.abs(Wa).max() <= math.sqrt(6 / 50)
        assert Wa.tobytes() == Wb.tobytes()

    def test_save_load_round_trip(self, tmp_path):
        s = ParamStore(0)
        s.add_weight("W", (3, 2))
        s.add("v", [1.5, -2.25])
        s.save(tmp_path, {"K": 3})
        manifest = __import__("json").loads((tmp_path / "params.json").read_text())
        assert manifest == [{"name": "W", "shape": [3, 2], "offset": 0, "length": 6},
                            {"name": "v", "shape": [2], "offset": 6, "length": 2}]
        assert (tmp_path / "params.bin").stat().st_size == 8 * 8
        t = ParamStore.load(tmp_path)
        assert list(t) == list(s)
        for k in s:
            assert t[k].data.tobytes() == s[k].data.tobytes()

    def test_little_endian_layout(self, tmp_path):
        s = ParamStore(0)
        s.add("v", [1.0])
        s.save(tmp_path)
        assert (tmp_path / "params.bin").read_bytes() == np.array([1.0], dtype="<f8").tobytes()

    def test_truncated_binary(self, tmp_path):
        s = ParamStore(0)
        s.add("v", [1.0, 2.0])
        s.save(tmp_path)
        (tmp_path / "params.bin").write_bytes(b"\0" * 8)
        with pytest.raises(ValueError):
            ParamStore.load(tmp_path)

    def test_grad_check_rejects_non_finite(self):
        s = store_with(x=np.array([1.0]))
        with pytest.raises(FloatingPointError):
            grad_check(lambda st: ad.sum(st["x"] * np.inf), s)
