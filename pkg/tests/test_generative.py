import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dbgdgm.autodiff import ParamStore
from dbgdgm.config import EmbeddingDims
from dbgdgm.generative import (LatentState, PriorHyper, SynthConfig, add_generative_params, ancestral_sample,
                               community_probs, edge_marginal, joint_log_prob, log_prob_alpha, log_prob_chain,
                               log_prob_edges, node_probs, normal_logpdf, planted_blocks, planted_params,
                               sample_alpha, transition)
from dbgdgm.graph import DynamicGraphCorpus


def random_params(V, K, H, seed=0, layers=1, scale=1.0):
    store = ParamStore(seed)
    add_generative_params(store, V, K, EmbeddingDims(H, H, H), layers, layers)
    rng = np.random.default_rng(seed + 100)
    for name, p in store.items():
        p.data = rng.normal(scale=scale, size=p.shape)
    return store


def zero_params(V, K, H):
    store = random_params(V, K, H)
    for _, p in store.items():
        p.data[...] = 0.0
    return store


def brute_marginal(phi_w, psi_all, store):
    """Explicit double loop over (k, c) with hand-rolled one-layer softmaxes."""
    Wz, bz = store["theta_z.W0"].data, store["theta_z.b0"].data
    Wc, bc = store["theta_c.W0"].data, store["theta_c.b0"].data
    K, V = Wz.shape[0], Wc.shape[0]
    zl = [sum(Wz[k, j] * phi_w[j] for j in range(len(phi_w))) + bz[k] for k in range(K)]
    zmax = max(zl)
    zn = sum(math.exp(a - zmax) for a in zl)
    out = [0.0] * V
    for k in range(K):
        cl = [sum(Wc[c, j] * psi_all[k][j] for j in range(len(phi_w))) + bc[c] for c in range(V)]
        cmax = max(cl)
        cn = sum(math.exp(a - cmax) for a in cl)
        for c in range(V):
            out[c] += math.exp(zl[k] - zmax) / zn * math.exp(cl[c] - cmax) / cn
    return np.array(out)


class TestPriors:
    def test_alpha_moments(self):
        a = sample_alpha(12_500, EmbeddingDims(8, 8, 8), np.random.default_rng(0))
        assert abs(a.mean()) <= 3 / math.sqrt(a.size)
        assert abs(a.var() - 1.0) <= 0.03

    def test_alpha_seeded(self):
        d = EmbeddingDims(4, 4, 4)
        assert np.array_equal(sample_alpha(3, d, np.random.default_rng(5)), sample_alpha(3, d, np.random.default_rng(5)))

    def test_transition_degenerate_noise(self):
        prev = np.array([0.3, -2.0])
        np.testing.assert_allclose(transition(prev, 1e-12, np.random.default_rng(0)), prev, atol=1e-5)

    def test_transition_std(self):
        prev = np.zeros((100_000, 2))
        x = transition(prev, 0.01, np.random.default_rng(1))
        assert np.all(np.abs(x.std(axis=0) - 0.01) <= 0.001)

    def test_transition_requires_positive_sigma(self):
        with pytest.raises(ValueError):
            transition(np.zeros(2), 0.0, np.random.default_rng(0))

    def test_hyper_positive(self):
        with pytest.raises(ValueError):
            PriorHyper(sigma_phi=0.0)


class TestDistributions:
    def test_zero_weights_uniform(self):
        store = zero_params(7, 3, 4)
        np.testing.assert_array_equal(community_probs(np.ones(4), store), np.full(3, 1 / 3))
        np.testing.assert_array_equal(node_probs(np.ones(4), store), np.full(7, 1 / 7))

    def test_uniform_nll_for_360_nodes(self):
        p = node_probs(np.zeros(8), zero_params(360, 3, 8))
        assert -math.log(p[0]) == pytest.approx(5.8861, abs=5e-5)

    def test_community_probs_hand_oracle(self):
        store = random_params(5, 3, 2, seed=3)
        phi = np.array([0.4, -1.1])
        W, b = store["theta_z.W0"].data, store["theta_z.b0"].data
        logits = [W[k, 0] * phi[0] + W[k, 1] * phi[1] + b[k] for k in range(3)]
        e = [math.exp(x) for x in logits]
        np.testing.assert_allclose(community_probs(phi, store), [x / sum(e) for x in e], rtol=1e-13)

    @given(seed=st.integers(0, 10_000), layers=st.integers(1, 3))
    def test_outputs_are_distributions(self, seed, layers):
        store = random_params(6, 4, 3, seed, layers)
        x = np.random.default_rng(seed).normal(size=(5, 3))
        for p in (community_probs(x, store), node_probs(x, store), edge_marginal(x, x[:4], store)):
            assert (p >= 0).all()
            np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)

    def test_single_component_mixture(self):
        store = random_params(6, 1, 3, seed=2)
        psi = np.random.default_rng(0).normal(size=(1, 3))
        np.testing.assert_array_equal(edge_marginal(np.ones(3), psi, store), node_probs(psi[0], store))

    def test_edge_marginal_shape_errors(self):
        store = random_params(6, 3, 3)
        with pytest.raises(ValueError):
            edge_marginal(np.ones(3), np.ones(3), store)
        with pytest.raises(ValueError):
            edge_marginal(np.ones(3), np.ones((2, 3)), store)

    def test_edge_marginal_exhaustive_small_cases(self):
        """Brute-force sum over k on every K <= 8, V <= 16 combination."""
        worst = 0.0
        for K, V in itertools.product(range(1, 9), range(2, 17)):
            store = random_params(V, K, 3, seed=K * 100 + V)
            rng = np.random.default_rng(K * 31 + V)
            phi, psi = rng.normal(size=3), rng.normal(size=(K, 3))
            worst = max(worst, np.abs(edge_marginal(phi, psi, store) - brute_marginal(phi, psi, store)).max())
        assert worst <= 1e-12


class TestAncestralSampling:
    def cfg(self, **kw):
        base = dict(S=2, T=3, V=12, K=3, E_per_snapshot=20, dims=EmbeddingDims(4, 4, 4))
        base.update(kw)
        return SynthConfig(**base)

    def test_deterministic(self):
        cfg = self.cfg()
        store = random_params(12, 3, 4, seed=1)
        c1, l1 = ancestral_sample(cfg, store, 7)
        c2, l2 = ancestral_sample(cfg, store, 7)
        assert c1 == c2
        assert l1.phi.tobytes() == l2.phi.tobytes() and l1.psi.tobytes() == l2.psi.tobytes()
        assert all(np.array_equal(a, b) for ra, rb in zip(l1.z, l2.z) for a, b in zip(ra, rb))

    def test_construction_counts(self):
        cfg = self.cfg()
        corpus, lat = ancestral_sample(cfg, random_params(12, 3, 4, seed=2), 3)
        for s in range(cfg.S):
            for t in range(cfg.T):
                z = lat.z[s][t]
                assert len(z) == cfg.E_per_snapshot and ((0 <= z) & (z < cfg.K)).all()
                assert corpus.snapshot(s, t).num_edges <= cfg.E_per_snapshot
                smp = lat.samples[s][t]
                assert (smp[:, 0] != smp[:, 1]).all()

    def test_subject_draws_independent_of_subject_count(self):
        store = random_params(12, 3, 4, seed=2)
        small, _ = ancestral_sample(self.cfg(S=1), store, 4)
        big, _ = ancestral_sample(self.cfg(S=3), store, 4)
        assert small.snapshots[0] == big.snapshots[0]

    def test_first_step_centered_on_alpha_plus_offset(self):
        store = random_params(12, 3, 4, seed=5)
        cfg = self.cfg(T=1, S=400, hyper=PriorHyper(0.01, 0.01))
        _, lat = ancestral_sample(cfg, store, 1)
        dev = lat.phi[:, 0] - (lat.alpha[:, None, :] + store["node_base"].data)
        assert abs(dev.mean()) < 1e-3 and abs(dev.std() - 0.01) < 1e-3

    def test_zero_offsets_start_at_alpha(self):
        store = random_params(12, 3, 4, seed=5)
        store["node_base"].data[...] = 0.0
        store["community_base"].data[...] = 0.0
        cfg = self.cfg(T=1, hyper=PriorHyper(1e-12, 1e-12))
        _, lat = ancestral_sample(cfg, store, 1)
        np.testing.assert_allclose(lat.phi[:, 0], np.broadcast_to(lat.alpha[:, None], lat.phi[:, 0].shape), atol=1e-9)
        np.testing.assert_allclose(lat.psi[:, 0], np.broadcast_to(lat.alpha[:, None], lat.psi[:, 0].shape), atol=1e-9)

    def test_vanishing_noise_freezes_chains(self):
        cfg = self.cfg(T=5, hyper=PriorHyper(1e-9, 1e-9))
        _, lat = ancestral_sample(cfg, random_params(12, 3, 4, seed=8), 2)
        assert np.abs(np.diff(lat.phi, axis=1)).max() <= 1e-6
        assert np.abs(np.diff(lat.psi, axis=1)).max() <= 1e-6

    def test_planted_blocks_concentrate_edges(self):
        dims = EmbeddingDims(8, 8, 8)
        store, blocks = planted_params(30, 3, dims, seed=0)
        P = node_probs(store["community_base"].data, store)
        for k in range(3):
            assert P[k, blocks == k].sum() >= 0.99
        cfg = SynthConfig(S=3, T=4, V=30, K=3, E_per_snapshot=50, dims=dims)
        _, lat = ancestral_sample(cfg, store, 0)
        smp = np.concatenate([x for row in lat.samples for x in row])
        assert np.mean(blocks[smp[:, 0]] == blocks[smp[:, 1]]) >= 0.95

    def test_planted_blocks_layout(self):
        assert planted_blocks(10, 3).tolist() == [0, 0, 0, 0, 1, 1, 1, 2, 2, 2]
        with pytest.raises(ValueError):
            planted_params(2, 3, EmbeddingDims(4, 4, 4))

    @pytest.mark.parametrize("kw", [dict(E_per_snapshot=0), dict(K=1), dict(V=1), dict(S=0)])
    def test_config_validation(self, kw):
        with pytest.raises(ValueError):
            self.cfg(**kw)


class TestJointLogProb:
    def test_hand_computed_single_edge(self):
        H, V = 2, 4
        store = zero_params(V, 1, H)
        snap = [[[(0, 1)]]]
        corpus = DynamicGraphCorpus.from_edge_lists(V, snap)
        alpha = np.array([[0.5, -1.0]])
        phi = np.full((1, 1, V, H), 0.0) + alpha[:, None, None, :]
        phi[0, 0, 2, 1] += 0.02
        psi = alpha[:, None, None, :] + np.array([[[[0.01, 0.0]]]])
        samples = [[np.array([[0, 1], [1, 0]])]]
        lat = LatentState(alpha, phi, psi, [[np.zeros(2, dtype=int)]], samples)
        hyper = PriorHyper(0.01, 0.01)
        sig = 0.01
        expect = -0.5 * (0.25 + 1.0) - H * 0.5 * math.log(2 * math.pi)
        # node chain: every coordinate has a zero deviation except one of 2 sigma
        expect += V * H * (-math.log(sig) - 0.5 * math.log(2 * math.pi)) - 0.5 * 2.0 ** 2
        expect += H * (-math.log(sig) - 0.5 * math.log(2 * math.pi)) - 0.5 * 1.0 ** 2
        expect += 2 * (math.log(1.0) + math.log(1 / V))
        assert joint_log_prob(corpus, lat, store, hyper) == pytest.approx(expect, rel=1e-12)

    def test_decomposes_into_factors(self):
        cfg = SynthConfig(S=2, T=3, V=8, K=2, E_per_snapshot=6, dims=EmbeddingDims(3, 3, 3))
        store = random_params(8, 2, 3, seed=4, scale=0.5)
        corpus, lat = ancestral_sample(cfg, store, 9)
        total = 0.0
        for s in range(2):
            total += log_prob_alpha(lat.alpha[s])
            total += log_prob_chain(lat.phi[s], lat.alpha[s] + store["node_base"].data, 0.01)
            total += log_prob_chain(lat.psi[s], lat.alpha[s] + store["community_base"].data, 0.01)
            for t in range(3):
                total += sum(log_prob_edges(lat.samples[s][t], lat.z[s][t], lat.phi[s, t], lat.psi[s, t], store))
        assert joint_log_prob(corpus, lat, store, cfg.hyper) == pytest.approx(total, rel=1e-12)

    def test_transition_term_decreases_with_jump(self):
        start = np.zeros((1, 2))
        vals = [log_prob_chain(np.array([[[d, 0.0]]]), start, 0.01) for d in (0.0, 0.01, 0.02, 0.05)]
        assert all(a > b for a, b in zip(vals, vals[1:]))

    def test_edge_order_invariance(self):
        store = random_params(8, 2, 3, seed=4)
        rng = np.random.default_rng(0)
        phi, psi = rng.normal(size=(8, 3)), rng.normal(size=(2, 3))
        smp = np.array([[0, 3], [3, 0], [5, 1], [1, 5]])
        z = np.array([0, 1, 1, 0])
        perm = rng.permutation(4)
        a = log_prob_edges(smp, z, phi, psi, store)
        b = log_prob_edges(smp[perm], z[perm], phi, psi, store)
        assert sum(a) == pytest.approx(sum(b), rel=1e-14)

    def test_shape_mismatch(self):
        cfg = SynthConfig(S=1, T=2, V=8, K=2, E_per_snapshot=4, dims=EmbeddingDims(3, 3, 3))
        store = random_params(8, 2, 3)
        corpus, lat = ancestral_sample(cfg, store, 0)
        lat.phi = lat.phi[:, :1]
        with pytest.raises(ValueError):
            joint_log_prob(corpus, lat, store, cfg.hyper)

    def test_normal_logpdf_matches_scipy(self):
        from scipy.stats import norm
        x = np.array([0.1, -0.3, 2.0])
        assert normal_logpdf(x, 0.5, 0.7) == pytest.approx(norm.logpdf(x, 0.5, 0.7).sum(), rel=1e-13)
