"""Generative side of the model: priors, edge mixtures, joint density, ancestral sampler.

Parameter names in the store:

* ``theta_z.W{l}``, ``theta_z.b{l}``: node embedding -> community logits (K)
* ``theta_c.W{l}``, ``theta_c.b{l}``: community embedding -> node logits (V)
* ``node_base`` (V, H), ``community_base`` (K, H): identity offsets added to the
  graph embedding to give the t=0 state of every node and community chain.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .config import EmbeddingDims
from .graph import DynamicGraphCorpus, GraphSnapshot, canonical, directed_expansion

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class PriorHyper:
    sigma_phi: float = 0.01
    sigma_psi: float = 0.01

    def __post_init__(self):
        if not (self.sigma_phi > 0 and self.sigma_psi > 0):
            raise ValueError("prior standard deviations must be positive")


def add_generative_params(store: ParamStore, V: int, K: int, dims: EmbeddingDims,
                          layers_z: int = 1, layers_c: int = 1) -> None:
    H = dims.H
    _add_mlp(store, "theta_z", H, K, layers_z)
    _add_mlp(store, "theta_c", H, V, layers_c)
    a = ad.glorot_bound(V, H)
    store.add("node_base", store._rng.uniform(-a, a, size=(V, H)))
    a = ad.glorot_bound(K, H)
    store.add("community_base", store._rng.uniform(-a, a, size=(K, H)))


def _add_mlp(store: ParamStore, prefix: str, d_in: int, d_out: int, layers: int) -> None:
    for l in range(layers):
        out = d_out if l == layers - 1 else d_in
        store.add_weight(f"{prefix}.W{l}", (out, d_in))
        store.add_zeros(f"{prefix}.b{l}", (out,))


def mlp_layers(store: ParamStore, prefix: str) -> int:
    n = 0
    while f"{prefix}.W{n}" in store:
        n += 1
    return n


def mlp(x, store: ParamStore, prefix: str) -> Tensor:
    """tanh hidden layers of the input width, linear output layer."""
    n = mlp_layers(store, prefix)
    h = ad.as_tensor(x)
    for l in range(n):
        h = ad.affine(h, store[f"{prefix}.W{l}"], store[f"{prefix}.b{l}"])
        if l < n - 1:
            h = ad.tanh(h)
    return h


def community_probs(phi_w, store: ParamStore) -> np.ndarray:
    with ad.no_grad():
        return ad.softmax(mlp(phi_w, store, "theta_z")).data


def node_probs(psi_z, store: ParamStore) -> np.ndarray:
    with ad.no_grad():
        return ad.softmax(mlp(psi_z, store, "theta_c")).data


def edge_marginal(phi_w, psi_all, store: ParamStore) -> np.ndarray:
    """p(c | w) = sum_k p(c | psi_k) p(k | phi_w); batched over leading axes of ``phi_w``."""
    psi_all = np.asarray(psi_all, dtype=np.float64)
    if psi_all.ndim != 2:
        raise ValueError("psi_all must be a (K, H) matrix")
    pi = community_probs(phi_w, store)
    P = node_probs(psi_all, store)
    if pi.shape[-1] != P.shape[0]:
        raise ValueError(f"community count mismatch: {pi.shape[-1]} vs {P.shape[0]}")
    return pi @ P


# sampling -------------------------------------------------------------------


def sample_alpha(S: int, dims: EmbeddingDims, rng: np.random.Generator) -> np.ndarray:
    return rng.standard_normal((S, dims.H_alpha))


def transition(prev: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    prev = np.asarray(prev, dtype=np.float64)
    return prev + sigma * rng.standard_normal(prev.shape)


@dataclass
class LatentState:
    alpha: np.ndarray                 # (S, H)
    phi: np.ndarray                   # (S, T, V, H)
    psi: np.ndarray                   # (S, T, K, H)
    z: list[list[np.ndarray]]         # per (s, t): community index per directed sample
    samples: list[list[np.ndarray]] | None = None  # per (s, t): (M, 2) source/target pairs

    def samples_for(self, corpus: DynamicGraphCorpus, s: int, t: int) -> np.ndarray:
        if self.samples is not None:
            return self.samples[s][t]
        return directed_expansion(corpus.snapshot(s, t))


@dataclass(frozen=True)
class SynthConfig:
    S: int
    T: int
    V: int
    K: int
    E_per_snapshot: int
    dims: EmbeddingDims = field(default_factory=EmbeddingDims)
    hyper: PriorHyper = field(default_factory=PriorHyper)

    def __post_init__(self):
        if self.E_per_snapshot < 1:
            raise ValueError("E_per_snapshot must be >= 1")
        if self.K < 2 or self.V < 2:
            raise ValueError("need K >= 2 and V >= 2")
        if self.S < 1 or self.T < 1:
            raise ValueError("need S >= 1 and T >= 1")


MAX_SELF_RESAMPLES = 100


def _draw_target(P_z: np.ndarray, w: int, rng: np.random.Generator) -> int:
    for _ in range(MAX_SELF_RESAMPLES):
        c = int(rng.choice(P_z.size, p=P_z))
        if c != w:
            return c
    masked = P_z.copy()
    masked[w] = -np.inf
    return int(np.argmax(masked))


def ancestral_sample(cfg: SynthConfig, store: ParamStore, seed: int
                     ) -> tuple[DynamicGraphCorpus, LatentState]:
    """Free-running draw of a corpus with its latent trajectories and edge assignments.

    Every (subject, snapshot) pair gets its own generator derived from ``seed``,
    so the result does not depend on evaluation order.
    """
    H = cfg.dims.H
    hy = cfg.hyper
    node_base = store["node_base"].data
    comm_base = store["community_base"].data
    if node_base.shape != (cfg.V, H) or comm_base.shape != (cfg.K, H):
        raise ValueError("parameter shapes do not match the synthesis config")

    alpha = np.zeros((cfg.S, H))
    phi = np.zeros((cfg.S, cfg.T, cfg.V, H))
    psi = np.zeros((cfg.S, cfg.T, cfg.K, H))
    zs: list[list[np.ndarray]] = []
    samples: list[list[np.ndarray]] = []
    grid = []
    for s in range(cfg.S):
        rng = np.random.default_rng([seed, s, 0])
        alpha[s] = sample_alpha(1, cfg.dims, rng)[0]
        prev_phi = alpha[s] + node_base
        prev_psi = alpha[s] + comm_base
        row, z_row, smp_row = [], [], []
        for t in range(cfg.T):
            rng = np.random.default_rng([seed, s, t + 1])
            psi[s, t] = transition(prev_psi, hy.sigma_psi, rng)
            phi[s, t] = transition(prev_phi, hy.sigma_phi, rng)
            prev_phi, prev_psi = phi[s, t], psi[s, t]
            pi = community_probs(phi[s, t], store)     # (V, K)
            P = node_probs(psi[s, t], store)           # (K, V)
            w = rng.integers(0, cfg.V, size=cfg.E_per_snapshot)
            z = np.empty(cfg.E_per_snapshot, dtype=np.int64)
            c = np.empty(cfg.E_per_snapshot, dtype=np.int64)
            for i, wi in enumerate(w):
                z[i] = rng.choice(cfg.K, p=pi[wi])
                c[i] = _draw_target(P[z[i]], int(wi), rng)
            edges = {canonical(int(a), int(b)) for a, b in zip(w, c)}
            row.append(GraphSnapshot(s, t, frozenset(edges)))
            z_row.append(z)
            smp_row.append(np.stack([w, c], axis=1).astype(np.int64))
        grid.append(tuple(row))
        zs.append(z_row)
        samples.append(smp_row)
    corpus = DynamicGraphCorpus(S=cfg.S, T=cfg.T, V=cfg.V, snapshots=tuple(grid))
    return corpus, LatentState(alpha, phi, psi, zs, samples)


def planted_blocks(V: int, K: int) -> np.ndarray:
    """Contiguous, near-equal node blocks: block of node n is floor(n K / V)."""
    return (np.arange(V) * K) // V


def planted_params(V: int, K: int, dims: EmbeddingDims, seed: int = 0,
                   offset: float = 6.0, gain: float = 2.0) -> tuple[ParamStore, np.ndarray]:
    """Generative parameters with a planted block structure.

    Community k owns a unit direction ``d_k``. Nodes of block k and community k start
    their chains at ``alpha + offset * d_k``; both MLPs score by ``gain * d_k``, so a
    source node in block k picks community k and community k emits block-k targets.
    """
    if K > V:
        raise ValueError(f"cannot plant {K} blocks on {V} nodes")
    H = dims.H
    rng = np.random.default_rng([seed, 7919])
    if H >= K:
        q, _ = np.linalg.qr(rng.standard_normal((H, K)))
        directions = q.T
    else:
        d = rng.standard_normal((K, H))
        directions = d / np.linalg.norm(d, axis=1, keepdims=True)
    blocks = planted_blocks(V, K)
    store = ParamStore(seed)
    store.add("theta_z.W0", gain * directions)
    store.add_zeros("theta_z.b0", (K,))
    store.add("theta_c.W0", gain * directions[blocks])
    store.add_zeros("theta_c.b0", (V,))
    store.add("node_base", offset * directions[blocks])
    store.add("community_base", offset * directions)
    return store, blocks


def planted_corpus(S: int, T: int, V: int, K: int, E: int, seed: int,
                   dims: EmbeddingDims | None = None
                   ) -> tuple[DynamicGraphCorpus, LatentState, ParamStore, np.ndarray]:
    """Ancestral draw from planted-block parameters; the corpus carries the blocks as its partition."""
    dims = dims or EmbeddingDims()
    cfg = SynthConfig(S, T, V, K, E, dims)
    store, blocks = planted_params(V, K, dims, seed)
    corpus, latents = ancestral_sample(cfg, store, seed)
    partition = {n: f"block_{int(b)}" for n, b in enumerate(blocks)}
    corpus = DynamicGraphCorpus(S=corpus.S, T=corpus.T, V=corpus.V, snapshots=corpus.snapshots,
                                partition=partition)
    return corpus, latents, store, blocks


# joint density ----------------------------------------------------------------


def normal_logpdf(x: np.ndarray, mean: np.ndarray, sigma: float) -> float:
    d = (np.asarray(x) - np.asarray(mean)) / sigma
    return float(np.sum(-0.5 * d * d - math.log(sigma) - 0.5 * LOG_2PI))


def log_prob_alpha(alpha: np.ndarray) -> float:
    return normal_logpdf(alpha, 0.0, 1.0)


def log_prob_chain(traj: np.ndarray, start: np.ndarray, sigma: float) -> float:
    """Sum of Gaussian random-walk transition log-densities for a (T, n, H) trajectory."""
    prev = np.concatenate([start[None], traj[:-1]])
    return normal_logpdf(traj, prev, sigma)


def log_prob_edges(samples: np.ndarray, z: np.ndarray, phi_t: np.ndarray, psi_t: np.ndarray,
                   store: ParamStore) -> tuple[float, float]:
    """(sum log p(z | phi_w), sum log p(c | psi_z)) for one snapshot."""
    if samples.shape[0] != z.shape[0]:
        raise ValueError("community assignments are not aligned with samples")
    if samples.shape[0] == 0:
        return 0.0, 0.0
    w, c = samples[:, 0], samples[:, 1]
    pi = community_probs(phi_t[w], store)
    P = node_probs(psi_t, store)
    return float(np.log(pi[np.arange(len(z)), z]).sum()), float(np.log(P[z, c]).sum())


def joint_log_prob(corpus: DynamicGraphCorpus, latents: LatentState, store: ParamStore,
                   hyper: PriorHyper) -> float:
    S, T, V = corpus.S, corpus.T, corpus.V
    if latents.phi.shape[:3] != (S, T, V) or latents.psi.shape[:2] != (S, T) or latents.alpha.shape[0] != S:
        raise ValueError("latent shapes do not match the corpus")
    node_base = store["node_base"].data
    comm_base = store["community_base"].data
    total = 0.0
    for s in range(S):
        a = latents.alpha[s]
        total += log_prob_alpha(a)
        total += log_prob_chain(latents.phi[s], a + node_base, hyper.sigma_phi)
        total += log_prob_chain(latents.psi[s], a + comm_base, hyper.sigma_psi)
        for t in range(T):
            lz, lc = log_prob_edges(latents.samples_for(corpus, s, t), latents.z[s][t],
                                    latents.phi[s, t], latents.psi[s, t], store)
            total += lz + lc
    return total
