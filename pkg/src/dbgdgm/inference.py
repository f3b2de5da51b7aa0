"""Structured variational posterior.

Per-subject Gaussian over the graph embedding, GRU-driven Gaussian transitions
for node and community chains, and a community-assignment posterior that reuses
the generative ``theta_z`` network.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .config import EmbeddingDims, TrainingConfig
from .generative import add_generative_params, mlp

FAMILIES = ("phi", "psi")
# q(alpha) starts nearly deterministic; a wide start shifts every node by the same
# random vector and drowns the per-node signal early in training
ALPHA_SIGMA_INIT = 0.01


def inverse_softplus(y: float) -> float:
    return float(y + np.log(-np.expm1(-y)))


def add_variational_params(store: ParamStore, S: int, dims: EmbeddingDims,
                           sigma_init: dict[str, float] | None = None) -> None:
    """``sigma_init`` maps each family to the scale its transition posterior starts at.

    Both heads start with zero weights, so before training q is the prior random walk.
    """
    H = dims.H
    sigma_init = sigma_init or {}
    store.add_zeros("alpha.mu", (S, H))
    store.add("alpha.raw_sigma", np.full((S, H), inverse_softplus(ALPHA_SIGMA_INIT - ad.SIGMA_FLOOR)))
    for fam in FAMILIES:
        store.add_zeros(f"init_{fam}.W", (H, H))
        store.add_zeros(f"init_{fam}.b", (H,))
        for gate in "ruh":
            store.add_weight(f"gru_{fam}.W_{gate}", (H, H))
            store.add_weight(f"gru_{fam}.U_{gate}", (H, H))
            store.add_zeros(f"gru_{fam}.b_{gate}", (H,))
        store.add_zeros(f"head_{fam}_mu.W", (H, H))
        store.add_zeros(f"head_{fam}_mu.b", (H,))
        store.add_zeros(f"head_{fam}_sigma.W", (H, H))
        target = max(sigma_init.get(fam, 1.0) - ad.SIGMA_FLOOR, ad.SIGMA_FLOOR)
        store.add(f"head_{fam}_sigma.b", np.full(H, inverse_softplus(target)))


def attach_constants(store: ParamStore, cfg: TrainingConfig) -> ParamStore:
    """Record the transition step scales (the prior standard deviations) on ``store``."""
    store.constants["step_scale.phi"] = float(cfg.sigma_phi)
    store.constants["step_scale.psi"] = float(cfg.sigma_psi)
    return store


def build_store(S: int, V: int, cfg: TrainingConfig) -> ParamStore:
    """Fresh generative + variational parameters, seeded from ``cfg.seed``."""
    store = ParamStore(cfg.seed)
    add_generative_params(store, V, cfg.K, cfg.dims, cfg.layers_z, cfg.layers_c)
    add_variational_params(store, S, cfg.dims, {"phi": cfg.sigma_phi, "psi": cfg.sigma_psi})
    return attach_constants(store, cfg)


def gru_weights(store: ParamStore, fam: str) -> dict[str, Tensor]:
    return {name: store[f"gru_{fam}.{name}"] for name in ad.GRU_WEIGHTS}


def q_alpha(store: ParamStore, subject: int, eps) -> tuple[Tensor, Tensor, Tensor]:
    S = store["alpha.mu"].shape[0]
    if not 0 <= subject < S:
        raise IndexError(f"subject {subject} outside [0, {S})")
    mu = store["alpha.mu"][subject]
    sigma = ad.positive_sigma(store["alpha.raw_sigma"][subject])
    return ad.gaussian_reparam(mu, sigma, eps), mu, sigma


def init_states(store: ParamStore, alpha_sample) -> tuple[Tensor, Tensor]:
    """t=0 states of every node and community.

    Graph embedding plus a learned correction of it, plus the identity offset; with the
    correction at its zero init this equals the prior's t=0 mean.
    """
    alpha_sample = ad.as_tensor(alpha_sample)
    if alpha_sample.shape != (store["init_phi.W"].shape[1],):
        raise ValueError(f"alpha has shape {alpha_sample.shape}")
    phi0 = alpha_sample + ad.affine(alpha_sample, store["init_phi.W"], store["init_phi.b"]) + store["node_base"]
    psi0 = alpha_sample + ad.affine(alpha_sample, store["init_psi.W"], store["init_psi.b"]) + store["community_base"]
    return phi0, psi0


def q_step(prev_sample, hidden, store: ParamStore, fam: str, eps
           ) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    prev_sample = ad.as_tensor(prev_sample)
    new_hidden = ad.gru_cell(prev_sample, ad.as_tensor(hidden), gru_weights(store, fam))
    # residual mean: the head predicts the step away from the previous embedding,
    # in units of the prior step scale
    scale = store.constants.get(f"step_scale.{fam}", 1.0)
    step = ad.affine(new_hidden, store[f"head_{fam}_mu.W"], store[f"head_{fam}_mu.b"])
    mu = prev_sample + step * scale
    sigma = ad.positive_sigma(ad.affine(new_hidden, store[f"head_{fam}_sigma.W"], store[f"head_{fam}_sigma.b"]))
    return ad.gaussian_reparam(mu, sigma, eps), mu, sigma, new_hidden


def q_z_logits(phi_w, phi_c, store: ParamStore) -> Tensor:
    phi_w, phi_c = ad.as_tensor(phi_w), ad.as_tensor(phi_c)
    if phi_w.shape != phi_c.shape:
        raise ValueError(f"q_z: mismatched embedding shapes {phi_w.shape} and {phi_c.shape}")
    return mlp(phi_w * phi_c, store, "theta_z")


def q_z_probs(phi_w, phi_c, store: ParamStore) -> np.ndarray:
    with ad.no_grad():
        return ad.softmax(q_z_logits(phi_w, phi_c, store)).data


@dataclass
class Trajectory:
    """Posterior rollout of one subject over snapshots 0..n-1."""
    alpha: Tensor
    alpha_mu: Tensor
    alpha_sigma: Tensor
    start: dict[str, Tensor]          # t=0 prior means (alpha + identity offset)
    samples: dict[str, list[Tensor]]
    mus: dict[str, list[Tensor]]
    sigmas: dict[str, list[Tensor]]


@dataclass
class Noise:
    """Standard-normal and uniform draws for one subject's single-sample ELBO."""
    alpha: np.ndarray          # (H,)
    phi: np.ndarray            # (n, V, H)
    psi: np.ndarray            # (n, K, H)
    gumbel_u: np.ndarray       # (M, K)

    @classmethod
    def draw(cls, rng: np.random.Generator, n: int, V: int, K: int, H: int, M: int) -> "Noise":
        return cls(
            alpha=rng.standard_normal(H),
            phi=rng.standard_normal((n, V, H)),
            psi=rng.standard_normal((n, K, H)),
            gumbel_u=rng.uniform(np.finfo(float).tiny, 1.0, size=(M, K)),
        )

    @classmethod
    def zeros(cls, n: int, V: int, K: int, H: int, M: int = 0) -> "Noise":
        """Zero Gaussian noise; Gumbel draws at u = 1/2."""
        return cls(np.zeros(H), np.zeros((n, V, H)), np.zeros((n, K, H)), np.full((M, K), 0.5))


def rollout(store: ParamStore, subject: int, n: int, noise: Noise) -> Trajectory:
    alpha, a_mu, a_sigma = q_alpha(store, subject, noise.alpha)
    phi0, psi0 = init_states(store, alpha)
    start = {"phi": alpha + store["node_base"], "psi": alpha + store["community_base"]}
    samples: dict[str, list[Tensor]] = {f: [] for f in FAMILIES}
    mus: dict[str, list[Tensor]] = {f: [] for f in FAMILIES}
    sigmas: dict[str, list[Tensor]] = {f: [] for f in FAMILIES}
    state = {"phi": (phi0, phi0), "psi": (psi0, psi0)}
    eps = {"phi": noise.phi, "psi": noise.psi}
    for t in range(n):
        for fam in FAMILIES:
            prev, hidden = state[fam]
            x, mu, sigma, hidden = q_step(prev, hidden, store, fam, eps[fam][t])
            samples[fam].append(x)
            mus[fam].append(mu)
            sigmas[fam].append(sigma)
            state[fam] = (x, hidden)
    return Trajectory(alpha, a_mu, a_sigma, start, samples, mus, sigmas)


def posterior_means(store: ParamStore, subject: int, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Noise-free (mean-propagated) node and community embeddings for snapshots 0..n-1."""
    V, H = store["node_base"].shape
    K = store["community_base"].shape[0]
    with ad.no_grad():
        traj = rollout(store, subject, n, Noise.zeros(n, V, K, H))
    phi = np.stack([m.data for m in traj.mus["phi"]])
    psi = np.stack([m.data for m in traj.mus["psi"]])
    return phi, psi


def rollout_posterior_means(store: ParamStore, subject: int, t_from: int, t_to: int
                            ) -> tuple[np.ndarray, np.ndarray]:
    """Mean-propagated embeddings for snapshots t_from..t_to inclusive.

    The chain is run noise-free from t=0, so the state entering ``t_from`` is the
    mean-propagated state at the end of the preceding (training) snapshots.
    """
    if not 1 <= t_from <= t_to:
        raise ValueError(f"invalid rollout range [{t_from}, {t_to}]")
    phi, psi = posterior_means(store, subject, t_to + 1)
    return phi[t_from:], psi[t_from:]
