"""ELBO objective, Adam with decoupled weight decay, and the early-stopped training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .config import TrainingConfig
from .graph import DynamicGraphCorpus, directed_expansion, split_temporal
from .inference import FAMILIES, Noise, build_store, q_z_logits, rollout
from .generative import mlp

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "recon", "kl_z", "kl_alpha", "kl_phi", "kl_psi", "elbo", "val_nll", "tau")


class TrainingError(RuntimeError):
    pass


# KL terms -------------------------------------------------------------------


def kl_normal_diag(mu_q, sigma_q, mu_p, sigma_p) -> Tensor:
    """KL(N(mu_q, sigma_q^2) || N(mu_p, sigma_p^2)) summed over all entries.

    The prior scale ``sigma_p`` is a fixed hyperparameter and is not differentiated.
    """
    mu_q, sigma_q, mu_p = (ad.as_tensor(x) for x in (mu_q, sigma_q, mu_p))
    sigma_p = np.asarray(sigma_p.data if isinstance(sigma_p, Tensor) else sigma_p, dtype=np.float64)
    if np.any(sigma_q.data <= 0) or np.any(sigma_p <= 0):
        raise ValueError("kl_normal_diag: standard deviations must be positive")
    diff = mu_q - mu_p
    terms = (np.log(sigma_p) - ad.log(sigma_q)) + (ad.square(sigma_q) + ad.square(diff)) * (0.5 / sigma_p ** 2) - 0.5
    return ad.sum(terms)


def kl_categorical(q, p) -> float:
    q = np.asarray(q, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if np.any((p <= 0) & (q > 0)):
        raise ValueError("kl_categorical: p has zero mass where q is positive")
    mask = q > 0
    # clamp rounding noise: near-identical inputs can sum to -1e-16
    return max(0.0, float(np.sum(q[mask] * (np.log(q[mask]) - np.log(p[mask])))))


def kl_weight(epoch: int, cfg: TrainingConfig) -> float:
    """Linear KL warm-up: 0 at epoch 1, 1 from epoch ``kl_warmup_epochs + 1`` on."""
    if cfg.kl_warmup_epochs == 0:
        return 1.0
    return min(1.0, (epoch - 1) / cfg.kl_warmup_epochs)


def temperature(step: int, cfg: TrainingConfig | None = None) -> float:
    cfg = cfg or TrainingConfig()
    return max(cfg.tau_min, cfg.tau_max * math.exp(-cfg.tau_rate * step))


# objective ----------------------------------------------------------------------


@dataclass
class SubjectData:
    """Directed samples of one subject's snapshots, flattened with their time index."""
    t: np.ndarray
    w: np.ndarray
    c: np.ndarray
    n_snapshots: int

    @classmethod
    def from_corpus(cls, corpus: DynamicGraphCorpus, s: int, times: range) -> "SubjectData":
        ts, ws, cs = [], [], []
        for i, t in enumerate(times):
            d = directed_expansion(corpus.snapshot(s, t))
            ts.append(np.full(len(d), i, dtype=np.int64))
            ws.append(d[:, 0])
            cs.append(d[:, 1])
        return cls(np.concatenate(ts), np.concatenate(ws), np.concatenate(cs), len(times))

    @property
    def M(self) -> int:
        return int(self.t.size)


@dataclass
class ElboBreakdown:
    recon: Tensor
    kl_z: Tensor
    kl_alpha: Tensor
    kl_phi: Tensor
    kl_psi: Tensor
    total: Tensor

    def values(self) -> dict[str, float]:
        return {k: getattr(self, k).item() for k in ("recon", "kl_z", "kl_alpha", "kl_phi", "kl_psi", "total")}


def elbo(store: ParamStore, data: SubjectData, subject: int, cfg: TrainingConfig, noise: Noise,
         tau: float, beta: float = 1.0) -> ElboBreakdown:
    """Single-sample ELBO of one subject over the snapshots in ``data``.

    ``beta`` scales every KL term in ``total`` (the breakdown keeps them unscaled).
    """
    n = data.n_snapshots
    traj = rollout(store, subject, n, noise)
    sig = {"phi": cfg.sigma_phi, "psi": cfg.sigma_psi}

    kl_alpha = kl_normal_diag(traj.alpha_mu, traj.alpha_sigma, 0.0, 1.0)
    kl_chain = {}
    for fam in FAMILIES:
        total = None
        prior_mean = traj.start[fam]
        for t in range(n):
            term = kl_normal_diag(traj.mus[fam][t], traj.sigmas[fam][t], prior_mean, sig[fam])
            total = term if total is None else total + term
            prior_mean = traj.samples[fam][t]
        kl_chain[fam] = total

    if data.M == 0:
        zero = ad.Tensor(0.0)
        recon, kl_z = zero, zero
    else:
        phi = ad.stack(traj.samples["phi"])        # (n, V, H)
        psi = ad.stack(traj.samples["psi"])        # (n, K, H)
        phi_w = phi[data.t, data.w]
        phi_c = phi[data.t, data.c]
        log_p_z = ad.log_softmax(mlp(phi_w, store, "theta_z"))
        log_q_z = ad.log_softmax(q_z_logits(phi_w, phi_c, store))
        q_z = ad.exp(log_q_z)
        kl_z = ad.sum(q_z * (log_q_z - log_p_z))
        log_y = ad.gumbel_log_softmax(log_q_z, tau, noise.gumbel_u)
        log_nodes = ad.log_softmax(mlp(psi, store, "theta_c"))   # (n, K, V)
        log_p_c = log_nodes[data.t, :, data.c]                    # (M, K)
        recon = ad.sum(ad.logsumexp(log_y + log_p_c))

    kl = kl_z + kl_alpha + kl_chain["phi"] + kl_chain["psi"]
    total = recon - (kl * beta if beta != 1.0 else kl)
    return ElboBreakdown(recon, kl_z, kl_alpha, kl_chain["phi"], kl_chain["psi"], total)


# optimizer ----------------------------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def optimizer_step(store: ParamStore, grads: list[np.ndarray], state: AdamState, lr: float,
                   weight_decay: float = 0.0, beta1: float = 0.9, beta2: float = 0.999,
                   eps: float = 1e-8) -> AdamState:
    """Adam on the given (ascent-negated) gradients, then decoupled weight decay."""
    params = [p for _, p in store.items()]
    if len(grads) != len(params):
        raise ValueError("gradients are not aligned with the parameter store")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.step += 1
    bc1 = 1.0 - beta1 ** state.step
    bc2 = 1.0 - beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        if weight_decay:
            p.data -= lr * weight_decay * p.data
    return state


def clip_global_norm(grads: list[np.ndarray], max_norm: float) -> list[np.ndarray]:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if norm > max_norm:
        scale = max_norm / norm
        return [g * scale for g in grads]
    return grads


# training loop ------------------------------------------------------------------


@dataclass
class TrainResult:
    store: ParamStore
    log: list[dict]
    best_epoch: int
    best_val_nll: float
    epochs_run: int


def checkpoint_config(cfg: TrainingConfig, corpus: DynamicGraphCorpus, best_epoch: int | None = None) -> dict:
    out = cfg.to_dict()
    out["corpus"] = {"S": corpus.S, "T": corpus.T, "V": corpus.V}
    if best_epoch is not None:
        out["best_epoch"] = best_epoch
    return out


def train(corpus: DynamicGraphCorpus, cfg: TrainingConfig, out_dir: str | Path | None = None,
          val_nll_fn=None) -> TrainResult:
    """Fit all parameters; keeps the parameters with the lowest validation NLL.

    Early stopping cannot fire before the KL warm-up has finished.

    ``val_nll_fn(store) -> float`` overrides the validation metric (used to test the
    stopping rule in isolation).
    """
    from .evaluate import ModelPredictor, nll_over

    split = split_temporal(corpus, cfg.fractions)
    data = [SubjectData.from_corpus(corpus, s, split.train) for s in range(corpus.S)]
    store = build_store(corpus.S, corpus.V, cfg)
    H = cfg.dims.H
    rng = np.random.default_rng([cfg.seed, 1])
    adam = AdamState()

    if val_nll_fn is None:
        def val_nll_fn(st: ParamStore) -> float:
            return nll_over(ModelPredictor(st, split.val.stop), corpus, split.val)

    best_val, best_epoch, best_values = math.inf, 0, store.copy_values()
    rows: list[dict] = []
    since = 0
    epoch = 0
    for epoch in range(1, cfg.max_epochs + 1):
        sums = dict.fromkeys(("recon", "kl_z", "kl_alpha", "kl_phi", "kl_psi", "total"), 0.0)
        beta = kl_weight(epoch, cfg)
        for s in range(corpus.S):
            tau = temperature(adam.step, cfg)
            noise = Noise.draw(rng, data[s].n_snapshots, corpus.V, cfg.K, H, data[s].M)
            store.zero_grad()
            br = elbo(store, data[s], s, cfg, noise, tau, beta)
            vals = br.values()
            if not all(math.isfinite(v) for v in vals.values()):
                raise TrainingError(f"non-finite ELBO at epoch {epoch}, subject {s}: {vals}")
            br.total.backward(-1.0)  # minimise -ELBO
            grads = clip_global_norm(store.grads(), cfg.clip_norm)
            optimizer_step(store, grads, adam, cfg.learning_rate, cfg.weight_decay)
            for k, v in vals.items():
                sums[k] += v
        val = float(val_nll_fn(store))
        rows.append({
            "epoch": epoch, "recon": sums["recon"], "kl_z": sums["kl_z"], "kl_alpha": sums["kl_alpha"],
            "kl_phi": sums["kl_phi"], "kl_psi": sums["kl_psi"],
            "elbo": sums["recon"] - sums["kl_z"] - sums["kl_alpha"] - sums["kl_phi"] - sums["kl_psi"],
            "val_nll": val, "tau": temperature(adam.step, cfg),
        })
        log.debug("epoch %d elbo %.3f val_nll %.5f", epoch, sums["total"], val)
        if val < best_val:
            best_val, best_epoch, best_values = val, epoch, store.copy_values()
            since = 0
        else:
            since += 1
            if since >= cfg.patience and epoch > cfg.kl_warmup_epochs:
                break

    store.load_values(best_values)
    result = TrainResult(store, rows, best_epoch, best_val, epoch)
    if out_dir is not None:
        save_run(result, cfg, corpus, out_dir)
    return result


def save_run(result: TrainResult, cfg: TrainingConfig, corpus: DynamicGraphCorpus, out_dir: str | Path) -> None:
    out_dir = Path(out_dir)
    result.store.save(out_dir, checkpoint_config(cfg, corpus, result.best_epoch))
    write_log(result.log, out_dir / "log.csv")


def write_log(rows: list[dict], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(float(v)) if k != "epoch" else v) for k, v in row.items()})
