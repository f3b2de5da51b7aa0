"""Held-out NLL, degree reconstruction, link prediction, CMN baseline, community analysis."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np
from scipy.stats import rankdata

from .autodiff import ParamStore
from .config import TrainingConfig
from .graph import DynamicGraphCorpus, adjacency, directed_expansion, split_temporal
from .generative import community_probs, node_probs
from .inference import attach_constants, posterior_means


class EvalError(ValueError):
    pass


class Predictor(Protocol):
    def target_probs(self, s: int, t: int) -> np.ndarray:
        """(V, V) matrix whose row w is p(. | w) at snapshot t of subject s."""


# model checkpoint --------------------------------------------------------------


@dataclass
class Checkpoint:
    store: ParamStore
    cfg: TrainingConfig
    corpus_shape: dict
    best_epoch: int | None = None

    @classmethod
    def load(cls, directory: str | Path) -> "Checkpoint":
        import json
        directory = Path(directory)
        for name in ("params.json", "params.bin", "config.json"):
            if not (directory / name).is_file():
                raise EvalError(f"checkpoint is missing {directory / name}")
        raw = json.loads((directory / "config.json").read_text())
        shape = raw.pop("corpus", None)
        best = raw.pop("best_epoch", None)
        cfg = TrainingConfig.from_dict(raw)
        store = attach_constants(ParamStore.load(directory, cfg.seed), cfg)
        return cls(store, cfg, shape, best)

    def check_corpus(self, corpus: DynamicGraphCorpus) -> None:
        want = {"S": corpus.S, "T": corpus.T, "V": corpus.V}
        if self.corpus_shape is not None and self.corpus_shape != want:
            raise EvalError(f"checkpoint was trained on a corpus of shape {self.corpus_shape}, got {want}")
        V = self.store["node_base"].shape[0]
        if V != corpus.V:
            raise EvalError(f"checkpoint has V={V}, corpus has V={corpus.V}")


class ModelPredictor:
    """Edge distributions from noise-free posterior rollouts of every subject."""

    def __init__(self, store: ParamStore, n_times: int):
        self.store = store
        self.n_times = n_times
        self._means: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def means(self, s: int) -> tuple[np.ndarray, np.ndarray]:
        if s not in self._means:
            self._means[s] = posterior_means(self.store, s, self.n_times)
        return self._means[s]

    def community_probs(self, s: int, t: int) -> np.ndarray:
        return community_probs(self.means(s)[0][t], self.store)

    def node_probs(self, s: int, t: int) -> np.ndarray:
        return node_probs(self.means(s)[1][t], self.store)

    def target_probs(self, s: int, t: int) -> np.ndarray:
        if t >= self.n_times:
            raise EvalError(f"snapshot {t} beyond rollout length {self.n_times}")
        return self.community_probs(s, t) @ self.node_probs(s, t)


# CMN heuristic ------------------------------------------------------------------


def jaccard_matrix(A: np.ndarray) -> np.ndarray:
    """Pairwise Jaccard index of neighbourhoods; 0 where both neighbourhoods are empty."""
    A = A.astype(np.float64)
    inter = A @ A.T
    deg = A.sum(axis=1)
    union = deg[:, None] + deg[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        J = np.where(union > 0, inter / union, 0.0)
    return J


def cmn_scores(corpus: DynamicGraphCorpus, s: int, t: int) -> np.ndarray:
    """Jaccard scores at snapshot t from neighbourhoods at t-1 (diagonal kept)."""
    if t < 1:
        raise EvalError("CMN needs a previous snapshot (t >= 1)")
    return jaccard_matrix(adjacency(corpus.snapshot(s, t - 1), corpus.V))


class CMNPredictor:
    """Per-source categorical over other nodes, proportional to previous-snapshot Jaccard.

    Rows with no positive score fall back to uniform. ``smoothing`` mixes in a
    uniform distribution so unseen targets keep finite log-probability.
    """

    def __init__(self, corpus: DynamicGraphCorpus, smoothing: float = 0.01):
        if not 0 <= smoothing < 1:
            raise ValueError("smoothing must lie in [0, 1)")
        self.corpus = corpus
        self.smoothing = smoothing

    def target_probs(self, s: int, t: int) -> np.ndarray:
        V = self.corpus.V
        J = cmn_scores(self.corpus, s, t)
        np.fill_diagonal(J, 0.0)
        uniform = np.full((V, V), 1.0 / (V - 1))
        np.fill_diagonal(uniform, 0.0)
        rows = J.sum(axis=1, keepdims=True)
        P = np.where(rows > 0, J / np.where(rows > 0, rows, 1.0), uniform)
        return (1.0 - self.smoothing) * P + self.smoothing * uniform


# metrics ------------------------------------------------------------------------


def nll_over(predictor: Predictor, corpus: DynamicGraphCorpus, times) -> float:
    """Mean -log p(c | w) over every directed sample of the given snapshots."""
    total, count = 0.0, 0
    for s in range(corpus.S):
        for t in times:
            d = directed_expansion(corpus.snapshot(s, t))
            if len(d) == 0:
                continue
            P = predictor.target_probs(s, t)
            total -= float(np.log(P[d[:, 0], d[:, 1]]).sum())
            count += len(d)
    if count == 0:
        raise EvalError("no edges to score")
    return total / count


def degree_vector(samples: np.ndarray, V: int) -> np.ndarray:
    """Endpoint incidence counts over a directed sample list, normalized to sum to 1."""
    M = len(samples)
    if M == 0:
        return np.zeros(V)
    counts = np.bincount(samples[:, 0], minlength=V) + np.bincount(samples[:, 1], minlength=V)
    return counts / (2.0 * M)


def degree_mse(predictor: Predictor, corpus: DynamicGraphCorpus, times, seed: int,
               n_draws: int = 10) -> float:
    """Keep each observed source, redraw its target from the predictor, compare degrees."""
    rng = np.random.default_rng([seed, 2])
    per_draw = []
    for _ in range(n_draws):
        errs = []
        for s in range(corpus.S):
            for t in times:
                d = directed_expansion(corpus.snapshot(s, t))
                if len(d) == 0:
                    continue
                P = predictor.target_probs(s, t)[d[:, 0]]
                cdf = np.cumsum(P, axis=1)
                cdf[:, -1] = 1.0
                c = (rng.random(len(d))[:, None] > cdf).sum(axis=1)
                recon = np.stack([d[:, 0], c], axis=1)
                diff = degree_vector(d, corpus.V) - degree_vector(recon, corpus.V)
                errs.append(float(np.mean(diff * diff)))
        per_draw.append(np.mean(errs))
    return float(np.mean(per_draw))


def auroc(pos, neg) -> float:
    """Probability a positive outranks a negative; ties count one half (midranks)."""
    pos = np.asarray(pos, dtype=np.float64)
    neg = np.asarray(neg, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise EvalError("AUROC needs positives and negatives")
    ranks = rankdata(np.concatenate([pos, neg]))
    n_p, n_n = pos.size, neg.size
    return float((ranks[:n_p].sum() - n_p * (n_p + 1) / 2.0) / (n_p * n_n))


def average_precision(pos, neg) -> float:
    """Step-interpolated area under precision-recall, one step per distinct score."""
    scores = np.concatenate([np.asarray(pos, float), np.asarray(neg, float)])
    labels = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))])
    if labels.sum() == 0:
        raise EvalError("AP needs positives")
    order = np.argsort(-scores, kind="mergesort")
    scores, labels = scores[order], labels[order]
    tp = np.cumsum(labels)
    fp = np.cumsum(1.0 - labels)
    # last index of each run of equal scores
    ends = np.r_[np.nonzero(np.diff(scores))[0], scores.size - 1]
    precision = tp[ends] / (tp[ends] + fp[ends])
    recall = tp[ends] / labels.sum()
    prev = np.r_[0.0, recall[:-1]]
    return float(np.sum((recall - prev) * precision))


def sample_negatives(A: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` distinct non-adjacent pairs (u < v), uniformly without replacement."""
    iu, ju = np.triu_indices(A.shape[0], k=1)
    free = ~A[iu, ju]
    if free.sum() < n:
        raise EvalError(f"snapshot too dense: {int(free.sum())} non-edges for {n} negatives")
    idx = rng.choice(np.flatnonzero(free), size=n, replace=False)
    idx.sort()
    return np.stack([iu[idx], ju[idx]], axis=1)


def link_scores(P: np.ndarray, pairs: np.ndarray) -> np.ndarray:
    u, v = pairs[:, 0], pairs[:, 1]
    return 0.5 * (P[u, v] + P[v, u])


def link_prediction(predictor: Predictor, corpus: DynamicGraphCorpus, times, seed: int
                    ) -> tuple[float, float, list[dict]]:
    """Pooled AUROC/AP over all (subject, snapshot) pairs plus a per-snapshot breakdown."""
    rng = np.random.default_rng([seed, 3])
    all_pos, all_neg, per = [], [], []
    for s in range(corpus.S):
        for t in times:
            snap = corpus.snapshot(s, t)
            if not snap.edges:
                continue
            pos_pairs = np.array(snap.sorted_edges(), dtype=np.int64)
            neg_pairs = sample_negatives(adjacency(snap, corpus.V), len(pos_pairs), rng)
            P = predictor.target_probs(s, t)
            pos, neg = link_scores(P, pos_pairs), link_scores(P, neg_pairs)
            all_pos.append(pos)
            all_neg.append(neg)
            per.append({"subject": s, "time": t, "auroc": auroc(pos, neg), "ap": average_precision(pos, neg)})
    pos, neg = np.concatenate(all_pos), np.concatenate(all_neg)
    return auroc(pos, neg), average_precision(pos, neg), per


# communities ---------------------------------------------------------------------


def nmi(assignment, truth) -> float:
    """Normalized mutual information, arithmetic-mean normalization."""
    a = np.asarray(assignment)
    b = np.asarray(truth)
    if a.size == 0 or a.shape != b.shape:
        raise EvalError("nmi needs two non-empty labelings of the same nodes")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    n = a.size
    joint = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(joint, (ai, bi), 1.0)
    joint /= n
    pa, pb = joint.sum(axis=1), joint.sum(axis=0)

    def entropy(p):
        p = p[p > 0]
        return float(-(p * np.log(p)).sum())

    ha, hb = entropy(pa), entropy(pb)
    if ha == 0.0 and hb == 0.0:
        return 1.0
    if ha == 0.0 or hb == 0.0:
        return 0.0
    nz = joint > 0
    mi = float((joint[nz] * np.log(joint[nz] / np.outer(pa, pb)[nz])).sum())
    return float(min(1.0, max(0.0, 2.0 * mi / (ha + hb))))


def top_count(fraction: float, V: int) -> int:
    return max(1, math.ceil(round(fraction * V, 9)))


@dataclass
class CommunityReport:
    node_distributions: np.ndarray          # (K, V) averaged node probabilities
    top_nodes: list[list[int]]
    overlaps: list[dict[str, float]] | None
    assignment: np.ndarray                  # (V,) hard community per node

    def to_dict(self) -> dict:
        out = {
            "top_nodes": self.top_nodes,
            "top_node_probs": [[float(self.node_distributions[k, n]) for n in nodes]
                               for k, nodes in enumerate(self.top_nodes)],
            "assignment": [int(x) for x in self.assignment],
        }
        if self.overlaps is not None:
            out["overlaps"] = self.overlaps
        return out


def community_report_from(predictor: ModelPredictor, corpus: DynamicGraphCorpus, times,
                          fraction: float = 0.10) -> CommunityReport:
    node_avg, comm_avg, n = 0.0, 0.0, 0
    for s in range(corpus.S):
        for t in times:
            node_avg = node_avg + predictor.node_probs(s, t)
            comm_avg = comm_avg + predictor.community_probs(s, t)
            n += 1
    node_avg = node_avg / n
    comm_avg = comm_avg / n
    m = top_count(fraction, corpus.V)
    top = []
    for k in range(node_avg.shape[0]):
        order = np.lexsort((np.arange(corpus.V), -node_avg[k]))
        top.append([int(x) for x in order[:m]])
    overlaps = None
    if corpus.partition:
        labels = sorted(set(corpus.partition.values()))
        overlaps = []
        for nodes in top:
            hits = [corpus.partition.get(x) for x in nodes]
            overlaps.append({lab: hits.count(lab) / len(nodes) for lab in labels})
    return CommunityReport(node_avg, top, overlaps, np.argmax(comm_avg, axis=1))


def community_report(ckpt: Checkpoint, corpus: DynamicGraphCorpus, fraction: float = 0.10) -> CommunityReport:
    ckpt.check_corpus(corpus)
    split = split_temporal(corpus, ckpt.cfg.fractions)
    return community_report_from(ModelPredictor(ckpt.store, split.train.stop), corpus, split.train, fraction)


# checkpoint-level entry points ----------------------------------------------------


def _model_and_split(ckpt: Checkpoint, corpus: DynamicGraphCorpus):
    ckpt.check_corpus(corpus)
    split = split_temporal(corpus, ckpt.cfg.fractions)
    return ModelPredictor(ckpt.store, corpus.T), split


def test_nll(corpus: DynamicGraphCorpus, ckpt: Checkpoint) -> float:
    predictor, split = _model_and_split(ckpt, corpus)
    return nll_over(predictor, corpus, split.test)


def test_degree_mse(corpus: DynamicGraphCorpus, ckpt: Checkpoint, seed: int) -> float:
    predictor, split = _model_and_split(ckpt, corpus)
    return degree_mse(predictor, corpus, split.test, seed)


def test_link_prediction(corpus: DynamicGraphCorpus, ckpt: Checkpoint, seed: int):
    predictor, split = _model_and_split(ckpt, corpus)
    return link_prediction(predictor, corpus, split.test, seed)


TASKS = ("recon", "link", "communities")


def evaluate(predictor: Predictor, corpus: DynamicGraphCorpus, times, tasks, seed: int) -> dict:
    """Report dict for the requested tasks over the given snapshots."""
    times = list(times)
    report: dict = {"seed": seed, "tasks": list(tasks), "snapshots": times}
    if "recon" in tasks:
        report["nll"] = nll_over(predictor, corpus, times)
        report["degree_mse"] = degree_mse(predictor, corpus, times, seed)
    if "link" in tasks:
        a, p, per = link_prediction(predictor, corpus, times, seed)
        report["auroc"], report["ap"], report["per_snapshot"] = a, p, per
    return report


def export_embeddings(ckpt: Checkpoint, corpus: DynamicGraphCorpus, path: str | Path) -> np.ndarray:
    """Time-averaged community then node embedding means per subject, one CSV row each."""
    ckpt.check_corpus(corpus)
    split = split_temporal(corpus, ckpt.cfg.fractions)
    rows = []
    for s in range(corpus.S):
        phi, psi = posterior_means(ckpt.store, s, split.train.stop)
        rows.append(np.concatenate([psi.mean(axis=0).ravel(), phi.mean(axis=0).ravel()]))
    X = np.stack(rows)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["subject", "label"] + [f"feature_{i}" for i in range(X.shape[1])])
        for s in range(corpus.S):
            label = corpus.labels[s] if corpus.labels is not None else ""
            writer.writerow([s, label] + [repr(float(x)) for x in X[s]])
    return X


def read_embeddings(path: str | Path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        labels, rows = [], []
        for row in reader:
            labels.append(row[1])
            rows.append([float(x) for x in row[2:]])
    return labels, np.array(rows)

