"""Timeseries -> dynamic graph corpus via non-overlapping windowed Pearson correlation."""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .graph import DynamicGraphCorpus, GraphSnapshot, write_corpus

log = logging.getLogger(__name__)


class PipelineError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    window: int = 30
    threshold_pct: float = 5.0

    def __post_init__(self):
        if self.window < 2:
            raise PipelineError(f"window must be >= 2, got {self.window}")
        if not 0 < self.threshold_pct < 100:
            raise PipelineError(f"threshold_pct must lie in (0, 100), got {self.threshold_pct}")


def window_count(timepoints: int, window: int) -> int:
    if timepoints < window:
        raise PipelineError(f"{timepoints} timepoints are fewer than the window length {window}")
    return timepoints // window


def pearson(window: np.ndarray) -> tuple[np.ndarray, list[int]]:
    """Correlation matrix of the columns of a (W, V) window.

    Zero-variance columns get 0 off-diagonal correlation; their indices are returned.
    """
    x = np.asarray(window, dtype=np.float64)
    x = x - x.mean(axis=0)
    norms = np.sqrt((x * x).sum(axis=0))
    flat = norms <= 1e-12 * max(1.0, float(norms.max(initial=0.0)))
    safe = np.where(flat, 1.0, norms)
    z = x / safe
    z[:, flat] = 0.0
    corr = z.T @ z
    corr = np.clip(0.5 * (corr + corr.T), -1.0, 1.0)
    np.fill_diagonal(corr, 1.0)
    return corr, [int(i) for i in np.flatnonzero(flat)]


def edge_budget(V: int, threshold_pct: float) -> int:
    # round() guards against 5/100 style binary-fraction error before flooring
    return math.floor(round(V * (V - 1) / 2 * threshold_pct / 100.0, 9))


def threshold_top_pct(corr: np.ndarray, threshold_pct: float) -> list[tuple[int, int]]:
    """The m largest strictly-lower-triangle entries as canonical edges.

    Ties at the cut are broken by ascending (row, col).
    """
    corr = np.asarray(corr)
    V = corr.shape[0]
    m = edge_budget(V, threshold_pct)
    if m == 0:
        raise PipelineError(f"threshold {threshold_pct}% keeps no edges for V={V}")
    rows, cols = np.tril_indices(V, k=-1)
    vals = corr[rows, cols]
    order = np.lexsort((cols, rows, -vals))[:m]
    return sorted((int(cols[i]), int(rows[i])) for i in order)


def _subject_snapshots(s: int, data: np.ndarray, T: int, cfg: PipelineConfig):
    snaps, warnings = [], []
    W = cfg.window
    for t in range(T):
        corr, flat = pearson(data[t * W:(t + 1) * W])
        if flat:
            warnings.append({"subject": s, "window": t, "columns": flat})
        snaps.append(GraphSnapshot(s, t, frozenset(threshold_top_pct(corr, cfg.threshold_pct))))
    return tuple(snaps), warnings


def build_corpus(series: list[np.ndarray], cfg: PipelineConfig = PipelineConfig(), threads: int = 1
                 ) -> tuple[DynamicGraphCorpus, dict]:
    """One snapshot per window; T is the smallest window count over subjects."""
    if not series:
        raise PipelineError("no subjects given")
    series = [np.asarray(x, dtype=np.float64) for x in series]
    V = series[0].shape[1]
    for s, x in enumerate(series):
        if x.ndim != 2 or x.shape[1] != V:
            raise PipelineError(f"subject {s} has shape {x.shape}, expected (timepoints, {V})")
        if not np.all(np.isfinite(x)):
            raise PipelineError(f"subject {s} has non-finite values")
    T = min(window_count(x.shape[0], cfg.window) for x in series)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        results = list(pool.map(lambda a: _subject_snapshots(a[0], a[1], T, cfg), enumerate(series)))
    grid = tuple(r[0] for r in results)
    warnings = [w for r in results for w in r[1]]
    if warnings:
        log.warning("%d windows contain zero-variance columns", len(warnings))
    corpus = DynamicGraphCorpus(S=len(series), T=T, V=V, snapshots=grid)
    report = {
        "W": cfg.window,
        "epsilon": cfg.threshold_pct,
        "m": edge_budget(V, cfg.threshold_pct),
        "T": T,
        "zero_variance_warnings": warnings,
    }
    return corpus, report


def read_timeseries(path: str | Path) -> np.ndarray:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    rows = [ln for ln in lines if ln.strip() and not ln.lstrip().startswith("#")]
    if not rows:
        raise PipelineError(f"{path} holds no data rows")
    try:
        data = np.array([[float(v) for v in ln.split(",")] for ln in rows])
    except ValueError as exc:
        raise PipelineError(f"{path}: {exc}") from exc
    return data


def load_timeseries_dir(directory: str | Path) -> list[np.ndarray]:
    directory = Path(directory)
    base = directory / "timeseries" if (directory / "timeseries").is_dir() else directory
    if not base.is_dir():
        raise PipelineError(f"input directory not found: {directory}")
    files = []
    s = 0
    while (base / f"subject_{s}.csv").is_file():
        files.append(base / f"subject_{s}.csv")
        s += 1
    if not files:
        raise PipelineError(f"no subject_<s>.csv files in {base}")
    return [read_timeseries(f) for f in files]


def write_timeseries(data: np.ndarray, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in np.asarray(data):
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def prepare(input_dir: str | Path, out_dir: str | Path, cfg: PipelineConfig = PipelineConfig(),
            threads: int = 1) -> tuple[DynamicGraphCorpus, dict]:
    corpus, report = build_corpus(load_timeseries_dir(input_dir), cfg, threads)
    write_corpus(corpus, out_dir)
    (Path(out_dir) / "pipeline_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return corpus, report
