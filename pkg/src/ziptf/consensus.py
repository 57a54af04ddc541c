"""Consensus meta-analysis over factorization restarts.

Pipeline: run M seeded restarts, aggregate and Frobenius-normalize one mode's
factor matrices, K-means the pooled columns, drop Local-Outlier-Factor
outliers, take entrywise cluster medians as consensus factors, then refit
once with the consensus as a deterministic initial guess for that mode.
"""

from __future__ import annotations

import json
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .als import AlsConfig, fit_nncp_als
from .cavi import CaviConfig, fit_bptf
from .cluster import kmeans_points, lof_scores, silhouette_score
from .errors import ConsensusDegeneracyError, DegenerateRunError
from .metrics import explained_variance
from .svi import Likelihood, SviConfig, fit_svi
from .tensor import FactorModel, Tensor, save_model, write_factor_csv

METHODS = ("ziptf", "gptf", "tgtf", "nncp-als", "bptf-cavi")

_SVI_KINDS = {"ziptf": "zip", "gptf": "gamma_poisson", "tgtf": "truncated_gaussian"}


def default_config(method: str):
    if method in _SVI_KINDS:
        return SviConfig()
    if method == "nncp-als":
        return AlsConfig()
    if method == "bptf-cavi":
        return CaviConfig()
    raise ValueError(f"unknown method {method!r}")


def fit_method(t: Tensor, rank: int, method: str, seed: int, cfg=None,
               init_mode=None, freeze_mode=False) -> FactorModel:
    """Run one factorization of the given method with the given seed."""
    if cfg is None:
        cfg = default_config(method)
    cfg = replace(cfg, seed=seed)
    if method in _SVI_KINDS:
        lik = Likelihood(kind=_SVI_KINDS[method], obs_std=cfg.obs_std)
        model, _ = fit_svi(t, rank, likelihood=lik, cfg=cfg,
                           init_mode=init_mode, freeze_mode=freeze_mode)
        return model
    if method == "bptf-cavi":
        model, _ = fit_bptf(t, rank, cfg)
        return model
    if method == "nncp-als":
        if init_mode is not None or freeze_mode:
            raise ValueError("nncp-als does not support consensus refits here")
        return fit_nncp_als(t, rank, cfg)
    raise ValueError(f"unknown method {method!r}")


def derive_seeds(base_seed: int, n: int):
    """Deterministic per-run seeds from (base_seed, run index)."""
    return [
        int(np.random.SeedSequence((base_seed, i)).generate_state(1)[0])
        for i in range(n)
    ]


def _fit_one(args):
    t, rank, method, seed, cfg = args
    return fit_method(t, rank, method, seed, cfg)


def run_restarts(t: Tensor, rank: int, method: str, n_runs: int,
                 base_seed: int, cfg=None, workers: int = 1, seeds=None):
    """M independent fits; results are ordered by run index regardless of
    execution order.  ``seeds`` overrides the derived per-run seeds."""
    if n_runs < 2:
        raise ValueError(f"need at least 2 restarts, got {n_runs}")
    if seeds is None:
        seeds = derive_seeds(base_seed, n_runs)
    if len(seeds) != n_runs:
        raise ValueError("seed list length does not match n_runs")
    jobs = [(t, rank, method, seeds[i], cfg) for i in range(n_runs)]
    try:
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                return list(pool.map(_fit_one, jobs))
        return [_fit_one(job) for job in jobs]
    except Exception as exc:
        index = getattr(exc, "run_index", None)
        raise DegenerateRunError(f"restart failed: {exc}") from exc


@dataclass
class AggregatedFactors:
    """Frobenius-normalized mode-k factor columns pooled across runs."""

    mode: int
    columns: np.ndarray  # I_k x (R * M)
    run_of_column: list

    @property
    def n_columns(self):
        return self.columns.shape[1]


def aggregate(models, mode: int) -> AggregatedFactors:
    """Concatenate each run's mode-k matrix divided by its Frobenius norm."""
    ranks = {m.rank for m in models}
    shapes = {m.shape for m in models}
    if len(ranks) != 1 or len(shapes) != 1:
        raise ValueError("models must share rank and shapes")
    blocks, run_of_column = [], []
    for i, m in enumerate(models):
        f = m.factors[mode]
        norm = float(np.linalg.norm(f))
        if norm == 0.0:
            raise DegenerateRunError(f"run {i} has an all-zero mode-{mode} factor")
        blocks.append(f / norm)
        run_of_column.extend([i] * m.rank)
    return AggregatedFactors(mode=mode, columns=np.hstack(blocks),
                             run_of_column=run_of_column)


def kmeans_columns(agg: AggregatedFactors, n_clusters: int, seed: int = 0):
    """Cluster aggregated columns (as points) into n_clusters groups."""
    return kmeans_points(agg.columns.T, n_clusters, seed=seed)


def lof_filter(agg: AggregatedFactors, labels, n_neighbors: int = 20,
               threshold: float = 1.5) -> np.ndarray:
    """Indices of columns whose LOF is at most the threshold."""
    n = agg.n_columns
    if n <= n_neighbors:
        warnings.warn(
            f"population {n} too small for {n_neighbors} neighbors; skipping LOF"
        )
        return np.arange(n)
    scores = lof_scores(agg.columns.T, n_neighbors)
    return np.flatnonzero(scores <= threshold)


def consensus_factors(agg: AggregatedFactors, labels, surviving) -> np.ndarray:
    """Entrywise medians per cluster, ordered by descending cluster size with
    ties broken by the lowest member column index."""
    labels = np.asarray(labels)
    surviving = np.asarray(surviving)
    clusters = np.unique(labels)
    members = {}
    for c in clusters:
        cols = surviving[labels[surviving] == c]
        if cols.size == 0:
            raise ConsensusDegeneracyError(
                f"cluster {int(c)} is empty after outlier filtering"
            )
        members[int(c)] = cols
    order = sorted(members, key=lambda c: (-len(members[c]), members[c].min()))
    return np.column_stack(
        [np.median(agg.columns[:, members[c]], axis=1) for c in order]
    )


@dataclass
class ConsensusResult:
    runs: list
    aggregated: AggregatedFactors
    labels: np.ndarray
    silhouette: float
    consensus_matrix: np.ndarray
    final_model: FactorModel
    removed_outliers: np.ndarray
    seeds: list = field(default_factory=list)
    mode: int = -1


def consensus_fit(t: Tensor, rank: int, method: str = "ziptf", n_runs: int = 10,
                  base_seed: int = 0, cfg=None, mode=None,
                  lof_neighbors: int = 20, lof_threshold: float = 1.5,
                  freeze: bool = False, workers: int = 1,
                  seeds=None) -> ConsensusResult:
    """Full consensus pipeline; the refit optimizes all modes starting from
    the consensus matrix on the chosen mode (or keeps it frozen)."""
    k = t.ndim - 1 if mode is None else mode
    if seeds is None:
        seeds = derive_seeds(base_seed, n_runs)
    runs = run_restarts(t, rank, method, n_runs, base_seed, cfg=cfg,
                        workers=workers, seeds=seeds)
    agg = aggregate(runs, k)
    labels = kmeans_columns(agg, rank, seed=base_seed)
    neighbors = min(lof_neighbors, agg.n_columns - 1)
    surviving = lof_filter(agg, labels, n_neighbors=neighbors,
                           threshold=lof_threshold)
    removed = np.setdiff1d(np.arange(agg.n_columns), surviving)
    sil = float("nan")
    if rank >= 2:
        sil = silhouette_score(agg.columns.T[surviving], labels[surviving])
    consensus = consensus_factors(agg, labels, surviving)
    refit_seed = int(np.random.SeedSequence((base_seed, n_runs)).generate_state(1)[0])
    if method == "nncp-als":
        final = _als_refit(t, rank, consensus, k, cfg, refit_seed, freeze)
    else:
        final = fit_method(t, rank, method, refit_seed, cfg,
                           init_mode=(k, consensus), freeze_mode=freeze)
    return ConsensusResult(runs=runs, aggregated=agg, labels=labels,
                           silhouette=sil, consensus_matrix=consensus,
                           final_model=final, removed_outliers=removed,
                           seeds=list(seeds) + [refit_seed], mode=k)


def _als_refit(t, rank, consensus, mode, cfg, seed, freeze):
    """ALS refit seeded with the consensus matrix on one mode."""
    from .als import hals_optimize, init_factors

    if freeze:
        raise ValueError("frozen-mode refit is not supported for nncp-als")
    if cfg is None:
        cfg = AlsConfig()
    cfg = replace(cfg, seed=seed)
    factors = init_factors(t, rank, seed)
    factors[mode] = np.maximum(consensus, 0.0)
    return hals_optimize(t, factors, cfg)


def rank_scan(t: Tensor, ranks, method: str = "ziptf", n_runs: int = 5,
              base_seed: int = 0, cfg=None, **kwargs):
    """Consensus fit per rank; returns one metrics record per rank."""
    ranks = list(ranks)
    if not ranks:
        raise ValueError("ranks must be non-empty")
    if any(r < 2 for r in ranks):
        raise ValueError("rank scan requires ranks >= 2")
    records = []
    for r in ranks:
        result = consensus_fit(t, r, method=method, n_runs=n_runs,
                               base_seed=base_seed, cfg=cfg, **kwargs)
        records.append({
            "rank": r,
            "explained_variance": explained_variance(t, result.final_model),
            "silhouette": result.silhouette,
            "removed_outliers": int(result.removed_outliers.size),
        })
    return records


def save_consensus(result: ConsensusResult, directory, t: Tensor = None):
    """Persist a ConsensusResult as the documented directory layout."""
    os.makedirs(directory, exist_ok=True)
    for i, model in enumerate(result.runs):
        save_model(model, os.path.join(directory, "runs", f"run_{i}"))
    write_factor_csv(result.aggregated.columns,
                     os.path.join(directory, "aggregated.csv"))
    with open(os.path.join(directory, "labels.csv"), "w") as fh:
        fh.write("column,run,label,removed\n")
        removed = set(result.removed_outliers.tolist())
        for c in range(result.aggregated.n_columns):
            fh.write(f"{c},{result.aggregated.run_of_column[c]},"
                     f"{int(result.labels[c])},{int(c in removed)}\n")
    write_factor_csv(result.consensus_matrix,
                     os.path.join(directory, "consensus.csv"))
    save_model(result.final_model, os.path.join(directory, "final"))
    metrics = {
        "silhouette": result.silhouette,
        "removed_outlier_count": int(result.removed_outliers.size),
        "seeds": result.seeds,
        "mode": result.mode,
    }
    if t is not None:
        metrics["explained_variance"] = explained_variance(t, result.final_model)
    with open(os.path.join(directory, "metrics.json"), "w") as fh:
        json.dump(metrics, fh, indent=2, default=float)
