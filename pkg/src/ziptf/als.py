"""Non-negative CP decomposition via alternating least squares (HALS updates)."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .tensor import FactorModel, Tensor, frobenius_norm, khatri_rao, unfold


@dataclass(frozen=True)
class AlsConfig:
    max_iter: int = 1000
    tol: float = 1e-9
    seed: int = 0


def hals_optimize(t: Tensor, factors, cfg: AlsConfig) -> FactorModel:
    """Cycle modes, updating each column with the hierarchical (HALS) rule,
    until the reconstruction error stops decreasing.  The objective is
    non-increasing per sweep and factors stay non-negative throughout."""
    factors = [np.array(f, dtype=np.float64) for f in factors]
    rank = factors[0].shape[1]
    norm_x = frobenius_norm(t)
    unfoldings = [unfold(t, k) for k in range(t.ndim)]
    prev_err = None
    for _ in range(cfg.max_iter):
        for k in range(t.ndim):
            kr = khatri_rao(factors, skip_mode=k)
            gram = kr.T @ kr
            proj = unfoldings[k] @ kr
            a = factors[k]
            for r in range(rank):
                denom = gram[r, r]
                if denom <= 0:
                    continue
                update = a[:, r] + (proj[:, r] - a @ gram[:, r]) / denom
                a[:, r] = np.maximum(0.0, update)
        # residual via the Gram identity, avoiding a dense reconstruction
        kr = khatri_rao(factors, skip_mode=t.ndim - 1)
        a_last = factors[-1]
        err_sq = (
            norm_x**2
            - 2.0 * np.sum(unfoldings[-1] * (a_last @ kr.T))
            + np.sum((kr.T @ kr) * (a_last.T @ a_last))
        )
        err = float(np.sqrt(max(err_sq, 0.0)))
        if prev_err is not None and abs(prev_err - err) <= cfg.tol * max(prev_err, 1e-300):
            break
        prev_err = err
    return FactorModel(rank=rank, factors=factors)


def init_factors(t: Tensor, rank: int, seed: int):
    """Uniform(0,1) factors scaled so the initial reconstruction mean matches
    the data mean."""
    rng = np.random.default_rng(seed)
    factors = [rng.uniform(size=(n, rank)) for n in t.shape]
    recon_mean = float(
        np.prod([f.sum(axis=0) for f in factors], axis=0).sum() / t.size
    )
    data_mean = float(t.data.mean())
    if recon_mean > 0 and data_mean > 0:
        scale = (data_mean / recon_mean) ** (1.0 / t.ndim)
        factors = [f * scale for f in factors]
    return factors


def fit_nncp_als(t: Tensor, rank: int, cfg: AlsConfig = AlsConfig()) -> FactorModel:
    """Minimize ||X - X_hat||_F subject to non-negativity."""
    if rank < 1:
        raise ValueError(f"rank must be >= 1, got {rank}")
    if frobenius_norm(t) == 0.0:
        warnings.warn("all-zero tensor; returning all-zero factors")
        return FactorModel(rank=rank, factors=[np.zeros((n, rank)) for n in t.shape])
    for k in range(t.ndim):
        if rank > np.prod([t.shape[s] for s in range(t.ndim) if s != k]):
            warnings.warn(f"rank {rank} exceeds mode-{k} unfolding capacity")
            break
    return hals_optimize(t, init_factors(t, rank, cfg.seed), cfg)
