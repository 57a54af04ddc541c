"""Evaluation metrics: explained variance, cosine score, Pearson alignment."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import UndefinedMetricError
from .tensor import FactorModel, Tensor, cp_reconstruct, frobenius_norm


def explained_variance(t: Tensor, m: FactorModel) -> float:
    """1 - ||X - X_hat||_F / ||X||_F; 1 iff exact, can be negative."""
    if t.shape != m.shape:
        raise ValueError(f"shape mismatch: tensor {t.shape} vs model {m.shape}")
    denom = frobenius_norm(t)
    if denom == 0.0:
        raise UndefinedMetricError("explained variance undefined for all-zero tensor")
    resid = t.data - cp_reconstruct(m).data
    return 1.0 - frobenius_norm(resid) / denom


def _column_cosines(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """R_a x R_b matrix of cosines between columns; zero-norm columns give 0."""
    na = np.linalg.norm(a, axis=0)
    nb = np.linalg.norm(b, axis=0)
    if np.any(na == 0) or np.any(nb == 0):
        warnings.warn("zero-norm factor column; its cosines are treated as 0")
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = (a.T @ b) / np.outer(na, nb)
    cos[~np.isfinite(cos)] = 0.0
    return cos


def _pairwise_mode_products(a: FactorModel, b: FactorModel) -> np.ndarray:
    if a.rank != b.rank:
        raise ValueError(f"rank mismatch: {a.rank} vs {b.rank}")
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.n_modes != 3:
        raise ValueError("cosine score is defined for three-mode models")
    prod = np.ones((a.rank, b.rank))
    for fa, fb in zip(a.factors, b.factors):
        prod *= _column_cosines(fa, fb)
    return prod


def cosine_score(a: FactorModel, b: FactorModel) -> float:
    """(1/R) sum_i max_j prod_modes cos(a-col i, b-col j).

    The max over j is taken independently for each i, so the score is not
    symmetric in its arguments and permits many-to-one matches.
    """
    prod = _pairwise_mode_products(a, b)
    return float(prod.max(axis=1).mean())


def cosine_score_one_to_one(a: FactorModel, b: FactorModel) -> float:
    """Strict bijective variant: optimal assignment instead of per-row max."""
    prod = _pairwise_mode_products(a, b)
    rows, cols = linear_sum_assignment(prod, maximize=True)
    return float(prod[rows, cols].mean())


@dataclass(frozen=True)
class AlignmentReport:
    """One-to-one factor-to-reference matching and its Pearson correlations."""

    matching: dict
    per_pair: dict
    average: float


def _pearson_matrix(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    xc = x - x.mean(axis=0)
    yc = y - y.mean(axis=0)
    sx = np.sqrt((xc * xc).sum(axis=0))
    sy = np.sqrt((yc * yc).sum(axis=0))
    if np.any(sx == 0) or np.any(sy == 0):
        warnings.warn("zero-variance column; its correlations are set to 0")
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = (xc.T @ yc) / np.outer(sx, sy)
    corr[~np.isfinite(corr)] = 0.0
    return corr


def align_pearson(factors, reference) -> AlignmentReport:
    """Optimal one-to-one matching of factor columns to reference columns.

    The matching maximizes the total Pearson correlation over all bijections
    onto min(R, P) targets.
    """
    factors = np.asarray(factors, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if factors.shape[0] != reference.shape[0]:
        raise ValueError(
            f"row mismatch: factors {factors.shape[0]} vs reference {reference.shape[0]}"
        )
    corr = _pearson_matrix(factors, reference)
    rows, cols = linear_sum_assignment(corr, maximize=True)
    matching = {int(i): int(j) for i, j in zip(rows, cols)}
    per_pair = {int(i): float(corr[i, j]) for i, j in zip(rows, cols)}
    average = float(np.mean(list(per_pair.values())))
    return AlignmentReport(matching=matching, per_pair=per_pair, average=average)
