"""Synthetic data: ZIP-noised low-rank tensors and a simplified multi-donor
scRNA-seq count simulator with identity/activity gene expression programs.

The scRNA-seq simulator follows a Gamma-Poisson hierarchy: lognormal library
sizes, gamma gene means with lognormal outliers, multiplicative program
effects, Poisson counts, logistic mean-dependent dropout, and doublets formed
by merging cell pairs and downsampling to the larger total.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .tensor import FactorModel, Tensor, cp_reconstruct


@dataclass(frozen=True)
class SyntheticTensorSpec:
    shape: tuple = (10, 20, 300)
    rank: int = 9
    phi: float = 0.0
    factor_shape: float = 3.0
    factor_rate: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.phi <= 1.0:
            raise ValueError(f"phi must be in [0, 1], got {self.phi}")
        if self.rank < 1:
            raise ValueError(f"rank must be >= 1, got {self.rank}")


def gen_synthetic_tensor(spec: SyntheticTensorSpec):
    """Gamma factors, CP mean tensor, entrywise ZIP observations.

    Returns (observed tensor, true factor model); the noise-free mean is
    ``cp_reconstruct`` of the returned model.
    """
    rng = np.random.default_rng(spec.seed)
    factors = [
        rng.gamma(spec.factor_shape, 1.0 / spec.factor_rate, size=(n, spec.rank))
        for n in spec.shape
    ]
    truth = FactorModel(rank=spec.rank, factors=factors)
    mean = cp_reconstruct(truth).data
    counts = rng.poisson(mean)
    keep = rng.random(mean.shape) >= spec.phi
    return Tensor(counts * keep), truth


@dataclass(frozen=True)
class ScrnaSimSpec:
    n_cells: int = 15000
    n_genes: int = 5000
    n_donors: int = 6
    n_cell_types: int = 5
    n_identity_programs: int = 5
    n_activity_programs: int = 3
    log2fc: float = 0.25
    genes_per_program: int = 100
    doublet_rate: float = 0.05
    libsize_log_mean: float = 7.64
    libsize_log_sd: float = 0.78
    gene_mean_mean: float = 7.68
    gene_mean_shape: float = 0.34
    outlier_prob: float = 0.00286
    outlier_log_mean: float = 6.15
    outlier_log_sd: float = 0.49
    dropout_midpoint: float = 1.0
    dropout_shape: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if min(self.n_cells, self.n_genes, self.n_donors, self.n_cell_types) < 1:
            raise ValueError("counts must be positive")
        if not self.log2fc > 0:
            raise ValueError("log2fc must be positive")
        if not 0.0 <= self.doublet_rate < 1.0:
            raise ValueError("doublet_rate must be in [0, 1)")
        needed = (self.n_identity_programs + self.n_activity_programs) * self.genes_per_program
        if needed > self.n_genes:
            raise ValueError(
                f"{needed} program genes requested but only {self.n_genes} genes"
            )


def _truncated_positive_normal(rng, mean, sd, size):
    out = rng.normal(mean, sd, size)
    while np.any(out <= 0):
        bad = out <= 0
        out[bad] = rng.normal(mean, sd, bad.sum())
    return out


def gen_scrnaseq(spec: ScrnaSimSpec):
    """Simulate a cell x gene count matrix with embedded expression programs.

    Returns (counts, labels, geps, program_info) where labels is a dict with
    per-cell ``donor`` and ``cell_type`` arrays, geps is a gene x P matrix of
    relative expression profiles (one column per program, identity programs
    first), and program_info records each program's gene block and target
    cell types / donors.
    """
    rng = np.random.default_rng(spec.seed)
    n_c, n_g = spec.n_cells, spec.n_genes

    donors = rng.integers(0, spec.n_donors, n_c)
    cell_types = rng.integers(0, spec.n_cell_types, n_c)
    libsize = rng.lognormal(spec.libsize_log_mean, spec.libsize_log_sd, n_c)

    gene_mean = rng.gamma(
        spec.gene_mean_shape, spec.gene_mean_mean / spec.gene_mean_shape, n_g
    )
    outlier = rng.random(n_g) < spec.outlier_prob
    gene_mean[outlier] = rng.lognormal(
        spec.outlier_log_mean, spec.outlier_log_sd, outlier.sum()
    )
    gene_mean = np.maximum(gene_mean, 1e-12)

    n_programs = spec.n_identity_programs + spec.n_activity_programs
    gene_order = rng.permutation(n_g)
    program_info = []
    # per-cell multiplicative effect, built program by program
    log2_mult = np.zeros((n_c, n_g))
    gep_log2 = np.zeros((n_g, n_programs))
    for p in range(n_programs):
        genes = gene_order[p * spec.genes_per_program : (p + 1) * spec.genes_per_program]
        effects = _truncated_positive_normal(
            rng, spec.log2fc, spec.log2fc / 2.0, len(genes)
        )
        gep_log2[genes, p] = effects
        if p < spec.n_identity_programs:
            target_type = p % spec.n_cell_types
            cells = cell_types == target_type
            program_info.append(
                {"program": p, "kind": "identity", "genes": genes, "cell_type": target_type}
            )
        else:
            # each activity program lights up in half the donors
            target_donors = rng.permutation(spec.n_donors)[: max(1, spec.n_donors // 2)]
            cells = np.isin(donors, target_donors)
            program_info.append(
                {"program": p, "kind": "activity", "genes": genes,
                 "donors": np.sort(target_donors)}
            )
        log2_mult[np.ix_(cells, genes)] += effects

    profile = gene_mean[None, :] * np.exp2(log2_mult)
    profile /= profile.sum(axis=1, keepdims=True)
    lam = libsize[:, None] * profile
    counts = rng.poisson(lam)

    # mean-dependent technical dropout; -inf shape disables it entirely
    if not (np.isinf(spec.dropout_shape) and spec.dropout_shape < 0):
        mean_expr = np.maximum(lam.mean(axis=0), 1e-12)
        logit = -spec.dropout_shape * (np.log(mean_expr) - spec.dropout_midpoint)
        p_drop = 1.0 / (1.0 + np.exp(-np.clip(logit, -700, 700)))
        counts = counts * (rng.random(counts.shape) >= p_drop[None, :])

    n_doublets = int(round(spec.doublet_rate * n_c))
    if n_doublets > 0:
        targets = rng.choice(n_c, n_doublets, replace=False)
        partners = rng.integers(0, n_c, n_doublets)
        for i, j in zip(targets, partners):
            combined = counts[i] + counts[j]
            total = combined.sum()
            target_total = int(max(counts[i].sum(), counts[j].sum()))
            if total > 0 and target_total < total:
                counts[i] = rng.multinomial(target_total, combined / total)
            else:
                counts[i] = combined

    geps = gene_mean[:, None] * np.exp2(gep_log2)
    geps = geps / geps.sum(axis=0, keepdims=True) * 1e6
    labels = {"donor": donors, "cell_type": cell_types}
    return counts, labels, geps, program_info


def pseudobulk_from_sim(counts, labels) -> Tensor:
    """Sum counts into a donor x cell type x gene tensor."""
    counts = np.asarray(counts)
    donors = np.asarray(labels["donor"])
    cell_types = np.asarray(labels["cell_type"])
    if len(donors) != counts.shape[0] or len(cell_types) != counts.shape[0]:
        raise ValueError("labels must cover all cells")
    donor_ids = np.unique(donors)
    type_ids = np.unique(cell_types)
    out = np.zeros((len(donor_ids), len(type_ids), counts.shape[1]))
    for di, d in enumerate(donor_ids):
        for ci, c in enumerate(type_ids):
            cells = (donors == d) & (cell_types == c)
            if not cells.any():
                warnings.warn(f"empty donor/cell-type group ({d}, {c})")
                continue
            out[di, ci] = counts[cells].sum(axis=0)
    return Tensor(out)
