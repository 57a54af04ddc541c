"""Ingestion of cell-level count triplets into a pseudobulk tensor.

Input is a 4-column TSV (sample, cell_type, gene, count), header optional.
Axis ordering is fixed to sample x cell type x gene.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ParseError
from .tensor import Tensor


@dataclass
class CountTriplets:
    """Parsed (sample, cell_type, gene, count) records with axis vocabularies.

    Vocabularies are deduplicated in insertion order.
    """

    samples: list = field(default_factory=list)
    cell_types: list = field(default_factory=list)
    genes: list = field(default_factory=list)
    records: list = field(default_factory=list)  # (sample_idx, type_idx, gene_idx, count)

    def __len__(self):
        return len(self.records)

    def total_count(self):
        return sum(r[3] for r in self.records)


def _looks_like_header(fields) -> bool:
    try:
        int(fields[3])
        return False
    except ValueError:
        return True


def read_triplets(path) -> CountTriplets:
    """Parse a 4-column TSV; a header row is auto-detected."""
    ct = CountTriplets()
    sample_idx, type_idx, gene_idx = {}, {}, {}
    try:
        fh = open(path)
    except OSError as exc:
        raise ParseError(f"cannot open file: {exc}", path)
    with fh:
        first_data_line = True
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) != 4:
                raise ParseError(f"expected 4 tab-separated fields, got {len(fields)}",
                                 path, lineno)
            if first_data_line:
                first_data_line = False
                if _looks_like_header(fields):
                    continue
            sample, cell_type, gene, count_str = fields
            try:
                count = int(count_str)
            except ValueError:
                raise ParseError(f"malformed count {count_str!r}", path, lineno)
            if count < 0:
                raise ParseError(f"negative count {count}", path, lineno)
            for key, table, vocab in (
                (sample, sample_idx, ct.samples),
                (cell_type, type_idx, ct.cell_types),
                (gene, gene_idx, ct.genes),
            ):
                if key not in table:
                    table[key] = len(vocab)
                    vocab.append(key)
            ct.records.append((sample_idx[sample], type_idx[cell_type],
                               gene_idx[gene], count))
    return ct


def filter_genes(ct: CountTriplets, min_total: int = 50) -> CountTriplets:
    """Drop genes whose summed count is below min_total; keep ties."""
    if min_total < 0:
        raise ValueError("min_total must be >= 0")
    totals = np.zeros(len(ct.genes), dtype=np.int64)
    for _, _, g, c in ct.records:
        totals[g] += c
    keep = totals >= min_total
    out = CountTriplets()
    gene_map = {}
    sample_map, type_map = {}, {}
    for s, t, g, c in ct.records:
        if not keep[g]:
            continue
        for old_idx, old_vocab, table, vocab in (
            (s, ct.samples, sample_map, out.samples),
            (t, ct.cell_types, type_map, out.cell_types),
            (g, ct.genes, gene_map, out.genes),
        ):
            name = old_vocab[old_idx]
            if name not in table:
                table[name] = len(vocab)
                vocab.append(name)
        out.records.append((
            sample_map[ct.samples[s]],
            type_map[ct.cell_types[t]],
            gene_map[ct.genes[g]],
            c,
        ))
    return out


def pseudobulk(ct: CountTriplets) -> Tensor:
    """Sum records into a sample x cell type x gene tensor."""
    if not ct.records:
        raise ValueError("cannot build a pseudobulk tensor from empty triplets")
    out = np.zeros((len(ct.samples), len(ct.cell_types), len(ct.genes)))
    for s, t, g, c in ct.records:
        out[s, t, g] += c
    return Tensor(out)


def cpm_normalize(t: Tensor) -> Tensor:
    """Rescale each (sample, cell type) gene fiber to a total of 10^6."""
    if t.ndim != 3:
        raise ValueError("cpm normalization expects a three-mode tensor")
    data = t.data.copy()
    totals = data.sum(axis=2)
    zero = totals == 0
    if zero.any():
        warnings.warn(f"{int(zero.sum())} all-zero fibers left unnormalized")
    safe = np.where(zero, 1.0, totals)
    return Tensor(data / safe[:, :, None] * np.where(zero, 0.0, 1e6)[:, :, None])


def write_axis_labels(ct: CountTriplets, directory):
    """Write axis_<mode>.txt label files next to a .tns tensor."""
    import os

    os.makedirs(directory, exist_ok=True)
    for mode, vocab in enumerate((ct.samples, ct.cell_types, ct.genes)):
        with open(os.path.join(directory, f"axis_{mode}.txt"), "w") as fh:
            for label in vocab:
                fh.write(f"{label}\n")
