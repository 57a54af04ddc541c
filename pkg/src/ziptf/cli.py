"""Command-line orchestration: simulate, factorize, consensus, rank-scan,
evaluate, pseudobulk.  Every command writes a run manifest; experiment
commands require an explicit --seed (no wall-clock seeding).

Exit codes: 0 success, 2 usage, 3 data/parse, 4 numerical degeneracy.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .als import AlsConfig
from .cavi import CaviConfig
from .consensus import (METHODS, consensus_fit, derive_seeds, fit_method,
                        rank_scan, save_consensus)
from .datagen import ScrnaSimSpec, SyntheticTensorSpec, gen_scrnaseq, gen_synthetic_tensor
from .errors import NumericalDegeneracyError, ParseError, ZiptfError
from .ingest import cpm_normalize, filter_genes, pseudobulk, read_triplets, write_axis_labels
from .metrics import align_pearson, cosine_score, explained_variance
from .svi import SviConfig
from .tensor import (load_model, read_factor_csv, read_tns, save_model,
                     write_factor_csv, write_tns)

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


class UsageError(ValueError):
    pass


def _load_config_file(path):
    if path is None:
        return {}
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"cannot read config file: {exc}", path)


def _merged(args, config, name, default=None):
    """Flag > config file > default."""
    value = getattr(args, name.replace("-", "_"), None)
    if value is not None:
        return value
    if name in config:
        return config[name]
    return default


def _write_manifest(out_dir, command, args, merged_config, base_seed,
                    derived_seeds, outputs, started):
    manifest = {
        "tool": "ziptf",
        "version": __version__,
        "command": command,
        "argv": sys.argv[1:],
        "config": merged_config,
        "base_seed": base_seed,
        "derived_seeds": derived_seeds,
        "outputs": outputs,
        "started": started,
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, default=str)


def _parse_shape(text):
    try:
        shape = tuple(int(p) for p in str(text).split(","))
    except ValueError:
        raise UsageError(f"malformed shape {text!r}")
    if len(shape) < 2 or any(e < 1 for e in shape):
        raise UsageError(f"shape must have >= 2 positive extents, got {text!r}")
    return shape


def _parse_ranks(text):
    text = str(text)
    try:
        if ".." in text:
            lo, hi = text.split("..")
            ranks = list(range(int(lo), int(hi) + 1))
        else:
            ranks = [int(p) for p in text.split(",")]
    except ValueError:
        raise UsageError(f"malformed rank list {text!r}")
    if not ranks:
        raise UsageError("empty rank range")
    return ranks


def _method_config(method, args, config):
    max_iter = int(_merged(args, config, "max-iter", 1000))
    if method in ("ziptf", "gptf", "tgtf"):
        defaults = SviConfig()
        return SviConfig(
            max_steps=max_iter,
            learning_rate=float(_merged(args, config, "learning-rate",
                                        defaults.learning_rate)),
            learning_rate_end=float(_merged(args, config, "learning-rate-end",
                                            defaults.learning_rate_end)),
            n_samples=int(_merged(args, config, "n-samples", 1)),
            prior_shape=float(_merged(args, config, "prior-shape", 0.1)),
            prior_rate=float(_merged(args, config, "prior-rate", 0.1)),
            obs_std=float(_merged(args, config, "obs-std", 1.0)),
            init_shape=float(_merged(args, config, "init-shape",
                                     defaults.init_shape)),
        )
    if method == "nncp-als":
        return AlsConfig(max_iter=max_iter)
    if method == "bptf-cavi":
        return CaviConfig(
            max_iter=max_iter,
            alpha=float(_merged(args, config, "prior-shape", 0.1)),
        )
    raise UsageError(f"unknown method {method!r}")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_simulate(args):
    config = _load_config_file(args.config)
    out = args.out
    os.makedirs(out, exist_ok=True)
    started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    seed = int(args.seed)
    outputs = []
    if args.kind == "tensor":
        spec = SyntheticTensorSpec(
            shape=_parse_shape(_merged(args, config, "shape", "10,20,300")),
            rank=int(_merged(args, config, "rank", 9)),
            phi=float(_merged(args, config, "phi", 0.0)),
            seed=seed,
        )
        tensor, truth = gen_synthetic_tensor(spec)
        write_tns(tensor, os.path.join(out, "tensor.tns"))
        save_model(truth, os.path.join(out, "truth"))
        outputs = ["tensor.tns", "truth/"]
        merged = {"kind": "tensor", "shape": list(spec.shape), "rank": spec.rank,
                  "phi": spec.phi}
    elif args.kind == "scrna":
        spec = ScrnaSimSpec(
            n_cells=int(_merged(args, config, "cells", 15000)),
            n_genes=int(_merged(args, config, "genes", 5000)),
            n_donors=int(_merged(args, config, "donors", 6)),
            n_cell_types=int(_merged(args, config, "cell-types", 5)),
            n_identity_programs=int(_merged(args, config, "identity-programs", 5)),
            n_activity_programs=int(_merged(args, config, "activity-programs", 3)),
            log2fc=float(_merged(args, config, "log2fc", 0.25)),
            seed=seed,
        )
        counts, labels, geps, _ = gen_scrnaseq(spec)
        with open(os.path.join(out, "counts.tsv"), "w") as fh:
            fh.write("cell_id\tgene_id\tcount\n")
            rows, cols = np.nonzero(counts)
            for c, g in zip(rows, cols):
                fh.write(f"cell_{c}\tgene_{g}\t{counts[c, g]}\n")
        with open(os.path.join(out, "labels.tsv"), "w") as fh:
            fh.write("cell_id\tdonor\tcell_type\n")
            for c in range(counts.shape[0]):
                fh.write(f"cell_{c}\tdonor_{labels['donor'][c]}"
                         f"\ttype_{labels['cell_type'][c]}\n")
        write_factor_csv(geps, os.path.join(out, "geps.csv"))
        outputs = ["counts.tsv", "labels.tsv", "geps.csv"]
        merged = {"kind": "scrna", "cells": spec.n_cells, "genes": spec.n_genes,
                  "donors": spec.n_donors, "cell_types": spec.n_cell_types,
                  "log2fc": spec.log2fc}
    else:
        raise UsageError(f"unknown simulation kind {args.kind!r}")
    _write_manifest(out, "simulate", args, merged, seed, [seed], outputs, started)
    return 0


def cmd_factorize(args):
    config = _load_config_file(args.config)
    out = args.out
    os.makedirs(out, exist_ok=True)
    started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    method = args.method
    if method not in METHODS:
        raise UsageError(f"unknown method {method!r}")
    tensor = read_tns(args.input)
    rank = int(args.rank)
    seed = int(args.seed)
    cfg = _method_config(method, args, config)
    t0 = time.perf_counter()
    state = None
    if method in ("ziptf", "gptf", "tgtf"):
        from .svi import Likelihood, fit_svi
        from dataclasses import replace as _replace

        kinds = {"ziptf": "zip", "gptf": "gamma_poisson", "tgtf": "truncated_gaussian"}
        lik = Likelihood(kind=kinds[method], obs_std=cfg.obs_std)
        model, state = fit_svi(tensor, rank, likelihood=lik,
                               cfg=_replace(cfg, seed=seed))
    else:
        model = fit_method(tensor, rank, method, seed, cfg)
    runtime = time.perf_counter() - t0
    save_model(model, os.path.join(out, "model"))
    metrics = {
        "method": method,
        "rank": rank,
        "seed": seed,
        "explained_variance": explained_variance(tensor, model),
        "runtime_seconds": runtime,
    }
    if state is not None:
        metrics["final_elbo"] = state.final_elbo
        if method == "ziptf":
            metrics["xi_mean"] = state.xi_mean
    with open(os.path.join(out, "metrics.json"), "w") as fh:
        json.dump(metrics, fh, indent=2)
    _write_manifest(out, "factorize", args,
                    {"method": method, "rank": rank, "input": args.input},
                    seed, [seed], ["model/", "metrics.json"], started)
    return 0


def cmd_consensus(args):
    config = _load_config_file(args.config)
    out = args.out
    os.makedirs(out, exist_ok=True)
    started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    method = args.method
    if method not in METHODS:
        raise UsageError(f"unknown method {method!r}")
    restarts = int(args.restarts)
    if restarts < 2:
        raise UsageError("--restarts must be at least 2")
    tensor = read_tns(args.input)
    rank = int(args.rank)
    seed = int(args.seed)
    cfg = _method_config(method, args, config)
    mode = None if args.mode is None else int(args.mode)
    result = consensus_fit(tensor, rank, method=method, n_runs=restarts,
                           base_seed=seed, cfg=cfg, mode=mode,
                           freeze=bool(args.freeze),
                           workers=int(args.workers or 1))
    save_consensus(result, out, t=tensor)
    _write_manifest(out, "consensus", args,
                    {"method": method, "rank": rank, "restarts": restarts,
                     "mode": result.mode, "input": args.input},
                    seed, result.seeds, ["runs/", "aggregated.csv", "labels.csv",
                                         "consensus.csv", "final/", "metrics.json"],
                    started)
    return 0


def cmd_rank_scan(args):
    config = _load_config_file(args.config)
    out = args.out
    os.makedirs(out, exist_ok=True)
    started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    method = args.method
    if method not in METHODS:
        raise UsageError(f"unknown method {method!r}")
    ranks = _parse_ranks(args.ranks)
    tensor = read_tns(args.input)
    seed = int(args.seed)
    cfg = _method_config(method, args, config)
    records = rank_scan(tensor, ranks, method=method,
                        n_runs=int(args.restarts), base_seed=seed, cfg=cfg,
                        workers=int(args.workers or 1))
    with open(os.path.join(out, "rank_scan.csv"), "w") as fh:
        fh.write("rank,explained_variance,silhouette,removed_outliers\n")
        for rec in records:
            fh.write(f"{rec['rank']},{rec['explained_variance']:.17g},"
                     f"{rec['silhouette']:.17g},{rec['removed_outliers']}\n")
    _write_manifest(out, "rank-scan", args,
                    {"method": method, "ranks": ranks, "restarts": int(args.restarts),
                     "input": args.input},
                    seed, derive_seeds(seed, int(args.restarts)),
                    ["rank_scan.csv"], started)
    return 0


def cmd_evaluate(args):
    out = args.out
    os.makedirs(out, exist_ok=True)
    started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    model = load_model(args.model)
    record = {"metric": args.metric}
    if args.metric == "ev":
        if args.input is None:
            raise UsageError("--metric ev requires --input")
        tensor = read_tns(args.input)
        record["value"] = explained_variance(tensor, model)
    elif args.metric == "cosine":
        if args.truth is None:
            raise UsageError("--metric cosine requires --truth")
        truth = load_model(args.truth)
        record["value"] = cosine_score(model, truth)
    elif args.metric == "pearson":
        if args.truth is None:
            raise UsageError("--metric pearson requires --truth")
        mode = model.n_modes - 1 if args.mode is None else int(args.mode)
        if os.path.isdir(args.truth):
            reference = load_model(args.truth).factors[mode]
        else:
            reference = read_factor_csv(args.truth)
        report = align_pearson(model.factors[mode], reference)
        record["value"] = report.average
        record["matching"] = report.matching
        record["per_pair"] = report.per_pair
    else:
        raise UsageError(f"unknown metric {args.metric!r}")
    record["rank"] = model.rank
    with open(os.path.join(out, "evaluation.json"), "w") as fh:
        json.dump(record, fh, indent=2)
    print(json.dumps({"metric": record["metric"], "value": record["value"]}))
    _write_manifest(out, "evaluate", args, {"metric": args.metric},
                    None, [], ["evaluation.json"], started)
    return 0


def cmd_pseudobulk(args):
    out = args.out
    os.makedirs(out, exist_ok=True)
    started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    triplets = read_triplets(args.triplets)
    min_count = int(args.min_gene_count if args.min_gene_count is not None else 50)
    triplets = filter_genes(triplets, min_total=min_count)
    tensor = pseudobulk(triplets)
    if args.cpm:
        tensor = cpm_normalize(tensor)
    write_tns(tensor, os.path.join(out, "tensor.tns"))
    write_axis_labels(triplets, out)
    _write_manifest(out, "pseudobulk", args,
                    {"triplets": args.triplets, "min_gene_count": min_count,
                     "cpm": bool(args.cpm)},
                    None, [], ["tensor.tns", "axis_0.txt", "axis_1.txt",
                               "axis_2.txt"],
                    started)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="ziptf",
        description="Zero-inflated Poisson tensor factorization toolkit",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, needs_seed=True):
        p.add_argument("--config", help="JSON config file (flags take precedence)")
        p.add_argument("--out", required=True, help="output directory")
        if needs_seed:
            p.add_argument("--seed", required=True, type=int)

    p = sub.add_parser("simulate", help="generate synthetic data")
    p.add_argument("--kind", required=True, choices=["tensor", "scrna"])
    p.add_argument("--shape")
    p.add_argument("--rank", type=int)
    p.add_argument("--phi", type=float)
    p.add_argument("--cells", type=int)
    p.add_argument("--genes", type=int)
    p.add_argument("--donors", type=int)
    p.add_argument("--cell-types", type=int)
    p.add_argument("--identity-programs", type=int)
    p.add_argument("--activity-programs", type=int)
    p.add_argument("--log2fc", type=float)
    add_common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("factorize", help="fit one factorization")
    p.add_argument("--input", required=True, help=".tns tensor file")
    p.add_argument("--method", required=True)
    p.add_argument("--rank", required=True, type=int)
    p.add_argument("--max-iter", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--learning-rate-end", type=float)
    p.add_argument("--n-samples", type=int)
    p.add_argument("--prior-shape", type=float)
    p.add_argument("--prior-rate", type=float)
    p.add_argument("--obs-std", type=float)
    p.add_argument("--init-shape", type=float)
    add_common(p)
    p.set_defaults(func=cmd_factorize)

    p = sub.add_parser("consensus", help="consensus meta-analysis fit")
    p.add_argument("--input", required=True)
    p.add_argument("--method", required=True)
    p.add_argument("--rank", required=True, type=int)
    p.add_argument("--restarts", required=True, type=int)
    p.add_argument("--mode", type=int)
    p.add_argument("--freeze", action="store_true",
                   help="freeze the consensus mode during the refit")
    p.add_argument("--workers", type=int)
    p.add_argument("--max-iter", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--learning-rate-end", type=float)
    p.add_argument("--n-samples", type=int)
    p.add_argument("--prior-shape", type=float)
    p.add_argument("--prior-rate", type=float)
    p.add_argument("--obs-std", type=float)
    p.add_argument("--init-shape", type=float)
    add_common(p)
    p.set_defaults(func=cmd_consensus)

    p = sub.add_parser("rank-scan", help="consensus metrics over a rank range")
    p.add_argument("--input", required=True)
    p.add_argument("--method", default="ziptf")
    p.add_argument("--ranks", required=True, help="e.g. 2..14 or 2,4,8")
    p.add_argument("--restarts", default=5, type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--max-iter", type=int)
    add_common(p)
    p.set_defaults(func=cmd_rank_scan)

    p = sub.add_parser("evaluate", help="score a fitted model")
    p.add_argument("--model", required=True, help="model directory")
    p.add_argument("--truth", help="reference model directory or CSV matrix")
    p.add_argument("--input", help=".tns tensor (for --metric ev)")
    p.add_argument("--metric", required=True, choices=["ev", "cosine", "pearson"])
    p.add_argument("--mode", type=int)
    add_common(p, needs_seed=False)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("pseudobulk", help="triplet TSV to pseudobulk tensor")
    p.add_argument("--triplets", required=True)
    p.add_argument("--min-gene-count", type=int)
    p.add_argument("--cpm", action="store_true")
    add_common(p, needs_seed=False)
    p.set_defaults(func=cmd_pseudobulk)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits with 2 on usage errors already
        return int(exc.code) if exc.code else 0
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ParseError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalDegeneracyError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ZiptfError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
