"""Zero-inflated Poisson tensor factorization with consensus aggregation."""

__version__ = "0.1.0"

from .als import AlsConfig, fit_nncp_als
from .cavi import CaviConfig, CaviState, elbo, expectations, fit_bptf, update_mode, update_rate_hyper
from .consensus import (AggregatedFactors, ConsensusResult, aggregate,
                        consensus_factors, consensus_fit, kmeans_columns,
                        lof_filter, rank_scan, run_restarts, save_consensus)
from .datagen import (ScrnaSimSpec, SyntheticTensorSpec, gen_scrnaseq,
                      gen_synthetic_tensor, pseudobulk_from_sim)
from .ingest import (CountTriplets, cpm_normalize, filter_genes, pseudobulk,
                     read_triplets)
from .metrics import (AlignmentReport, align_pearson, cosine_score,
                      cosine_score_one_to_one, explained_variance)
from .prob import (GammaParams, ZipParams, digamma, gamma_log_pdf,
                   logistic_sigmoid, sample_gamma, sample_zip, zip_log_pmf)
from .svi import (Likelihood, SviConfig, SviState, elbo_estimate, fit_svi,
                  guide_sample, log_joint, svi_step)
from .tensor import (FactorModel, Tensor, cp_reconstruct, frobenius_norm,
                     khatri_rao, load_model, read_tns, refold, save_model,
                     unfold, write_tns)
