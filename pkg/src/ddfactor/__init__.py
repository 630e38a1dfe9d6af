"""Bayesian dependent-Dirichlet latent-factor model for OTU count tables."""
__version__ = "0.1.0"

from .model import (CountTable, DegenerateColumnError, FactorState, Hyperparams,
                    LatentState, compose_measures, estimate_eta, normalized_gram,
                    sample_prior_factors, sample_prior_sigma, simulate_dataset,
                    simulate_design, simulate_misspecified)
from .gibbs import ChainDiagnostics, ChainError, PosteriorDraws, run_chain, tv_bound
from .em import moment_sigma, run_em
from .ordination import (ConsensusSpace, ProjectionCloud, compromise, consensus_axes,
                         credible_region, ordinate, project_draw, rv_coefficient)
from .downstream import (bray_curtis, cocluster, empirical_P, pam_cluster,
                         posterior_mean_P, total_variation)
from .io import load_counts, load_draws, save_draws, write_counts
from .estimators import (ConsensusOrdination, DirichletFactorSampler,
                         PosteriorCoclustering, SelfConsistentCorrelation)
