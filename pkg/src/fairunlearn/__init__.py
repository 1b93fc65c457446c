"""Debias sequential recommenders by unlearning the training samples that drive the bias."""

from .costs import CostCounters, StageCost
from .dataset import (CandidateSet, GroupAssignment, InteractionLog, PopularityTable, SampleSet,
                      SplitDataset, compute_popularity, load_interactions, sample_candidates,
                      temporal_split)
from .fairness import BiasSpec, evaluate, evaluate_bias, f_score
from .influence import CGConfig, influence_scores, precompute_influence_vector, solve_damped_cg
from .maskopt import Lambdas, MaskOptConfig, optimize_mask, select_unlearn_set
from .recmodel import ModelState, TrainConfig, train_backbone
from .unlearn import apply_update, compute_delta, retrain_oracle

__version__ = "0.1.0"
