"""Interpretable triplet importance for pairwise ranking.

Shapley valuation of BPR training triplets by truncated Monte Carlo with a
control-variate correction, an importance predictor that steers negative
resampling, and importance-weighted retraining.
"""

from .backbone import LIGHTGCN, MF, LossConfig, ModelState, bpr_loss, init_model, score, sgd_step, weighted_bpr_loss
from .control_variates import CvStats, cv_estimate, estimate_c, exact_vstar, omega_star_scan
from .dataset import InteractionSet, RawRecord, SplitInteractions, binarize, filter_by_activity, load_records, split
from .metrics import EvalReport, accuracy, evaluate, ndcg_at_k, recall_at_k, top_k
from .pipeline import PipelineConfig, RunReport, normalize_weights, run_itipr
from .recommender import BPRRecommender
from .shapley import McConfig, ShapleyResult, TripletShapley, estimate_tmc, exact_shapley, scan_permutation
from .tip import ResampleConfig, TIPRegressor, TipModel, resample, resample_probabilities, tip_forward, tip_train
from .triplets import Triplet, TripletSet, in_space, rotation_permutations, sample_permutation, sample_triplets
from .utility import RankingUtility

__version__ = "0.1.0"
