"""Residual-stream activation patching, flip tests and steering for emotional valence."""

from .corpus import Corpus, PromptPair, load_corpus
from .flip import FlipRecord, flip_rate, flip_records
from .metric import ANCHOR_SETS, AnchorSet, ResolvedAnchors, ValenceScore, load_anchor_set, score, score_gap, sign_accuracy
from .model import Edit, ForwardRecord, HookPoint, ModelBundle, ModelConfig, forward, load_model, make_toy_model, save_model
from .patching import HeatmapResult, PatchSweepResult, patch_heatmap, patch_sweep, summarize_sweeps
from .stats import mann_whitney_one_sided, spearman
from .steering import SteeringDirection, alpha_sweep, extract_direction, steer_and_score
from .text import ChatTemplate, resolve_anchors, tokenize_pair

__version__ = "0.1.0"
