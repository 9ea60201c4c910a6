"""Unsupervised word-region grounding turned into attention priors for
toy attention-based VQA models, with a synthetic benchmark world."""

__version__ = "0.1.0"

from .config import RunConfig
from .grounder import GrounderNet, QueryAlignment, RegionSet, ground_query, train_grounder
from .priors import AttentionPrior, compute_prior, kl_divergence
from .refine import aggregate_numeric_oracle, refine_additive, refine_joint, refine_multiplicative
from .treebank import ParseNode, ReferringExpression, extract_referring_expressions, parse_bracketed
from .worldgen import SynthInstance, WorldConfig, generate_world, interpret_question

__all__ = [
    "AttentionPrior",
    "GrounderNet",
    "ParseNode",
    "QueryAlignment",
    "ReferringExpression",
    "RegionSet",
    "RunConfig",
    "SynthInstance",
    "WorldConfig",
    "__version__",
    "aggregate_numeric_oracle",
    "compute_prior",
    "extract_referring_expressions",
    "generate_world",
    "ground_query",
    "interpret_question",
    "kl_divergence",
    "parse_bracketed",
    "refine_additive",
    "refine_joint",
    "refine_multiplicative",
    "train_grounder",
]
