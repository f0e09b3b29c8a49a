"""Phylogeny-guided prototype networks on a small numpy autodiff engine."""

from .config import DESK_LAMBDAS, PUBLISHED_LAMBDAS, ConfigError, ModelConfig, RunConfig, desk_config
from .model import Model, build_model
from .phylo import Phylogeny, parse_newick, read_newick, serialize_newick, tree_digest

__all__ = [
    "DESK_LAMBDAS",
    "PUBLISHED_LAMBDAS",
    "ConfigError",
    "Model",
    "ModelConfig",
    "Phylogeny",
    "RunConfig",
    "build_model",
    "desk_config",
    "parse_newick",
    "read_newick",
    "serialize_newick",
    "tree_digest",
]

__version__ = "0.1.0"
