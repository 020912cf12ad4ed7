"""Parallel training of memory-based temporal graph networks on one host."""
from .config import TrainConfig, load_config, parse_config
from .tgraph import TemporalGraph, load_events, chronological_split, make_batches
from .nn import ModelDims, ModelParams
from .parallel import plan_config, build_assignment
from .engine import run_training

__all__ = ["TrainConfig", "load_config", "parse_config", "TemporalGraph", "load_events",
           "chronological_split", "make_batches", "ModelDims", "ModelParams", "plan_config",
           "build_assignment", "run_training"]
