"""Desk-scale spatio-temporal predictive learning: MetaVP and recurrent
baselines, Moving-MNIST style data, metrics and a benchmark harness."""

from .core import (FrameSpec, ModelConfig, RegistryEntry, SeedSpec, SequencePair, VideoBatch,
                   build_model, derive_rng, preset_config, register_model, registered_names)

__version__ = "0.1.0"
