"""Frequency-masked embedding inference for self-supervised time-series pretraining."""

__version__ = "0.1.0"

SPEC_VERSION = "1"
