"""Simulated continuous-batching generation server."""

from .profiles import ModelProfile, ProfileBook, QuantizationEffect, ServerConfig, load_profiles
from .simulator import BatchingServer

__all__ = ["BatchingServer", "ModelProfile", "ProfileBook", "QuantizationEffect", "ServerConfig", "load_profiles"]
