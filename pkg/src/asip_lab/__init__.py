"""Simulation and statistical checks for intermittent maps with stretched-exponential
return-time tails, their tower chains, and block decompositions of Birkhoff sums."""

from .rng import SeedSpec, seed_stream

__version__ = "0.1.0"

__all__ = ["SeedSpec", "seed_stream", "__version__"]
