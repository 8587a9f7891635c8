"""Graphical Glauber dynamics, information percolation and cluster expansions for the Ising model."""
from ._accel import BACKEND
from .glauber import ModelParams, SpinConfig, UpdateRealization, sample_updates
from .lattice import BoxGeom, CoarseLattice, GraphGeom, SpaceTimeGraph, TorusGeom

__all__ = ["BACKEND", "ModelParams", "SpinConfig", "UpdateRealization", "sample_updates",
           "BoxGeom", "CoarseLattice", "GraphGeom", "SpaceTimeGraph", "TorusGeom"]
__version__ = "0.1.0"
