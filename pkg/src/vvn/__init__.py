"""Class-level image alignment through a graph of views, and single-view 3D reconstruction."""

from .core import (
    Camera, Collection, FeatureGrid, KeypointSet, NumericalError, ObjectInstance, ValidationError,
    load_collection, save_collection,
)
from .factorization import FactorizationResult, ObservationMatrix, factorize
from .network import (
    AlignmentResult, CompressedNetwork, DockingSet, VVNetwork, align_dijkstra, align_fast,
    build_network, compress, dock,
)
from .recon import PointCloud, ReconConfig, reconstruct
from .synth import SynthConfig, generate, get_model

__version__ = "0.1.0"
