"""Surface refinement of multi-view capture meshes by maximizing a
closed-form Gaussian photo-consistency energy over per-vertex normal
displacements, with analytic gradients and a conditioned ascent solver."""

from .energy import EnergyParams, EnergyReport, EnergyState, NeighborGraph
from .image_model import ImageGaussian, ImageGaussians, QuadTreeParams
from .scene_io import CameraSpec, Mesh, SequenceManifest
from .solver import RefinementReport, SolverConfig, refine_frame, refine_sequence
from .surface_model import ProjectedGaussian, SurfaceGaussian, SurfaceGaussians

__version__ = "0.1.0"

__all__ = [
    "CameraSpec",
    "EnergyParams",
    "EnergyReport",
    "EnergyState",
    "ImageGaussian",
    "ImageGaussians",
    "Mesh",
    "NeighborGraph",
    "ProjectedGaussian",
    "QuadTreeParams",
    "RefinementReport",
    "SequenceManifest",
    "SolverConfig",
    "SurfaceGaussian",
    "SurfaceGaussians",
    "refine_frame",
    "refine_sequence",
    "__version__",
]
