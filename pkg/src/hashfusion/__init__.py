"""Dense RGB-D reconstruction on a voxel-block-hashed TSDF."""
from .core import Intrinsics, Pose, RgbdCalib, View, build_view
from .engine import ReconstructionPipeline, Settings, SurfelEngine, TrackerConfig, VoxelEngine
from .fusion import SceneParams, TSDFFusion
from .mapgraph import MultiEngine
from .reloc import FernRelocaliser
from .surfel import SurfelFusion, SurfelParams
from .tracking import ColourTracker, ExtendedTracker, ICPTracker, Quality
from .voxelmap import Mesh, VoxelBlockMap

__version__ = "0.1.0"
__all__ = [
    "Intrinsics", "Pose", "RgbdCalib", "View", "build_view",
    "ReconstructionPipeline", "Settings", "SurfelEngine", "TrackerConfig", "VoxelEngine",
    "SceneParams", "TSDFFusion", "MultiEngine", "FernRelocaliser", "SurfelFusion", "SurfelParams",
    "ColourTracker", "ExtendedTracker", "ICPTracker", "Quality", "Mesh", "VoxelBlockMap",
]
