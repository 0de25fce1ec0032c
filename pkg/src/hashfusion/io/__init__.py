"""File formats and synthetic ground truth."""
from .calib import CalibrationError, load_calibration, parse_calibration, render_calibration
from .mesh import read_obj, read_trajectory, write_mesh, write_point_cloud, write_trajectory
from .netpbm import Frame, ImageFormatError, load_image_stream, read_netpbm, write_netpbm
from .synth import SyntheticScene, look_at, orbit, synth_render_depth

__all__ = [
    "CalibrationError", "load_calibration", "parse_calibration", "render_calibration",
    "read_obj", "read_trajectory", "write_mesh", "write_point_cloud", "write_trajectory",
    "Frame", "ImageFormatError", "load_image_stream", "read_netpbm", "write_netpbm",
    "SyntheticScene", "look_at", "orbit", "synth_render_depth",
]
