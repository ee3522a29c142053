"""cleanfield: voxel-grid radiance fields with view-independent/view-dependent
color decomposition and per-ray geometry correction."""

__version__ = "0.1.0"
