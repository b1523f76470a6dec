"""Tree species classification from LiDAR point clouds: label matching,
multi-view CNN baselines and a point cloud transformer on a small numpy
autodiff engine."""

from .errors import PCTreesError

__version__ = "0.1.0"

__all__ = ["PCTreesError", "__version__"]
