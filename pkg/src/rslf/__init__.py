"""rslf: dense reconstruction of rolling-shutter light fields.

Two-stage pipeline: fit a minimal 2D-Gaussian splat cloud to the central
row of sub-aperture images, then estimate a constant 6-DoF camera
velocity by render-and-compare over band-wise rolling-shutter renders,
yielding motion-compensated appearance and disparity maps.  Ships with a
synthetic rolling-shutter light-field generator and an evaluation suite.
"""

__version__ = "0.1.0"

from .geometry import MotionParams, Point3
from .lightfield import LFIntrinsics, LightField4D, RSTiming
from .splat import GaussianCloud, LFGeometry

__all__ = [
    "GaussianCloud",
    "LFGeometry",
    "LFIntrinsics",
    "LightField4D",
    "MotionParams",
    "Point3",
    "RSTiming",
    "__version__",
]
