"""Numerical laboratory for Liouville conformal field theory on the even-dimensional sphere S^d."""

from . import classical, gaussian_field, geometry, gmc, liouville, sphere_spectral

__all__ = ["classical", "gaussian_field", "geometry", "gmc", "liouville", "sphere_spectral"]
__version__ = "0.1.0"
