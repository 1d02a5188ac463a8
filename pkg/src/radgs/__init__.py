"""Radiative Gaussian splatting engine: X-ray line-integral rendering,
biplanar scene reconstruction, and rigid 3D/3D registration at desk scale."""

__version__ = "0.1.0"
