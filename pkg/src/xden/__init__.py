"""Part-wise density reconstruction from biplanar X-ray projections."""

__version__ = "0.1.0"
