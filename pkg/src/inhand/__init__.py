"""Contact-augmented rigid registration and TSDF reconstruction for
in-hand 3D object scanning."""

__version__ = "0.1.0"
