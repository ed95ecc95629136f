"""radq: query-based 3D object detection on range-azimuth-Doppler radar cubes."""

__version__ = "0.1.0"
