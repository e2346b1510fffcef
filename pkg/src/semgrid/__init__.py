"""Distributed semantic scene perception, simulated: smart edge sensors
computing semantic point clouds and 2.5D human poses, a central backend
fusing them into a sparse voxel semantic map and 3D skeletons, and an
occlusion-annotated feedback loop closing the circle."""

__version__ = "0.1.0"
