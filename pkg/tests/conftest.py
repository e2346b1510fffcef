import math

import numpy as np
from hypothesis import HealthCheck, settings

from semgrid.geometry import CameraCalib

settings.register_profile(
    "suite",
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("suite")


def make_ring_calibs(n: int = 4, radius: float = 4.0, height: float = 2.0,
                     target=(0.0, 0.0, 1.0), width: int = 640,
                     height_px: int = 480, f_px: float = 500.0,
                     depth_noise_sigma: float = 0.0) -> list[CameraCalib]:
    """Cameras on a circle around `target`, all looking at it."""
    target = np.asarray(target, dtype=np.float64)
    calibs = []
    for sid in range(n):
        ang = 2 * math.pi * sid / n
        pos = np.array([radius * math.cos(ang), radius * math.sin(ang), height])
        fwd = target - pos
        fwd /= np.linalg.norm(fwd)
        up = np.array([0.0, 0.0, 1.0])
        right = np.cross(fwd, up)
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd], axis=1)
        calibs.append(CameraCalib(sid, width, height_px, f_px, f_px,
                                  width / 2, height_px / 2, R, pos,
                                  depth_noise_sigma))
    return calibs
