"""Translate LiDAR scans into camera-like images with a conditional GAN.

Pipeline: simulate paired scenes (:mod:`.scene`), rasterize point clouds to a
front view (:mod:`.projection`), train the image translator (:mod:`.pix2pix`),
and score predictions by counting cars (:mod:`.metric`).
"""

from .lidar_model import LidarPoint, PointCloud, SensorConfig, SphericalCoord
from .projection import ChannelMode, RasterImage, project_frame

__all__ = ["ChannelMode", "LidarPoint", "PointCloud", "RasterImage", "SensorConfig", "SphericalCoord",
           "project_frame"]
__version__ = "0.1.0"
