"""
Great-circle helpers.
"""

from typing import Tuple

import numpy as np

EARTH_RADIUS_M = 6371000.0


def haversine_m(lat1, lon1, lat2, lon2) -> np.ndarray:
    """
    Haversine distance in meters. Arguments broadcast, so one epicenter
    against arrays of antenna coordinates is a single call.
    """
    phi1, phi2 = np.radians(lat1), np.radians(lat2)
    d_phi = phi2 - phi1
    d_lambda = np.radians(lon2) - np.radians(lon1)
    a = np.sin(d_phi / 2.0) ** 2 + np.cos(phi1) * np.cos(phi2) * np.sin(d_lambda / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def offset_latlon(lat: float, lon: float, north_m: float, east_m: float) -> Tuple[float, float]:
    """Point displaced by (north_m, east_m) on a local spherical tangent plane."""
    d_lat = np.degrees(north_m / EARTH_RADIUS_M)
    d_lon = np.degrees(east_m / (EARTH_RADIUS_M * np.cos(np.radians(lat))))
    return float(lat + d_lat), float(lon + d_lon)


def grid_points(center_lat: float, center_lon: float, rows: int, cols: int,
                spacing_m: float) -> np.ndarray:
    """
    ``rows x cols`` grid centred on a point, as an array of (lat, lon) rows in
    row-major order.
    """
    points = []
    for r in range(rows):
        for c in range(cols):
            north = (r - (rows - 1) / 2.0) * spacing_m
            east = (c - (cols - 1) / 2.0) * spacing_m
            points.append(offset_latlon(center_lat, center_lon, north, east))
    return np.array(points, dtype=float).reshape(-1, 2)
