"""Coordinate records, great-circle distance and the Equal Earth projection.

Degrees at the API boundary, radians internally, kilometers for distances.
The vectorised helpers (:func:`haversine`, :func:`equal_earth`,
:func:`standardized_coords`) accept scalars or arrays; the record-level
functions wrap them for single points.
"""

from dataclasses import dataclass

import numpy as np

EARTH_RADIUS_KM = 6371.0088

# Equal Earth polynomial coefficients (Savric, Patterson & Jenny 2018).
A1 = 1.340264
A2 = -0.081106
A3 = 0.000893
A4 = 0.003796
_M = np.sqrt(3.0) / 2.0


@dataclass(frozen=True)
class GpsPoint:
    lat: float
    lon: float

    def __post_init__(self):
        lat, lon = float(self.lat), float(self.lon)
        if not (np.isfinite(lat) and np.isfinite(lon)):
            raise ValueError(f"non-finite coordinate ({self.lat}, {self.lon})")
        if not -90.0 <= lat <= 90.0:
            raise ValueError(f"latitude {lat} outside [-90, 90]")
        if not -180.0 <= lon <= 180.0:
            raise ValueError(f"longitude {lon} outside [-180, 180]")
        object.__setattr__(self, "lat", lat)
        object.__setattr__(self, "lon", lon)


@dataclass(frozen=True)
class EepPoint:
    x: float
    y: float

    def __post_init__(self):
        if not (np.isfinite(self.x) and np.isfinite(self.y)):
            raise ValueError(f"non-finite projected point ({self.x}, {self.y})")


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ValueError("non-finite coordinate in input")


def haversine(lat1, lon1, lat2, lon2):
    """Great-circle distance in km between coordinate arrays (degrees)."""
    lat1, lon1, lat2, lon2 = (np.asarray(v, dtype=np.float64) for v in (lat1, lon1, lat2, lon2))
    _check_finite(lat1, lon1, lat2, lon2)
    p1, p2 = np.radians(lat1), np.radians(lat2)
    dphi = p2 - p1
    dlam = np.radians(lon2 - lon1)
    h = np.sin(dphi / 2.0) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dlam / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))


def haversine_km(a: GpsPoint, b: GpsPoint) -> float:
    return float(haversine(a.lat, a.lon, b.lat, b.lon))


def equal_earth(lat, lon):
    """Forward Equal Earth projection of degree arrays; returns ``(x, y)`` on the unit sphere."""
    lat = np.asarray(lat, dtype=np.float64)
    lon = np.asarray(lon, dtype=np.float64)
    _check_finite(lat, lon)
    phi = np.radians(lat)
    lam = np.radians(lon)
    theta = np.arcsin(_M * np.sin(phi))
    t2 = theta * theta
    t6 = t2 * t2 * t2
    x = 2.0 * np.sqrt(3.0) * lam * np.cos(theta) / (3.0 * (A1 + 3.0 * A2 * t2 + t6 * (7.0 * A3 + 9.0 * A4 * t2)))
    y = theta * (A1 + A2 * t2 + t6 * (A3 + A4 * t2))
    return x, y


def equal_earth_forward(p: GpsPoint) -> EepPoint:
    x, y = equal_earth(p.lat, p.lon)
    return EepPoint(float(x), float(y))


# Global extrema of the projection: |x| at (0, +-180), |y| at the poles.
X_MAX = float(equal_earth(0.0, 180.0)[0])
Y_MAX = float(equal_earth(90.0, 0.0)[1])


def standardize_eep(p: EepPoint) -> np.ndarray:
    return np.array([p.x / X_MAX, p.y / Y_MAX])


def standardized_coords(lat, lon):
    """Projected and scaled coordinates as an ``(..., 2)`` array in [-1, 1]."""
    x, y = equal_earth(lat, lon)
    return np.stack([x / X_MAX, y / Y_MAX], axis=-1)
