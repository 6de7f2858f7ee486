"""Radar cube geometry and polar/Cartesian conversions.

Bin centers sit at half-integer offsets: range bin ``rb`` covers
``[rb*dr, (rb+1)*dr)`` with center ``(rb+0.5)*dr``, and likewise for angle
and Doppler. Angle 0 is boresight (+y), positive angles toward +x.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ContractViolation


@dataclass(frozen=True)
class RadarGeometry:
    range_bins: int = 64
    angle_bins: int = 64
    doppler_bins: int = 32
    max_range: float = 50.0
    field_of_view: float = math.pi
    max_radial_velocity: float = 13.0
    noise_floor_power: float = 1.0

    def __post_init__(self):
        for f in ("range_bins", "angle_bins", "doppler_bins"):
            if getattr(self, f) <= 0:
                raise ContractViolation(f"{f} must be positive")
        for f in ("max_range", "field_of_view", "max_radial_velocity", "noise_floor_power"):
            if getattr(self, f) <= 0:
                raise ContractViolation(f"{f} must be positive")

    @property
    def range_res(self):
        return self.max_range / self.range_bins

    @property
    def angle_res(self):
        return self.field_of_view / self.angle_bins

    @property
    def doppler_res(self):
        return 2.0 * self.max_radial_velocity / self.doppler_bins

    @property
    def shape(self):
        return (self.range_bins, self.angle_bins, self.doppler_bins)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def fingerprint(self):
        payload = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(payload).hexdigest()


def bin_to_cartesian(range_bin, angle_bin, geometry, check=True):
    """Map (range_bin, angle_bin) cell centers to (x, y) meters.

    Accepts scalars or arrays; fractional bins are allowed (used when decoding
    sub-cell center predictions).
    """
    rb = np.asarray(range_bin, dtype=np.float64)
    ab = np.asarray(angle_bin, dtype=np.float64)
    if check:
        if np.any(rb < 0) or np.any(rb > geometry.range_bins):
            raise ContractViolation("range bin out of bounds")
        if np.any(ab < 0) or np.any(ab > geometry.angle_bins):
            raise ContractViolation("angle bin out of bounds")
    r = (rb + 0.5) * geometry.range_res
    a = -geometry.field_of_view / 2.0 + (ab + 0.5) * geometry.angle_res
    x = r * np.sin(a)
    y = r * np.cos(a)
    if np.isscalar(range_bin) and np.isscalar(angle_bin):
        return float(x), float(y)
    return x, y


def cartesian_to_bin(x, y, geometry):
    """Inverse of :func:`bin_to_cartesian`; returns fractional bins."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    r = np.hypot(x, y)
    a = np.arctan2(x, y)
    rb = r / geometry.range_res - 0.5
    ab = (a + geometry.field_of_view / 2.0) / geometry.angle_res - 0.5
    if x.ndim == 0:
        return float(rb), float(ab)
    return rb, ab


def doppler_bin_to_velocity(db, geometry):
    return -geometry.max_radial_velocity + (np.asarray(db, dtype=np.float64) + 0.5) * geometry.doppler_res


def velocity_to_doppler_bin(v, geometry):
    return (np.asarray(v, dtype=np.float64) + geometry.max_radial_velocity) / geometry.doppler_res - 0.5
