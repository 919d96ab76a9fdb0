"""Classical no-reference quality indicators.

All intensities are normalized to [0, 1].  Coordinates are normalized image
coordinates (x right, y down).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np


class Point2(NamedTuple):
    x: float
    y: float


@dataclass(frozen=True)
class RotationSpec:
    center: Point2
    beta: float

    def __post_init__(self):
        if not -math.pi < self.beta <= math.pi:
            raise ValueError(f"beta must lie in (-pi, pi], got {self.beta}")


@dataclass(frozen=True)
class ContrastResult:
    rms: float
    mean_intensity: float


@dataclass(frozen=True)
class GainProfile:
    band_means: tuple
    band_count: int

    def __post_init__(self):
        if len(self.band_means) != self.band_count:
            raise ValueError("band_count must equal the number of band means")


@dataclass(frozen=True)
class PerspectiveSpec:
    d: float = 1.0

    def __post_init__(self):
        if not (math.isfinite(self.d) and self.d > 0):
            raise ValueError(f"projection distance must be finite and positive, got {self.d}")


@dataclass(frozen=True)
class GainConfig:
    """Thresholds and weights of the gain-anomaly score.

    score = 1 - min(1, w_excess * frac(bands > high)
                       + w_dropout * frac(bands < low)
                       + w_imbalance * |first band - last band|)

    Raising one band from ``mid`` to saturation adds w_excess / band_count
    to the penalty and can remove at most w_imbalance * (1 - mid); the
    defaults keep the first term larger so the score never rises.
    """
    low: float = 0.08
    high: float = 0.85
    mid: float = 0.45
    band_count: int = 4
    w_excess: float = 1.0
    w_dropout: float = 1.0
    w_imbalance: float = 0.4


@dataclass(frozen=True)
class ForeshorteningConfig:
    """severity = 1 - (1 - truncation) * (1 - tilt_weight * |tilt| / max_tilt)"""
    max_tilt: float = math.pi / 6
    tilt_weight: float = 0.6


def rotate_point(p: Point2, spec: RotationSpec) -> Point2:
    cx, cy = spec.center
    dx, dy = p[0] - cx, p[1] - cy
    cb, sb = math.cos(spec.beta), math.sin(spec.beta)
    return Point2(dx * cb - dy * sb + cx, dx * sb + dy * cb + cy)


def rms_contrast(frame, mask=None) -> ContrastResult:
    """Root-mean-square contrast of a normalized frame (optionally masked).

    Deviations are taken after shifting by the region minimum, so a uniform
    region gives exactly zero.
    """
    values = np.asarray(frame, dtype=np.float64)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != values.shape:
            raise ValueError("mask shape must match the frame")
        values = values[mask]
    values = values.ravel()
    if values.size == 0:
        raise ValueError("empty region")
    base = values.min()
    shifted = values - base
    m = shifted.mean()
    rms = math.sqrt(((shifted - m) ** 2).mean())
    return ContrastResult(rms=rms, mean_intensity=float(base + m))


def band_rows(height: int, band_count: int):
    """Row ranges of contiguous horizontal bands; leftover rows join the last band."""
    if not 1 <= band_count <= height:
        raise ValueError(f"band_count must lie in [1, {height}], got {band_count}")
    size = height // band_count
    edges = [k * size for k in range(band_count)] + [height]
    return list(zip(edges[:-1], edges[1:]))


def depth_gain_profile(frame, band_count: int = 4) -> GainProfile:
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 2:
        raise ValueError("frame must be 2-d [H, W]")
    means = tuple(float(frame[a:b].mean()) for a, b in band_rows(frame.shape[0], band_count))
    return GainProfile(means, band_count)


def gain_anomaly_score(profile: GainProfile, config: GainConfig = GainConfig()) -> float:
    bands = np.asarray(profile.band_means, dtype=np.float64)
    n = len(bands)
    excess = np.count_nonzero(bands > config.high) / n
    dropout = np.count_nonzero(bands < config.low) / n
    imbalance = abs(bands[0] - bands[-1])
    penalty = (config.w_excess * excess + config.w_dropout * dropout
               + config.w_imbalance * imbalance)
    return 1.0 - min(1.0, penalty)


def perspective_project(p, spec: PerspectiveSpec) -> Point2:
    """Homogeneous divide of a 3-D point onto the plane at distance d."""
    x, y, z = p
    if z == 0:
        raise ValueError("projection undefined for z = 0")
    # scale factor first: on the focal plane it is exactly 1, so points there
    # come back unchanged
    s = spec.d / z
    return Point2(x * s, y * s)


def perspective_unproject(q, z: float, spec: PerspectiveSpec):
    """Inverse of ``perspective_project`` for a known depth z."""
    if z == 0:
        raise ValueError("projection undefined for z = 0")
    s = z / spec.d
    return (q[0] * s, q[1] * s, z)


def foreshortening_severity(apex_truncation: float, tilt: float,
                            config: ForeshorteningConfig = ForeshorteningConfig()) -> float:
    if not 0.0 <= apex_truncation <= 1.0:
        raise ValueError(f"apex_truncation must lie in [0, 1], got {apex_truncation}")
    if not abs(tilt) <= config.max_tilt:
        raise ValueError(f"|tilt| must not exceed {config.max_tilt}, got {tilt}")
    tilt_term = config.tilt_weight * abs(tilt) / config.max_tilt
    return 1.0 - (1.0 - apex_truncation) * (1.0 - tilt_term)


def frame_report(frame, band_count: int = 4, config: GainConfig = GainConfig(), mask=None) -> dict:
    """Per-frame metric record (the schema written by the CLI)."""
    c = rms_contrast(frame, mask)
    profile = depth_gain_profile(frame, band_count)
    return {
        "rms": c.rms,
        "mean_intensity": c.mean_intensity,
        "band_means": list(profile.band_means),
        "gain_score": gain_anomaly_score(profile, config),
    }
