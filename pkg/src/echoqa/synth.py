"""Synthetic echo-like clips with analytically known quality labels.

A stylized cardiac phantom (fan-shaped sector, chamber ellipses whose size
follows a cardiac phase, bright walls and septum) is degraded along four
axes, one per quality attribute:

* visibility      rotation of the anatomy about the sector apex
* clarity         contrast compression toward the sector mean
* depth-gain      depth-dependent gain ramp plus near-field excess gain
* foreshortening  apex truncation and out-of-plane tilt (perspective)

Labels are computed from the parameters through the indicator functionals,
never from the rendered pixels.  Geometric degradations are composed into
one inverse coordinate map; intensity degradations are then applied in the
order contrast, gain, speckle, sector mask.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import ATTRIBUTES
from .dataio import ManifestRow, quality_band, write_manifest, write_pgm
from .indicators import (
    ForeshorteningConfig, GainConfig, GainProfile, foreshortening_severity, gain_anomaly_score,
)
from .tensor import SeededRng

VIEWS = ("A4C", "PLAX")
MAX_BETA = math.pi / 6
MAX_GAIN_SLOPE = 1.5


@dataclass(frozen=True)
class SynthParams:
    view: str = "A4C"
    rotation_beta: float = 0.0
    contrast_level: float = 1.0
    gain_slope: float = 0.0
    gain_excess: float = 0.0
    apex_truncation: float = 0.0
    tilt: float = 0.0
    speckle_seed: int = 0
    T: int = 3

    def __post_init__(self):
        checks = [
            (self.view in VIEWS, f"view must be one of {VIEWS}"),
            (abs(self.rotation_beta) <= MAX_BETA, f"|rotation_beta| must not exceed {MAX_BETA:.4f}"),
            (0.0 <= self.contrast_level <= 1.0, "contrast_level must lie in [0, 1]"),
            (0.0 <= self.gain_slope <= MAX_GAIN_SLOPE, f"gain_slope must lie in [0, {MAX_GAIN_SLOPE}]"),
            (0.0 <= self.gain_excess <= 1.0, "gain_excess must lie in [0, 1]"),
            (0.0 <= self.apex_truncation <= 1.0, "apex_truncation must lie in [0, 1]"),
            (abs(self.tilt) <= ForeshorteningConfig().max_tilt, "tilt out of range"),
            (0 <= self.speckle_seed < 2**64, "speckle_seed must be a 64-bit unsigned integer"),
            (self.T >= 1, "T must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(f"{msg} (got {self})")


@dataclass(frozen=True)
class SynthConfig:
    height: int = 64
    width: int = 64
    supersample: int = 2
    speckle_shape: float = 12.0    # gamma shape; speckle std = 1/sqrt(shape)
    excess_gain: float = 3.0       # near-field gain multiplier at gain_excess = 1
    decay_onset: float = 0.25      # depth where the gain_slope ramp begins
    cycle_frames: float = 8.0
    contrast_floor: float = 0.2    # contrast at or below this scores as fully degraded
    # 16 bands: the label moves in steps of 1/16 instead of 1/4 as bands cross
    # the thresholds, which keeps it close to continuous in the parameters
    gain: GainConfig = field(default_factory=lambda: GainConfig(band_count=16))
    foreshortening: ForeshorteningConfig = field(default_factory=ForeshorteningConfig)


@dataclass(frozen=True)
class Clip:
    clip_id: str
    view: str
    frames: np.ndarray       # uint8 [T, H, W]

    def tensor(self) -> np.ndarray:
        """[T, 1, H, W] float32 in [0, 1]."""
        return (self.frames.astype(np.float32) / np.float32(255))[:, None]


@dataclass(frozen=True)
class AnnotationRecord:
    clip_id: str
    view: str
    raw_scores: tuple
    normalized_scores: tuple
    band: str


# ground truth

def gain_multiplier(depth, params: SynthParams, config: SynthConfig):
    """Intensity multiplier at normalized depth (0 = near field, 1 = far).

    The decay ramp starts below the near-field band, so the near band is
    unaffected by ``gain_slope`` and the near/far gap grows with it.
    """
    d = np.asarray(depth)
    onset = config.decay_onset
    decay = np.clip(1.0 - params.gain_slope * np.clip(d - onset, 0.0, None) / (1.0 - onset), 0.0, None)
    boost = 1.0 + (config.excess_gain - 1.0) * params.gain_excess * (1.0 - d)
    return decay * boost


def nominal_gain_profile(params: SynthParams, config: SynthConfig = SynthConfig()) -> GainProfile:
    """Band means a mid-grey reference would show under the clip's gain settings."""
    n = config.gain.band_count
    depth = (np.arange(n) + 0.5) / n
    means = np.clip(config.gain.mid * gain_multiplier(depth, params, config), 0.0, 1.0)
    return GainProfile(tuple(float(v) for v in means), n)


def attribute_severities(params: SynthParams, config: SynthConfig = SynthConfig()):
    visibility = abs(params.rotation_beta) / MAX_BETA
    # rms contrast scales linearly under compression toward the mean; below
    # the floor speckle hides the anatomy, so the scale ends there
    floor = config.contrast_floor
    clarity = min(1.0, (1.0 - params.contrast_level) / (1.0 - floor))
    depth_gain = 1.0 - gain_anomaly_score(nominal_gain_profile(params, config), config.gain)
    foreshortening = foreshortening_severity(params.apex_truncation, params.tilt, config.foreshortening)
    return (visibility, clarity, depth_gain, foreshortening)


def severity_to_raw(s: float) -> int:
    """raw = round(9 (1 - s)), halves rounded up."""
    return int(math.floor(9.0 * (1.0 - s) + 0.5 + 1e-9))


def annotate(clip_id: str, params: SynthParams, config: SynthConfig = SynthConfig()) -> AnnotationRecord:
    raw = tuple(severity_to_raw(s) for s in attribute_severities(params, config))
    return AnnotationRecord(clip_id, params.view, raw, tuple(r / 9 for r in raw), quality_band(raw))


# rendering

_TISSUE = 0.32
_WALL = 0.78
_BLOOD = 0.05
_APEX = (0.5, 0.02)
_SECTOR_HALF_ANGLE = math.radians(42)
_SECTOR_RADIUS = 0.97
_PROJ_DISTANCE = 1.5


def _chambers(view, systole):
    """(cx, cy, ax, ay, wall, contracts) per chamber in anatomy coordinates."""
    k = 1.0 - 0.18 * systole
    if view == "A4C":
        return [
            (0.60, 0.40, 0.105 * k, 0.24 * k, 0.035, True),   # LV
            (0.39, 0.42, 0.085 * k, 0.19 * k, 0.030, True),   # RV
            (0.60, 0.77, 0.095, 0.10, 0.025, False),          # LA
            (0.39, 0.77, 0.085, 0.10, 0.025, False),          # RA
        ]
    return [
        (0.46, 0.56, 0.27 * k, 0.10 * k, 0.040, True),        # LV
        (0.46, 0.30, 0.24 * k, 0.055 * k, 0.030, True),       # RV
        (0.80, 0.50, 0.075, 0.075, 0.030, False),             # aortic root / LA
    ]


def _anatomy(x, y, view, systole, truncation):
    img = np.full(x.shape, _TISSUE)
    # septum: bright band along the long axis
    if view == "A4C":
        along = y
        img = np.where((np.abs(x - 0.495) < 0.025) & (y > 0.16) & (y < 0.9), _WALL, img)
        apex_start, span = 0.14, 0.32
    else:
        along = 1.0 - x
        img = np.where((np.abs(y - 0.42) < 0.022) & (x > 0.2) & (x < 0.75), _WALL, img)
        apex_start, span = 0.25, 0.30
    for cx, cy, ax, ay, wall, _ in _chambers(view, systole):
        r = np.sqrt(((x - cx) / ax) ** 2 + ((y - cy) / ay) ** 2)
        outer = 1.0 + wall / min(ax, ay)
        img = np.where((r >= 1.0) & (r < outer), _WALL, img)
        img = np.where(r < 1.0, _BLOOD, img)
    if truncation > 0:
        cut = apex_start + truncation * span
        img = np.where((along < cut) & (along > apex_start - 0.06), _TISSUE * 0.8, img)
    return img


def _inverse_map(u, v, params: SynthParams):
    """Pixel coordinates -> anatomy coordinates (rotation, then tilt)."""
    ax, ay = _APEX
    b = -params.rotation_beta
    cb, sb = math.cos(b), math.sin(b)
    dx, dy = u - ax, v - ay
    x = dx * cb - dy * sb + ax
    y = dx * sb + dy * cb + ay
    t = params.tilt
    if t != 0.0:
        # anatomy plane tilted about the axis through the heart centre; the
        # projected coordinate along the long axis is d*Y*cos(t)/(d + Y*sin(t))
        d = _PROJ_DISTANCE
        if params.view == "A4C":
            a, c = y - 0.5, x - 0.5
        else:
            a, c = x - 0.5, y - 0.5
        along = a * d / (d * math.cos(t) - a * math.sin(t))
        z = d + along * math.sin(t)
        across = c * z / d
        if params.view == "A4C":
            x, y = across + 0.5, along + 0.5
        else:
            x, y = along + 0.5, across + 0.5
    return x, y


def sector_mask(u, v):
    dx, dy = u - _APEX[0], v - _APEX[1]
    r = np.hypot(dx, dy)
    ang = np.arctan2(dx, dy)
    return (r <= _SECTOR_RADIUS) & (np.abs(ang) <= _SECTOR_HALF_ANGLE) & (dy >= 0)


def render_frames(params: SynthParams, config: SynthConfig = SynthConfig(), phase0: float = 0.0):
    """Float frames [T, H, W] in [0, 1] before quantization."""
    s = config.supersample
    hh, ww = config.height * s, config.width * s
    v, u = np.meshgrid((np.arange(hh) + 0.5) / hh, (np.arange(ww) + 0.5) / ww, indexing="ij")
    mask = sector_mask(u, v)
    x, y = _inverse_map(u, v, params)
    depth = v
    gain = gain_multiplier(depth, params, config)
    speckle_rng = SeededRng(params.speckle_seed)
    frames = []
    for t in range(params.T):
        phase = phase0 + 2 * math.pi * t / config.cycle_frames
        systole = 0.5 + 0.5 * math.sin(phase)
        img = _anatomy(x, y, params.view, systole, params.apex_truncation)
        mu = img[mask].mean()
        img = mu + params.contrast_level * (img - mu)
        img = np.clip(img * gain, 0.0, 1.0)
        shape = config.speckle_shape
        img = img * speckle_rng.gen.gamma(shape, 1.0 / shape, size=img.shape)
        img = np.where(mask, np.clip(img, 0.0, 1.0), 0.0)
        frames.append(img.reshape(config.height, s, config.width, s).mean(axis=(1, 3)))
    return np.stack(frames)


def quantize(frames) -> np.ndarray:
    return np.clip(np.floor(np.asarray(frames) * 255 + 0.5), 0, 255).astype(np.uint8)


def generate_clip(params: SynthParams, rng: SeededRng | None = None, clip_id: str = "clip",
                  config: SynthConfig = SynthConfig()):
    rng = rng if rng is not None else SeededRng(params.speckle_seed)
    phase0 = float(rng.uniform(0.0, 2 * math.pi))
    frames = quantize(render_frames(params, config, phase0))
    return Clip(clip_id, params.view, frames), annotate(clip_id, params, config)


# parameter distribution

@dataclass(frozen=True)
class ParamDistribution:
    """Latent-quality sampler.

    A clip-level degradation level q ~ U(0, 1) is drawn; each attribute's
    degradation u_a = clip(q + jitter * N(0, 1), 0, 1) then sets that
    attribute's parameters, so attributes are correlated the way real
    acquisitions are (a poor window tends to degrade everything).
    """
    jitter: float = 0.15
    skew: float = 0.75      # q = U ** skew; < 1 shifts mass toward degraded clips
    view_probs: tuple = (0.5, 0.5)
    T: int = 3

    def sample(self, rng: SeededRng) -> SynthParams:
        q = rng.uniform() ** self.skew
        u = np.clip(q + self.jitter * rng.normal(4), 0.0, 1.0)
        view = VIEWS[int(rng.uniform() >= self.view_probs[0])]
        sign = 1.0 if rng.uniform() < 0.5 else -1.0
        mix = rng.uniform()
        tilt_sign = 1.0 if rng.uniform() < 0.5 else -1.0
        tilt_frac = rng.uniform()
        max_tilt = ForeshorteningConfig().max_tilt
        return SynthParams(
            view=view,
            rotation_beta=sign * float(u[0]) * MAX_BETA,
            contrast_level=1.0 - (1.0 - SynthConfig.contrast_floor) * float(u[1]),
            gain_slope=MAX_GAIN_SLOPE * float(u[2]),
            gain_excess=float(u[2]) * (0.5 + 0.5 * mix),
            apex_truncation=float(u[3]) ** 1.5,
            tilt=tilt_sign * max_tilt * float(u[3]) * tilt_frac,
            speckle_seed=int(rng.integers(0, 2**63)),
            T=self.T,
        )


def generate_dataset(n_clips: int, out_dir, distribution: ParamDistribution = ParamDistribution(),
                     split_ratio: float = 0.8, rng: SeededRng | None = None,
                     config: SynthConfig = SynthConfig()):
    """Render ``n_clips`` clips under ``out_dir`` and write train/test manifests.

    Clip k uses ``rng.child(k)``; the split is by clip.  Returns the
    (train, test) manifest rows.
    """
    if n_clips < 2:
        raise ValueError("need at least 2 clips to split")
    if not 0 < split_ratio < 1:
        raise ValueError("split_ratio must lie in (0, 1)")
    n_train = int(math.floor(n_clips * split_ratio + 0.5))
    n_train = min(max(n_train, 1), n_clips - 1)
    rng = rng if rng is not None else SeededRng(0)
    out = Path(out_dir)
    frames_dir = out / "frames"
    frames_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for k in range(n_clips):
        crng = rng.child(k)
        params = distribution.sample(crng.child(0))
        clip_id = f"clip{k:06d}"
        clip, ann = generate_clip(params, crng.child(1), clip_id, config)
        paths = []
        for t, frame in enumerate(clip.frames):
            rel = f"frames/{clip_id}_{t}.pgm"
            write_pgm(out / rel, frame)
            paths.append(rel)
        rows.append(ManifestRow.from_raw(clip_id, params.view, paths, ann.raw_scores))
    order = rng.child(n_clips).permutation(n_clips)
    train_idx = sorted(order[:n_train])
    test_idx = sorted(order[n_train:])
    train = [rows[i] for i in train_idx]
    test = [rows[i] for i in test_idx]
    write_manifest(out / "train.jsonl", train)
    write_manifest(out / "test.jsonl", test)
    return train, test


def params_record(params: SynthParams) -> dict:
    return asdict(params)


def attribute_names():
    return ATTRIBUTES
