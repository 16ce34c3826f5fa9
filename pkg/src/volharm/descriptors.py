"""Image descriptors computed from precomputed image statistics.

Nothing here touches voxels. Callers hand in per-structure intensity moments,
a joint intensity histogram of the registered image against the atlas, and the
linear part of the image-to-atlas affine; this module turns them into the
16-entry feature vector used by the regressor.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import (
    EmptyHistogram,
    LengthMismatch,
    NonFiniteInput,
    ReflectionNotSupported,
    SingularMatrix,
    ZeroVariancePair,
)

__all__ = [
    "AFFINE_NAMES",
    "CNR_NAMES",
    "DEFAULT_CNR_PAIRS",
    "FEATURE_NAMES",
    "AffineDecomposition",
    "AffineMatrix",
    "FeatureVector",
    "JointHistogram",
    "StructureStats",
    "assemble_features",
    "cnr",
    "decompose_affine",
    "euler_to_matrix",
    "joint_histogram",
    "nmi",
    "recompose_affine",
]

AFFINE_NAMES = (
    "angle_x", "angle_y", "angle_z",
    "scale_x", "scale_y", "scale_z",
    "shear_xy", "shear_xz", "shear_yz",
)
CNR_NAMES = tuple(f"cnr_{i}" for i in range(1, 7))
FEATURE_NAMES = AFFINE_NAMES + ("nmi",) + CNR_NAMES

DEFAULT_CNR_PAIRS = (
    ("GM", "WM"),
    ("GM", "CSF"),
    ("WM", "CSF"),
    ("lobe_frontal", "cerebellum"),
    ("lobe_parietal", "cerebellum"),
    ("lobe_occipital", "cerebellum"),
)

_DET_EPS = 1e-12


@dataclass(frozen=True)
class StructureStats:
    label: str
    mean_intensity: float
    variance: float

    def __post_init__(self):
        if not self.label:
            raise ValueError("structure label must be non-empty")
        if not self.variance >= 0:
            raise ValueError(f"variance of {self.label!r} must be >= 0, got {self.variance}")


def cnr(t1: StructureStats, t2: StructureStats) -> float:
    """Contrast-to-noise ratio between two structures.

    ``sqrt(2) * |mean1 - mean2| / sqrt(var1 + var2)``. Symmetric in its
    arguments, so which structure is brighter does not matter.
    """
    pooled = t1.variance + t2.variance
    if pooled <= 0:
        raise ZeroVariancePair(f"{t1.label}/{t2.label}: both variances are zero")
    return math.sqrt(2.0) * abs(t1.mean_intensity - t2.mean_intensity) / math.sqrt(pooled)


@dataclass(frozen=True)
class JointHistogram:
    counts: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=float)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1] or counts.shape[0] < 2:
            raise ValueError(f"joint histogram must be a BxB grid with B >= 2, got {counts.shape}")
        if np.any(counts < 0):
            raise ValueError("histogram counts must be non-negative")
        object.__setattr__(self, "counts", counts)

    @property
    def bins(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> float:
        return float(self.counts.sum())


def _entropy(p: np.ndarray) -> float:
    p = p[p > 0]
    return float(-np.sum(p * np.log(p)))


def nmi(h: JointHistogram | np.ndarray) -> float:
    """Normalized mutual information ``(H(A) + H(B)) / H(A, B)``.

    Lies in ``[1, 2]``. A histogram with a single occupied bin has zero joint
    entropy and is treated as perfectly dependent (returns 2).
    """
    if not isinstance(h, JointHistogram):
        h = JointHistogram(h)
    total = h.total
    if total <= 0:
        raise EmptyHistogram("joint histogram has zero total count")
    p = h.counts / total
    h_joint = _entropy(p.ravel())
    if h_joint == 0.0:
        return 2.0
    return (_entropy(p.sum(axis=1)) + _entropy(p.sum(axis=0))) / h_joint


def _bin_index(values: np.ndarray, bins: int) -> np.ndarray:
    lo, hi = values.min(), values.max()
    if hi == lo:
        return np.zeros(values.shape, dtype=np.intp)
    idx = np.floor((values - lo) / (hi - lo) * bins).astype(np.intp)
    return np.clip(idx, 0, bins - 1)


def joint_histogram(a: Sequence[float], b: Sequence[float], bins: int = 64) -> JointHistogram:
    """Equal-width joint histogram of two paired intensity samples.

    Each axis spans its own sample's ``[min, max]``; the maximum lands in the
    last bin. A constant sample puts all of its mass in bin 0.
    """
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.size != b.size:
        raise LengthMismatch(f"sample lengths differ: {a.size} vs {b.size}")
    if a.size == 0:
        raise LengthMismatch("samples are empty")
    if bins < 2:
        raise ValueError("bins must be >= 2")
    counts = np.zeros((bins, bins))
    np.add.at(counts, (_bin_index(a, bins), _bin_index(b, bins)), 1.0)
    return JointHistogram(counts)


@dataclass(frozen=True)
class AffineMatrix:
    linear: np.ndarray
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        linear = np.asarray(self.linear, dtype=float)
        if linear.shape != (3, 3):
            raise ValueError(f"linear part must be 3x3, got {linear.shape}")
        object.__setattr__(self, "linear", linear)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float))

    @classmethod
    def from_row_major(cls, values: Sequence[float]) -> "AffineMatrix":
        """Build from 12 numbers: the top 3x4 block of a homogeneous affine."""
        m = np.asarray(values, dtype=float)
        if m.size != 12:
            raise ValueError(f"expected 12 affine entries, got {m.size}")
        m = m.reshape(3, 4)
        return cls(m[:, :3], m[:, 3])


@dataclass(frozen=True)
class AffineDecomposition:
    angles: tuple[float, float, float]
    scales: tuple[float, float, float]
    shears: tuple[float, float, float]


def _rx(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _ry(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rz(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def euler_to_matrix(angles: Sequence[float]) -> np.ndarray:
    """Rotation ``Rz(az) @ Ry(ay) @ Rx(ax)`` for ``angles = (ax, ay, az)``."""
    ax, ay, az = angles
    return _rz(az) @ _ry(ay) @ _rx(ax)


def _matrix_to_euler(r: np.ndarray) -> tuple[float, float, float]:
    sy = -r[2, 0]
    if abs(sy) >= 1.0 - 1e-12:
        # gimbal lock: only az - ax (or az + ax) is identifiable; pin ax to 0
        ay = math.copysign(math.pi / 2, sy)
        return 0.0, ay, math.atan2(-r[0, 1], r[1, 1])
    ay = math.asin(sy)
    ax = math.atan2(r[2, 1], r[2, 2])
    az = math.atan2(r[1, 0], r[0, 0])
    return ax, ay, az


def _shear_matrix(shears: Sequence[float]) -> np.ndarray:
    sxy, sxz, syz = shears
    return np.array([[1.0, sxy, sxz], [0.0, 1.0, syz], [0.0, 0.0, 1.0]])


def recompose_affine(dec: AffineDecomposition) -> np.ndarray:
    """Inverse of :func:`decompose_affine`: ``R @ Sh @ diag(scales)``."""
    return euler_to_matrix(dec.angles) @ _shear_matrix(dec.shears) @ np.diag(dec.scales)


def decompose_affine(m: AffineMatrix | np.ndarray) -> AffineDecomposition:
    """Split the linear part of an affine into rotation, shear and scale.

    Uses ``linear = Q @ U`` with ``Q`` a proper rotation and ``U`` upper
    triangular with a positive diagonal, then ``U = Sh @ diag(scales)`` with
    ``Sh`` unit upper triangular. The translation is ignored.
    """
    linear = m.linear if isinstance(m, AffineMatrix) else np.asarray(m, dtype=float)[:3, :3]
    det = np.linalg.det(linear)
    if abs(det) < _DET_EPS:
        raise SingularMatrix(f"affine linear part is singular (det={det:.3g})")
    if det < 0:
        raise ReflectionNotSupported(f"affine contains a reflection (det={det:.3g})")

    q, u = np.linalg.qr(linear)
    signs = np.sign(np.diag(u))
    q = q * signs
    u = signs[:, None] * u

    scales = np.diag(u).copy()
    shears = (u[0, 1] / u[1, 1], u[0, 2] / u[2, 2], u[1, 2] / u[2, 2])
    return AffineDecomposition(
        angles=_matrix_to_euler(q),
        scales=tuple(float(s) for s in scales),
        shears=tuple(float(s) for s in shears),
    )


@dataclass(frozen=True)
class FeatureVector:
    angles: tuple[float, float, float]
    scales: tuple[float, float, float]
    shears: tuple[float, float, float]
    nmi: float
    cnr: tuple[float, float, float, float, float, float]

    def __post_init__(self):
        if len(self.angles) != 3 or len(self.scales) != 3 or len(self.shears) != 3:
            raise ValueError("angles, scales and shears need three entries each")
        if len(self.cnr) != 6:
            raise ValueError(f"expected 6 CNR values, got {len(self.cnr)}")
        if not np.all(np.isfinite(self.as_array())):
            raise NonFiniteInput("feature vector contains non-finite entries")

    def as_array(self) -> np.ndarray:
        return np.array(
            [*self.angles, *self.scales, *self.shears, self.nmi, *self.cnr], dtype=float
        )

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "FeatureVector":
        v = [float(x) for x in values]
        if len(v) != len(FEATURE_NAMES):
            raise ValueError(f"expected {len(FEATURE_NAMES)} features, got {len(v)}")
        return cls(tuple(v[0:3]), tuple(v[3:6]), tuple(v[6:9]), v[9], tuple(v[10:16]))

    def as_dict(self) -> dict[str, float]:
        return dict(zip(FEATURE_NAMES, self.as_array().tolist()))


def assemble_features(dec: AffineDecomposition, nmi: float, cnrs: Sequence[float]) -> FeatureVector:
    """Flatten descriptors in the fixed order of :data:`FEATURE_NAMES`."""
    values = [*dec.angles, *dec.scales, *dec.shears, nmi, *cnrs]
    if not all(math.isfinite(float(v)) for v in values):
        raise NonFiniteInput("descriptor inputs must be finite")
    return FeatureVector(
        tuple(float(a) for a in dec.angles),
        tuple(float(s) for s in dec.scales),
        tuple(float(s) for s in dec.shears),
        float(nmi),
        tuple(float(c) for c in cnrs),
    )
