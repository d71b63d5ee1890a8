"""
Point-cloud data model, text file I/O, synthetic scenes and sparse supervision.

The text format is one point per line, ``x y z r g b label``, with an
optional ``#classes k`` header; any other ``#`` line is a comment.
"""

import logging
import os
from fractions import Fraction
from typing import Optional, Union

import numpy as np
from pydantic import BaseModel, Field

from .errors import CloudFormatError, InfeasibleSceneError, SupervisionError

logger = logging.getLogger(__name__)

PathLike = Union[str, os.PathLike]

# Base colors per class; classes past the palette get seeded colors
_PALETTE = np.array([
    [0.55, 0.45, 0.35],  # floor
    [0.85, 0.85, 0.80],  # walls
    [0.80, 0.15, 0.15],
    [0.15, 0.60, 0.20],
    [0.15, 0.25, 0.80],
    [0.90, 0.75, 0.10],
    [0.60, 0.20, 0.70],
    [0.10, 0.70, 0.75],
])


class PointCloud:
    """
    Points with position, color and ground-truth class.

    Arrays are copied on construction and flagged read-only.
    """

    def __init__(self, positions, colors, gt_labels, num_classes: Optional[int] = None):
        positions = np.array(positions, dtype=np.float64).reshape(-1, 3)
        colors = np.array(colors, dtype=np.float64).reshape(-1, 3)
        gt_labels = np.array(gt_labels, dtype=np.int64).reshape(-1)

        n = len(positions)
        if n < 1:
            raise CloudFormatError("point cloud must contain at least one point")
        if len(colors) != n or len(gt_labels) != n:
            raise CloudFormatError(
                f"length mismatch: {n} positions, {len(colors)} colors, {len(gt_labels)} labels"
            )
        if not (np.all(np.isfinite(positions)) and np.all(np.isfinite(colors))):
            raise CloudFormatError("positions and colors must be finite")
        if np.any(colors < 0.0) or np.any(colors > 1.0):
            raise CloudFormatError("colors must lie in [0, 1]")

        if num_classes is None:
            num_classes = int(gt_labels.max()) + 1
        if num_classes < 1:
            raise CloudFormatError(f"num_classes must be positive, got {num_classes}")
        if gt_labels.min() < 0 or gt_labels.max() >= num_classes:
            bad = int(gt_labels[(gt_labels < 0) | (gt_labels >= num_classes)][0])
            raise CloudFormatError(f"label {bad} out of range [0, {num_classes})")

        for arr in (positions, colors, gt_labels):
            arr.flags.writeable = False
        self.positions = positions
        self.colors = colors
        self.gt_labels = gt_labels
        self.num_classes = int(num_classes)

    @property
    def n(self) -> int:
        return len(self.positions)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.gt_labels, minlength=self.num_classes)

    def translated(self, offset) -> 'PointCloud':
        """Copy of the cloud shifted by ``offset``."""
        return PointCloud(self.positions + np.asarray(offset, dtype=np.float64),
                          self.colors, self.gt_labels, self.num_classes)

    def __repr__(self) -> str:
        return f"PointCloud(n={self.n}, num_classes={self.num_classes})"


class SupervisionMask:
    """Per-point flag marking the annotated points of a cloud."""

    def __init__(self, supervised):
        supervised = np.array(supervised, dtype=bool).reshape(-1)
        supervised.flags.writeable = False
        self.supervised = supervised

    def __len__(self) -> int:
        return len(self.supervised)

    @property
    def count(self) -> int:
        return int(self.supervised.sum())

    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.supervised)


class SceneSpec(BaseModel):
    """Recipe for a synthetic indoor scene."""
    num_objects: int = Field(default=6, ge=0, description="Number of boxes/spheres placed on the floor")
    num_classes: int = Field(default=4, ge=2, description="Number of semantic classes")
    extent: float = Field(default=4.0, gt=0.0, description="Side length of the square room in meters")
    points_per_object: int = Field(default=200, ge=10, description="Points sampled per primitive")
    color_noise: float = Field(default=0.02, ge=0.0, le=0.2, description="Std-dev of per-point color noise")
    position_noise: float = Field(default=0.003, ge=0.0, description="Std-dev of per-point position noise in meters")

    class Config:
        extra = "forbid"


def load_cloud(path: PathLike, num_classes: Optional[int] = None) -> PointCloud:
    """
    Read a cloud from the text format.

    Args:
        path: File to read
        num_classes: Overrides the ``#classes`` header when given

    Returns:
        PointCloud with fields parsed in file order
    """
    header_classes = None
    rows = []
    with open(path, 'r', encoding='utf-8') as handle:
        for line_no, raw in enumerate(handle, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith('#'):
                tokens = line[1:].split()
                if len(tokens) == 2 and tokens[0] == 'classes':
                    try:
                        header_classes = int(tokens[1])
                    except ValueError:
                        raise CloudFormatError(f"{path}:{line_no}: bad classes header {line!r}")
                    if header_classes < 1:
                        raise CloudFormatError(f"{path}:{line_no}: classes must be positive")
                continue
            tokens = line.split()
            if len(tokens) != 7:
                raise CloudFormatError(
                    f"{path}:{line_no}: expected 7 fields 'x y z r g b label', got {len(tokens)}"
                )
            try:
                values = [float(t) for t in tokens[:6]]
                label = int(tokens[6])
            except ValueError:
                raise CloudFormatError(f"{path}:{line_no}: non-numeric field in {line!r}")
            rows.append((values, label, line_no))

    if not rows:
        raise CloudFormatError(f"{path}: file contains no points")

    declared = num_classes if num_classes is not None else header_classes
    labels = np.array([r[1] for r in rows], dtype=np.int64)
    if declared is not None:
        for _, label, line_no in rows:
            if label < 0 or label >= declared:
                raise CloudFormatError(f"{path}:{line_no}: label {label} out of range [0, {declared})")
    elif labels.min() < 0:
        line_no = rows[int(np.argmin(labels))][2]
        raise CloudFormatError(f"{path}:{line_no}: negative label {int(labels.min())}")

    data = np.array([r[0] for r in rows], dtype=np.float64)
    try:
        cloud = PointCloud(data[:, :3], data[:, 3:6], labels, declared)
    except CloudFormatError as e:
        raise CloudFormatError(f"{path}: {e.reason}")
    logger.debug(f"Loaded {cloud.n} points with {cloud.num_classes} classes from {path}")
    return cloud


def save_cloud(cloud: PointCloud, path: PathLike) -> None:
    """Write a cloud in the text format; floats use shortest round-trip repr."""
    lines = [f"#classes {cloud.num_classes}"]
    for pos, col, label in zip(cloud.positions.tolist(), cloud.colors.tolist(), cloud.gt_labels.tolist()):
        lines.append(" ".join([repr(v) for v in pos] + [repr(v) for v in col] + [str(label)]))
    with open(path, 'w', encoding='utf-8') as handle:
        handle.write("\n".join(lines) + "\n")
    logger.debug(f"Saved {cloud.n} points to {path}")


def _sample_plane(rng, count, origin, u, v):
    a = rng.random((count, 1))
    b = rng.random((count, 1))
    return origin + a * u + b * v


def _sample_box(rng, count, center, size):
    """Points on the five visible faces of an axis-aligned box resting on z=0."""
    sx, sy, sz = size
    x0, y0 = center[0] - sx / 2, center[1] - sy / 2
    faces = [
        (np.array([x0, y0, sz]), np.array([sx, 0, 0]), np.array([0, sy, 0])),  # top
        (np.array([x0, y0, 0]), np.array([sx, 0, 0]), np.array([0, 0, sz])),
        (np.array([x0, y0 + sy, 0]), np.array([sx, 0, 0]), np.array([0, 0, sz])),
        (np.array([x0, y0, 0]), np.array([0, sy, 0]), np.array([0, 0, sz])),
        (np.array([x0 + sx, y0, 0]), np.array([0, sy, 0]), np.array([0, 0, sz])),
    ]
    areas = np.array([sx * sy, sx * sz, sx * sz, sy * sz, sy * sz])
    face_ids = rng.choice(len(faces), size=count, p=areas / areas.sum())
    pts = np.empty((count, 3))
    for f, (origin, u, v) in enumerate(faces):
        sel = face_ids == f
        pts[sel] = _sample_plane(rng, int(sel.sum()), origin, u, v)
    return pts


def _sample_sphere(rng, count, center, radius):
    d = rng.normal(size=(count, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    # keep the part above the floor
    d[:, 2] = np.abs(d[:, 2])
    return center + radius * d


def _class_color(rng, label):
    if label < len(_PALETTE):
        return _PALETTE[label]
    return rng.uniform(0.1, 0.9, size=3)


def gen_synthetic(scene_spec: SceneSpec, seed: int) -> PointCloud:
    """
    Generate a room: floor (class 0), two walls (class 1) and boxes/spheres.

    Objects take classes 2..c-1 in turn, so every class gets at least
    ``points_per_object`` points. Deterministic given ``seed``.
    """
    c = scene_spec.num_classes
    if c > scene_spec.num_objects + 2:
        raise InfeasibleSceneError(
            f"{c} classes need at least {c - 2} objects, got {scene_spec.num_objects}"
        )

    rng = np.random.default_rng(seed)
    extent = scene_spec.extent
    ppo = scene_spec.points_per_object
    colors_by_class = np.array([_class_color(rng, k) for k in range(c)])

    parts = []
    # floor
    floor = _sample_plane(rng, ppo, np.zeros(3), np.array([extent, 0, 0]), np.array([0, extent, 0]))
    parts.append((floor, 0))
    # walls along x=0 and y=0
    height = extent / 2
    n_a = ppo // 2
    wall_a = _sample_plane(rng, n_a, np.zeros(3), np.array([0, extent, 0]), np.array([0, 0, height]))
    wall_b = _sample_plane(rng, ppo - n_a, np.zeros(3), np.array([extent, 0, 0]), np.array([0, 0, height]))
    parts.append((np.vstack([wall_a, wall_b]), 1))

    if c > 2:
        margin = min(0.6, extent / 4)
        for k in range(scene_spec.num_objects):
            label = 2 + k % (c - 2)
            center = rng.uniform(margin, extent - margin, size=2)
            if rng.random() < 0.5:
                size = rng.uniform(0.25, 0.6, size=3) * min(1.0, extent / 4)
                pts = _sample_box(rng, ppo, center, size)
            else:
                radius = rng.uniform(0.15, 0.35) * min(1.0, extent / 4)
                pts = _sample_sphere(rng, ppo, np.array([center[0], center[1], radius]), radius)
            parts.append((pts, label))
    elif scene_spec.num_objects:
        logger.info(f"Two-class scene: skipping {scene_spec.num_objects} objects")

    positions = np.vstack([p for p, _ in parts])
    labels = np.concatenate([np.full(len(p), lbl, dtype=np.int64) for p, lbl in parts])
    positions = positions + rng.normal(scale=scene_spec.position_noise, size=positions.shape)
    colors = colors_by_class[labels] + rng.normal(scale=scene_spec.color_noise, size=positions.shape)
    colors = np.clip(colors, 0.0, 1.0)

    cloud = PointCloud(positions, colors, labels, c)
    logger.debug(f"Generated synthetic scene seed={seed}: {cloud.n} points, counts={cloud.class_counts().tolist()}")
    return cloud


def floor_share(fraction: float, count: int, divisor: int = 1) -> int:
    """
    floor(fraction * count / divisor) on the decimal value of ``fraction``.

    0.29 * 100 is 28.999999999999996 in binary floating point; this gives 29.
    """
    return int(Fraction(str(fraction)) * count // divisor)


def supervision_budget(class_size: int, n: int, num_classes: int, rate: float) -> int:
    """Points to annotate in one class: min(size, max(1, floor(r*n/c)))."""
    return min(class_size, max(1, floor_share(rate, n, num_classes)))


def sample_supervision(cloud: PointCloud, rate: float, seed: int) -> SupervisionMask:
    """
    Spread a budget of ``rate * n`` annotations evenly over the classes.

    Classes absent from the cloud receive nothing; every present class
    receives at least one point.
    """
    if not (0.0 < rate <= 1.0):
        raise SupervisionError(f"supervision rate must be in (0, 1], got {rate}")

    rng = np.random.default_rng(seed)
    mask = np.zeros(cloud.n, dtype=bool)
    for label in range(cloud.num_classes):
        members = np.flatnonzero(cloud.gt_labels == label)
        if len(members) == 0:
            continue
        count = supervision_budget(len(members), cloud.n, cloud.num_classes, rate)
        chosen = rng.choice(members, size=count, replace=False)
        mask[chosen] = True
    logger.debug(f"Sampled {int(mask.sum())} supervised points at rate {rate}")
    return SupervisionMask(mask)
