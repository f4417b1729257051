"""Point-cloud frames, car labels, synthetic scenes and geometric augmentation.

Frames are KITTI-style ``NNNNNN.bin`` files of packed little-endian float32
``(x, y, z, reflectance)`` records with matching ``NNNNNN.txt`` label files
holding one ``class cx cy cz dx dy dz theta`` object per line.
Coordinates are x-forward, y-left, z-up, in meters.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, PlacementError, TruncationError

RECORD_DTYPE = np.dtype("<f4")
RECORD_BYTES = 16
OVERLAP_RETRIES = 20


def normalize_angle(theta: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    wrapped = theta - 2.0 * math.pi * math.ceil((theta - math.pi) / (2.0 * math.pi))
    if wrapped <= -math.pi:
        wrapped += 2.0 * math.pi
    return wrapped


def normalize_angles(theta: np.ndarray) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    wrapped = theta - 2.0 * np.pi * np.ceil((theta - np.pi) / (2.0 * np.pi))
    return np.where(wrapped <= -np.pi, wrapped + 2.0 * np.pi, wrapped)


@dataclass(frozen=True)
class Box3D:
    cx: float
    cy: float
    cz: float
    dx: float
    dy: float
    dz: float
    theta: float

    def __post_init__(self) -> None:
        values = self.as_tuple()
        if not all(math.isfinite(v) for v in values):
            raise ValueError(f"non-finite box field in {values}")
        if min(self.dx, self.dy, self.dz) <= 0:
            raise ValueError(f"box sizes must be positive, got {(self.dx, self.dy, self.dz)}")
        if not -math.pi < self.theta <= math.pi:
            object.__setattr__(self, "theta", normalize_angle(self.theta))

    def as_tuple(self) -> tuple[float, ...]:
        return (self.cx, self.cy, self.cz, self.dx, self.dy, self.dz, self.theta)

    def as_array(self) -> np.ndarray:
        return np.array(self.as_tuple(), dtype=np.float64)

    @classmethod
    def from_array(cls, values) -> "Box3D":
        return cls(*(float(v) for v in values))


@dataclass(frozen=True)
class GtObject:
    class_name: str
    box: Box3D

    def __post_init__(self) -> None:
        if not self.class_name:
            raise ValueError("class_name must be non-empty")


@dataclass(frozen=True, eq=False)
class PointCloud:
    """One LiDAR frame. ``points`` is an (N, 4) float64 array of x, y, z, r."""

    points: np.ndarray
    frame_id: int = 0

    def __post_init__(self) -> None:
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 4)
        if not np.isfinite(pts).all():
            raise ValueError("point cloud contains non-finite values")
        if pts.size and (pts[:, 3].min() < 0.0 or pts[:, 3].max() > 1.0):
            raise ValueError("reflectance must lie in [0, 1]")
        if self.frame_id < 0:
            raise ValueError("frame_id must be non-negative")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PointCloud):
            return NotImplemented
        return self.frame_id == other.frame_id and np.array_equal(self.points, other.points)


def frame_id_from_path(path: str | os.PathLike) -> int:
    stem = Path(path).stem
    try:
        return int(stem)
    except ValueError as exc:
        raise FormatError(f"frame file name must be numeric, got {Path(path).name!r}") from exc


def frame_path(directory: str | os.PathLike, frame_id: int, suffix: str = ".bin") -> Path:
    return Path(directory) / f"{frame_id:06d}{suffix}"


def read_frame(path: str | os.PathLike) -> PointCloud:
    path = Path(path)
    raw = path.read_bytes()  # FileNotFoundError for missing files
    if len(raw) % RECORD_BYTES:
        raise TruncationError(f"{path.name}: {len(raw)} bytes is not a multiple of {RECORD_BYTES}")
    data = np.frombuffer(raw, dtype=RECORD_DTYPE).reshape(-1, 4)
    if not np.isfinite(data).all():
        raise FormatError(f"{path.name}: non-finite value in frame")
    try:
        return PointCloud(data.astype(np.float64), frame_id_from_path(path))
    except ValueError as exc:
        raise FormatError(f"{path.name}: {exc}") from exc


def write_frame(cloud: PointCloud, path: str | os.PathLike) -> None:
    Path(path).write_bytes(cloud.points.astype(RECORD_DTYPE).tobytes())


def read_labels(path: str | os.PathLike) -> list[GtObject]:
    objects = []
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) != 8:
            raise FormatError(f"{Path(path).name}:{lineno}: expected 8 fields, got {len(fields)}")
        try:
            values = [float(v) for v in fields[1:]]
        except ValueError as exc:
            raise FormatError(f"{Path(path).name}:{lineno}: non-numeric field") from exc
        if min(values[3:6]) <= 0:
            raise FormatError(f"{Path(path).name}:{lineno}: box sizes must be positive")
        try:
            objects.append(GtObject(fields[0], Box3D(*values)))
        except ValueError as exc:
            raise FormatError(f"{Path(path).name}:{lineno}: {exc}") from exc
    return objects


def write_labels(objects: list[GtObject], path: str | os.PathLike) -> None:
    lines = [" ".join([o.class_name, *(repr(float(v)) for v in o.box.as_tuple())]) for o in objects]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


@dataclass(frozen=True)
class SynthParams:
    n_cars: int = 5
    range_x: tuple[float, float] = (5.0, 60.0)
    range_y: tuple[float, float] = (-30.0, 30.0)
    ground_density: float = 2.0
    surface_density: float = 40.0
    noise_sigma: float = 0.02
    seed: int = 0
    car_length: tuple[float, float] = (3.5, 4.5)
    car_width: tuple[float, float] = (1.5, 1.9)
    car_height: tuple[float, float] = (1.4, 1.7)

    def __post_init__(self) -> None:
        if self.n_cars < 0:
            raise ValueError("n_cars must be >= 0")
        if self.ground_density < 0 or self.surface_density < 0:
            raise ValueError("densities must be >= 0")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.range_x[1] <= self.range_x[0] or self.range_y[1] <= self.range_y[0]:
            raise ValueError("ranges must be non-empty intervals")


def _cuboid_shell(rng: np.random.Generator, box: Box3D, density: float) -> np.ndarray:
    """Sample points uniformly on the six faces of a box, in world coordinates."""
    half = np.array([box.dx, box.dy, box.dz]) / 2.0
    chunks = []
    for axis in range(3):
        u, v = [a for a in range(3) if a != axis]
        area = 4.0 * half[u] * half[v]
        for sign in (-1.0, 1.0):
            n = int(round(area * density))
            local = np.empty((n, 3))
            local[:, axis] = sign * half[axis]
            local[:, u] = rng.uniform(-half[u], half[u], n)
            local[:, v] = rng.uniform(-half[v], half[v], n)
            chunks.append(local)
    local = np.concatenate(chunks)
    c, s = math.cos(box.theta), math.sin(box.theta)
    world = np.empty_like(local)
    world[:, 0] = c * local[:, 0] - s * local[:, 1] + box.cx
    world[:, 1] = s * local[:, 0] + c * local[:, 1] + box.cy
    world[:, 2] = local[:, 2] + box.cz
    return world


def gen_synthetic_scene(params: SynthParams, frame_id: int = 0) -> tuple[PointCloud, list[GtObject]]:
    """Ground plane at z=0 plus ``n_cars`` cuboid car shells at random poses.

    Cars are placed with rejection sampling on bounding-circle distance in BEV;
    each car gets :data:`OVERLAP_RETRIES` attempts before :class:`PlacementError`.
    """
    rng = np.random.default_rng(params.seed)
    boxes: list[Box3D] = []
    radii: list[float] = []
    for k in range(params.n_cars):
        for _ in range(OVERLAP_RETRIES):
            dx = rng.uniform(*params.car_length)
            dy = rng.uniform(*params.car_width)
            dz = rng.uniform(*params.car_height)
            cx = rng.uniform(*params.range_x)
            cy = rng.uniform(*params.range_y)
            theta = normalize_angle(rng.uniform(-math.pi, math.pi))
            r = 0.5 * math.hypot(dx, dy)
            if all(math.hypot(cx - b.cx, cy - b.cy) > r + rb for b, rb in zip(boxes, radii)):
                boxes.append(Box3D(cx, cy, dz / 2.0, dx, dy, dz, theta))
                radii.append(r)
                break
        else:
            raise PlacementError(f"could not place car {k} without overlap after {OVERLAP_RETRIES} tries")

    chunks = []
    area = (params.range_x[1] - params.range_x[0]) * (params.range_y[1] - params.range_y[0])
    n_ground = int(round(area * params.ground_density))
    if n_ground:
        ground = np.column_stack([
            rng.uniform(*params.range_x, n_ground),
            rng.uniform(*params.range_y, n_ground),
            np.zeros(n_ground),
            rng.uniform(0.0, 0.3, n_ground),
        ])
        chunks.append(ground)
    for box in boxes:
        shell = _cuboid_shell(rng, box, params.surface_density)
        refl = rng.uniform(0.2, 1.0, (shell.shape[0], 1))
        chunks.append(np.hstack([shell, refl]))
    points = np.concatenate(chunks) if chunks else np.zeros((0, 4))
    if params.noise_sigma > 0 and points.size:
        points[:, :3] += rng.normal(0.0, params.noise_sigma, (points.shape[0], 3))
    labels = [GtObject("Car", b) for b in boxes]
    return PointCloud(points, frame_id), labels


def box_surface_distance(points: np.ndarray, box: Box3D) -> np.ndarray:
    """Unsigned distance from each xyz point to the surface of an oriented box."""
    pts = np.asarray(points, dtype=np.float64)[:, :3]
    c, s = math.cos(box.theta), math.sin(box.theta)
    rel = pts - np.array([box.cx, box.cy, box.cz])
    local = np.column_stack([c * rel[:, 0] + s * rel[:, 1], -s * rel[:, 0] + c * rel[:, 1], rel[:, 2]])
    half = np.array([box.dx, box.dy, box.dz]) / 2.0
    q = np.abs(local) - half
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
    inside = -np.minimum(q.max(axis=1), 0.0)
    return outside + inside


def _with_points(cloud: PointCloud, points: np.ndarray) -> PointCloud:
    return PointCloud(points, cloud.frame_id)


def flip_y(cloud: PointCloud, labels: list[GtObject]) -> tuple[PointCloud, list[GtObject]]:
    pts = cloud.points.copy()
    pts[:, 1] = -pts[:, 1]
    out = []
    for obj in labels:
        b = obj.box
        out.append(GtObject(obj.class_name, Box3D(b.cx, -b.cy, b.cz, b.dx, b.dy, b.dz, normalize_angle(-b.theta))))
    return _with_points(cloud, pts), out


def rotate_z(cloud: PointCloud, labels: list[GtObject], phi: float) -> tuple[PointCloud, list[GtObject]]:
    if not math.isfinite(phi):
        raise ValueError("rotation angle must be finite")
    c, s = math.cos(phi), math.sin(phi)
    pts = cloud.points.copy()
    x, y = cloud.points[:, 0], cloud.points[:, 1]
    pts[:, 0] = c * x - s * y
    pts[:, 1] = s * x + c * y
    out = []
    for obj in labels:
        b = obj.box
        box = Box3D(c * b.cx - s * b.cy, s * b.cx + c * b.cy, b.cz, b.dx, b.dy, b.dz, normalize_angle(b.theta + phi))
        out.append(GtObject(obj.class_name, box))
    return _with_points(cloud, pts), out


@dataclass
class Dataset:
    """A directory of ``NNNNNN.bin`` frames with optional ``NNNNNN.txt`` labels."""

    root: Path
    frame_ids: list[int] = field(default_factory=list)

    @classmethod
    def open(cls, root: str | os.PathLike) -> "Dataset":
        root = Path(root)
        if not root.is_dir():
            raise FileNotFoundError(f"data directory not found: {root}")
        ids = sorted(frame_id_from_path(p) for p in root.glob("*.bin"))
        return cls(root, ids)

    def __len__(self) -> int:
        return len(self.frame_ids)

    def frame(self, frame_id: int) -> PointCloud:
        return read_frame(frame_path(self.root, frame_id))

    def labels(self, frame_id: int) -> list[GtObject]:
        return read_labels(frame_path(self.root, frame_id, ".txt"))

    def frames(self):
        for fid in self.frame_ids:
            yield self.frame(fid)
