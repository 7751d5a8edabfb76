"""Meshes, point clouds, viewpoints, pinhole projection and rotation metrics."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DEFAULT_DIST = 2.5
DEFAULT_RESOLUTION = 37

# Angles are snapped to a 2**-32 rad lattice after wrapping. fmod/remainder
# are exact, so an azimuth shifted by 2*pi lands on the same lattice point
# unless the shifted float sits within ~1e-15 of a lattice midpoint.
_ANGLE_SCALE = float(2**32)
_TWO_PI = 2.0 * math.pi
_HALF_PI = 0.5 * math.pi


def _snap(angle: float) -> float:
    return round(float(angle) * _ANGLE_SCALE) / _ANGLE_SCALE


def wrap_azimuth(angle: float) -> float:
    """Wrap to [0, 2*pi)."""
    w = math.fmod(float(angle), _TWO_PI)
    if w < 0:
        w += _TWO_PI
    w = _snap(w)
    return 0.0 if w >= _TWO_PI else w


def wrap_signed(angle: float) -> float:
    """Wrap to [-pi, pi)."""
    w = _snap(math.remainder(float(angle), _TWO_PI))
    return _snap(w - _TWO_PI) if w >= math.pi else w


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


# ---------------------------------------------------------------------------
# Meshes and point clouds
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.ascontiguousarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError("face index out of range")
        object.__setattr__(self, "vertices", _readonly(v))
        object.__setattr__(self, "faces", _readonly(f))

    def face_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.faces[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def face_normals(self) -> np.ndarray:
        a, b, c = (self.vertices[self.faces[:, i]] for i in range(3))
        n = np.cross(b - a, c - a)
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        return np.divide(n, norm, out=np.zeros_like(n), where=norm > 0)

    @staticmethod
    def concat(meshes: list[TriMesh]) -> TriMesh:
        verts, faces, offset = [], [], 0
        for m in meshes:
            verts.append(m.vertices)
            faces.append(m.faces + offset)
            offset += len(m.vertices)
        return TriMesh(np.concatenate(verts), np.concatenate(faces))


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        p = np.ascontiguousarray(self.points, dtype=np.float64).reshape(-1, 3)
        object.__setattr__(self, "points", _readonly(p))
        if self.normals is not None:
            n = np.ascontiguousarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if n.shape != p.shape:
                raise ValueError("normals must match points")
            object.__setattr__(self, "normals", _readonly(n))

    def __len__(self) -> int:
        return len(self.points)


def sample_mesh_surface(
    mesh: TriMesh, n: int, seed: int, with_normals: bool = False
) -> PointCloud:
    """Uniform surface sampling: faces drawn proportionally to area, then
    uniform barycentric coordinates inside the chosen face."""
    if n < 1:
        raise ValueError("n must be >= 1")
    areas = mesh.face_areas()
    total = areas.sum()
    if not total > 0:
        raise ValueError("degenerate mesh")
    rng = np.random.default_rng(seed)
    face_idx = rng.choice(len(areas), size=n, p=areas / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    bary = np.stack([1.0 - r1, r1 * (1.0 - r2), r1 * r2], axis=1)
    tri = mesh.vertices[mesh.faces[face_idx]]  # (n, 3, 3)
    points = np.einsum("nk,nkd->nd", bary, tri)
    normals = mesh.face_normals()[face_idx] if with_normals else None
    return PointCloud(points, normals)


def normalize_cloud(cloud: PointCloud) -> PointCloud:
    """Center on the centroid and scale into the unit ball (max norm 1)."""
    pts = cloud.points
    if len(pts) < 1:
        raise ValueError("empty cloud")
    centered = pts - pts.mean(axis=0)
    extent = np.sqrt((centered**2).sum(axis=1)).max()
    if not extent > 0:
        raise ValueError("zero extent")
    return PointCloud(centered / extent, cloud.normals)


def farthest_point_sample(cloud: PointCloud | np.ndarray, m: int, seed: int) -> np.ndarray:
    """Greedy farthest point sampling; returns indices in selection order.

    The first index is the point nearest a seeded uniform draw inside the
    bounding box. Ties go to the lowest index.
    """
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, float)
    n = len(pts)
    if not 1 <= m <= n:
        raise ValueError(f"m={m} must be in [1, {n}]")
    rng = np.random.default_rng(seed)
    anchor = rng.uniform(pts.min(axis=0), pts.max(axis=0))
    first = int(np.argmin(((pts - anchor) ** 2).sum(axis=1)))
    selected = np.empty(m, dtype=np.int64)
    selected[0] = first
    mind = ((pts - pts[first]) ** 2).sum(axis=1)
    mind[first] = -1.0
    for i in range(1, m):
        nxt = int(np.argmax(mind))
        selected[i] = nxt
        np.minimum(mind, ((pts - pts[nxt]) ** 2).sum(axis=1), out=mind)
        mind[selected[: i + 1]] = -1.0
    return selected


# ---------------------------------------------------------------------------
# Poses and cameras
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Pose:
    """Viewpoint on a sphere around the object plus roll about the optical axis.

    Radians throughout. azim is wrapped to [0, 2pi), theta to [-pi, pi) and
    elev is clamped to [-pi/2, pi/2].
    """

    elev: float
    azim: float
    theta: float
    dist: float = DEFAULT_DIST

    def __post_init__(self):
        elev = min(max(_snap(self.elev), -_HALF_PI), _HALF_PI)
        object.__setattr__(self, "elev", elev)
        object.__setattr__(self, "azim", wrap_azimuth(self.azim))
        object.__setattr__(self, "theta", wrap_signed(self.theta))
        object.__setattr__(self, "dist", float(self.dist))

    @classmethod
    def from_degrees(cls, elev: float, azim: float, theta: float, dist: float = DEFAULT_DIST):
        return cls(math.radians(elev), math.radians(azim), math.radians(theta), dist)

    def as_array(self) -> np.ndarray:
        return np.array([self.elev, self.azim, self.theta])

    def degrees(self) -> tuple[float, float, float]:
        return math.degrees(self.elev), math.degrees(self.azim), math.degrees(self.theta)

    def to_dict(self) -> dict:
        return {"elev": self.elev, "azim": self.azim, "theta": self.theta, "dist": self.dist}

    @classmethod
    def from_dict(cls, d: dict) -> Pose:
        return cls(d["elev"], d["azim"], d["theta"], d.get("dist", DEFAULT_DIST))


@dataclass(frozen=True)
class Camera:
    focal: float
    cx: float
    cy: float
    height: int = DEFAULT_RESOLUTION
    width: int = DEFAULT_RESOLUTION

    @classmethod
    def default(cls, resolution: int = DEFAULT_RESOLUTION, dist: float = DEFAULT_DIST) -> Camera:
        # unit sphere at `dist` spans ~80% of the image
        focal = 0.8 * (resolution / 2.0) * dist
        return cls(focal, resolution / 2.0, resolution / 2.0, resolution, resolution)

    def intrinsics(self) -> np.ndarray:
        return np.array([[self.focal, 0.0, self.cx], [0.0, self.focal, self.cy], [0.0, 0.0, 1.0]])


def look_at_rotation(elev: float, azim: float) -> np.ndarray:
    """World-to-camera rotation for a camera on the view sphere looking at the
    origin with +Y up. Rows are the camera x (right), y (up), z (backward)
    axes expressed in world coordinates."""
    ce, se = math.cos(elev), math.sin(elev)
    ca, sa = math.cos(azim), math.sin(azim)
    back = (ce * sa, se, ce * ca)
    right = (ca, 0.0, -sa)
    up = (-se * sa, ce, -se * ca)
    return np.array([right, up, back])


def roll_rotation(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def pose_to_rotation(pose: Pose) -> np.ndarray:
    """World-to-camera rotation ``Roll(theta) @ LookAt(elev, azim)``."""
    return roll_rotation(pose.theta) @ look_at_rotation(pose.elev, pose.azim)


def geodesic_distance(r1: np.ndarray, r2: np.ndarray) -> float:
    """Angle of the relative rotation r1^T r2, in radians within [0, pi]."""
    cos = (np.trace(np.asarray(r1).T @ np.asarray(r2)) - 1.0) / 2.0
    return math.acos(min(1.0, max(-1.0, cos)))


def pose_error(p1: Pose, p2: Pose) -> float:
    return geodesic_distance(pose_to_rotation(p1), pose_to_rotation(p2))


@dataclass(frozen=True)
class Projection:
    u: np.ndarray
    v: np.ndarray
    depth: np.ndarray
    valid: np.ndarray = field(repr=False)


_NEAR = 1e-8


def project_points(cloud: PointCloud | np.ndarray, pose: Pose, cam: Camera) -> Projection:
    """Pinhole projection after the world-to-camera transform.

    ``depth`` is the distance along the viewing axis; points with
    non-positive depth are flagged invalid and get NaN pixel coordinates.
    Image v grows downward.
    """
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, float).reshape(-1, 3)
    rot = pose_to_rotation(pose)
    cam_pts = pts @ rot.T
    cam_pts[:, 2] -= pose.dist
    depth = -cam_pts[:, 2]
    valid = depth > _NEAR
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = np.where(valid, 1.0 / np.where(valid, depth, 1.0), np.nan)
    u = cam.cx + cam.focal * cam_pts[:, 0] * inv
    v = cam.cy - cam.focal * cam_pts[:, 1] * inv
    return Projection(u, v, depth, valid)


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

_PCLD_MAGIC = b"PCLD"
_PCLD_VERSION = 1
_FLAG_NORMALS = 1


def write_pointcloud(path: str | Path, cloud: PointCloud) -> None:
    flags = _FLAG_NORMALS if cloud.normals is not None else 0
    with open(path, "wb") as fh:
        fh.write(_PCLD_MAGIC)
        fh.write(struct.pack("<III", _PCLD_VERSION, len(cloud), flags))
        fh.write(cloud.points.astype("<f4").tobytes())
        if cloud.normals is not None:
            fh.write(cloud.normals.astype("<f4").tobytes())


def read_pointcloud(path: str | Path) -> PointCloud:
    data = Path(path).read_bytes()
    if data[:4] != _PCLD_MAGIC:
        raise ValueError(f"{path}: not a PCLD file")
    version, n, flags = struct.unpack_from("<III", data, 4)
    if version != _PCLD_VERSION:
        raise ValueError(f"{path}: unsupported PCLD version {version}")
    off = 16
    pts = np.frombuffer(data, "<f4", n * 3, off).reshape(n, 3)
    normals = None
    if flags & _FLAG_NORMALS:
        normals = np.frombuffer(data, "<f4", n * 3, off + n * 12).reshape(n, 3)
    return PointCloud(pts.astype(np.float64), None if normals is None else normals.astype(np.float64))


def write_obj(path: str | Path, mesh: TriMesh) -> None:
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path: str | Path) -> TriMesh:
    """Read v/f records of a triangulated wavefront file; other records are ignored."""
    verts, faces = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            if len(parts) != 4:
                raise ValueError(f"{path}:{lineno}: only triangular faces are supported")
            faces.append([int(tok.split("/")[0]) - 1 for tok in parts[1:]])
    if not faces:
        raise ValueError(f"{path}: no faces")
    return TriMesh(np.array(verts), np.array(faces))
