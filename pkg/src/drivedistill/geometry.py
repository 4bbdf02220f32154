"""Coordinate frames, pinhole cameras, ground-plane projection, keypoints.

Conventions used across the whole package:

* world / ego frame: x forward (east), y left (north), z up, yaw measured
  counter-clockwise from +x and normalized to (-pi, pi].
* BEV grid: ego sits at a fixed anchor cell facing "up", i.e. row index
  decreases ahead of the vehicle and column index decreases to its left.
* camera frame: x right, y down, z forward (standard computer vision).
* image: u = column in pixels (rightward), v = row in pixels (downward).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

TWO_PI = 2.0 * math.pi


def normalize_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    a = math.fmod(a, TWO_PI)
    if a <= -math.pi:
        a += TWO_PI
    elif a > math.pi:
        a -= TWO_PI
    return a


@dataclass(frozen=True)
class Pose2D:
    """Planar pose in world coordinates (meters / radians)."""

    x: float
    y: float
    yaw: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y) and math.isfinite(self.yaw)):
            raise ValueError(f"Pose2D fields must be finite, got ({self.x}, {self.y}, {self.yaw})")
        object.__setattr__(self, "yaw", normalize_angle(self.yaw))

    def transform_to_local(self, px: float, py: float) -> tuple[float, float]:
        """World point -> this pose's local frame (x forward, y left)."""
        dx, dy = px - self.x, py - self.y
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return c * dx + s * dy, -s * dx + c * dy

    def transform_to_world(self, lx: float, ly: float) -> tuple[float, float]:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return self.x + c * lx - s * ly, self.y + s * lx + c * ly

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.yaw])


def world_points_to_ego(points: np.ndarray, ego: Pose2D) -> np.ndarray:
    """Vectorized world->ego transform for an (N, 2) array."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    c, s = math.cos(ego.yaw), math.sin(ego.yaw)
    d = pts - np.array([ego.x, ego.y])
    return np.stack([c * d[:, 0] + s * d[:, 1], -s * d[:, 0] + c * d[:, 1]], axis=1)


def ego_points_to_world(points: np.ndarray, ego: Pose2D) -> np.ndarray:
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    c, s = math.cos(ego.yaw), math.sin(ego.yaw)
    return np.stack(
        [ego.x + c * pts[:, 0] - s * pts[:, 1], ego.y + s * pts[:, 0] + c * pts[:, 1]], axis=1
    )


# ---------------------------------------------------------------------------
# BEV grid geometry


@dataclass(frozen=True)
class BevGeometry:
    """Maps between BEV cells and ego-frame meters.

    The ego is anchored at (ego_row, ego_col) heading toward row 0.
    """

    rows: int = 128
    cols: int = 128
    meters_per_cell: float = 0.25
    ego_row: int = 96
    ego_col: int = 64

    def cell_to_ego(self, row: float, col: float) -> tuple[float, float]:
        """Cell center (row, col) -> ego-frame (x forward, y left) meters."""
        x = (self.ego_row - row) * self.meters_per_cell
        y = (self.ego_col - col) * self.meters_per_cell
        return x, y

    def ego_to_cell(self, x: float, y: float) -> tuple[float, float]:
        row = self.ego_row - x / self.meters_per_cell
        col = self.ego_col - y / self.meters_per_cell
        return row, col

    def cell_centers_ego(self) -> np.ndarray:
        """(rows, cols, 2) array of ego-frame (x, y) at every cell center."""
        r = np.arange(self.rows)[:, None]
        c = np.arange(self.cols)[None, :]
        x = (self.ego_row - r) * self.meters_per_cell
        y = (self.ego_col - c) * self.meters_per_cell
        return np.stack(np.broadcast_arrays(x, y), axis=-1)


# ---------------------------------------------------------------------------
# Camera model and ground-plane projection


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera rigidly mounted on the ego vehicle.

    ``rotation`` maps ego-frame directions into the camera frame;
    ``translation`` is the optical center in ego coordinates (meters).
    """

    intrinsics: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray
    yaw_offset: float
    image_size: tuple[int, int]  # (width, height) pixels
    fov: float  # horizontal, degrees

    def __post_init__(self):
        k = np.asarray(self.intrinsics, dtype=float)
        r = np.asarray(self.rotation, dtype=float)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if k.shape != (3, 3) or r.shape != (3, 3):
            raise ValueError("intrinsics and rotation must be 3x3")
        if not np.allclose(np.tril(k, -1), 0.0, atol=1e-12):
            raise ValueError("intrinsics must be upper-triangular")
        if k[0, 0] <= 0 or k[1, 1] <= 0:
            raise ValueError("focal entries must be positive")
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-9):
            raise ValueError("rotation must be orthonormal")
        if not math.isclose(float(np.linalg.det(r)), 1.0, abs_tol=1e-9):
            raise ValueError("rotation must have determinant +1")
        object.__setattr__(self, "intrinsics", k)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def from_mount(
        yaw_deg: float,
        pitch_deg: float = 8.0,
        position: tuple[float, float, float] = (1.2, 0.0, 1.6),
        image_size: tuple[int, int] = (480, 270),
        fov_deg: float = 64.0,
    ) -> "CameraModel":
        """Build a camera from mount yaw (CCW, degrees) and downward pitch."""
        yaw = math.radians(yaw_deg)
        pitch = math.radians(pitch_deg)
        cp, sp = math.cos(pitch), math.sin(pitch)
        cy, sy = math.cos(yaw), math.sin(yaw)
        forward = np.array([cp * cy, cp * sy, -sp])
        right = np.array([sy, -cy, 0.0])
        down = np.cross(forward, right)
        rotation = np.stack([right, down, forward], axis=0)
        w, h = image_size
        fx = (w / 2.0) / math.tan(math.radians(fov_deg) / 2.0)
        intrinsics = np.array([[fx, 0.0, w / 2.0], [0.0, fx, h / 2.0], [0.0, 0.0, 1.0]])
        return CameraModel(
            intrinsics=intrinsics,
            rotation=rotation,
            translation=np.asarray(position, dtype=float),
            yaw_offset=yaw,
            image_size=(w, h),
            fov=fov_deg,
        )

    def project(self, point_ego: np.ndarray, scale: float = 1.0, min_depth: float = 0.1):
        """Project ego-frame 3D point(s) -> ((u, v), depth, valid).

        Accepts a single (3,) point or an (N, 3) batch. Validity requires
        positive depth and the pixel inside the image.
        """
        pts = np.asarray(point_ego, dtype=float)
        single = pts.ndim == 1
        pts = pts.reshape(-1, 3)
        cam = (pts - self.translation) @ self.rotation.T
        p = scale * (cam @ self.intrinsics.T)
        w = p[:, 2]
        depth = cam[:, 2]
        safe = np.abs(w) > 1e-12
        uv = np.full((len(pts), 2), np.nan)
        uv[safe] = p[safe, :2] / w[safe, None]
        width, height = self.image_size
        valid = (
            safe
            & (depth > min_depth)
            & (uv[:, 0] >= 0.0)
            & (uv[:, 0] < width)
            & (uv[:, 1] >= 0.0)
            & (uv[:, 1] < height)
        )
        if single:
            return uv[0], float(depth[0]), bool(valid[0])
        return uv, depth, valid


def ipm_project(
    query_cell: tuple[float, float],
    camera: CameraModel,
    scale: float = 1.0,
    grid: BevGeometry | None = None,
) -> tuple[float, float, bool]:
    """Map a BEV grid cell to its reference pixel in one camera.

    The cell is lifted to the ground plane (z = 0) in the ego frame and pushed
    through the camera's intrinsics/extrinsics with homogeneous normalization.
    Returns (u, v, valid); valid is False behind the camera, outside the image
    bounds, or when the homogeneous divide degenerates.
    """
    if scale <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    grid = grid or BevGeometry()
    ex, ey = grid.cell_to_ego(*query_cell)
    uv, _, valid = camera.project(np.array([ex, ey, 0.0]), scale=scale)
    return float(uv[0]), float(uv[1]), valid


def ipm_reference_points(
    grid: BevGeometry, cameras: list[CameraModel], scale: float = 1.0
) -> tuple[np.ndarray, np.ndarray]:
    """Reference pixels for every cell of ``grid`` in every camera.

    Returns (uv, valid) with shapes (n_cam, rows*cols, 2) and (n_cam, rows*cols).
    """
    centers = grid.cell_centers_ego().reshape(-1, 2)
    pts = np.concatenate([centers, np.zeros((len(centers), 1))], axis=1)
    uvs, valids = [], []
    for cam in cameras:
        uv, _, valid = cam.project(pts, scale=scale)
        uvs.append(uv)
        valids.append(valid)
    return np.stack(uvs), np.stack(valids)


# ---------------------------------------------------------------------------
# Keypoints: spatial soft-argmax and Chamfer distance


@dataclass
class KeypointSet:
    """Continuous (row, col) keypoints extracted from a feature grid.

    Weight 1.0 marks a well-defined keypoint; 0.0 marks the grid-center
    fallback of a channel with no activation above threshold.
    """

    points: np.ndarray  # (N, 2) float
    weights: np.ndarray  # (N,) float in [0, 1]
    grid_shape: tuple[int, int] | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 2)
        self.weights = np.asarray(self.weights, dtype=float).reshape(-1)
        if len(self.points) != len(self.weights):
            raise ValueError("points and weights must have equal length")
        if np.any(self.weights < 0):
            raise ValueError("weights must be nonnegative")
        if self.grid_shape is not None:
            h, w = self.grid_shape
            r, c = self.points[:, 0], self.points[:, 1]
            if np.any((r < 0) | (r > h - 1) | (c < 0) | (c > w - 1)):
                raise ValueError("keypoints must lie inside the source grid bounds")

    def __len__(self) -> int:
        return len(self.points)


def spatial_soft_argmax(
    feature_channel: np.ndarray,
    threshold: float = 0.5,
    temperature: float = 1.0,
    channel_name: str = "channel",
) -> tuple[float, float, float]:
    """Softmax-weighted expected (row, col) of one activation channel.

    ``threshold`` is applied to the sigmoid-normalized activations; cells at
    or below it are masked out of the softmax (computed over raw activations
    divided by ``temperature``, so it is shift-invariant when the threshold
    is shifted along with the activations). With no cell above threshold the
    grid center is returned with weight 0.
    """
    a = np.asarray(feature_channel, dtype=float)
    if a.ndim != 2 or a.size == 0:
        raise ValueError(f"{channel_name}: expected a non-empty 2D grid, got shape {a.shape}")
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"non-finite activations in {channel_name}")
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    raw_cut = math.log(threshold / (1.0 - threshold))  # sigmoid(a) > thr  <=>  a > logit(thr)
    mask = a > raw_cut
    h, w = a.shape
    if not mask.any():
        return (h - 1) / 2.0, (w - 1) / 2.0, 0.0
    vals = a[mask] / temperature
    vals -= vals.max()
    p = np.exp(vals)
    p /= p.sum()
    rows, cols = np.nonzero(mask)
    return float(p @ rows), float(p @ cols), 1.0


def extract_keypoints(
    feature_map: np.ndarray,
    n_keypoints: int = 10,
    threshold: float = 0.5,
    temperature: float = 1.0,
) -> KeypointSet:
    """Keypoints from the ``n_keypoints`` highest-response channels of a (C, H, W) map.

    Channel response is its maximum activation; ties break toward the lower
    channel index so the selection is deterministic.
    """
    fm = np.asarray(feature_map, dtype=float)
    if fm.ndim != 3:
        raise ValueError(f"expected (C, H, W) feature map, got shape {fm.shape}")
    if not np.all(np.isfinite(fm)):
        bad = int(np.argwhere(~np.isfinite(fm).all(axis=(1, 2))).flat[0])
        raise ValueError(f"non-finite activations in channel {bad}")
    responses = fm.max(axis=(1, 2))
    order = np.argsort(-responses, kind="stable")[:n_keypoints]
    pts, wts = [], []
    for ch in order:
        r, c, weight = spatial_soft_argmax(
            fm[ch], threshold=threshold, temperature=temperature, channel_name=f"channel {ch}"
        )
        pts.append((r, c))
        wts.append(weight)
    return KeypointSet(np.array(pts), np.array(wts), grid_shape=fm.shape[1:])


def chamfer_distance(a: KeypointSet | np.ndarray, b: KeypointSet | np.ndarray) -> float:
    """Symmetric sum of nearest-neighbor squared distances between two point sets."""
    pa = a.points if isinstance(a, KeypointSet) else np.asarray(a, dtype=float).reshape(-1, 2)
    pb = b.points if isinstance(b, KeypointSet) else np.asarray(b, dtype=float).reshape(-1, 2)
    if len(pa) == 0 or len(pb) == 0:
        raise ValueError("chamfer_distance requires non-empty point sets")
    d2 = ((pa[:, None, :] - pb[None, :, :]) ** 2).sum(axis=2)
    return float(d2.min(axis=1).sum() + d2.min(axis=0).sum())


# ---------------------------------------------------------------------------
# Camera rig text configuration

RIG_KEYS = {"yaw_deg", "pitch_deg", "width", "height", "fov_deg", "pos"}


def default_rig(image_size: tuple[int, int] = (480, 270)) -> list[CameraModel]:
    """Three forward cameras at yaws 0, -60, +60 degrees."""
    return [
        CameraModel.from_mount(0.0, image_size=image_size),
        CameraModel.from_mount(-60.0, image_size=image_size),
        CameraModel.from_mount(60.0, image_size=image_size),
    ]


def parse_rig(text: str) -> list[CameraModel]:
    """Parse a plain-text camera rig description.

    Format: one ``camera <name>`` line opens a block; indented ``key value``
    lines set yaw_deg, pitch_deg, width, height, fov_deg and pos (x y z).
    Blank lines and ``#`` comments are ignored. Unknown keys are an error.
    """
    cameras: list[CameraModel] = []
    block: dict | None = None

    def flush():
        if block is None:
            return
        cameras.append(
            CameraModel.from_mount(
                yaw_deg=block.get("yaw_deg", 0.0),
                pitch_deg=block.get("pitch_deg", 8.0),
                position=tuple(block.get("pos", (1.2, 0.0, 1.6))),
                image_size=(int(block.get("width", 480)), int(block.get("height", 270))),
                fov_deg=block.get("fov_deg", 64.0),
            )
        )

    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if parts[0] == "camera":
            flush()
            block = {}
        elif block is None:
            raise ValueError(f"rig line {lineno}: expected 'camera <name>' first")
        elif parts[0] == "pos":
            if len(parts) != 4:
                raise ValueError(f"rig line {lineno}: pos needs 3 values")
            block["pos"] = tuple(float(v) for v in parts[1:])
        elif parts[0] in RIG_KEYS:
            block[parts[0]] = float(parts[1])
        else:
            raise ValueError(f"rig line {lineno}: unknown key {parts[0]!r}")
    flush()
    if not cameras:
        raise ValueError("rig config defines no cameras")
    return cameras


def format_rig(cameras: list[CameraModel]) -> str:
    lines = []
    for i, cam in enumerate(cameras):
        w, h = cam.image_size
        pitch = math.degrees(math.asin(-cam.rotation[2, 2]))
        lines.append(f"camera cam{i}")
        lines.append(f"  yaw_deg {math.degrees(cam.yaw_offset):g}")
        lines.append(f"  pitch_deg {pitch:g}")
        lines.append(f"  width {w}")
        lines.append(f"  height {h}")
        lines.append(f"  fov_deg {cam.fov:g}")
        t = cam.translation
        lines.append(f"  pos {t[0]:g} {t[1]:g} {t[2]:g}")
    return "\n".join(lines) + "\n"
