"""Depth image handling and the synthetic depth camera.

The camera sits at the world origin looking down +z.  Pixel (u, v) maps to the
ray direction ((u - cx)/fx, (v - cy)/fy, 1) with no half-pixel offset, so
rendering and deprojection are exact inverses of each other on pixel centers.
Background pixels carry the sentinel depth 0.0 (legal because near > 0).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .errors import ConfigError, FileFormatError
from .geometry import RigidPose

BACKGROUND = 0.0

#: Near-plane standoff below the closest cloud point, meters.
NEAR_PLANE_MARGIN = 0.01


@dataclass(frozen=True)
class CameraIntrinsics:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    near: float
    far: float

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ConfigError("image dimensions must be positive")
        if self.fx <= 0.0 or self.fy <= 0.0:
            raise ConfigError("focal lengths must be positive")
        if not 0.0 < self.near < self.far:
            raise ConfigError("need 0 < near < far")

    @staticmethod
    def default() -> "CameraIntrinsics":
        return CameraIntrinsics(160, 120, 150.0, 150.0, 80.0, 60.0, 0.05, 2.0)


@dataclass
class DepthImage:
    intrinsics: CameraIntrinsics
    depth: np.ndarray  # (height, width), meters; BACKGROUND where no return

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        cam = self.intrinsics
        if self.depth.shape != (cam.height, cam.width):
            raise ConfigError("depth array shape does not match intrinsics")

    def foreground_mask(self) -> np.ndarray:
        return self.depth != BACKGROUND


@dataclass
class PointCloud:
    points: np.ndarray  # (n, 3), camera frame

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class BoundaryPlaneSet:
    """Planes with inward normals: every cloud point satisfies n . x >= offset."""

    normals: np.ndarray  # (k, 3), unit
    offsets: np.ndarray  # (k,)

    def __len__(self) -> int:
        return len(self.offsets)

    @classmethod
    def empty(cls) -> "BoundaryPlaneSet":
        return cls(np.zeros((0, 3)), np.zeros(0))


# ---------------------------------------------------------------------------
# Deprojection and projection.
# ---------------------------------------------------------------------------

def deproject(image: DepthImage) -> PointCloud:
    """One 3D point per non-background pixel, pinhole model, row-major order."""
    cam = image.intrinsics
    v, u = np.nonzero(image.foreground_mask())
    d = image.depth[v, u]
    x = (u - cam.cx) * d / cam.fx
    y = (v - cam.cy) * d / cam.fy
    return PointCloud(np.stack([x, y, d], axis=1))


def project_points(cam: CameraIntrinsics, points: np.ndarray) -> np.ndarray:
    """World points to continuous pixel coordinates (u, v)."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    z = p[:, 2]
    u = p[:, 0] / z * cam.fx + cam.cx
    v = p[:, 1] / z * cam.fy + cam.cy
    return np.stack([u, v], axis=1)


# ---------------------------------------------------------------------------
# Voxel subsampling.
# ---------------------------------------------------------------------------

def voxel_subsample(cloud: PointCloud, voxel_size: float) -> PointCloud:
    """Mean point per occupied voxel of an origin-anchored grid.

    Output order is sorted by voxel index, and points are summed in a
    canonical within-voxel order, so the result is bit-identical under any
    permutation of the input.
    """
    if voxel_size <= 0.0:
        raise ConfigError("voxel_size must be > 0")
    pts = cloud.points
    if len(pts) == 0:
        return PointCloud(np.zeros((0, 3)))
    key = np.floor(pts / voxel_size).astype(np.int64)
    order = np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0], key[:, 2], key[:, 1], key[:, 0]))
    pts = pts[order]
    key = key[order]
    new_voxel = np.any(np.diff(key, axis=0) != 0, axis=1)
    starts = np.concatenate([[0], np.nonzero(new_voxel)[0] + 1])
    sums = np.add.reduceat(pts, starts, axis=0)
    counts = np.diff(np.concatenate([starts, [len(pts)]]))
    return PointCloud(sums / counts[:, None])


# ---------------------------------------------------------------------------
# Boundary planes (silhouette frustum).
# ---------------------------------------------------------------------------

def boundary_planes(cloud: PointCloud) -> BoundaryPlaneSet:
    """Free-space envelope of the cloud as seen from the camera.

    Sides are planes through the camera origin and the edges of the 2D convex
    hull of the image-plane projections; one near plane caps the front.  The
    region between the camera and the observed surface is known to be empty,
    so the model must stay inside this frustum.
    """
    pts = cloud.points
    if len(pts) < 3:
        return BoundaryPlaneSet.empty()
    proj = pts[:, :2] / pts[:, 2:3]
    try:
        hull = ConvexHull(proj)
    except QhullError:
        return BoundaryPlaneSet.empty()
    ring = hull.vertices  # counter-clockwise in the projection plane
    k = int(np.argmin(ring))
    ring = np.r_[ring[k:], ring[:k]]
    m = proj.mean(axis=0)
    interior = np.array([m[0], m[1], 1.0])
    ra = np.column_stack([proj[ring], np.ones(len(ring))])  # corner rays
    n = np.cross(ra, np.roll(ra, -1, axis=0))
    n /= np.linalg.norm(n, axis=1)[:, None]
    flip = n @ interior < 0.0
    n[flip] = -n[flip]
    normals = np.vstack([n, [0.0, 0.0, 1.0]])
    offsets = np.zeros(len(normals))
    offsets[-1] = float(pts[:, 2].min()) - NEAR_PLANE_MARGIN
    return BoundaryPlaneSet(normals, offsets)


# ---------------------------------------------------------------------------
# Synthetic renderer.
# ---------------------------------------------------------------------------

def render_depth(posed_shapes, cam: CameraIntrinsics) -> DepthImage:
    """Ray-cast convex hulls into a depth image.

    ``posed_shapes`` is a sequence of (ConvexPolyhedron, RigidPose).  Each
    pixel keeps the nearest ray-entry depth within [near, far].  Rays are
    clipped against the hull's half-spaces directly; per body only a screen
    bounding box of pixels is touched.
    """
    depth = np.full((cam.height, cam.width), np.inf)
    for poly, pose in posed_shapes:
        verts, normals, offsets = poly.posed(pose)
        if np.all(verts[:, 2] <= 1e-6):
            continue
        if np.any(verts[:, 2] < cam.near):
            u0, u1, v0, v1 = 0, cam.width - 1, 0, cam.height - 1
        else:
            uv = project_points(cam, verts)
            u0 = max(0, int(np.floor(uv[:, 0].min())) - 1)
            u1 = min(cam.width - 1, int(np.ceil(uv[:, 0].max())) + 1)
            v0 = max(0, int(np.floor(uv[:, 1].min())) - 1)
            v1 = min(cam.height - 1, int(np.ceil(uv[:, 1].max())) + 1)
        if u1 < u0 or v1 < v0:
            continue
        us = np.arange(u0, u1 + 1)
        vs = np.arange(v0, v1 + 1)
        dir_x = (us - cam.cx) / cam.fx
        dir_y = (vs - cam.cy) / cam.fy
        # per pixel and face: n . dir scaled by t must stay <= offset
        nd = (
            normals[:, 0][:, None, None] * dir_x[None, None, :]
            + normals[:, 1][:, None, None] * dir_y[None, :, None]
            + normals[:, 2][:, None, None]
        )  # (faces, v, u)
        with np.errstate(divide="ignore", invalid="ignore"):
            bound = offsets[:, None, None] / nd
        t_lo = np.where(nd < 0.0, bound, -np.inf).max(axis=0)
        t_hi = np.where(nd > 0.0, bound, np.inf).min(axis=0)
        feasible = ~np.any((nd == 0.0) & (offsets[:, None, None] < 0.0), axis=0)
        hit = feasible & (t_lo <= t_hi) & (t_lo >= cam.near) & (t_lo <= cam.far)
        t = np.where(hit, t_lo, np.inf)
        region = depth[v0 : v1 + 1, u0 : u1 + 1]
        np.minimum(region, t, out=region)
    depth[~np.isfinite(depth)] = BACKGROUND
    return DepthImage(cam, depth)


# ---------------------------------------------------------------------------
# Sensor noise.
# ---------------------------------------------------------------------------

def apply_noise(image: DepthImage, rng: np.random.Generator, sigma: float = 0.0,
                dropout: float = 0.0, outlier_prob: float = 0.0,
                outlier_range: float = 0.0) -> DepthImage:
    """Gaussian depth noise, uniform pixel dropout, and displaced outliers.

    Draw order over the full pixel grid is fixed, so results depend only on
    the generator state, not on image content.
    """
    cam = image.intrinsics
    shape = image.depth.shape
    gauss = rng.normal(0.0, 1.0, shape)
    drop = rng.uniform(0.0, 1.0, shape)
    out_pick = rng.uniform(0.0, 1.0, shape)
    out_shift = rng.uniform(-1.0, 1.0, shape)
    depth = image.depth.copy()
    fg = depth != BACKGROUND
    if sigma > 0.0:
        depth[fg] += sigma * gauss[fg]
    if outlier_prob > 0.0:
        sel = fg & (out_pick < outlier_prob)
        depth[sel] += outlier_range * out_shift[sel]
    depth[fg] = np.clip(depth[fg], cam.near, cam.far)
    if dropout > 0.0:
        depth[fg & (drop < dropout)] = BACKGROUND
    return DepthImage(cam, depth)


# ---------------------------------------------------------------------------
# Naive five-finger detector.
# ---------------------------------------------------------------------------

def five_finger_detector(image: DepthImage, min_height: int = 10,
                         gap_rows: int = 5) -> list[np.ndarray] | None:
    """Scanline detector for an open hand presented fingers-up.

    Rows are scanned top-down while contiguous foreground segments are linked
    into components; a component's top pixel is a candidate fingertip.  When
    the image resolves into one blob whose merged components include exactly
    five that each ran alone for at least ``min_height`` rows, those five top
    pixels are returned deprojected, ordered left to right.  Otherwise None.
    """
    fg = image.foreground_mask()
    if not fg.any():
        return None
    h, w = fg.shape
    padded = np.zeros((h, w + 1), dtype=bool)
    padded[:, :w] = fg
    flat = padded.ravel()
    edges = np.flatnonzero(np.diff(np.concatenate([[False], flat])))
    starts, ends = edges[::2], edges[1::2]

    comps: list[dict] = []  # live and dead components, in creation order

    def overlaps(c, lo, hi, row):
        return c["alive"] and row - c["row"] <= gap_rows and c["lo"] <= hi and lo <= c["hi"]

    si = 0
    n_seg = len(starts)
    for row in range(h):
        row_end = (row + 1) * (w + 1)
        while si < n_seg and starts[si] < row_end:
            lo = int(starts[si] % (w + 1))
            hi = int(ends[si] - 1) % (w + 1)
            si += 1
            hits = [c for c in comps if overlaps(c, lo, hi, row)]
            if not hits:
                comps.append({
                    "lo": lo, "hi": hi, "row": row, "alive": True,
                    "roots": [{"u": (lo + hi) // 2, "v": row, "qual": None}],
                })
                continue
            surv = hits[0]
            if len(hits) > 1:
                for c in hits[1:]:
                    c["alive"] = False
                    for root in c["roots"]:
                        if root["qual"] is None:
                            root["qual"] = row - root["v"] >= min_height
                    surv["roots"].extend(c["roots"])
                for root in surv["roots"]:
                    if root["qual"] is None:
                        root["qual"] = row - root["v"] >= min_height
            surv["lo"] = min(surv["lo"], lo) if surv["row"] == row else lo
            surv["hi"] = max(surv["hi"], hi) if surv["row"] == row else hi
            surv["row"] = row

    candidates = [
        c for c in comps
        if c["alive"] and sum(1 for r in c["roots"] if r["qual"]) == 5
    ]
    if len(candidates) != 1:
        return None
    cam = image.intrinsics
    tips = sorted((r for r in candidates[0]["roots"] if r["qual"]), key=lambda r: r["u"])
    out = []
    for r in tips:
        d = image.depth[r["v"], r["u"]]
        out.append(np.array([
            (r["u"] - cam.cx) * d / cam.fx, (r["v"] - cam.cy) * d / cam.fy, d,
        ]))
    return out


# ---------------------------------------------------------------------------
# Depth sequence files.
# ---------------------------------------------------------------------------

_MAGIC = b"DSQ1"
_HEADER = struct.Struct("<4sIIIffffIf")
_VERSION = 1


def write_depth_sequence(path, images: list[DepthImage], frame_rate: float) -> None:
    """Binary depth sequence: fixed header, then float32-LE row-major frames."""
    if not images:
        raise ConfigError("cannot write an empty depth sequence")
    cam = images[0].intrinsics
    with open(path, "wb") as f:
        f.write(_HEADER.pack(_MAGIC, _VERSION, cam.width, cam.height,
                             cam.fx, cam.fy, cam.cx, cam.cy, len(images), frame_rate))
        for img in images:
            if img.intrinsics.width != cam.width or img.intrinsics.height != cam.height:
                raise ConfigError("all frames in a sequence must share dimensions")
            f.write(img.depth.astype("<f4").tobytes())


def read_depth_sequence(path) -> tuple[list[DepthImage], float]:
    """Load a depth sequence; near/far are recovered from the data itself.

    The header does not carry clip planes, so near/far come from the min and
    max positive depth present (with defaults for an all-background file).
    """
    with open(path, "rb") as f:
        raw = f.read(_HEADER.size)
        if len(raw) < _HEADER.size:
            raise FileFormatError("truncated depth sequence header")
        magic, version, width, height, fx, fy, cx, cy, count, rate = _HEADER.unpack(raw)
        if magic != _MAGIC:
            raise FileFormatError("not a depth sequence file (bad magic)")
        if version != _VERSION:
            raise FileFormatError(f"unsupported depth sequence version {version}")
        body = f.read()
    frame_len = width * height * 4
    if len(body) != frame_len * count:
        raise FileFormatError("depth sequence payload size mismatch")
    data = np.frombuffer(body, dtype="<f4").astype(np.float64).reshape(count, height, width)
    positive = data[data > 0.0]
    near = float(positive.min()) if len(positive) else 0.05
    far = float(positive.max()) if len(positive) else 2.0
    far = max(far, near + 1e-6)
    cam = CameraIntrinsics(width, height, fx, fy, cx, cy, near, far)
    return [DepthImage(cam, d) for d in data], rate


# ---------------------------------------------------------------------------
# Ground-truth sidecar.
# ---------------------------------------------------------------------------

def write_ground_truth(path, frames: list[dict]) -> None:
    """Per-frame body poses as structured text: translation then quaternion."""
    with open(path, "w") as f:
        f.write("groundtruth v1\n")
        for i, poses in enumerate(frames):
            f.write(f"frame {i}\n")
            for name, pose in poses.items():
                vals = " ".join(repr(float(x)) for x in (*pose.translation, *pose.rotation))
                f.write(f"body {name} {vals}\n")


def read_ground_truth(path) -> list[dict]:
    frames: list[dict] = []
    with open(path) as f:
        header = f.readline().strip()
        if header != "groundtruth v1":
            raise FileFormatError("not a ground-truth file")
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "frame":
                if int(parts[1]) != len(frames):
                    raise FileFormatError("ground-truth frames out of order")
                frames.append({})
            elif parts[0] == "body":
                if not frames:
                    raise FileFormatError("body record before any frame")
                vals = [float(x) for x in parts[2:9]]
                frames[-1][parts[1]] = RigidPose(np.array(vals[:3]), np.array(vals[3:]))
            else:
                raise FileFormatError(f"unknown record {parts[0]!r}")
    return frames
