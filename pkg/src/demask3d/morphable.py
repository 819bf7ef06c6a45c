"""Toy linear morphable face model: coefficients -> mesh -> shaded, rasterized image.

Conventions, fixed project-wide:

- Right-handed coordinates, camera at the origin looking down +Z. +X is
  image-right, +Y is image-down, the face front points toward -Z (toward the
  camera once the mesh is pushed out to its standoff distance).
- Euler rotation is intrinsic X-Y-Z: ``R = Rx(ax) @ Ry(ay) @ Rz(az)``,
  applied as ``v' = R @ v + t``.
- Pinhole projection: ``(u, v) = (f * X / Z + cx, f * Y / Z + cy)``.
- Pixel (row, col) is sampled at continuous coordinates (col + 0.5, row + 0.5).
- Rendered background is exactly 0; depth is +inf outside coverage.
- Spherical-harmonics bands are ordered [1, y, z, x, xy, yz, 3z^2-1, xz,
  x^2-y^2]; the 27 illumination coefficients are stored channel-major,
  9 bands for R, then G, then B.

All functions here are pure and operate on float64 numpy arrays; the float32
torch mirror used inside training lives in ``render_torch``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

ILLUMINATION_DIM = 27
N_LANDMARKS = 68

# Coefficient groups in storage order.
GROUP_NAMES = ("shape", "expression", "texture", "illumination", "rotation", "translation")

# Distance along +Z added when composing a full render, so that zero-mean
# translation coefficients still place the origin-centered mesh in front of
# the camera.
RENDER_STANDOFF = 4.0

# Scales of the zero-mean gaussians used by sample_coeffs (translation is
# per-axis). Band-0 illumination additionally receives ILLUM_BAND0_OFFSET on
# every color channel so that sampled faces are lit.
SAMPLE_SCALES = {
    "shape": 1.5,
    "expression": 1.5,
    "texture": 1.5,
    "illumination": 0.3,
    "rotation": 0.12,
    "translation": (0.25, 0.25, 0.4),
}
ILLUM_BAND0_OFFSET = 2.5

BASIS_MAGIC = b"MFB1"


class ProjectionError(ValueError):
    """A vertex landed at or behind the camera plane Z=0."""


@dataclass(frozen=True)
class CoeffLayout:
    """Dimensions of each coefficient group; offsets are contiguous in GROUP_NAMES order."""

    shape: int
    expression: int
    texture: int
    illumination: int = ILLUMINATION_DIM
    rotation: int = 3
    translation: int = 3

    def __post_init__(self):
        if self.illumination != ILLUMINATION_DIM:
            raise ValueError(f"illumination dim must be {ILLUMINATION_DIM}, got {self.illumination}")
        if self.rotation != 3 or self.translation != 3:
            raise ValueError("rotation and translation dims must both be 3")
        for name in ("shape", "expression", "texture"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} dim must be >= 1")

    @property
    def dims(self) -> dict:
        return {name: getattr(self, name) for name in GROUP_NAMES}

    @property
    def total(self) -> int:
        return sum(self.dims.values())

    def offset(self, group: str) -> int:
        if group not in GROUP_NAMES:
            raise KeyError(f"unknown coefficient group {group!r}")
        off = 0
        for name in GROUP_NAMES:
            if name == group:
                return off
            off += getattr(self, name)
        raise AssertionError

    def group_slice(self, group: str) -> slice:
        off = self.offset(group)
        return slice(off, off + getattr(self, group))

    @classmethod
    def toy(cls) -> "CoeffLayout":
        return cls(shape=8, expression=6, texture=8)  # total 55

    @classmethod
    def full(cls) -> "CoeffLayout":
        return cls(shape=80, expression=64, texture=80)  # total 257

    def to_dict(self) -> dict:
        return dict(self.dims)

    @classmethod
    def from_dict(cls, d: dict) -> "CoeffLayout":
        return cls(**{k: int(v) for k, v in d.items()})


@dataclass
class CoeffVector:
    """A full coefficient vector together with its layout."""

    values: np.ndarray
    layout: CoeffLayout

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.layout.total,):
            raise ValueError(
                f"coefficient vector has length {self.values.shape}, layout expects {self.layout.total}"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("coefficient vector contains non-finite entries")

    @classmethod
    def zeros(cls, layout: CoeffLayout) -> "CoeffVector":
        return cls(np.zeros(layout.total), layout)

    def group(self, name: str) -> np.ndarray:
        return self.values[self.layout.group_slice(name)]

    def copy(self) -> "CoeffVector":
        return CoeffVector(self.values.copy(), self.layout)

    def with_value(self, group: str, index: int, value: float) -> "CoeffVector":
        dim = getattr(self.layout, group) if group in GROUP_NAMES else None
        if dim is None or not (0 <= index < dim):
            raise IndexError(
                f"override {group}[{index}] out of range; valid groups: "
                + ", ".join(f"{n}[0..{d - 1}]" for n, d in self.layout.dims.items())
            )
        out = self.values.copy()
        out[self.layout.offset(group) + index] = float(value)
        return CoeffVector(out, self.layout)


@dataclass
class MorphableBasis:
    """Linear model: vertices = mean_shape + shape_basis@a + expr_basis@b, colors analogous."""

    mean_shape: np.ndarray      # (V, 3)
    shape_basis: np.ndarray     # (V, 3, d_shape)
    expr_basis: np.ndarray      # (V, 3, d_expr)
    mean_texture: np.ndarray    # (V, 3), in [0, 1]
    texture_basis: np.ndarray   # (V, 3, d_tex)
    triangles: np.ndarray       # (T, 3) int vertex indices
    landmark_indices: np.ndarray  # (68,) int vertex indices

    def __post_init__(self):
        self.mean_shape = np.asarray(self.mean_shape, dtype=np.float64)
        self.shape_basis = np.asarray(self.shape_basis, dtype=np.float64)
        self.expr_basis = np.asarray(self.expr_basis, dtype=np.float64)
        self.mean_texture = np.asarray(self.mean_texture, dtype=np.float64)
        self.texture_basis = np.asarray(self.texture_basis, dtype=np.float64)
        self.triangles = np.asarray(self.triangles, dtype=np.int32)
        self.landmark_indices = np.asarray(self.landmark_indices, dtype=np.int32)
        v = self.n_vertices
        if self.mean_shape.shape != (v, 3) or self.mean_texture.shape != (v, 3):
            raise ValueError("mean_shape/mean_texture must be (V, 3)")
        for name in ("shape_basis", "expr_basis", "texture_basis"):
            arr = getattr(self, name)
            if arr.ndim != 3 or arr.shape[:2] != (v, 3):
                raise ValueError(f"{name} must be (V, 3, d)")
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3:
            raise ValueError("triangles must be (T, 3)")
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= v):
            raise ValueError("triangle indices out of range")
        if self.landmark_indices.shape != (N_LANDMARKS,):
            raise ValueError(f"landmark_indices must have exactly {N_LANDMARKS} entries")
        if self.landmark_indices.min() < 0 or self.landmark_indices.max() >= v:
            raise ValueError("landmark indices out of range")
        if self.mean_texture.min() < 0 or self.mean_texture.max() > 1:
            raise ValueError("mean_texture must lie in [0, 1]")

    @property
    def n_vertices(self) -> int:
        return self.mean_shape.shape[0]

    @property
    def layout(self) -> CoeffLayout:
        return CoeffLayout(
            shape=self.shape_basis.shape[2],
            expression=self.expr_basis.shape[2],
            texture=self.texture_basis.shape[2],
        )


@dataclass
class FaceMesh:
    vertices: np.ndarray  # (V, 3)
    colors: np.ndarray    # (V, 3) albedo in [0, 1]


@dataclass(frozen=True)
class Camera:
    """Pinhole camera; focal and principal point in pixels."""

    focal: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.focal <= 0:
            raise ValueError("focal length must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @classmethod
    def canonical(cls, size: int = 64) -> "Camera":
        return cls(focal=1.25 * size, cx=size / 2.0, cy=size / 2.0, width=size, height=size)


@dataclass
class RenderedFace:
    image: np.ndarray     # (H, W, 3) in [0, 1], exactly 0 outside coverage
    coverage: np.ndarray  # (H, W) bool
    depth: np.ndarray     # (H, W), +inf outside coverage


def reconstruct_mesh(basis: MorphableBasis, coeffs: CoeffVector) -> FaceMesh:
    """Linear 3DMM evaluation; colors are clamped to [0, 1] after the texture basis."""
    if coeffs.layout != basis.layout:
        raise ValueError(
            f"coefficient layout {coeffs.layout.dims} does not match basis layout {basis.layout.dims}"
        )
    alpha = coeffs.group("shape")
    beta = coeffs.group("expression")
    delta = coeffs.group("texture")
    vertices = (
        basis.mean_shape
        + np.einsum("vcd,d->vc", basis.shape_basis, alpha)
        + np.einsum("vcd,d->vc", basis.expr_basis, beta)
    )
    colors = np.clip(basis.mean_texture + np.einsum("vcd,d->vc", basis.texture_basis, delta), 0.0, 1.0)
    return FaceMesh(vertices=vertices, colors=colors)


def euler_rotation(angles) -> np.ndarray:
    """Intrinsic X-Y-Z rotation matrix, R = Rx @ Ry @ Rz."""
    ax, ay, az = [float(a) for a in angles]
    cx, sx = np.cos(ax), np.sin(ax)
    cy, sy = np.cos(ay), np.sin(ay)
    cz, sz = np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rx @ ry @ rz


def pose_vertices(vertices: np.ndarray, rotation, translation) -> np.ndarray:
    r = euler_rotation(rotation)
    t = np.asarray(translation, dtype=np.float64).reshape(3)
    if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
        raise ValueError("pose parameters must be finite")
    return vertices @ r.T + t


def pose_and_project(vertices: np.ndarray, rotation, translation, cam: Camera):
    """Rigid transform followed by pinhole projection.

    Returns (projected (V, 2), depth (V,)). Raises ProjectionError if any
    posed vertex has Z <= 0.
    """
    posed = pose_vertices(np.asarray(vertices, dtype=np.float64), rotation, translation)
    z = posed[:, 2]
    bad = np.nonzero(z <= 0)[0]
    if bad.size:
        raise ProjectionError(f"vertex {int(bad[0])} is at or behind the camera (Z={z[bad[0]]:g})")
    proj = np.empty((posed.shape[0], 2))
    proj[:, 0] = cam.focal * posed[:, 0] / z + cam.cx
    proj[:, 1] = cam.focal * posed[:, 1] / z + cam.cy
    return proj, z.copy()


# Constants of the first 9 real spherical harmonics.
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = 1.0925484305920792
SH_C3 = 0.31539156525252005
SH_C4 = 0.5462742152960396


def sh_basis(normals: np.ndarray) -> np.ndarray:
    """First 9 real SH bands evaluated at unit directions; order documented in the module docstring."""
    x, y, z = normals[:, 0], normals[:, 1], normals[:, 2]
    return np.stack(
        [
            np.full_like(x, SH_C0),
            SH_C1 * y,
            SH_C1 * z,
            SH_C1 * x,
            SH_C2 * x * y,
            SH_C2 * y * z,
            SH_C3 * (3.0 * z * z - 1.0),
            SH_C2 * x * z,
            SH_C4 * (x * x - y * y),
        ],
        axis=1,
    )


def sh_shade(normals: np.ndarray, albedo: np.ndarray, gamma: np.ndarray) -> np.ndarray:
    """Per-vertex radiance = albedo * sum_b gamma[ch, b] * Y_b(n), clamped to [0, 1].

    gamma has 27 entries, channel-major (9 bands for R, then G, then B).
    Normals must be unit length within 1e-6.
    """
    normals = np.asarray(normals, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64).reshape(-1)
    if gamma.shape != (ILLUMINATION_DIM,):
        raise ValueError(f"gamma must have {ILLUMINATION_DIM} entries")
    norms = np.linalg.norm(normals, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        i = int(np.argmax(np.abs(norms - 1.0)))
        raise ValueError(f"normal {i} is not unit length (|n|={norms[i]:g})")
    bands = sh_basis(normals)                      # (V, 9)
    radiance = bands @ gamma.reshape(3, 9).T       # (V, 3)
    return np.clip(albedo * radiance, 0.0, 1.0)


def sh_shade_raw(normals: np.ndarray, albedo: np.ndarray, gamma: np.ndarray) -> np.ndarray:
    """sh_shade without the final clamp (used by tests probing pre-clamp values)."""
    bands = sh_basis(np.asarray(normals, dtype=np.float64))
    radiance = bands @ np.asarray(gamma, dtype=np.float64).reshape(3, 9).T
    return albedo * radiance


def compute_vertex_normals(vertices: np.ndarray, triangles: np.ndarray,
                           fallback_directions: np.ndarray | None = None) -> np.ndarray:
    """Area-weighted vertex normals; vertices with no incident triangle fall back
    to the given directions (normalized), or +Z if none are provided."""
    v = np.asarray(vertices, dtype=np.float64)
    normals = np.zeros_like(v)
    if len(triangles):
        tri = v[triangles]  # (T, 3, 3)
        face_n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        for k in range(3):
            np.add.at(normals, triangles[:, k], face_n)
    lens = np.linalg.norm(normals, axis=1)
    ok = lens > 1e-12
    normals[ok] /= lens[ok, None]
    if not np.all(ok):
        if fallback_directions is None:
            fb = np.tile(np.array([0.0, 0.0, 1.0]), (v.shape[0], 1))
        else:
            fb = np.asarray(fallback_directions, dtype=np.float64).copy()
            fb /= np.maximum(np.linalg.norm(fb, axis=1, keepdims=True), 1e-12)
        normals[~ok] = fb[~ok]
    return normals


def rasterize_buffers(projected: np.ndarray, depth: np.ndarray, triangles: np.ndarray,
                      width: int, height: int):
    """Z-buffered triangle scan returning per-pixel attachment buffers.

    Returns (tri_idx (H,W) int32, -1 where empty; bary (H,W,3); zbuf (H,W),
    +inf where empty). Pixel centers sit at (col+0.5, row+0.5); a pixel is
    inside when all normalized barycentric coordinates are >= 0. Triangles are
    processed in order with a strict z < test, so output is deterministic.
    """
    tri_idx = np.full((height, width), -1, dtype=np.int32)
    bary = np.zeros((height, width, 3))
    zbuf = np.full((height, width), np.inf)
    if not np.all(np.isfinite(projected)):
        raise ValueError("projected vertices must be finite")
    px = projected[:, 0]
    py = projected[:, 1]
    for t, (i0, i1, i2) in enumerate(triangles):
        x0, y0 = px[i0], py[i0]
        x1, y1 = px[i1], py[i1]
        x2, y2 = px[i2], py[i2]
        area2 = (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)
        if area2 == 0.0:
            continue
        cmin = max(0, int(np.ceil(min(x0, x1, x2) - 0.5)))
        cmax = min(width - 1, int(np.floor(max(x0, x1, x2) - 0.5)))
        rmin = max(0, int(np.ceil(min(y0, y1, y2) - 0.5)))
        rmax = min(height - 1, int(np.floor(max(y0, y1, y2) - 0.5)))
        if cmin > cmax or rmin > rmax:
            continue
        sx = np.arange(cmin, cmax + 1) + 0.5
        sy = np.arange(rmin, rmax + 1) + 0.5
        gx, gy = np.meshgrid(sx, sy)
        w0 = ((x2 - x1) * (gy - y1) - (y2 - y1) * (gx - x1)) / area2
        w1 = ((x0 - x2) * (gy - y2) - (y0 - y2) * (gx - x2)) / area2
        w2 = ((x1 - x0) * (gy - y0) - (y1 - y0) * (gx - x0)) / area2
        inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        if not inside.any():
            continue
        z = w0 * depth[i0] + w1 * depth[i1] + w2 * depth[i2]
        sub = zbuf[rmin : rmax + 1, cmin : cmax + 1]
        win = inside & (z < sub)
        rows, cols = np.nonzero(win)
        zbuf[rmin + rows, cmin + cols] = z[rows, cols]
        tri_idx[rmin + rows, cmin + cols] = t
        bary[rmin + rows, cmin + cols, 0] = w0[rows, cols]
        bary[rmin + rows, cmin + cols, 1] = w1[rows, cols]
        bary[rmin + rows, cmin + cols, 2] = w2[rows, cols]
    return tri_idx, bary, zbuf


def rasterize(projected: np.ndarray, depth: np.ndarray, colors: np.ndarray,
              triangles: np.ndarray, cam: Camera) -> RenderedFace:
    """Fill triangles with barycentric color interpolation against a z-buffer."""
    tri_idx, bary, zbuf = rasterize_buffers(projected, depth, triangles, cam.width, cam.height)
    coverage = tri_idx >= 0
    image = np.zeros((cam.height, cam.width, 3))
    if coverage.any():
        tris = triangles[tri_idx[coverage]]          # (N, 3)
        vcols = colors[tris]                         # (N, 3, 3)
        w = bary[coverage]                           # (N, 3)
        image[coverage] = np.clip((w[:, :, None] * vcols).sum(axis=1), 0.0, 1.0)
    return RenderedFace(image=image, coverage=coverage, depth=zbuf)


def render_face(basis: MorphableBasis, coeffs: CoeffVector, cam: Camera,
                standoff: float = RENDER_STANDOFF) -> RenderedFace:
    """Full coefficient -> image composition (reconstruct, pose, shade, rasterize)."""
    mesh = reconstruct_mesh(basis, coeffs)
    rotation = coeffs.group("rotation")
    translation = coeffs.group("translation") + np.array([0.0, 0.0, standoff])
    posed = pose_vertices(mesh.vertices, rotation, translation)
    centroid = posed.mean(axis=0)
    normals = compute_vertex_normals(posed, basis.triangles, fallback_directions=posed - centroid)
    shaded = sh_shade(normals, mesh.colors, coeffs.group("illumination"))
    z = posed[:, 2]
    bad = np.nonzero(z <= 0)[0]
    if bad.size:
        raise ProjectionError(f"vertex {int(bad[0])} is at or behind the camera (Z={z[bad[0]]:g})")
    proj = np.stack([cam.focal * posed[:, 0] / z + cam.cx, cam.focal * posed[:, 1] / z + cam.cy], axis=1)
    return rasterize(proj, z, shaded, basis.triangles, cam)


def project_landmarks(basis: MorphableBasis, coeffs: CoeffVector, cam: Camera,
                      standoff: float = RENDER_STANDOFF) -> np.ndarray:
    """Projected 2D positions (68, 2) of the landmark vertices under the coefficient pose."""
    mesh = reconstruct_mesh(basis, coeffs)
    rotation = coeffs.group("rotation")
    translation = coeffs.group("translation") + np.array([0.0, 0.0, standoff])
    proj, _ = pose_and_project(mesh.vertices[basis.landmark_indices], rotation, translation, cam)
    return proj


def sample_coeffs(layout: CoeffLayout, rng_seed) -> CoeffVector:
    """Draw a random coefficient vector; deterministic per seed.

    Groups are zero-mean gaussians with the scales in SAMPLE_SCALES; the three
    band-0 illumination entries get ILLUM_BAND0_OFFSET added so faces are lit.
    """
    rng = np.random.default_rng(rng_seed)
    parts = []
    for name in GROUP_NAMES:
        dim = getattr(layout, name)
        scale = np.broadcast_to(np.asarray(SAMPLE_SCALES[name], dtype=np.float64), (dim,))
        parts.append(rng.normal(0.0, 1.0, size=dim) * scale)
    values = np.concatenate(parts)
    illum = layout.group_slice("illumination")
    for ch in range(3):
        values[illum.start + 9 * ch] += ILLUM_BAND0_OFFSET
    return CoeffVector(values, layout)


def save_basis(path, basis: MorphableBasis):
    """Persist a basis as a single binary asset: MFB1 header, dims, row-major arrays."""
    with open(path, "wb") as f:
        f.write(BASIS_MAGIC)
        v = basis.n_vertices
        t = basis.triangles.shape[0]
        lay = basis.layout
        f.write(struct.pack("<5I", v, t, lay.shape, lay.expression, lay.texture))
        for arr in (basis.mean_shape, basis.shape_basis, basis.expr_basis,
                    basis.mean_texture, basis.texture_basis):
            f.write(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
        f.write(np.ascontiguousarray(basis.triangles, dtype=np.int32).tobytes())
        f.write(np.ascontiguousarray(basis.landmark_indices, dtype=np.int32).tobytes())


def load_basis(path) -> MorphableBasis:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != BASIS_MAGIC:
            raise ValueError(f"not a morphable-basis file (magic {magic!r})")
        v, t, ds, de, dt = struct.unpack("<5I", f.read(20))

        def read_f64(shape):
            n = int(np.prod(shape))
            buf = f.read(8 * n)
            if len(buf) != 8 * n:
                raise ValueError("truncated basis file")
            return np.frombuffer(buf, dtype=np.float64).reshape(shape).copy()

        def read_i32(shape):
            n = int(np.prod(shape))
            buf = f.read(4 * n)
            if len(buf) != 4 * n:
                raise ValueError("truncated basis file")
            return np.frombuffer(buf, dtype=np.int32).reshape(shape).copy()

        mean_shape = read_f64((v, 3))
        shape_basis = read_f64((v, 3, ds))
        expr_basis = read_f64((v, 3, de))
        mean_texture = read_f64((v, 3))
        texture_basis = read_f64((v, 3, dt))
        triangles = read_i32((t, 3))
        landmarks = read_i32((N_LANDMARKS,))
        if f.read(1):
            raise ValueError("trailing bytes in basis file")
    return MorphableBasis(
        mean_shape=mean_shape,
        shape_basis=shape_basis,
        expr_basis=expr_basis,
        mean_texture=mean_texture,
        texture_basis=texture_basis,
        triangles=triangles,
        landmark_indices=landmarks,
    )


def save_landmark_table(path, landmarks: np.ndarray):
    """Golden landmark table, one "x y" pair per line."""
    with open(path, "w") as f:
        for x, y in np.asarray(landmarks, dtype=np.float64):
            f.write(f"{x:.12f} {y:.12f}\n")


def load_landmark_table(path) -> np.ndarray:
    rows = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                x, y = line.split()
                rows.append((float(x), float(y)))
    out = np.array(rows, dtype=np.float64)
    if out.shape != (N_LANDMARKS, 2):
        raise ValueError(f"landmark table must have {N_LANDMARKS} rows")
    return out
