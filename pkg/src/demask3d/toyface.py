"""Procedural toy face basis: a low-poly ellipsoid head with nose/mouth/brow
features, 68 on-surface landmark vertices, and orthonormalized random smooth
basis columns for shape, expression, and texture.

The head is centered at the origin with radius ~1; "up" is -Y and the face
front points toward -Z (see morphable module conventions). Expression basis
fields are weighted toward the lower face so sweeps read as mouth movements.
"""

from __future__ import annotations

import numpy as np

from .morphable import MorphableBasis, N_LANDMARKS

DEFAULT_TOY_SEED = 20240
LAT = 20
LON = 24
RADII = (0.78, 1.0, 0.82)

# (theta/pi, phi/pi, theta width/pi, phi width/pi, amplitude) radial bumps.
_FEATURE_BUMPS = [
    (0.58, 0.0, 0.07, 0.10, 0.28),    # nose
    (0.715, 0.0, 0.045, 0.16, 0.06),  # lips
    (0.87, 0.0, 0.07, 0.14, 0.06),    # chin
    (0.40, -0.20, 0.05, 0.12, 0.04),  # brow ridges
    (0.40, 0.20, 0.05, 0.12, 0.04),
    (0.46, -0.20, 0.045, 0.07, -0.05),  # eye sockets
    (0.46, 0.20, 0.045, 0.07, -0.05),
]


def _bump(theta, phi):
    total = np.zeros_like(np.asarray(theta, dtype=np.float64))
    for t0, p0, st, sp, amp in _FEATURE_BUMPS:
        total = total + amp * np.exp(
            -(((theta / np.pi - t0) / st) ** 2 + ((phi / np.pi - p0) / sp) ** 2)
        )
    return total


def _surface_point(theta, phi):
    """Displaced ellipsoid point for polar angle theta (0 = top) and azimuth phi (0 = front)."""
    rx, ry, rz = RADII
    st, ct = np.sin(theta), np.cos(theta)
    base = np.stack([rx * st * np.sin(phi), -ry * ct, -rz * st * np.cos(phi)], axis=-1)
    direction = base / np.linalg.norm(base, axis=-1, keepdims=True)
    return base + _bump(theta, phi)[..., None] * direction


def _landmark_angles():
    """(theta, phi) targets for the 68 landmarks, iBUG-style ordering:
    0-16 jaw, 17-26 brows, 27-30 nose bridge (30 = tip), 31-35 nose base,
    36-47 eyes, 48-59 outer mouth, 60-67 inner mouth."""
    pts = []
    for i in range(17):  # jaw, viewer-left ear -> chin -> viewer-right ear
        a = np.pi * i / 16.0
        pts.append((0.56 + 0.32 * np.sin(a), -0.52 * np.cos(a)))
    for t in np.linspace(0.0, 1.0, 5):  # left brow
        pts.append((0.39 - 0.015 * np.sin(np.pi * t), -0.32 + 0.22 * t))
    for t in np.linspace(0.0, 1.0, 5):  # right brow
        pts.append((0.39 - 0.015 * np.sin(np.pi * t), 0.10 + 0.22 * t))
    for th in np.linspace(0.46, 0.585, 4):  # nose bridge down to tip
        pts.append((th, 0.0))
    for ph in np.linspace(-0.07, 0.07, 5):  # nose base
        pts.append((0.635, ph))
    for cphi in (-0.20, 0.20):  # eyes, 6 points each
        for k in range(6):
            a = 2.0 * np.pi * k / 6.0
            pts.append((0.46 + 0.035 * np.sin(a), cphi + 0.065 * np.cos(a + np.pi)))
    for k in range(12):  # outer mouth, 48 = viewer-left corner
        a = np.pi + 2.0 * np.pi * k / 12.0
        pts.append((0.715 + 0.042 * np.sin(a), 0.135 * np.cos(a)))
    for k in range(8):  # inner mouth
        a = np.pi + 2.0 * np.pi * k / 8.0
        pts.append((0.715 + 0.020 * np.sin(a), 0.075 * np.cos(a)))
    arr = np.array(pts, dtype=np.float64) * np.pi
    assert arr.shape == (N_LANDMARKS, 2)
    return arr[:, 0], arr[:, 1]


def _spot(theta, phi, t0, p0, st, sp):
    return np.exp(-(((theta / np.pi - t0) / st) ** 2 + ((phi / np.pi - p0) / sp) ** 2))


def _mean_texture(theta, phi):
    skin = np.array([0.80, 0.62, 0.52])
    tex = np.tile(skin, (theta.shape[0], 1))
    hair = 1.0 / (1.0 + np.exp((theta / np.pi - 0.30) / 0.02))  # smooth cap above the forehead
    tex += hair[:, None] * (np.array([0.16, 0.13, 0.11]) - skin)
    lips = _spot(theta, phi, 0.715, 0.0, 0.035, 0.14)
    tex += lips[:, None] * np.array([0.08, -0.14, -0.12])
    for p0 in (-0.20, 0.20):
        brow = _spot(theta, phi, 0.395, p0, 0.03, 0.11)
        tex -= brow[:, None] * np.array([0.45, 0.40, 0.35])
        eye = _spot(theta, phi, 0.46, p0, 0.022, 0.03)
        tex -= eye[:, None] * np.array([0.60, 0.50, 0.42])
        cheek = _spot(theta, phi, 0.62, p0 * 1.5, 0.06, 0.10)
        tex += cheek[:, None] * np.array([0.05, 0.0, 0.0])
    return np.clip(tex, 0.02, 0.98)


def _poly_features(points):
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    return np.stack([np.ones_like(x), x, y, z, x * y, x * z, y * z, x * x, y * y, z * z], axis=1)


def _smooth_basis(rng, points, dim, weight=None):
    """Random smooth (low-order polynomial) vector fields over the surface,
    orthonormalized so every flattened column has unit norm."""
    feats = _poly_features(points)  # (V, 10)
    cols = []
    for _ in range(dim):
        coefs = rng.normal(size=(feats.shape[1], 3))
        field = feats @ coefs  # (V, 3)
        if weight is not None:
            field = field * weight[:, None]
        cols.append(field.reshape(-1))
    m = np.stack(cols, axis=1)  # (3V, dim)
    q, _ = np.linalg.qr(m)
    return q.reshape(points.shape[0], 3, dim)


def build_toy_basis(seed: int = DEFAULT_TOY_SEED) -> MorphableBasis:
    rng = np.random.default_rng(seed)

    thetas = np.pi * (np.arange(1, LAT + 1)) / (LAT + 1)
    phis = -np.pi + 2.0 * np.pi * np.arange(LON) / LON
    tt, pp = np.meshgrid(thetas, phis, indexing="ij")
    grid_theta = tt.reshape(-1)
    grid_phi = pp.reshape(-1)

    lm_theta, lm_phi = _landmark_angles()
    pole_theta = np.array([1e-4, np.pi - 1e-4])
    pole_phi = np.array([0.0, 0.0])

    theta = np.concatenate([grid_theta, pole_theta, lm_theta])
    phi = np.concatenate([grid_phi, pole_phi, lm_phi])
    vertices = _surface_point(theta, phi)

    n_grid = LAT * LON
    top = n_grid
    bottom = n_grid + 1
    landmark_indices = np.arange(n_grid + 2, n_grid + 2 + N_LANDMARKS, dtype=np.int32)

    def vid(i, j):
        return i * LON + (j % LON)

    tris = []
    for i in range(LAT - 1):
        for j in range(LON):
            a, b = vid(i, j), vid(i, j + 1)
            c, d = vid(i + 1, j), vid(i + 1, j + 1)
            tris.append((a, c, b))
            tris.append((b, c, d))
    for j in range(LON):  # pole fans
        tris.append((top, vid(0, j), vid(0, j + 1)))
        tris.append((bottom, vid(LAT - 1, j + 1), vid(LAT - 1, j)))
    triangles = np.array(tris, dtype=np.int32)

    # Enforce outward winding against the (star-shaped) mean surface.
    tri_pts = vertices[triangles]
    face_n = np.cross(tri_pts[:, 1] - tri_pts[:, 0], tri_pts[:, 2] - tri_pts[:, 0])
    outward = tri_pts.mean(axis=1)
    flip = np.einsum("tc,tc->t", face_n, outward) < 0
    triangles[flip] = triangles[flip][:, [0, 2, 1]]

    mean_texture = _mean_texture(theta, phi)

    # Expression displacements concentrate on the lower face (mouth/jaw).
    expr_weight = 0.1 + 0.9 * np.exp(-(((theta / np.pi - 0.72) / 0.16) ** 2))

    shape_basis = _smooth_basis(rng, vertices, 8)
    expr_basis = _smooth_basis(rng, vertices, 6, weight=expr_weight)
    texture_basis = _smooth_basis(rng, vertices, 8)

    return MorphableBasis(
        mean_shape=vertices,
        shape_basis=shape_basis,
        expr_basis=expr_basis,
        mean_texture=mean_texture,
        texture_basis=texture_basis,
        triangles=triangles,
        landmark_indices=landmark_indices,
    )
