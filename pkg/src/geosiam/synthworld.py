"""Procedural stand-in for a reconstructed brain: folded surface, banded areas,
laminar textures, patch rendering and a noisy atlas prior.

Each hemisphere is a sheet parametrised by ``(u, v)`` in
``[0, Lu] x [0, Lv]`` mm, folded sinusoidally along ``u`` in the left-right
direction.  The left sheet sits at negative x, the right sheet is its exact
mirror image.  Regions are bands along ``u``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from .mesh_geo import LEFT, RIGHT, SurfaceMesh, vertex_normals

BACKGROUND_INTENSITY = 0.95
WHITE_MATTER_INTENSITY = 0.85
CORTEX_BASE = 0.7
DOT_INTENSITY = 0.15
PIXEL_NOISE = 0.03


@dataclass(frozen=True)
class RegionTexture:
    stripes: int
    contrast: float
    dot_density: float

    def mean_intensity(self) -> float:
        """Expected cortex intensity with the depth coordinate uniform on [0, 1)."""
        laminar = CORTEX_BASE - 0.25 * self.contrast
        return (1 - self.dot_density) * laminar + self.dot_density * DOT_INTENSITY


DEFAULT_TEXTURES = (
    RegionTexture(2, 0.55, 0.06),
    RegionTexture(3, 0.45, 0.09),
    RegionTexture(4, 0.60, 0.05),
    RegionTexture(5, 0.50, 0.08),
)
OTHER_TEXTURE = RegionTexture(1, 0.30, 0.07)


@dataclass(frozen=True)
class WorldSpec:
    seed: int = 0
    grid_u: int = 121
    grid_v: int = 31
    sheet_size: tuple = (24.0, 6.0)
    fold_amplitude: float = 1.0
    fold_frequency: float = 2.0
    n_regions: int = 4
    region_texture: tuple = DEFAULT_TEXTURES
    patch_px: int = 32
    resolution_um: float = 32.0
    section_normal: tuple = (0.0, 0.0, 1.0)
    atlas_blur_mm: float = 0.1
    atlas_shift_mm: float = 3.0
    hemisphere_gap_mm: float = 6.0
    thickness_mm: tuple = (0.4, 0.8)
    thickness_ramp_mm: float = 0.25
    stain_gradient: float = 0.15
    rotation_deg: float = 180.0
    section_spacing_mm: float = 0.2

    def __post_init__(self):
        textures = tuple(
            t if isinstance(t, RegionTexture) else RegionTexture(**t) for t in self.region_texture
        )
        if len(textures) < self.n_regions:
            # cycle the defaults so any region count has a texture
            textures = tuple(textures[i % len(textures)] for i in range(self.n_regions))
        object.__setattr__(self, "region_texture", textures[: self.n_regions])
        object.__setattr__(self, "sheet_size", tuple(float(x) for x in self.sheet_size))
        object.__setattr__(self, "thickness_mm", tuple(float(x) for x in self.thickness_mm))
        s = np.asarray(self.section_normal, dtype=float)
        object.__setattr__(self, "section_normal", tuple(float(x) for x in s / np.linalg.norm(s)))
        self.validate()

    def validate(self) -> None:
        if self.n_regions < 2:
            raise ValueError("n_regions must be >= 2")
        if self.patch_px < 16:
            raise ValueError("patch_px must be >= 16")
        if self.fold_amplitude < 0:
            raise ValueError("fold_amplitude must be >= 0")
        if self.grid_u < 2 or self.grid_v < 2:
            raise ValueError("grid must have at least 2 vertices per axis")
        for t in self.region_texture:
            if not 0 <= t.contrast <= 1:
                raise ValueError(f"texture contrast {t.contrast} outside [0, 1]")
            if not 0 <= t.dot_density <= 1:
                raise ValueError(f"dot density {t.dot_density} outside [0, 1]")
        if self.atlas_blur_mm < 0 or self.atlas_shift_mm < 0:
            raise ValueError("atlas noise parameters must be non-negative")
        if not 0 <= self.rotation_deg <= 180:
            raise ValueError("rotation_deg must lie in [0, 180]")
        if self.thickness_ramp_mm <= 0:
            raise ValueError("thickness_ramp_mm must be positive")
        if self.section_spacing_mm <= 0:
            raise ValueError("section_spacing_mm must be positive")

    @property
    def n_classes(self) -> int:
        return self.n_regions + 2

    @property
    def other_class(self) -> int:
        return self.n_regions

    @property
    def background_class(self) -> int:
        return self.n_regions + 1

    @property
    def pixel_mm(self) -> float:
        return self.resolution_um / 1000.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["region_texture"] = [asdict(t) for t in self.region_texture]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "WorldSpec":
        d = dict(d)
        if "region_texture" in d:
            d["region_texture"] = tuple(RegionTexture(**t) for t in d["region_texture"])
        for k in ("sheet_size", "section_normal", "thickness_mm"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass(frozen=True)
class RenderedPatch:
    image: np.ndarray
    location: np.ndarray
    vertex: int
    region: int
    hemisphere: int
    obliqueness_deg: float
    label_image: Optional[np.ndarray] = None
    atlas_prior: Optional[np.ndarray] = None


@dataclass(frozen=True, eq=False)
class WorldState:
    spec: WorldSpec
    mesh: SurfaceMesh
    uv: np.ndarray
    normals: np.ndarray
    obliqueness: np.ndarray = field(repr=False)

    # -- analytic sheet geometry (left-hemisphere frame) --------------------

    @property
    def omega(self) -> float:
        return 2 * np.pi * self.spec.fold_frequency / self.spec.sheet_size[0]

    def fold_x(self, u):
        """x coordinate of the left sheet at parameter ``u``."""
        return -(self.spec.hemisphere_gap_mm / 2 + self.spec.fold_amplitude * np.sin(self.omega * u))

    def fold_dx(self, u):
        return -self.spec.fold_amplitude * self.omega * np.cos(self.omega * u)

    def fold_ddx(self, u):
        return self.spec.fold_amplitude * self.omega**2 * np.sin(self.omega * u)

    def thickness(self, u):
        """Cortical thickness: one level per area, evenly spread over ``thickness_mm``,
        joined by tanh ramps of width ``thickness_ramp_mm`` at the borders."""
        spec = self.spec
        t0, t1 = spec.thickness_mm
        n = spec.n_regions
        u = np.clip(np.asarray(u, float), 0, spec.sheet_size[0])
        levels = t0 + (t1 - t0) * np.arange(n) / (n - 1)
        out = np.full(u.shape, levels[0])
        for k, b in enumerate(self.region_borders()):
            out = out + (levels[k + 1] - levels[k]) * 0.5 * (1 + np.tanh((u - b) / spec.thickness_ramp_mm))
        return out

    def region_of_u(self, u):
        lu = self.spec.sheet_size[0]
        # the small offset keeps points projected onto a border on its far side
        r = np.floor(np.asarray(u) / lu * self.spec.n_regions + 1e-9).astype(np.int64)
        return np.clip(r, 0, self.spec.n_regions - 1)

    def region_borders(self) -> np.ndarray:
        """u-positions (mm) of the planted borders between consecutive bands."""
        lu = self.spec.sheet_size[0]
        return np.arange(1, self.spec.n_regions) * lu / self.spec.n_regions

    def surface_point(self, u, v, hemisphere):
        u, v = np.broadcast_arrays(np.asarray(u, float), np.asarray(v, float))
        x = self.fold_x(u)
        sign = np.where(np.asarray(hemisphere) == RIGHT, -1.0, 1.0)
        return np.stack([sign * x, u, v], axis=-1)

    def inward_normal(self, u, hemisphere):
        """Unit normal pointing from the pial surface into the cortex (towards the midline)."""
        u = np.asarray(u, float)
        dx = self.fold_dx(u)
        n = np.stack([np.ones_like(u), -dx, np.zeros_like(u)], axis=-1)
        n /= np.linalg.norm(n, axis=-1, keepdims=True)
        n[..., 0] *= np.where(np.asarray(hemisphere) == RIGHT, -1.0, 1.0)
        return n

    def arc_length(self, u0, u1, n: int = 2001) -> float:
        uu = np.linspace(u0, u1, n)
        return float(np.trapz(np.sqrt(1 + self.fold_dx(uu) ** 2), uu))

    def project(self, q, hemisphere, iters: int = 12):
        """Closest sheet parameters and signed depth for points ``q`` (..., 3).

        Depth is positive inside the cortex side of the surface.  ``u`` is not
        clipped to the sheet so that points beyond its edges keep a
        well-defined nearest point on the extended fold.
        """
        q = np.array(q, dtype=float)
        right = np.asarray(hemisphere) == RIGHT
        q[..., 0] = np.where(right, -q[..., 0], q[..., 0])
        qx, qy, qz = q[..., 0], q[..., 1], q[..., 2]
        u = qy.copy()
        for _ in range(iters):
            X, dX, ddX = self.fold_x(u), self.fold_dx(u), self.fold_ddx(u)
            g = (u - qy) + (X - qx) * dX
            h = 1 + dX**2 + (X - qx) * ddX
            h = np.where(h > 0.1, h, 1 + dX**2)
            u = u - g / h
        X, dX = self.fold_x(u), self.fold_dx(u)
        nx = 1 / np.sqrt(1 + dX**2)
        ny = -dX * nx
        depth = (qx - X) * nx + (qy - u) * ny
        return u, qz, depth


def _grid_triangles(nu: int, nv: int, offset: int, flip: bool) -> np.ndarray:
    idx = np.arange(nu * nv).reshape(nu, nv) + offset
    a = idx[:-1, :-1].ravel()
    b = idx[1:, :-1].ravel()
    c = idx[1:, 1:].ravel()
    d = idx[:-1, 1:].ravel()
    if flip:
        tris = np.concatenate([np.stack([a, c, b], 1), np.stack([a, d, c], 1)])
    else:
        tris = np.concatenate([np.stack([a, b, c], 1), np.stack([a, c, d], 1)])
    return tris


def build_world(spec: WorldSpec) -> tuple[SurfaceMesh, WorldState]:
    spec.validate()
    lu, lv = spec.sheet_size
    us = np.linspace(0.0, lu, spec.grid_u)
    vs = np.linspace(0.0, lv, spec.grid_v)
    uu, vv = np.meshgrid(us, vs, indexing="ij")
    uu, vv = uu.ravel(), vv.ravel()
    nper = len(uu)

    verts, infl, hemi, region, tris = [], [], [], [], []
    for h in (LEFT, RIGHT):
        tmp = WorldState(spec, None, None, None, None)  # geometry helpers only
        p = tmp.surface_point(uu, vv, np.full(nper, h))
        sign = -1.0 if h == LEFT else 1.0
        q = np.stack([np.full(nper, sign * spec.hemisphere_gap_mm / 2), uu, vv], axis=1)
        verts.append(p)
        infl.append(q)
        hemi.append(np.full(nper, h, dtype=np.int64))
        region.append(tmp.region_of_u(uu))
        # winding chosen so normals point laterally, away from the midline
        tris.append(_grid_triangles(spec.grid_u, spec.grid_v, h * nper, flip=(h == LEFT)))
    mesh = SurfaceMesh(
        np.concatenate(verts),
        np.concatenate(tris),
        np.concatenate(infl),
        np.concatenate(hemi),
        np.concatenate(region),
    )
    normals = vertex_normals(mesh)
    s = np.asarray(spec.section_normal)
    obl = np.degrees(np.arccos(np.clip(normals @ s, -1.0, 1.0)))
    uv = np.stack([np.concatenate([uu, uu]), np.concatenate([vv, vv])], axis=1)
    return mesh, WorldState(spec, mesh, uv, normals, obl)


def obliqueness(mesh: SurfaceMesh, v: int, section_normal) -> float:
    """Angle in degrees between the cutting plane and the surface at ``v``.

    90 means the cut is perpendicular to the surface; 0 and 180 mean the
    cutting plane is tangent to it.  The sign of the dot product is kept, so
    tilting the cut by ``theta`` moves the result by exactly ``theta``.
    """
    from .mesh_geo import vertex_normal

    n = vertex_normal(mesh, v)
    s = np.asarray(section_normal, dtype=float)
    s = s / np.linalg.norm(s)
    return float(np.degrees(np.arccos(np.clip(n @ s, -1.0, 1.0))))


def _frame_axes(world: WorldState, u0, hemi):
    """In-plane unit axes: ``e1`` towards white matter, ``e2`` along the ribbon."""
    s = np.asarray(world.spec.section_normal)
    m = world.inward_normal(u0, hemi)
    e1 = m - (m @ s)[:, None] * s
    norm = np.linalg.norm(e1, axis=1, keepdims=True)
    fallback = np.cross(s, [0.0, 0.0, 1.0] if abs(s[2]) < 0.9 else [1.0, 0.0, 0.0])
    e1 = np.where(norm > 1e-9, e1 / np.maximum(norm, 1e-12), fallback / np.linalg.norm(fallback))
    return e1, np.cross(s, e1)


def section_index(world: WorldState, v) -> np.ndarray:
    """Histological section holding sheet height ``v`` (sections stack along v)."""
    return np.floor(np.asarray(v, float) / world.spec.section_spacing_mm + 0.5).astype(np.int64)


def patch_rotation(world: WorldState, v) -> np.ndarray:
    """In-plane orientation (radians) of the patch frame.

    Every section is digitised at its own angle, uniform in +-rotation_deg,
    so all patches of one section share an orientation.
    """
    v = np.asarray(v, float)
    limit = np.deg2rad(world.spec.rotation_deg)
    if limit == 0:
        return np.zeros(v.shape)
    sec = section_index(world, v)
    angles = {
        int(k): np.random.default_rng([int(world.spec.seed) & 0xFFFFFFFF, 0x0215, int(k) & 0xFFFFFFFF]).uniform(-limit, limit)
        for k in np.unique(sec)
    }
    return np.vectorize(angles.__getitem__, otypes=[float])(sec)


def _patch_frames(world: WorldState, u0, v0, hemi):
    """Pixel sample points (k, P, P, 3) of the cutting-plane patches."""
    spec = world.spec
    p = world.surface_point(u0, v0, hemi)
    m = world.inward_normal(u0, hemi)
    centre = p + m * (world.thickness(u0) / 2)[:, None]
    e1, e2 = _frame_axes(world, u0, hemi)
    a = patch_rotation(world, v0)[:, None]
    if np.any(a):
        e1, e2 = np.cos(a) * e1 + np.sin(a) * e2, np.cos(a) * e2 - np.sin(a) * e1
    P = spec.patch_px
    # pixel P // 2 sits exactly on the patch centre
    r = (np.arange(P) - P // 2) * spec.pixel_mm
    return (
        centre[:, None, None, :]
        + r[None, :, None, None] * e1[:, None, None, :]
        + r[None, None, :, None] * e2[:, None, None, :]
    )


def _labels_at(world: WorldState, q, hemi):
    spec = world.spec
    hh = np.broadcast_to(np.asarray(hemi)[:, None, None], q.shape[:3])
    u, v, depth = world.project(q, hh)
    lu, lv = spec.sheet_size
    t = depth / world.thickness(u)
    in_cortex = (t >= 0) & (t < 1)
    eps = 1e-9
    on_sheet = (u >= -eps) & (u <= lu + eps) & (v >= -eps) & (v <= lv + eps)
    labels = np.full(q.shape[:3], spec.background_class, dtype=np.int64)
    labels[in_cortex & ~on_sheet] = spec.other_class
    reg = world.region_of_u(u)
    sel = in_cortex & on_sheet
    labels[sel] = reg[sel]
    return labels, t, depth


def _noise_rng(world: WorldState, key, stream: int) -> np.random.Generator:
    return np.random.default_rng([int(world.spec.seed) & 0xFFFFFFFFFFFFFFFF, int(key), stream])


def render_at(world: WorldState, u0, v0, hemi, keys, labeled: bool = False) -> tuple:
    """Render patches centred on sheet points; returns (images, labels or None).

    ``keys`` seed the per-patch noise (normally the nearest vertex id).
    """
    spec = world.spec
    u0 = np.atleast_1d(np.asarray(u0, float))
    v0 = np.atleast_1d(np.asarray(v0, float))
    hemi = np.atleast_1d(np.asarray(hemi))
    q = _patch_frames(world, u0, v0, hemi)
    labels, t, depth = _labels_at(world, q, hemi)

    textures = list(spec.region_texture) + [OTHER_TEXTURE]
    stripes = np.array([x.stripes for x in textures], float)
    contrast = np.array([x.contrast for x in textures])
    density = np.array([x.dot_density for x in textures])

    tex_id = np.minimum(labels, spec.n_regions)
    cortex = labels < spec.background_class
    lam = CORTEX_BASE - 0.25 * contrast[tex_id] * (1 - np.cos(2 * np.pi * stripes[tex_id] * t))
    img = np.where(depth < 0, BACKGROUND_INTENSITY, WHITE_MATTER_INTENSITY)
    img = np.where(cortex, lam, img)
    # slow staining drift across the sheet, tissue pixels only
    drift = spec.stain_gradient * (np.clip(v0, 0, spec.sheet_size[1]) / spec.sheet_size[1] - 0.5)
    img = np.where(depth >= 0, img + drift[:, None, None], img)

    out = np.empty_like(img)
    for k, key in enumerate(keys):
        rng = _noise_rng(world, key, 1)
        dots = rng.random(img.shape[1:]) < density[tex_id[k]]
        noise = rng.normal(0.0, PIXEL_NOISE, img.shape[1:])
        x = np.where(cortex[k] & dots, DOT_INTENSITY, img[k]) + noise
        out[k] = np.clip(x, 0.0, 1.0)
    return out.astype(np.float32), (labels if labeled else None)


def render_patches(world: WorldState, vertices, labeled: bool = False, prior: bool = False) -> list:
    vertices = np.asarray(vertices, dtype=np.int64)
    uv = world.uv[vertices]
    hemi = world.mesh.hemisphere[vertices]
    imgs, labels = render_at(world, uv[:, 0], uv[:, 1], hemi, vertices, labeled=labeled)
    priors = atlas_priors(world, vertices) if prior else None
    out = []
    for k, v in enumerate(vertices):
        out.append(
            RenderedPatch(
                image=imgs[k],
                location=world.mesh.vertices[v].copy(),
                vertex=int(v),
                region=int(world.mesh.region[v]),
                hemisphere=int(hemi[k]),
                obliqueness_deg=float(world.obliqueness[v]),
                label_image=None if labels is None else labels[k],
                atlas_prior=None if priors is None else priors[k],
            )
        )
    return out


def render_patch(world: WorldState, v: int, labeled: bool = False) -> RenderedPatch:
    return render_patches(world, [v], labeled=labeled, prior=labeled)[0]


def atlas_priors(world: WorldState, vertices, blur_mm=None, shift_mm=None) -> np.ndarray:
    """Blurred, misregistered one-hot label maps, shape (k, n_classes, P, P)."""
    spec = world.spec
    blur_mm = spec.atlas_blur_mm if blur_mm is None else blur_mm
    shift_mm = spec.atlas_shift_mm if shift_mm is None else shift_mm
    vertices = np.asarray(vertices, dtype=np.int64)
    uv = world.uv[vertices]
    hemi = world.mesh.hemisphere[vertices]
    q = _patch_frames(world, uv[:, 0], uv[:, 1], hemi)
    # misregistration slides the label map along the ribbon
    along = _frame_axes(world, uv[:, 0], hemi)[1]
    shifts = np.zeros((len(vertices), 3))
    for k, v in enumerate(vertices):
        rng = _noise_rng(world, v, 2)
        shifts[k] = shift_mm * rng.uniform(-1.0, 1.0) * along[k]
    labels, _, _ = _labels_at(world, q + shifts[:, None, None, :], hemi)
    onehot = (labels[:, None] == np.arange(spec.n_classes)[None, :, None, None]).astype(np.float64)
    if blur_mm > 0:
        sigma = blur_mm / spec.pixel_mm
        onehot = ndimage.gaussian_filter(onehot, sigma=(0, 0, sigma, sigma), mode="nearest")
    onehot /= onehot.sum(axis=1, keepdims=True)
    return onehot.astype(np.float32)


def atlas_prior(world: WorldState, v: int) -> np.ndarray:
    return atlas_priors(world, [v])[0]


def save_manifest(spec: WorldSpec, path) -> None:
    Path(path).write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_manifest(path) -> WorldSpec:
    return WorldSpec.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
