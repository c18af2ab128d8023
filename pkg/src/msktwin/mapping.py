"""Volume/surface integration: per-vertex grey-level texture mapping and
sphere-based internal tissue statistics for vertebra characterization."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import InvalidInputError, Mesh, Volume, format_float

DEFAULT_DEPTH_MM = 2.0
DEFAULT_N_SAMPLES = 5
DEFAULT_HISTOGRAM_BINS = 32


@dataclass(frozen=True)
class SurfaceTexture:
    """Per-vertex sampled intensity; invalid vertices are flagged, not sentineled."""

    mesh_label: str
    values: np.ndarray
    valid: np.ndarray
    depth_mm: float

    def __post_init__(self):
        vals = np.asarray(self.values, float)
        valid = np.asarray(self.valid, bool)
        if vals.shape != valid.shape:
            raise InvalidInputError("values and valid flags must have equal length")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "valid", valid)

    def mean_valid(self) -> float | None:
        if not self.valid.any():
            return None
        return float(self.values[self.valid].mean())

    def to_json(self, mesh_asset_id: str = "") -> dict:
        return {
            "mesh_asset_id": mesh_asset_id or self.mesh_label,
            "values": [float(v) if ok else None for v, ok in zip(self.values, self.valid)],
            "valid": [bool(b) for b in self.valid],
            "depth_mm": self.depth_mm,
        }

    def to_csv(self) -> str:
        lines = ["vertex_index,value"]
        for i in np.flatnonzero(self.valid):
            lines.append(f"{i},{format_float(self.values[i])}")
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class TissueStats:
    center_mm: tuple[float, float, float]
    radius_mm: float
    count: int
    mean: float
    std: float
    min: float
    max: float
    bin_edges: tuple[float, ...]
    bin_counts: tuple[int, ...]

    def to_json(self) -> dict:
        return {
            "center_mm": list(self.center_mm),
            "radius_mm": self.radius_mm,
            "count": self.count,
            "mean": self.mean,
            "std": self.std,
            "min": self.min,
            "max": self.max,
            "histogram": {"bin_edges": list(self.bin_edges), "bin_counts": list(self.bin_counts)},
        }


def _continuous_coords(v: Volume, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Grid coordinates plus in-bounds mask for the voxel-center hull."""
    pts = np.asarray(points, float).reshape(-1, 3)
    u = (pts - np.array(v.origin_mm)) / np.array(v.spacing_mm)
    hi = np.array(v.dims, float) - 1.0
    ok = np.all((u >= 0.0) & (u <= hi), axis=1)
    return u, ok


def sample_volume_trilinear_many(v: Volume, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Trilinear samples at world points; second array flags in-bounds points."""
    u, ok = _continuous_coords(v, points)
    n = u.shape[0]
    values = np.zeros(n)
    if not ok.any():
        return values, ok
    uu = u[ok]
    base = np.floor(uu).astype(int)
    base = np.minimum(base, np.array(v.dims) - 2)
    base = np.maximum(base, 0)
    frac = uu - base
    vox = v.voxels.astype(float)
    acc = np.zeros(uu.shape[0])
    for dx in (0, 1):
        wx = frac[:, 0] if dx else 1.0 - frac[:, 0]
        for dy in (0, 1):
            wy = frac[:, 1] if dy else 1.0 - frac[:, 1]
            for dz in (0, 1):
                wz = frac[:, 2] if dz else 1.0 - frac[:, 2]
                acc += wx * wy * wz * vox[base[:, 0] + dx, base[:, 1] + dy, base[:, 2] + dz]
    values[ok] = acc
    return values, ok


def sample_volume_trilinear(v: Volume, p: Sequence[float]) -> float | None:
    """Trilinear interpolation at one world point; None when outside the hull."""
    values, ok = sample_volume_trilinear_many(v, np.asarray(p, float).reshape(1, 3))
    return float(values[0]) if ok[0] else None


def vertex_normals(m: Mesh) -> tuple[np.ndarray, np.ndarray]:
    """Angle-weighted outward vertex normals; second array flags defined normals."""
    if m.n_faces == 0:
        raise InvalidInputError("mesh has no faces; vertex normals undefined")
    normals = np.zeros((m.n_vertices, 3))
    verts = m.vertices
    for face in m.faces:
        a, b, c = verts[face[0]], verts[face[1]], verts[face[2]]
        fn = np.cross(b - a, c - a)
        norm = np.linalg.norm(fn)
        if norm < 1e-30:
            continue
        fn = fn / norm
        corners = (a, b, c)
        for slot in range(3):
            p = corners[slot]
            q = corners[(slot + 1) % 3] - p
            r = corners[(slot + 2) % 3] - p
            denom = np.linalg.norm(q) * np.linalg.norm(r)
            if denom < 1e-30:
                continue
            angle = np.arccos(np.clip(np.dot(q, r) / denom, -1.0, 1.0))
            normals[face[slot]] += angle * fn
    lengths = np.linalg.norm(normals, axis=1)
    defined = lengths > 1e-12
    normals[defined] /= lengths[defined, None]
    return normals, defined


def texture_map(m: Mesh, v: Volume, depth_mm: float = DEFAULT_DEPTH_MM,
                n_samples: int = DEFAULT_N_SAMPLES) -> SurfaceTexture:
    """Average trilinear samples along each inward vertex normal over [0, depth_mm].

    Mesh and volume must share a world frame. A vertex is flagged invalid when
    its normal is undefined or any sample leaves the voxel-center hull; a
    vertex valid at depth d stays valid at any smaller depth.
    """
    if depth_mm < 0:
        raise InvalidInputError("depth_mm must be nonnegative")
    if n_samples < 1:
        raise InvalidInputError("n_samples must be >= 1")
    normals, defined = vertex_normals(m)
    offsets = np.linspace(0.0, depth_mm, n_samples) if n_samples > 1 else np.array([0.0])
    nv = m.n_vertices
    sample_pts = (m.vertices[None, :, :] - offsets[:, None, None] * normals[None, :, :])
    values, ok = sample_volume_trilinear_many(v, sample_pts.reshape(-1, 3))
    values = values.reshape(len(offsets), nv)
    ok = ok.reshape(len(offsets), nv)
    valid = defined & ok.all(axis=0)
    out = np.zeros(nv)
    out[valid] = values[:, valid].mean(axis=0)
    return SurfaceTexture(mesh_label=m.label, values=out, valid=valid, depth_mm=float(depth_mm))


def sphere_stats(v: Volume, center: Sequence[float], radius_mm: float,
                 n_bins: int = DEFAULT_HISTOGRAM_BINS) -> TissueStats:
    """Intensity statistics over voxels whose centers lie within the sphere."""
    if radius_mm <= 0:
        raise InvalidInputError("radius_mm must be positive")
    if n_bins < 1:
        raise InvalidInputError("n_bins must be >= 1")
    c = np.asarray(center, float).reshape(3)
    origin = np.array(v.origin_mm)
    spacing = np.array(v.spacing_mm)
    lo = np.maximum(np.ceil((c - radius_mm - origin) / spacing).astype(int), 0)
    hi = np.minimum(np.floor((c + radius_mm - origin) / spacing).astype(int), np.array(v.dims) - 1)
    if np.any(lo > hi):
        raise InvalidInputError("empty sphere: no voxel center within radius")
    ax = [origin[d] + np.arange(lo[d], hi[d] + 1) * spacing[d] for d in range(3)]
    dx2 = (ax[0] - c[0]) ** 2
    dy2 = (ax[1] - c[1]) ** 2
    dz2 = (ax[2] - c[2]) ** 2
    d2 = dx2[:, None, None] + dy2[None, :, None] + dz2[None, None, :]
    mask = d2 <= radius_mm * radius_mm
    if not mask.any():
        raise InvalidInputError("empty sphere: no voxel center within radius")
    block = v.voxels[lo[0]:hi[0] + 1, lo[1]:hi[1] + 1, lo[2]:hi[2] + 1].astype(float)
    vals = block[mask]
    vmin = float(vals.min())
    vmax = float(vals.max())
    if vmin == vmax:
        edges = np.array([vmin, vmax])
        counts = np.array([vals.size])
    else:
        counts, edges = np.histogram(vals, bins=n_bins, range=(vmin, vmax))
    return TissueStats(
        center_mm=(float(c[0]), float(c[1]), float(c[2])),
        radius_mm=float(radius_mm),
        count=int(vals.size),
        mean=float(vals.mean()),
        std=float(vals.std()),
        min=vmin,
        max=vmax,
        bin_edges=tuple(float(e) for e in edges),
        bin_counts=tuple(int(n) for n in counts),
    )


def characterize_vertebra(vertebra_mesh: Mesh, v: Volume, radius_mm: float,
                          depth_mm: float = DEFAULT_DEPTH_MM,
                          n_samples: int = DEFAULT_N_SAMPLES) -> dict:
    """Centroid-sphere tissue stats plus a surface texture summary for one vertebra."""
    centroid = vertebra_mesh.vertices.mean(axis=0)
    stats = sphere_stats(v, centroid, radius_mm)
    texture = texture_map(vertebra_mesh, v, depth_mm=depth_mm, n_samples=n_samples)
    return {
        "label": vertebra_mesh.label,
        "centroid_mm": centroid.tolist(),
        "tissue": stats,
        "surface_mean": texture.mean_valid(),
        "surface_valid_fraction": float(texture.valid.mean()) if texture.valid.size else 0.0,
        "texture": texture,
    }
