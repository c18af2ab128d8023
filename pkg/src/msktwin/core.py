"""Shared domain types for the musculoskeletal twin engine.

Conventions: lengths in millimetres, times in seconds, frequencies in Hz,
angles in degrees at API boundaries (radians internal). All values here are
immutable after construction and safe to share between threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Iterator, Mapping, Sequence

import numpy as np

SCHEMA_VERSION = "1"

ORTHONORMAL_TOL = 1e-9
QUAT_NORM_TOL = 1e-6

MODALITIES = ("mesh", "volume", "semg", "imu", "motion", "ehr")
SCALES = ("macro", "meso", "micro", "nano")

# Default scale per modality, following the acquisition-scale table.
MODALITY_SCALE = {
    "mesh": "meso",
    "volume": "micro",
    "semg": "meso",
    "imu": "macro",
    "motion": "macro",
    "ehr": "macro",
}


class TwinError(Exception):
    """Base class for engine errors; carries an optional location string."""

    def __init__(self, detail: str, location: str | None = None):
        super().__init__(detail if location is None else f"{detail} ({location})")
        self.detail = detail
        self.location = location

    def to_json(self) -> dict:
        doc: dict[str, Any] = {"error": type(self).__name__, "detail": self.detail}
        if self.location is not None:
            doc["location"] = self.location
        return doc


class ParseError(TwinError):
    """Malformed external input; location names the offending line or field."""


class InvalidInputError(TwinError):
    """Operation precondition violated: degenerate geometry, bad parameters."""


class DependencyError(TwinError):
    """An analysis is missing required input assets."""


class NotFoundError(TwinError):
    pass


class ConflictError(TwinError):
    pass


# ---------------------------------------------------------------------------
# canonical JSON


def _format_number(x: float) -> str:
    if not np.isfinite(x):
        raise ValueError(f"nonfinite value {x!r} cannot be serialized")
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    s = "%.9g" % float(x)
    return s


def _canonical(obj: Any, indent: int, level: int) -> str:
    pad = " " * (indent * level)
    pad_in = " " * (indent * (level + 1))
    if obj is None:
        return "null"
    if isinstance(obj, bool):
        return "true" if obj else "false"
    if isinstance(obj, (int, float, np.integer, np.floating)):
        return _format_number(obj)
    if isinstance(obj, str):
        import json as _json

        return _json.dumps(obj, ensure_ascii=False)
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        items = [_canonical(v, indent, level + 1) for v in obj]
        return "[\n" + ",\n".join(pad_in + it for it in items) + "\n" + pad + "]"
    if isinstance(obj, Mapping):
        if not obj:
            return "{}"
        import json as _json

        parts = []
        for k in sorted(obj):
            if not isinstance(k, str):
                raise TypeError(f"non-string JSON key {k!r}")
            parts.append(pad_in + _json.dumps(k) + ": " + _canonical(obj[k], indent, level + 1))
        return "{\n" + ",\n".join(parts) + "\n" + pad + "}"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def canonical_dumps(obj: Any, indent: int = 2) -> str:
    """Deterministic JSON: sorted keys, floats at 9 significant digits."""
    return _canonical(obj, indent, 0) + "\n"


def format_float(x: float) -> str:
    """The same 9-significant-digit rendering used in JSON, for CSV cells."""
    return _format_number(float(x))


# ---------------------------------------------------------------------------
# rigid transforms


def _polar_rotation(m: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(m)
    return u @ vt


def rotation_about(axis: Sequence[float], angle_deg: float) -> np.ndarray:
    """Rotation matrix about an arbitrary axis (Rodrigues)."""
    a = np.asarray(axis, dtype=float)
    n = np.linalg.norm(a)
    if n == 0:
        raise InvalidInputError("rotation axis must be nonzero")
    a = a / n
    th = np.deg2rad(angle_deg)
    k = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    return np.eye(3) + np.sin(th) * k + (1 - np.cos(th)) * (k @ k)


@dataclass(frozen=True)
class RigidTransform:
    """Rotation + translation mapping one coordinate frame to another."""

    rotation: np.ndarray
    translation_mm: np.ndarray

    def __post_init__(self):
        r = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation_mm, dtype=float).reshape(3)
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise InvalidInputError("transform contains nonfinite values")
        drift = np.abs(r.T @ r - np.eye(3)).max()
        if drift > ORTHONORMAL_TOL:
            r = _polar_rotation(r)
        if np.linalg.det(r) < 0:
            raise InvalidInputError("rotation has negative determinant (reflection)")
        r.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation_mm", t)

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    @staticmethod
    def from_axis_angle(axis: Sequence[float], angle_deg: float,
                        translation_mm: Sequence[float] = (0.0, 0.0, 0.0)) -> "RigidTransform":
        return RigidTransform(rotation_about(axis, angle_deg), np.asarray(translation_mm, float))

    def apply(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation_mm

    def to_json(self) -> dict:
        return {"rotation": self.rotation.tolist(), "translation_mm": self.translation_mm.tolist()}

    @staticmethod
    def from_json(doc: Mapping) -> "RigidTransform":
        return RigidTransform(np.asarray(doc["rotation"], float), np.asarray(doc["translation_mm"], float))


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Transform applying b first, then a."""
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation_mm + a.translation_mm)


def invert(t: RigidTransform) -> RigidTransform:
    return RigidTransform(t.rotation.T, -(t.rotation.T @ t.translation_mm))


def rotation_angle_deg(r: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix, in degrees."""
    c = (np.trace(r) - 1.0) / 2.0
    return float(np.rad2deg(np.arccos(np.clip(c, -1.0, 1.0))))


# ---------------------------------------------------------------------------
# meshes


@dataclass(frozen=True)
class Mesh:
    """Triangulated surface in millimetre world coordinates, 0-based faces."""

    vertices: np.ndarray
    faces: np.ndarray
    label: str = ""

    def __post_init__(self):
        v = np.array(self.vertices, dtype=float).reshape(-1, 3)
        f = np.array(self.faces, dtype=np.int64).reshape(-1, 3)
        v.flags.writeable = False
        f.flags.writeable = False
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_faces(self) -> int:
        return self.faces.shape[0]

    def transformed(self, t: RigidTransform, label: str | None = None) -> "Mesh":
        return Mesh(t.apply(self.vertices), self.faces, self.label if label is None else label)


@dataclass(frozen=True)
class ValidationIssue:
    code: str
    message: str
    location: str

    def to_json(self) -> dict:
        return {"code": self.code, "message": self.message, "location": self.location}


@dataclass(frozen=True)
class ValidationReport:
    issues: tuple[ValidationIssue, ...]

    @property
    def ok(self) -> bool:
        return not self.issues

    def to_json(self) -> dict:
        return {"ok": self.ok, "issues": [i.to_json() for i in self.issues]}


def validate_mesh(m: Mesh) -> ValidationReport:
    """Report every violation of the mesh invariants; empty report iff valid."""
    issues: list[ValidationIssue] = []
    bad = ~np.isfinite(m.vertices).all(axis=1)
    for i in np.flatnonzero(bad):
        issues.append(ValidationIssue("nonfinite-vertex", "vertex has nonfinite coordinates", f"vertex {i}"))
    for i, face in enumerate(m.faces):
        if face.min() < 0 or face.max() >= m.n_vertices:
            issues.append(ValidationIssue("index-out-of-range",
                                          f"face references vertex {int(face.max())} but mesh has {m.n_vertices} vertices",
                                          f"face {i}"))
        elif len(set(face.tolist())) != 3:
            issues.append(ValidationIssue("degenerate-face", "face indices are not distinct", f"face {i}"))
    return ValidationReport(tuple(issues))


# ---------------------------------------------------------------------------
# volumes


@dataclass(frozen=True)
class Volume:
    """Regular voxel grid of signed 16-bit intensities, x-fastest in memory."""

    dims: tuple[int, int, int]
    spacing_mm: tuple[float, float, float]
    origin_mm: tuple[float, float, float]
    voxels: np.ndarray

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing_mm)
        origin = tuple(float(o) for o in self.origin_mm)
        if len(dims) != 3 or any(d <= 0 for d in dims):
            raise InvalidInputError(f"invalid dims {dims}")
        if any(s <= 0 for s in spacing):
            raise InvalidInputError("nonpositive spacing")
        vox = np.asarray(self.voxels, dtype=np.int16)
        if vox.shape != dims:
            raise InvalidInputError(f"voxel array shape {vox.shape} does not match dims {dims}")
        vox = vox.copy()
        vox.flags.writeable = False
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing_mm", spacing)
        object.__setattr__(self, "origin_mm", origin)
        object.__setattr__(self, "voxels", vox)

    def world_of_voxel(self, i: int, j: int, k: int) -> np.ndarray:
        return np.array(self.origin_mm) + np.array([i, j, k]) * np.array(self.spacing_mm)

    def voxel_of_world(self, p: Sequence[float]) -> tuple[int, int, int]:
        u = (np.asarray(p, float) - np.array(self.origin_mm)) / np.array(self.spacing_mm)
        idx = np.rint(u).astype(int)
        if np.any(idx < 0) or np.any(idx >= np.array(self.dims)):
            raise InvalidInputError(f"point {list(p)} outside volume grid")
        return int(idx[0]), int(idx[1]), int(idx[2])

    def voxel_center_grid(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """World coordinates of voxel centers along each axis."""
        ax = [np.array(self.origin_mm[d]) + np.arange(self.dims[d]) * self.spacing_mm[d] for d in range(3)]
        return ax[0], ax[1], ax[2]


# ---------------------------------------------------------------------------
# sensor traces

SENSOR_UNITS = ("mV", "quat", "m/s^2", "deg/s", "uT")

_QUAT_SUFFIXES = ("_qw", "_qx", "_qy", "_qz")


def quaternion_groups(channels: Sequence[str], units: Mapping[str, str]) -> dict[str, tuple[str, str, str, str]]:
    """Group quaternion channels by prefix; each group must be complete (w,x,y,z)."""
    groups: dict[str, dict[str, str]] = {}
    for ch in channels:
        if units.get(ch) != "quat":
            continue
        for suf in _QUAT_SUFFIXES:
            if ch.endswith(suf):
                groups.setdefault(ch[: -len(suf)], {})[suf] = ch
                break
        else:
            raise InvalidInputError(f"quaternion channel {ch!r} lacks a _qw/_qx/_qy/_qz suffix")
    out = {}
    for prefix, members in groups.items():
        missing = [s for s in _QUAT_SUFFIXES if s not in members]
        if missing:
            raise InvalidInputError(f"quaternion group {prefix!r} missing components {missing}")
        out[prefix] = tuple(members[s] for s in _QUAT_SUFFIXES)
    return out


@dataclass(frozen=True)
class SensorTrace:
    """Uniformly sampled multichannel time series (sEMG mV, IMU quaternions)."""

    fs_hz: float
    channels: tuple[str, ...]
    samples: Mapping[str, np.ndarray]
    units: Mapping[str, str]
    placements: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.fs_hz <= 0:
            raise InvalidInputError("fs_hz must be positive")
        samples = {}
        n = None
        for ch in self.channels:
            if ch not in self.samples:
                raise InvalidInputError(f"channel {ch!r} has no samples")
            arr = np.asarray(self.samples[ch], dtype=float)
            if n is None:
                n = arr.shape[0]
            elif arr.shape[0] != n:
                raise InvalidInputError(f"channel {ch!r} length {arr.shape[0]} != {n}")
            arr = arr.copy()
            arr.flags.writeable = False
            samples[ch] = arr
        for ch in self.channels:
            if self.units.get(ch) not in SENSOR_UNITS:
                raise InvalidInputError(f"unknown unit tag {self.units.get(ch)!r} for channel {ch!r}")
        for prefix, (w, x, y, z) in quaternion_groups(self.channels, self.units).items():
            q = np.stack([samples[w], samples[x], samples[y], samples[z]], axis=1)
            norms = np.linalg.norm(q, axis=1)
            off = np.abs(norms - 1.0)
            if off.size and off.max() > QUAT_NORM_TOL:
                raise InvalidInputError(
                    f"quaternion group {prefix!r} not unit norm (max deviation {off.max():.2e})",
                    location=f"sample {int(off.argmax())}")
        object.__setattr__(self, "channels", tuple(self.channels))
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "units", dict(self.units))
        object.__setattr__(self, "placements", dict(self.placements))

    @property
    def n_samples(self) -> int:
        return 0 if not self.channels else self.samples[self.channels[0]].shape[0]


# ---------------------------------------------------------------------------
# motion sequences


@dataclass(frozen=True)
class MotionSequence:
    """Ordered 3D point-cloud frames; correspondence means point i tracks across frames."""

    fps: float
    frames: tuple[np.ndarray, ...]
    correspondence: bool = False

    def __post_init__(self):
        if self.fps <= 0:
            raise InvalidInputError("fps must be positive")
        frames = []
        for i, f in enumerate(self.frames):
            arr = np.asarray(f, dtype=float).reshape(-1, 3)
            if not np.all(np.isfinite(arr)):
                raise InvalidInputError("frame contains nonfinite points", location=f"frame {i}")
            arr = arr.copy()
            arr.flags.writeable = False
            frames.append(arr)
        if self.correspondence and len({f.shape[0] for f in frames}) > 1:
            raise InvalidInputError("correspondence violated: frames have unequal point counts")
        object.__setattr__(self, "frames", tuple(frames))

    def __len__(self) -> int:
        return len(self.frames)


# ---------------------------------------------------------------------------
# EHR records


@dataclass(frozen=True)
class EhrRecord:
    patient_id: str
    age_years: float | None = None
    sex: str | None = None
    height_cm: float | None = None
    weight_kg: float | None = None
    biomarkers: tuple[tuple[str, float, str], ...] = ()
    notes: str = ""
    extras: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not self.patient_id:
            raise InvalidInputError("patient_id required")
        if self.age_years is not None and self.age_years < 0:
            raise InvalidInputError("age must be nonnegative")
        for name, bound in (("height_cm", self.height_cm), ("weight_kg", self.weight_kg)):
            if bound is not None and bound <= 0:
                raise InvalidInputError(f"{name} must be positive when present")
        object.__setattr__(self, "biomarkers", tuple((str(n), float(v), str(u)) for n, v, u in self.biomarkers))
        object.__setattr__(self, "extras", dict(self.extras))

    def to_json(self) -> dict:
        demographics = {}
        for key, val in (("age", self.age_years), ("sex", self.sex),
                         ("height_cm", self.height_cm), ("weight_kg", self.weight_kg)):
            if val is not None:
                demographics[key] = val
        return {
            "patient_id": self.patient_id,
            "demographics": demographics,
            "biomarkers": [{"name": n, "value": v, "unit": u} for n, v, u in self.biomarkers],
            "notes": self.notes,
            "extras": dict(self.extras),
        }


# ---------------------------------------------------------------------------
# twin state

_ASSET_KEYS = ("asset_id", "modality", "scale", "source", "checksum", "acquired_at")
_FEATURE_KEYS = ("value", "unit", "modality", "scale", "timestamp", "provenance")


@dataclass(frozen=True)
class TwinState:
    """Serialized per-patient state: asset registry, features, graph, risk."""

    patient_id: str
    assets: tuple[dict, ...] = ()
    features: Mapping[str, dict] = field(default_factory=dict)
    graph: dict | None = None
    risk: dict | None = None
    schema_version: str = SCHEMA_VERSION

    def __post_init__(self):
        for a in self.assets:
            missing = [k for k in _ASSET_KEYS if k not in a]
            if missing:
                raise InvalidInputError(f"asset entry missing keys {missing}")
        for name, entry in self.features.items():
            missing = [k for k in _FEATURE_KEYS if k not in entry]
            if missing:
                raise InvalidInputError(f"feature {name!r} missing keys {missing}")
        if self.graph is not None:
            for node in self.graph.get("nodes", []):
                if node.get("layer") == "feature" and node.get("label") not in self.features:
                    raise InvalidInputError(
                        f"graph references unknown feature {node.get('label')!r}")
        object.__setattr__(self, "assets", tuple(dict(a) for a in self.assets))
        object.__setattr__(self, "features", {k: dict(v) for k, v in self.features.items()})

    @staticmethod
    def empty(patient_id: str) -> "TwinState":
        return TwinState(patient_id=patient_id)

    def to_json(self) -> dict:
        return {
            "patient_id": self.patient_id,
            "schema_version": self.schema_version,
            "assets": [dict(a) for a in self.assets],
            "features": {k: dict(v) for k, v in self.features.items()},
            "graph": self.graph,
            "risk": self.risk,
        }

    @staticmethod
    def from_json(doc: Mapping) -> "TwinState":
        if "schema_version" not in doc:
            raise ParseError("twin state missing schema_version")
        return TwinState(
            patient_id=doc["patient_id"],
            assets=tuple(doc.get("assets", [])),
            features=dict(doc.get("features", {})),
            graph=doc.get("graph"),
            risk=doc.get("risk"),
            schema_version=doc["schema_version"],
        )
