"""Strict parsers for every supported external format.

Each parser is a pure function of its byte inputs and either returns a valid
core value or raises ParseError with a location; partial values never escape.
Serializers produce the byte-normalized form used for round-trip checks and
exports.
"""

from __future__ import annotations

import hashlib
import io
import json
import re
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .core import (
    MODALITIES,
    MODALITY_SCALE,
    SCALES,
    EhrRecord,
    InvalidInputError,
    Mesh,
    MotionSequence,
    ParseError,
    SensorTrace,
    Volume,
    canonical_dumps,
    format_float,
    validate_mesh,
)

TIMESTAMP_JITTER_S = 1e-6

# Erector spinae electrode convention: EMG1/EMG2 lateral at L4, EMG3/EMG4 at L2.
EMG_PLACEMENTS = {"EMG1": "L4", "EMG2": "L4", "EMG3": "L2", "EMG4": "L2"}

_FRAME_NAME = re.compile(r"^frame_(\d{6})\.xyz$")


def checksum(data: bytes) -> str:
    """Lowercase hex SHA-256 of asset bytes."""
    return hashlib.sha256(data).hexdigest()


@dataclass(frozen=True)
class AssetManifest:
    """Registry entry for one ingested asset."""

    asset_id: str
    modality: str
    source: str
    scale: str
    checksum: str
    acquired_at: str

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise InvalidInputError(f"unknown modality {self.modality!r}")
        if self.scale not in SCALES:
            raise InvalidInputError(f"unknown scale {self.scale!r}")

    def to_json(self) -> dict:
        return {
            "asset_id": self.asset_id,
            "modality": self.modality,
            "source": self.source,
            "scale": self.scale,
            "checksum": self.checksum,
            "acquired_at": self.acquired_at,
        }


def make_manifest(modality: str, data: bytes, source: str, acquired_at: str,
                  scale: str | None = None) -> AssetManifest:
    digest = checksum(data)
    return AssetManifest(
        asset_id=f"{modality}-{digest[:12]}",
        modality=modality,
        source=source,
        scale=scale or MODALITY_SCALE[modality],
        checksum=digest,
        acquired_at=acquired_at,
    )


# ---------------------------------------------------------------------------
# OBJ-subset meshes


def _decode_text(data: bytes, what: str) -> str:
    try:
        return data.decode("ascii")
    except UnicodeDecodeError as e:
        raise ParseError(f"{what} is not ASCII text", location=f"byte {e.start}") from None


def parse_mesh_obj(data: bytes, label: str = "") -> Mesh:
    """Parse the OBJ subset: `v x y z` and `f i j k` lines only (1-based faces)."""
    text = _decode_text(data, "OBJ input")
    vertices: list[list[float]] = []
    faces: list[list[int]] = []
    for lineno, raw in enumerate(text.split("\n"), start=1):
        line = raw.rstrip("\r").strip()
        if not line or line.startswith("#"):
            continue
        tokens = line.split()
        if tokens[0] == "v":
            if len(tokens) != 4:
                raise ParseError(f"vertex needs 3 coordinates, got {len(tokens) - 1}",
                                 location=f"line {lineno}")
            try:
                vertices.append([float(t) for t in tokens[1:]])
            except ValueError:
                raise ParseError("non-numeric vertex coordinate", location=f"line {lineno}") from None
        elif tokens[0] == "f":
            if len(tokens) != 4:
                raise ParseError("non-triangular face", location=f"line {lineno}")
            idx = []
            for t in tokens[1:]:
                if "/" in t:
                    raise ParseError("texture/normal face syntax not supported",
                                     location=f"line {lineno}")
                try:
                    i = int(t)
                except ValueError:
                    raise ParseError(f"non-numeric face index {t!r}", location=f"line {lineno}") from None
                if i < 1:
                    raise ParseError(f"face index {i} must be >= 1", location=f"line {lineno}")
                idx.append(i - 1)
            faces.append(idx)
        else:
            raise ParseError(f"unsupported directive {tokens[0]!r}", location=f"line {lineno}")
    mesh = Mesh(np.array(vertices, float).reshape(-1, 3),
                np.array(faces, np.int64).reshape(-1, 3), label=label)
    report = validate_mesh(mesh)
    if not report.ok:
        first = report.issues[0]
        raise ParseError(f"invalid mesh: {first.message}", location=first.location)
    return mesh


def serialize_mesh_obj(mesh: Mesh) -> bytes:
    out = io.StringIO()
    for v in mesh.vertices:
        out.write(f"v {format_float(v[0])} {format_float(v[1])} {format_float(v[2])}\n")
    for f in mesh.faces:
        out.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")
    return out.getvalue().encode("ascii")


# ---------------------------------------------------------------------------
# raw volumes


def parse_volume(meta_json: bytes, raw: bytes) -> Volume:
    """Decode a little-endian int16 voxel grid described by its meta JSON."""
    try:
        meta = json.loads(meta_json)
    except json.JSONDecodeError as e:
        raise ParseError(f"volume meta is not valid JSON: {e.msg}", location=f"line {e.lineno}") from None
    for key in ("dims", "spacing_mm", "origin_mm", "dtype", "order"):
        if key not in meta:
            raise ParseError(f"volume meta missing key {key!r}")
    if meta["dtype"] != "int16-le":
        raise ParseError(f"unsupported dtype {meta['dtype']!r}")
    if meta["order"] != "x-fastest":
        raise ParseError(f"unsupported order {meta['order']!r}")
    dims = tuple(int(d) for d in meta["dims"])
    if len(dims) != 3 or any(d <= 0 for d in dims):
        raise ParseError(f"invalid dims {list(dims)}")
    spacing = tuple(float(s) for s in meta["spacing_mm"])
    if any(s <= 0 for s in spacing):
        raise ParseError("nonpositive spacing")
    expected = 2 * dims[0] * dims[1] * dims[2]
    if len(raw) != expected:
        raise ParseError(f"expected {expected} bytes, got {len(raw)}")
    vox = np.frombuffer(raw, dtype="<i2").reshape(dims, order="F")
    return Volume(dims=dims, spacing_mm=spacing,
                  origin_mm=tuple(float(o) for o in meta["origin_mm"]), voxels=vox)


def serialize_volume(v: Volume) -> tuple[bytes, bytes]:
    meta = {
        "dims": list(v.dims),
        "spacing_mm": list(v.spacing_mm),
        "origin_mm": list(v.origin_mm),
        "dtype": "int16-le",
        "order": "x-fastest",
    }
    raw = np.asarray(v.voxels, dtype="<i2").flatten(order="F").tobytes()
    return canonical_dumps(meta).encode("ascii"), raw


# ---------------------------------------------------------------------------
# sensor CSV (sEMG / IMU)


def parse_sensor_csv(csv_bytes: bytes, meta_json: bytes) -> SensorTrace:
    """Parse `t_s,<ch1>,...` rows against the declared sampling rate and units."""
    try:
        meta = json.loads(meta_json)
    except json.JSONDecodeError as e:
        raise ParseError(f"sensor meta is not valid JSON: {e.msg}", location=f"line {e.lineno}") from None
    if "fs_hz" not in meta:
        raise ParseError("sensor meta missing key 'fs_hz'")
    fs = float(meta["fs_hz"])
    if fs <= 0:
        raise ParseError("fs_hz must be positive")
    units = dict(meta.get("units", {}))

    text = _decode_text(csv_bytes, "sensor CSV")
    lines = [ln.rstrip("\r") for ln in text.split("\n")]
    while lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ParseError("empty sensor CSV")
    header = lines[0].split(",")
    if header[0] != "t_s" or len(header) < 2:
        raise ParseError("header must be 't_s,<channel>,...'", location="line 1")
    channels = tuple(h.strip() for h in header[1:])
    for ch in channels:
        if ch not in units:
            raise ParseError(f"no unit declared for channel {ch!r}")

    n_cols = len(header)
    times = []
    columns: list[list[float]] = [[] for _ in channels]
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cells = line.split(",")
        if len(cells) != n_cols:
            raise ParseError(f"row has {len(cells)} cells, expected {n_cols}",
                             location=f"line {lineno}")
        try:
            row = [float(c) for c in cells]
        except ValueError:
            raise ParseError("non-numeric cell", location=f"line {lineno}") from None
        times.append(row[0])
        for col, val in zip(columns, row[1:]):
            col.append(val)
    if not times:
        raise ParseError("sensor CSV has no sample rows")

    t = np.asarray(times)
    expected = t[0] + np.arange(len(t)) / fs
    drift = np.abs(t - expected)
    if drift.max() > TIMESTAMP_JITTER_S:
        bad = int(drift.argmax())
        raise ParseError(
            f"timestamp drift {drift.max():.3e} s exceeds {TIMESTAMP_JITTER_S:.0e} s at fs {fs:g} Hz",
            location=f"line {bad + 2}")

    placements = {ch: EMG_PLACEMENTS[ch] for ch in channels if ch in EMG_PLACEMENTS}
    try:
        return SensorTrace(fs_hz=fs, channels=channels,
                           samples={ch: np.asarray(col) for ch, col in zip(channels, columns)},
                           units={ch: units[ch] for ch in channels},
                           placements=placements)
    except InvalidInputError as e:
        raise ParseError(e.detail, location=e.location) from None


def serialize_sensor_csv(trace: SensorTrace) -> tuple[bytes, bytes]:
    out = io.StringIO()
    out.write("t_s," + ",".join(trace.channels) + "\n")
    n = trace.n_samples
    cols = [trace.samples[ch] for ch in trace.channels]
    for i in range(n):
        cells = [format_float(i / trace.fs_hz)] + [format_float(c[i]) for c in cols]
        out.write(",".join(cells) + "\n")
    meta = {"fs_hz": trace.fs_hz, "units": dict(trace.units)}
    return out.getvalue().encode("ascii"), canonical_dumps(meta).encode("ascii")


# ---------------------------------------------------------------------------
# motion frame directories


def parse_motion_dir(frame_files: Mapping[str, bytes], meta_json: bytes) -> MotionSequence:
    """Assemble frame_%06d.xyz files (contiguous from 0) into a sequence."""
    try:
        meta = json.loads(meta_json)
    except json.JSONDecodeError as e:
        raise ParseError(f"motion meta is not valid JSON: {e.msg}", location=f"line {e.lineno}") from None
    if "fps" not in meta:
        raise ParseError("motion meta missing key 'fps'")
    fps = float(meta["fps"])
    correspondence = bool(meta.get("correspondence", False))

    indexed: dict[int, str] = {}
    for name in frame_files:
        m = _FRAME_NAME.match(name)
        if not m:
            raise ParseError(f"unexpected file name {name!r} (want frame_%06d.xyz)")
        indexed[int(m.group(1))] = name
    if not indexed:
        raise ParseError("no frame files")
    for i in range(max(indexed) + 1):
        if i not in indexed:
            raise ParseError(f"missing frame {i}")

    frames = []
    for i in range(len(indexed)):
        name = indexed[i]
        text = _decode_text(frame_files[name], name)
        pts = []
        for lineno, line in enumerate(text.split("\n"), start=1):
            line = line.rstrip("\r").strip()
            if not line:
                continue
            cells = line.split()
            if len(cells) != 3:
                raise ParseError("point line needs exactly 'x y z'",
                                 location=f"{name} line {lineno}")
            try:
                pts.append([float(c) for c in cells])
            except ValueError:
                raise ParseError("non-numeric coordinate", location=f"{name} line {lineno}") from None
        frames.append(np.array(pts, float).reshape(-1, 3))

    if correspondence and len({f.shape[0] for f in frames}) > 1:
        raise ParseError("correspondence violated: frames have unequal point counts")
    try:
        return MotionSequence(fps=fps, frames=tuple(frames), correspondence=correspondence)
    except InvalidInputError as e:
        raise ParseError(e.detail, location=e.location) from None


def serialize_motion(seq: MotionSequence) -> tuple[dict[str, bytes], bytes]:
    files = {}
    for i, frame in enumerate(seq.frames):
        body = "".join(
            f"{format_float(p[0])} {format_float(p[1])} {format_float(p[2])}\n" for p in frame)
        files[f"frame_{i:06d}.xyz"] = body.encode("ascii")
    meta = {"fps": seq.fps, "correspondence": seq.correspondence}
    return files, canonical_dumps(meta).encode("ascii")


# ---------------------------------------------------------------------------
# EHR JSON


_EHR_KNOWN = {"patient_id", "demographics", "biomarkers", "notes"}
_DEMOGRAPHIC_KEYS = {"age", "sex", "height_cm", "weight_kg"}


def parse_ehr(json_bytes: bytes) -> EhrRecord:
    """Parse the EHR JSON; unknown keys are preserved in the extras map."""
    try:
        doc = json.loads(json_bytes)
    except json.JSONDecodeError as e:
        raise ParseError(f"EHR is not valid JSON: {e.msg}", location=f"line {e.lineno}") from None
    if not isinstance(doc, dict):
        raise ParseError("EHR must be a JSON object")
    if "patient_id" not in doc or not doc["patient_id"]:
        raise ParseError("missing patient_id")
    demo = doc.get("demographics", {})
    if not isinstance(demo, dict):
        raise ParseError("demographics must be an object")
    extras = {k: v for k, v in doc.items() if k not in _EHR_KNOWN}
    extras.update({f"demographics.{k}": v for k, v in demo.items() if k not in _DEMOGRAPHIC_KEYS})
    biomarkers = []
    for i, b in enumerate(doc.get("biomarkers", [])):
        try:
            biomarkers.append((b["name"], float(b["value"]), b["unit"]))
        except (TypeError, KeyError):
            raise ParseError("biomarker needs name/value/unit", location=f"biomarkers[{i}]") from None
    try:
        return EhrRecord(
            patient_id=str(doc["patient_id"]),
            age_years=None if "age" not in demo else float(demo["age"]),
            sex=demo.get("sex"),
            height_cm=None if "height_cm" not in demo else float(demo["height_cm"]),
            weight_kg=None if "weight_kg" not in demo else float(demo["weight_kg"]),
            biomarkers=tuple(biomarkers),
            notes=str(doc.get("notes", "")),
            extras=extras,
        )
    except InvalidInputError as e:
        raise ParseError(e.detail, location=e.location) from None


def serialize_ehr(record: EhrRecord) -> bytes:
    return canonical_dumps(record.to_json()).encode("utf-8")


# ---------------------------------------------------------------------------
# dispatch used by the store/service

PARSERS_NEEDING_META = {"volume", "semg", "imu", "motion"}


def parse_asset(modality: str, payload: bytes, meta: bytes | None):
    """Validate an uploaded payload with the parser matching its modality."""
    if modality not in MODALITIES:
        raise ParseError(f"unknown modality {modality!r}")
    if modality in PARSERS_NEEDING_META and meta is None:
        raise ParseError(f"modality {modality!r} requires metadata")
    if modality == "mesh":
        return parse_mesh_obj(payload)
    if modality == "volume":
        return parse_volume(meta, payload)
    if modality in ("semg", "imu"):
        return parse_sensor_csv(payload, meta)
    if modality == "motion":
        import zipfile

        try:
            with zipfile.ZipFile(io.BytesIO(payload)) as zf:
                files = {info.filename: zf.read(info) for info in zf.infolist()
                         if not info.is_dir()}
        except zipfile.BadZipFile:
            raise ParseError("motion payload must be a zip of frame_%06d.xyz files") from None
        return parse_motion_dir(files, meta)
    return parse_ehr(payload)


ASSET_EXTENSIONS = {
    "mesh": "obj",
    "volume": "raw",
    "semg": "csv",
    "imu": "csv",
    "motion": "zip",
    "ehr": "json",
}
