"""Volumetric data model, MVOL files, study manifests and input assembly.

Voxel arrays are stored as numpy arrays of shape ``(nz, ny, nx)`` in C order,
which is exactly the x-fastest row-major layout used on disk. ``dims`` is
always reported as ``(nx, ny, nz)``.
"""

from __future__ import annotations

import enum
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import (
    CorruptVolumeFile,
    EmptyStudy,
    IndexOutOfRange,
    ManifestError,
    ShapeMismatch,
    ZeroVarianceVolume,
)

SLAB_HALF_WIDTH = 2
SLAB_DEPTH = 2 * SLAB_HALF_WIDTH + 1


class SequenceId(enum.IntEnum):
    PreGdT1 = 0
    PostGdT1 = 1
    PostGdIR = 2
    Flair = 3

    @property
    def key(self) -> str:
        return _SEQUENCE_KEYS[self]

    @classmethod
    def from_key(cls, key: str) -> "SequenceId":
        try:
            return _KEY_TO_SEQUENCE[key]
        except KeyError:
            raise ManifestError(
                f"unknown sequence name {key!r}; expected one of {sorted(_KEY_TO_SEQUENCE)}"
            ) from None


_SEQUENCE_KEYS = {
    SequenceId.PreGdT1: "pre_gd_t1",
    SequenceId.PostGdT1: "post_gd_t1",
    SequenceId.PostGdIR: "post_gd_ir",
    SequenceId.Flair: "flair",
}
_KEY_TO_SEQUENCE = {v: k for k, v in _SEQUENCE_KEYS.items()}
ALL_SEQUENCES = tuple(SequenceId)


def parse_sequences(names: str | Sequence[str]) -> tuple[SequenceId, ...]:
    """Parse ``"pre_gd_t1,flair"`` (or a list of names) into canonical order."""
    if isinstance(names, str):
        names = [n.strip() for n in names.split(",") if n.strip()]
    seqs = sorted({SequenceId.from_key(n) for n in names})
    if not seqs:
        raise EmptyStudy("empty sequence list")
    return tuple(seqs)


# --------------------------------------------------------------------------
# grids


@dataclass(frozen=True, eq=False)
class _Grid:
    voxels: np.ndarray
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)

    _dtype = np.float32
    role = "image"

    def __post_init__(self):
        vox = np.ascontiguousarray(self.voxels, dtype=self._dtype)
        if vox.ndim != 3 or 0 in vox.shape:
            raise ShapeMismatch(f"expected a non-empty 3-D array, got shape {vox.shape}")
        spacing = tuple(float(s) for s in self.spacing_mm)
        if len(spacing) != 3 or not all(np.isfinite(s) and s > 0 for s in spacing):
            raise ValueError(f"spacing must be three positive reals, got {self.spacing_mm}")
        if vox is self.voxels:
            vox = vox.copy()
        vox.setflags(write=False)
        self._check_values(vox)
        object.__setattr__(self, "voxels", vox)
        object.__setattr__(self, "spacing_mm", spacing)

    def _check_values(self, vox):
        if not np.isfinite(vox).all():
            raise ValueError("voxel values must be finite")

    @property
    def dims(self) -> tuple[int, int, int]:
        nz, ny, nx = self.voxels.shape
        return (nx, ny, nz)

    @property
    def voxel_volume_mm3(self) -> float:
        sx, sy, sz = self.spacing_mm
        return sx * sy * sz

    def same_grid(self, other: "_Grid") -> bool:
        return self.dims == other.dims and self.spacing_mm == other.spacing_mm

    def __eq__(self, other):
        if type(other) is not type(self):
            return NotImplemented
        return self.same_grid(other) and np.array_equal(self.voxels, other.voxels)

    __hash__ = None


class Volume3D(_Grid):
    """Scalar image volume (float32)."""


class BinaryMask(_Grid):
    """0/1 mask stored as uint8."""

    _dtype = np.uint8
    role = "mask"

    def _check_values(self, vox):
        if vox.size and vox.max() > 1:
            raise ValueError("binary mask voxels must be 0 or 1")


class ProbabilityVolume(_Grid):
    """Per-voxel probabilities in [0, 1] (float32)."""

    role = "prob"

    def _check_values(self, vox):
        super()._check_values(vox)
        if vox.min() < 0 or vox.max() > 1:
            raise ValueError("probabilities must lie in [0, 1]")


_ROLE_TYPES = {"image": Volume3D, "mask": BinaryMask, "prob": ProbabilityVolume}


@dataclass(frozen=True)
class MultiSequenceStudy:
    case_id: str
    volumes: Mapping[SequenceId, Volume3D]
    gt: Optional[BinaryMask] = None

    def __post_init__(self):
        vols = {SequenceId(k): v for k, v in sorted(dict(self.volumes).items())}
        if not vols:
            raise EmptyStudy(f"study {self.case_id!r} has no sequences")
        ref = next(iter(vols.values()))
        for seq, vol in vols.items():
            if not vol.same_grid(ref):
                raise ShapeMismatch(f"{self.case_id}: {seq.key} grid differs from {ref.dims}")
        if self.gt is not None and not self.gt.same_grid(ref):
            raise ShapeMismatch(f"{self.case_id}: ground truth grid differs from images")
        object.__setattr__(self, "volumes", vols)

    @property
    def dims(self):
        return next(iter(self.volumes.values())).dims

    @property
    def spacing_mm(self):
        return next(iter(self.volumes.values())).spacing_mm

    @property
    def sequences(self) -> tuple[SequenceId, ...]:
        return tuple(self.volumes)


# --------------------------------------------------------------------------
# operations


def normalize_study(study: MultiSequenceStudy) -> MultiSequenceStudy:
    """Z-score every present volume over all of its voxels."""
    out = {}
    for seq, vol in study.volumes.items():
        v = vol.voxels.astype(np.float64)
        std = v.std()
        if not std > 0:
            raise ZeroVarianceVolume(f"{study.case_id}: {seq.key} has constant intensity")
        out[seq] = Volume3D(((v - v.mean()) / std).astype(np.float32), vol.spacing_mm)
    return MultiSequenceStudy(study.case_id, out, study.gt)


def slab_indices(nz: int, z: int, half_width: int = SLAB_HALF_WIDTH) -> list[int]:
    if not 0 <= z < nz:
        raise IndexOutOfRange(f"slice {z} outside [0, {nz})")
    return [min(max(z + o, 0), nz - 1) for o in range(-half_width, half_width + 1)]


def extract_slab(vol: _Grid, z: int, half_width: int = SLAB_HALF_WIDTH) -> np.ndarray:
    """Return the ``2*half_width+1`` axial slices around ``z`` as (depth, H, W).

    Indices past either end are clamped (edge replication).
    """
    return vol.voxels[slab_indices(vol.voxels.shape[0], z, half_width)]


def assemble_input(study: MultiSequenceStudy, z: int) -> np.ndarray:
    """Stack the 5-slice slabs of all four sequences into an (H, W, 20) array.

    Channel ``5*seq + offset + 2`` holds sequence ``seq`` at slice ``z+offset``.
    Missing sequences leave their block at zero; no rescaling happens here.
    """
    if not study.volumes:
        raise EmptyStudy(study.case_id)
    nx, ny, nz = study.dims
    out = np.zeros((ny, nx, SLAB_DEPTH * len(ALL_SEQUENCES)), dtype=np.float32)
    idx = slab_indices(nz, z)
    for seq, vol in study.volumes.items():
        block = vol.voxels[idx]  # (5, H, W)
        out[:, :, SLAB_DEPTH * seq : SLAB_DEPTH * (seq + 1)] = block.transpose(1, 2, 0)
    return out


# --------------------------------------------------------------------------
# MVOL files

MVOL_MAGIC = b"MVOL"
MVOL_VERSION = 1
_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


def encode_mvol(vol: _Grid) -> bytes:
    dtype = "u8" if isinstance(vol, BinaryMask) else "f32"
    header = {
        "dims": list(vol.dims),
        "spacing_mm": list(vol.spacing_mm),
        "dtype": dtype,
        "role": vol.role,
    }
    hb = json.dumps(header, separators=(",", ":")).encode("utf-8")
    payload = vol.voxels.astype(_DTYPES[dtype], copy=False).tobytes(order="C")
    return MVOL_MAGIC + bytes([MVOL_VERSION]) + struct.pack("<I", len(hb)) + hb + payload


def decode_mvol(buf: bytes) -> _Grid:
    if len(buf) < 9 or buf[:4] != MVOL_MAGIC:
        raise CorruptVolumeFile("bad MVOL magic")
    if buf[4] != MVOL_VERSION:
        raise CorruptVolumeFile(f"unsupported MVOL version {buf[4]}")
    (hlen,) = struct.unpack_from("<I", buf, 5)
    try:
        header = json.loads(buf[9 : 9 + hlen].decode("utf-8"))
        nx, ny, nz = (int(d) for d in header["dims"])
        spacing = tuple(float(s) for s in header["spacing_mm"])
        dtype = _DTYPES[header["dtype"]]
        cls = _ROLE_TYPES[header["role"]]
    except (ValueError, KeyError, TypeError, UnicodeDecodeError) as exc:
        raise CorruptVolumeFile(f"bad MVOL header: {exc}") from None
    payload = buf[9 + hlen :]
    if len(payload) != nx * ny * nz * dtype.itemsize:
        raise CorruptVolumeFile(
            f"payload is {len(payload)} bytes, header implies {nx * ny * nz * dtype.itemsize}"
        )
    vox = np.frombuffer(payload, dtype=dtype).reshape(nz, ny, nx)
    try:
        return cls(vox, spacing)
    except ValueError as exc:
        raise CorruptVolumeFile(str(exc)) from None


def save_mvol(vol: _Grid, path) -> None:
    Path(path).write_bytes(encode_mvol(vol))


def load_mvol(path) -> _Grid:
    return decode_mvol(Path(path).read_bytes())


# --------------------------------------------------------------------------
# manifests

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class CaseEntry:
    case_id: str
    split: str
    sequences: dict = field(default_factory=dict)  # sequence key -> path
    gt: Optional[str] = None


def write_manifest(entries: Sequence[CaseEntry], path) -> None:
    doc = {
        "version": 1,
        "cases": [
            {
                "case_id": e.case_id,
                "split": e.split,
                "sequences": dict(e.sequences),
                **({"gt": e.gt} if e.gt is not None else {}),
            }
            for e in entries
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def read_manifest(path) -> list[CaseEntry]:
    try:
        doc = json.loads(Path(path).read_text())
        cases = doc["cases"]
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from None
    entries = []
    for c in cases:
        try:
            entry = CaseEntry(c["case_id"], c["split"], dict(c["sequences"]), c.get("gt"))
        except (KeyError, TypeError) as exc:
            raise ManifestError(f"malformed manifest entry {c!r}: {exc}") from None
        if entry.split not in SPLITS:
            raise ManifestError(f"{entry.case_id}: unknown split {entry.split!r}")
        for key in entry.sequences:
            SequenceId.from_key(key)
        entries.append(entry)
    return entries


def load_study(entry: CaseEntry, root=".") -> MultiSequenceStudy:
    """Load all MVOL files of a manifest entry; relative paths resolve against ``root``."""
    root = Path(root)

    def _load(p, cls):
        vol = load_mvol(root / p if not os.path.isabs(p) else p)
        if not isinstance(vol, cls):
            raise CorruptVolumeFile(f"{p}: expected role {cls.role!r}, found {vol.role!r}")
        return vol

    vols = {SequenceId.from_key(k): _load(p, Volume3D) for k, p in entry.sequences.items()}
    gt = _load(entry.gt, BinaryMask) if entry.gt else None
    return MultiSequenceStudy(entry.case_id, vols, gt)
