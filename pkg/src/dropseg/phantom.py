"""Deterministic synthetic four-sequence studies with known lesion masks.

Each study is an ellipsoidal "head" containing non-overlapping ellipsoidal
lesions, a few bright tubular vessel distractors, and smooth tissue texture.
The four sequences share that geometry and differ only in contrast:

* pre-Gd T1: lesions nearly isointense
* post-Gd T1 / post-Gd IR: lesions and vessels enhance
* FLAIR: lesions plus a surrounding edema halo; vessels invisible
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from .errors import ConfigError, PlacementFailure
from .volgrid import (
    BinaryMask,
    CaseEntry,
    MultiSequenceStudy,
    SequenceId,
    Volume3D,
    save_mvol,
    write_manifest,
)

MAX_PLACEMENT_ATTEMPTS = 1000

DEFAULT_CONTRAST = {
    "pre_gd_t1": {"tissue": 1.0, "lesion": 0.95, "vessel": 1.0, "halo": 1.0},
    "post_gd_t1": {"tissue": 1.0, "lesion": 1.8, "vessel": 1.7, "halo": 1.0},
    "post_gd_ir": {"tissue": 1.0, "lesion": 2.0, "vessel": 2.0, "halo": 1.0},
    "flair": {"tissue": 1.0, "lesion": 1.5, "vessel": 1.0, "halo": 1.35},
}


@dataclass(frozen=True)
class PhantomParams:
    dims: tuple[int, int, int] = (64, 64, 32)
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    lesion_count: tuple[int, int] = (1, 5)
    lesion_radius_mm: tuple[float, float] = (2.0, 5.0)
    contrast: dict = field(default_factory=lambda: json.loads(json.dumps(DEFAULT_CONTRAST)))
    halo_factor: float = 1.8
    vessel_count: int = 6
    vessel_radius_mm: float = 0.8
    vessel_length_mm: float = 30.0
    texture_sigma: float = 0.05
    noise_sigma: float = 0.1
    domain_shift: Optional[dict] = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing_mm", tuple(float(s) for s in self.spacing_mm))
        object.__setattr__(self, "lesion_count", tuple(int(c) for c in self.lesion_count))
        object.__setattr__(self, "lesion_radius_mm", tuple(float(r) for r in self.lesion_radius_mm))
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ConfigError(f"dims must be three positive integers, got {self.dims}")
        if len(self.spacing_mm) != 3 or min(self.spacing_mm) <= 0:
            raise ConfigError("spacing_mm must be three positive reals")
        lo, hi = self.lesion_count
        if lo < 1 or hi < lo:
            raise ConfigError(f"lesion_count must satisfy 1 <= lo <= hi, got {self.lesion_count}")
        rlo, rhi = self.lesion_radius_mm
        if rlo <= 0 or rhi < rlo:
            raise ConfigError(f"lesion radii must satisfy 0 < lo <= hi, got {self.lesion_radius_mm}")
        if self.noise_sigma < 0 or self.texture_sigma < 0:
            raise ConfigError("noise and texture sigma must be >= 0")
        if self.vessel_count < 0 or self.vessel_radius_mm <= 0:
            raise ConfigError("vessel_count must be >= 0 and vessel_radius_mm > 0")
        if self.halo_factor < 1:
            raise ConfigError("halo_factor must be >= 1")
        _check_contrast(self.contrast)
        if self.domain_shift is not None:
            unknown = set(self.domain_shift) - {"noise_sigma", "texture_sigma", "contrast"}
            if unknown:
                raise ConfigError(f"unknown domain_shift key(s): {', '.join(sorted(unknown))}")

    def shifted(self) -> "PhantomParams":
        """Parameters with the domain-shift overrides applied (used for the test split)."""
        if not self.domain_shift:
            return self
        shift = dict(self.domain_shift)
        contrast = json.loads(json.dumps(self.contrast))
        for seq, vals in shift.pop("contrast", {}).items():
            contrast.setdefault(seq, {}).update(vals)
        return replace(self, contrast=contrast, domain_shift=None, **shift)

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomParams":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown phantom parameter(s): {', '.join(sorted(unknown))}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def _check_contrast(contrast):
    for key, vals in contrast.items():
        SequenceId.from_key(key)
        bad = set(vals) - {"tissue", "lesion", "vessel", "halo"}
        if bad:
            raise ConfigError(f"unknown contrast entry for {key}: {', '.join(sorted(bad))}")


@dataclass(frozen=True)
class Lesion:
    center_mm: tuple[float, float, float]
    semi_axes_mm: tuple[float, float, float]


def _grid_mm(params: PhantomParams):
    nx, ny, nz = params.dims
    sx, sy, sz = params.spacing_mm
    z, y, x = np.meshgrid(
        np.arange(nz) * sz, np.arange(ny) * sy, np.arange(nx) * sx, indexing="ij"
    )
    return x, y, z


def _ellipsoid_radius(grid, center, axes):
    x, y, z = grid
    return np.sqrt(
        ((x - center[0]) / axes[0]) ** 2
        + ((y - center[1]) / axes[1]) ** 2
        + ((z - center[2]) / axes[2]) ** 2
    )


def _head_geometry(params: PhantomParams):
    ext = [n * s for n, s in zip(params.dims, params.spacing_mm)]
    center = tuple((e - s) / 2 for e, s in zip(ext, params.spacing_mm))
    axes = tuple(0.44 * e for e in ext)
    return center, axes


def _sphere_volume(r):
    return 4.0 / 3.0 * math.pi * r**3


def _place_lesions(params, rng, grid, head_center, head_axes):
    """Sample lesions inside the head, pairwise separated by >= 2 voxels.

    Each lesion's rasterised volume must fall between the sphere volumes of the
    minimum and maximum radius; candidates violating that are redrawn.
    """
    lo, hi = params.lesion_count
    count = int(rng.integers(lo, hi + 1))
    rlo, rhi = params.lesion_radius_mm
    gap = 2.0 * max(params.spacing_mm)
    vmin, vmax = _sphere_volume(rlo), _sphere_volume(rhi)
    voxel_mm3 = math.prod(params.spacing_mm)
    lesions, masks = [], []
    for _ in range(count):
        for _attempt in range(MAX_PLACEMENT_ATTEMPTS):
            axes = tuple(rng.uniform(rlo, rhi, 3))
            center = tuple(
                c + rng.uniform(-a, a) for c, a in zip(head_center, head_axes)
            )
            # keep the whole lesion comfortably inside the head
            reach = max(axes) + gap
            shrunk = tuple(a - reach for a in head_axes)
            if min(shrunk) <= 0:
                continue
            if sum(((p - c) / s) ** 2 for p, c, s in zip(center, head_center, shrunk)) > 1:
                continue
            if any(
                math.dist(center, o.center_mm) < max(axes) + max(o.semi_axes_mm) + gap
                for o in lesions
            ):
                continue
            m = _ellipsoid_radius(grid, center, axes) <= 1.0
            vol = m.sum() * voxel_mm3
            if not vmin <= vol <= vmax:
                continue
            lesions.append(Lesion(center, axes))
            masks.append(m)
            break
        else:
            raise PlacementFailure(
                f"could not place lesion {len(lesions) + 1} of {count} "
                f"in {MAX_PLACEMENT_ATTEMPTS} attempts"
            )
    return lesions, masks


def _render_vessels(params, rng, grid, head_center, head_axes):
    vessels = np.zeros(grid[0].shape, dtype=bool)
    step = 0.5 * min(params.spacing_mm)
    r = params.vessel_radius_mm
    sx, sy, sz = params.spacing_mm
    for _ in range(params.vessel_count):
        # start somewhere in the inner 70% of the head, wander along a smooth curve
        while True:
            p = np.array([c + rng.uniform(-a, a) * 0.7 for c, a in zip(head_center, head_axes)])
            if sum(((p - head_center) / head_axes) ** 2) < 0.49:
                break
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        bend = rng.normal(size=3) * 0.08
        for _s in range(int(params.vessel_length_mm / step)):
            if sum(((p - head_center) / head_axes) ** 2) > 0.81:
                break
            i0 = [max(int((p[k] - r) / s), 0) for k, s in enumerate((sx, sy, sz))]
            i1 = [int((p[k] + r) / s) + 2 for k, s in enumerate((sx, sy, sz))]
            sl = (slice(i0[2], i1[2]), slice(i0[1], i1[1]), slice(i0[0], i1[0]))
            d2 = (grid[0][sl] - p[0]) ** 2 + (grid[1][sl] - p[1]) ** 2 + (grid[2][sl] - p[2]) ** 2
            vessels[sl] |= d2 <= r * r
            direction = direction + bend + rng.normal(size=3) * 0.03
            direction /= np.linalg.norm(direction)
            p = p + step * direction
    return vessels


def generate_study(params: PhantomParams, case_seed: int, case_id: Optional[str] = None,
                   sequences=None) -> MultiSequenceStudy:
    """Render one study; identical ``(params, case_seed)`` give identical bytes."""
    rng = np.random.default_rng([params.seed, int(case_seed)])
    grid = _grid_mm(params)
    head_center, head_axes = _head_geometry(params)
    head = _ellipsoid_radius(grid, head_center, head_axes) <= 1.0

    lesions, masks = _place_lesions(params, rng, grid, head_center, head_axes)
    gt = np.zeros(head.shape, dtype=bool)
    halo = np.zeros(head.shape, dtype=bool)
    for les, m in zip(lesions, masks):
        gt |= m
        halo_axes = tuple(a * params.halo_factor for a in les.semi_axes_mm)
        halo |= _ellipsoid_radius(grid, les.center_mm, halo_axes) <= 1.0
    halo &= head & ~gt
    vessels = _render_vessels(params, rng, grid, head_center, head_axes) & head & ~gt

    sigma_vox = [4.0 / s for s in reversed(params.spacing_mm)]
    if sequences is None:
        sequences = tuple(SequenceId)
    volumes = {}
    for seq in SequenceId:
        # draw every sequence's randomness even when it is dropped, so the
        # remaining sequences do not depend on which ones are kept
        texture = ndimage.gaussian_filter(rng.normal(size=head.shape), sigma_vox)
        texture *= params.texture_sigma / max(texture.std(), 1e-12)
        noise = rng.normal(0.0, params.noise_sigma, head.shape) if params.noise_sigma > 0 else 0.0
        if seq not in sequences:
            continue
        c = {**DEFAULT_CONTRAST[seq.key], **params.contrast.get(seq.key, {})}
        tissue = c["tissue"]
        img = np.where(head, tissue * (1.0 + texture), 0.0)
        img = np.where(halo, tissue * c["halo"], img)
        img = np.where(vessels, tissue * c["vessel"], img)
        img = np.where(gt, tissue * c["lesion"], img)
        volumes[seq] = Volume3D((img + noise).astype(np.float32), params.spacing_mm)
    return MultiSequenceStudy(
        case_id or f"case_{case_seed}", volumes, BinaryMask(gt.astype(np.uint8), params.spacing_mm)
    )


def generate_dataset(params: PhantomParams, n_train: int, n_val: int, n_test: int,
                     out_dir, base_seed: Optional[int] = None) -> list[CaseEntry]:
    """Write per-case MVOL files plus ``manifest.json`` under ``out_dir``.

    Test cases drop post-Gd IR entirely and use the domain-shifted parameters.
    Paths in the manifest are relative to ``out_dir``.
    """
    for name, n in (("n_train", n_train), ("n_val", n_val), ("n_test", n_test)):
        if n < 1:
            raise ConfigError(f"{name} must be >= 1")
    if base_seed is not None:
        params = replace(params, seed=int(base_seed))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    test_params = params.shifted()
    test_seqs = tuple(s for s in SequenceId if s is not SequenceId.PostGdIR)

    entries = []
    case_seed = 0
    for split, n in (("train", n_train), ("val", n_val), ("test", n_test)):
        for k in range(n):
            case_id = f"{split}_{k:03d}"
            if split == "test":
                study = generate_study(test_params, case_seed, case_id, test_seqs)
            else:
                study = generate_study(params, case_seed, case_id)
            case_seed += 1
            case_dir = out_dir / case_id
            case_dir.mkdir(exist_ok=True)
            seq_paths = {}
            for seq, vol in study.volumes.items():
                rel = f"{case_id}/{seq.key}.mvol"
                save_mvol(vol, out_dir / rel)
                seq_paths[seq.key] = rel
            save_mvol(study.gt, case_dir / "gt.mvol")
            entries.append(CaseEntry(case_id, split, seq_paths, f"{case_id}/gt.mvol"))
    write_manifest(entries, out_dir / "manifest.json")
    return entries
