"""Lesion-level analysis: 26-connected components and false-positive counts."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from .errors import ShapeMismatch
from .volgrid import BinaryMask

# faces, edges and corners all connect
STRUCTURE_26 = ndimage.generate_binary_structure(3, 3)

DEFAULT_SIZE_LIMIT_MM3 = 10.0


@dataclass(frozen=True)
class Component:
    label: int
    voxels: int
    volume_mm3: float
    bbox: tuple[tuple[int, int], ...]  # (start, stop) per array axis (z, y, x)
    overlap_voxels: int = 0


@dataclass(frozen=True)
class ComponentSet:
    labels: np.ndarray  # int32, same shape as the mask, 0 = background
    components: tuple[Component, ...]
    spacing_mm: tuple[float, float, float]

    def __len__(self):
        return len(self.components)


def label_components(mask: BinaryMask, connectivity: int = 26) -> ComponentSet:
    """Label foreground components; labels follow first encounter in x-fastest scan order."""
    if connectivity != 26:
        raise ValueError("only 26-connectivity is supported")
    labels, k = ndimage.label(mask.voxels, structure=STRUCTURE_26)
    labels = labels.astype(np.int32, copy=False)
    counts = np.bincount(labels.ravel(), minlength=k + 1)
    voxel_mm3 = mask.voxel_volume_mm3
    comps = []
    for n, sl in enumerate(ndimage.find_objects(labels), start=1):
        bbox = tuple((s.start, s.stop) for s in sl)
        comps.append(Component(n, int(counts[n]), float(counts[n] * voxel_mm3), bbox))
    return ComponentSet(labels, tuple(comps), mask.spacing_mm)


def overlap_with_gt(components: ComponentSet, gt: BinaryMask) -> ComponentSet:
    if gt.voxels.shape != components.labels.shape:
        raise ShapeMismatch(f"ground truth {gt.dims} does not match labels")
    hits = np.bincount(
        components.labels[gt.voxels.astype(bool)], minlength=len(components) + 1
    )
    comps = tuple(
        Component(c.label, c.voxels, c.volume_mm3, c.bbox, int(hits[c.label]))
        for c in components.components
    )
    return ComponentSet(components.labels, comps, components.spacing_mm)


def classify(component: Component, min_volume_mm3: Optional[float]) -> str:
    if min_volume_mm3 is not None and component.volume_mm3 < min_volume_mm3:
        return "sub_limit"
    return "tp_lesion" if component.overlap_voxels > 0 else "fp_lesion"


def _check_pair(pred: BinaryMask, gt: BinaryMask, spacing_mm=None):
    if pred.voxels.shape != gt.voxels.shape:
        raise ShapeMismatch(f"prediction {pred.dims} vs ground truth {gt.dims}")
    if spacing_mm is not None and tuple(float(s) for s in spacing_mm) != pred.spacing_mm:
        raise ShapeMismatch(f"spacing {tuple(spacing_mm)} differs from mask spacing {pred.spacing_mm}")
    if pred.spacing_mm != gt.spacing_mm:
        raise ShapeMismatch("prediction and ground truth spacing differ")


def count_false_positives(pred: BinaryMask, gt: BinaryMask, spacing_mm=None,
                          min_volume_mm3: Optional[float] = None) -> int:
    """Predicted components (at or above the size limit) that never touch the ground truth."""
    _check_pair(pred, gt, spacing_mm)
    comps = overlap_with_gt(label_components(pred), gt)
    return sum(classify(c, min_volume_mm3) == "fp_lesion" for c in comps.components)


def lesion_rows(pred: BinaryMask, gt: BinaryMask,
                min_volume_mm3: float = DEFAULT_SIZE_LIMIT_MM3) -> list[dict]:
    """Per-component report rows for a thresholded prediction."""
    _check_pair(pred, gt)
    comps = overlap_with_gt(label_components(pred), gt)
    return [
        {
            "label": c.label,
            "voxels": c.voxels,
            "volume_mm3": c.volume_mm3,
            "gt_overlap_voxels": c.overlap_voxels,
            "classification": classify(c, min_volume_mm3),
        }
        for c in comps.components
    ]
