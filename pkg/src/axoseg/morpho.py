"""Axon instance extraction and morphometrics.

Semantic masks become instances in two passes: axons are 8-connected
components (labeled in raster order), then each myelin pixel joins the
instance whose axon is nearest in Euclidean distance, i.e. a watershed of
the distance map seeded by the axon components. A myelin component whose
nearest axon is farther than a small radius is reported as an orphan
rather than force-assigned.

This is the only analysis module that consumes pixel size: everything
upstream works in pixels, and physical units enter here as a final
multiplication.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from scipy import ndimage

from .errors import ConfigError, ContractViolation

EIGHT_CONN = np.ones((3, 3), dtype=int)
DEFAULT_ORPHAN_DISTANCE = 3.0
LOW_CONFIDENCE_AREA_PX = 5
THICKNESS_RAYS = 36
RAY_STEP_PX = 0.25


@dataclass
class AxonInstance:
    instance_id: int
    axon_pixels: np.ndarray  # (n, 2) int rows/cols
    myelin_pixels: np.ndarray  # (m, 2) int rows/cols
    centroid: Tuple[float, float]  # (row, col) of the axon component
    touches_border: bool


@dataclass
class ExtractionResult:
    instances: List[AxonInstance]
    orphan_myelin: List[np.ndarray]  # pixel sets of unassignable myelin components
    shape: Tuple[int, int]


def _check_masks(axon: np.ndarray, myelin: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    axon = np.asarray(axon)
    myelin = np.asarray(myelin)
    if axon.shape != myelin.shape or axon.ndim != 2:
        raise ContractViolation(
            f"masks must be equal-shaped 2-D, got {axon.shape} and {myelin.shape}"
        )
    for name, m in (("axon", axon), ("myelin", myelin)):
        if m.dtype != bool and not np.isin(np.unique(m), (0, 1)).all():
            raise ContractViolation(f"{name} mask is not binary")
    axon = axon.astype(bool)
    myelin = myelin.astype(bool)
    if (axon & myelin).any():
        raise ContractViolation("axon and myelin masks overlap")
    return axon, myelin


def extract_instances(
    axon_mask: np.ndarray,
    myelin_mask: np.ndarray,
    orphan_distance: float = DEFAULT_ORPHAN_DISTANCE,
) -> ExtractionResult:
    axon, myelin = _check_masks(axon_mask, myelin_mask)
    h, w = axon.shape
    labels, n = ndimage.label(axon, structure=EIGHT_CONN)

    owner = np.zeros_like(labels)
    if n > 0 and myelin.any():
        # nearest axon pixel for every location, then ownership by its label
        dist, (iy, ix) = ndimage.distance_transform_edt(~axon, return_indices=True)
        nearest_label = labels[iy, ix]
        my_labels, n_my = ndimage.label(myelin, structure=EIGHT_CONN)
        for comp in range(1, n_my + 1):
            comp_mask = my_labels == comp
            if dist[comp_mask].min() > orphan_distance:
                continue  # orphan, resolved below
            owner[comp_mask] = nearest_label[comp_mask]

    instances: List[AxonInstance] = []
    for lab in range(1, n + 1):
        ax_px = np.argwhere(labels == lab)
        my_px = np.argwhere(owner == lab)
        all_px = np.concatenate([ax_px, my_px]) if my_px.size else ax_px
        touches = bool(
            (all_px[:, 0] == 0).any()
            or (all_px[:, 1] == 0).any()
            or (all_px[:, 0] == h - 1).any()
            or (all_px[:, 1] == w - 1).any()
        )
        instances.append(
            AxonInstance(
                instance_id=lab,
                axon_pixels=ax_px,
                myelin_pixels=my_px,
                centroid=(float(ax_px[:, 0].mean()), float(ax_px[:, 1].mean())),
                touches_border=touches,
            )
        )

    orphans: List[np.ndarray] = []
    if myelin.any():
        unassigned = myelin & (owner == 0)
        if unassigned.any():
            orph_labels, n_orph = ndimage.label(unassigned, structure=EIGHT_CONN)
            orphans = [np.argwhere(orph_labels == k) for k in range(1, n_orph + 1)]
    return ExtractionResult(instances=instances, orphan_myelin=orphans, shape=(h, w))


# ---------------------------------------------------------------------------
# morphometrics


@dataclass
class MorphometricRecord:
    instance_id: int
    centroid_x_px: float
    centroid_y_px: float
    axon_area_um2: float
    equiv_diameter_um: float
    outer_diameter_um: float
    myelin_thickness_um: float
    g_ratio: Optional[float]  # None when the instance has no myelin
    touches_border: bool
    low_confidence: bool


def _instance_region(inst: AxonInstance, shape) -> np.ndarray:
    """Filled axon-plus-myelin region of one instance as a boolean mask."""
    region = np.zeros(shape, dtype=bool)
    region[inst.axon_pixels[:, 0], inst.axon_pixels[:, 1]] = True
    if inst.myelin_pixels.size:
        region[inst.myelin_pixels[:, 0], inst.myelin_pixels[:, 1]] = True
    return ndimage.binary_fill_holes(region)


def _ray_exit_radius(mask: np.ndarray, cy: float, cx: float, dy: float, dx: float) -> float:
    """March from the centroid until the ray leaves the mask; returns the
    last inside radius (0 if the start pixel is already outside)."""
    h, w = mask.shape
    r = 0.0
    inside = 0.0
    while True:
        y = int(round(cy + r * dy))
        x = int(round(cx + r * dx))
        if y < 0 or y >= h or x < 0 or x >= w or not mask[y, x]:
            return inside
        inside = r
        r += RAY_STEP_PX


def _mean_ray_thickness(inst: AxonInstance, shape) -> float:
    if inst.myelin_pixels.size == 0:
        return 0.0
    axon = np.zeros(shape, dtype=bool)
    axon[inst.axon_pixels[:, 0], inst.axon_pixels[:, 1]] = True
    outer = _instance_region(inst, shape)
    cy, cx = inst.centroid
    angles = np.linspace(0.0, 2.0 * np.pi, THICKNESS_RAYS, endpoint=False)
    deltas = []
    for ang in angles:
        dy, dx = np.sin(ang), np.cos(ang)
        r_in = _ray_exit_radius(axon, cy, cx, dy, dx)
        r_out = _ray_exit_radius(outer, cy, cx, dy, dx)
        deltas.append(max(r_out - r_in, 0.0))
    return float(np.mean(deltas))


def compute_morphometrics(
    result: ExtractionResult, pixel_size_um: float
) -> List[MorphometricRecord]:
    """Physical-unit measurements per instance; pixel size enters only here."""
    if not pixel_size_um > 0:
        raise ConfigError(f"pixel_size_um must be > 0, got {pixel_size_um}")
    px = pixel_size_um
    records = []
    for inst in result.instances:
        n_ax = len(inst.axon_pixels)
        area_um2 = n_ax * px * px
        d_in = 2.0 * np.sqrt(area_um2 / np.pi)
        outer_region = _instance_region(inst, result.shape)
        outer_area_um2 = int(outer_region.sum()) * px * px
        d_out = 2.0 * np.sqrt(outer_area_um2 / np.pi)
        has_myelin = inst.myelin_pixels.size > 0
        thickness = _mean_ray_thickness(inst, result.shape) * px if has_myelin else 0.0
        records.append(
            MorphometricRecord(
                instance_id=inst.instance_id,
                centroid_x_px=inst.centroid[1],
                centroid_y_px=inst.centroid[0],
                axon_area_um2=float(area_um2),
                equiv_diameter_um=float(d_in),
                outer_diameter_um=float(d_out),
                myelin_thickness_um=float(thickness),
                g_ratio=float(d_in / d_out) if has_myelin else None,
                touches_border=inst.touches_border,
                low_confidence=n_ax < LOW_CONFIDENCE_AREA_PX,
            )
        )
    return records


CSV_COLUMNS = [
    "instance_id",
    "centroid_x_px",
    "centroid_y_px",
    "axon_area_um2",
    "equiv_diameter_um",
    "outer_diameter_um",
    "myelin_thickness_um",
    "g_ratio",
    "touches_border",
    "low_confidence",
]


def export_records(records: List[MorphometricRecord], path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(CSV_COLUMNS)
        for r in records:
            writer.writerow(
                [
                    r.instance_id,
                    repr(r.centroid_x_px),
                    repr(r.centroid_y_px),
                    repr(r.axon_area_um2),
                    repr(r.equiv_diameter_um),
                    repr(r.outer_diameter_um),
                    repr(r.myelin_thickness_um),
                    "" if r.g_ratio is None else repr(r.g_ratio),
                    int(r.touches_border),
                    int(r.low_confidence),
                ]
            )


def read_records(path) -> List[MorphometricRecord]:
    records = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        for rec in reader:
            records.append(
                MorphometricRecord(
                    instance_id=int(rec["instance_id"]),
                    centroid_x_px=float(rec["centroid_x_px"]),
                    centroid_y_px=float(rec["centroid_y_px"]),
                    axon_area_um2=float(rec["axon_area_um2"]),
                    equiv_diameter_um=float(rec["equiv_diameter_um"]),
                    outer_diameter_um=float(rec["outer_diameter_um"]),
                    myelin_thickness_um=float(rec["myelin_thickness_um"]),
                    g_ratio=None if rec["g_ratio"] == "" else float(rec["g_ratio"]),
                    touches_border=bool(int(rec["touches_border"])),
                    low_confidence=bool(int(rec["low_confidence"])),
                )
            )
    return records
