"""Synthetic multi-domain histology-like datasets with exact ground truth.

Each image is a field of elliptical axon disks wrapped in myelin annuli on
a textured background. Geometry is rasterized at pixel centers, so masks
are the exact geometry and every object's analytic area and g-ratio are
known, which is what makes the morphometric tests exact.

Three presets emulate a multi-domain collection: SYN-BF (bright axons on
dark myelin, the bright-field/TEM contrast), SYN-EM (the inverted
polarity of SEM/CARS imaging), and SYN-BIG (SYN-BF polarity at roughly
four times the axon radius, standing in for a coarse-resolution domain).

Generation is pure: (spec, seed, image index) determines every pixel.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np
from scipy import ndimage

from .datahub import save_image_u8, save_mask
from .errors import ConfigError, PackingError

# grayscale tones chosen so 255*(1 - v) rounds to 255 - round(255*v), making
# the polarity flip exact after quantization
TONE_BG = 0.64
TONE_AXON = 0.88
TONE_MYELIN = 0.12
TEXTURE_AMPLITUDE = 0.06
PLACEMENT_MARGIN = 2.0

POLARITIES = ("axon-bright", "axon-dark")


@dataclass(frozen=True)
class SynthDomainSpec:
    id: str
    polarity: str
    radius_range: Tuple[float, float]  # axon radius, px
    count_range: Tuple[int, int]
    thickness_range: Tuple[float, float]  # myelin thickness as a fraction of radius
    noise_sigma: float
    texture_scale: int  # background modulation cell size, px; 0 disables
    image_size: Tuple[int, int]
    pixel_size_um: float
    seed: int = 0

    def __post_init__(self):
        h, w = self.image_size
        lo, hi = self.radius_range
        if self.polarity not in POLARITIES:
            raise ConfigError(f"spec '{self.id}': polarity must be one of {POLARITIES}")
        if not (3.0 <= lo <= hi <= min(h, w) / 4):
            raise ConfigError(
                f"spec '{self.id}': radius range {self.radius_range} outside "
                f"[3, {min(h, w) / 4}]"
            )
        tlo, thi = self.thickness_range
        if not (0.0 < tlo <= thi < 1.0):
            raise ConfigError(
                f"spec '{self.id}': thickness fractions {self.thickness_range} "
                f"must lie in (0, 1)"
            )
        if self.count_range[0] < 1 or self.count_range[0] > self.count_range[1]:
            raise ConfigError(f"spec '{self.id}': bad count range {self.count_range}")
        if self.noise_sigma < 0:
            raise ConfigError(f"spec '{self.id}': noise sigma must be >= 0")
        if self.pixel_size_um <= 0:
            raise ConfigError(f"spec '{self.id}': pixel_size_um must be > 0")


def domain_presets() -> List[SynthDomainSpec]:
    return [
        SynthDomainSpec(
            id="SYN-BF",
            polarity="axon-bright",
            radius_range=(4.0, 9.0),
            count_range=(6, 12),
            thickness_range=(0.3, 0.5),
            noise_sigma=0.03,
            texture_scale=32,
            image_size=(256, 256),
            pixel_size_um=0.1,
        ),
        SynthDomainSpec(
            id="SYN-EM",
            polarity="axon-dark",
            radius_range=(4.0, 10.0),
            count_range=(5, 10),
            thickness_range=(0.25, 0.45),
            noise_sigma=0.04,
            texture_scale=24,
            image_size=(256, 256),
            pixel_size_um=0.005,
        ),
        SynthDomainSpec(
            id="SYN-BIG",
            polarity="axon-bright",
            radius_range=(16.0, 36.0),
            count_range=(2, 3),
            thickness_range=(0.3, 0.5),
            noise_sigma=0.03,
            texture_scale=48,
            image_size=(256, 256),
            pixel_size_um=0.4,
        ),
    ]


@dataclass
class PlacedObject:
    center: Tuple[float, float]  # (row, col)
    radius: float  # equivalent axon radius (area = pi r^2)
    axis_ratio: float
    theta: float
    thickness_frac: float
    axon_px: int = 0
    outer_px: int = 0

    @property
    def analytic_axon_area_px(self) -> float:
        return float(np.pi * self.radius**2)

    @property
    def analytic_g_ratio(self) -> float:
        return 1.0 / (1.0 + self.thickness_frac)


def _ellipse_mask(shape, center, a, b, theta) -> np.ndarray:
    """Pixels whose centers fall inside the rotated ellipse."""
    h, w = shape
    cy, cx = center
    yy, xx = np.mgrid[0:h, 0:w]
    dy = yy - cy
    dx = xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _place_objects(spec: SynthDomainSpec, rng: np.random.Generator) -> List[PlacedObject]:
    h, w = spec.image_size
    count = int(rng.integers(spec.count_range[0], spec.count_range[1] + 1))
    placed: List[PlacedObject] = []
    attempts = 0
    max_attempts = 200 * count
    while len(placed) < count:
        attempts += 1
        if attempts > max_attempts:
            raise PackingError(
                f"spec '{spec.id}': could not place {count} non-overlapping objects "
                f"in {h}x{w} after {max_attempts} attempts ({len(placed)} placed)"
            )
        r = float(rng.uniform(*spec.radius_range))
        q = float(rng.uniform(1.0, 1.3))
        theta = float(rng.uniform(0.0, np.pi))
        t = float(rng.uniform(*spec.thickness_range))
        # area-preserving ellipse: a*b = r^2, so the analytic axon area is pi r^2
        a = r * np.sqrt(q)
        outer_reach = a * (1.0 + t)
        lo = outer_reach + PLACEMENT_MARGIN
        if 2 * lo >= min(h, w):
            continue  # this draw cannot fit; try another
        cy = float(rng.uniform(lo, h - lo))
        cx = float(rng.uniform(lo, w - lo))
        ok = True
        for other in placed:
            other_a = other.radius * np.sqrt(other.axis_ratio)
            other_reach = other_a * (1.0 + other.thickness_frac)
            d = np.hypot(cy - other.center[0], cx - other.center[1])
            if d <= outer_reach + other_reach + PLACEMENT_MARGIN:
                ok = False
                break
        if ok:
            placed.append(PlacedObject((cy, cx), r, q, theta, t))
    return placed


def _background(spec: SynthDomainSpec, rng: np.random.Generator) -> np.ndarray:
    h, w = spec.image_size
    base = np.full((h, w), TONE_BG if spec.polarity == "axon-bright" else 1.0 - TONE_BG)
    if spec.texture_scale > 0:
        gh = h // spec.texture_scale + 2
        gw = w // spec.texture_scale + 2
        coarse = rng.uniform(-1.0, 1.0, size=(gh, gw))
        smooth = ndimage.zoom(coarse, (h / gh, w / gw), order=1)[:h, :w]
        base = base + TEXTURE_AMPLITUDE * smooth
    return base


def render_image(spec: SynthDomainSpec, index: int):
    """Render one image of the dataset: (uint8 image, axon mask, myelin mask,
    objects). Pure function of (spec, spec.seed, index)."""
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(index,)))
    objects = _place_objects(spec, rng)
    h, w = spec.image_size
    axon = np.zeros((h, w), dtype=bool)
    myelin = np.zeros((h, w), dtype=bool)
    for obj in objects:
        a = obj.radius * np.sqrt(obj.axis_ratio)
        b = obj.radius / np.sqrt(obj.axis_ratio)
        scale = 1.0 + obj.thickness_frac
        inner = _ellipse_mask((h, w), obj.center, a, b, obj.theta)
        outer = _ellipse_mask((h, w), obj.center, a * scale, b * scale, obj.theta)
        obj.axon_px = int(inner.sum())
        obj.outer_px = int(outer.sum())
        axon |= inner
        myelin |= outer & ~inner

    image = _background(spec, rng)
    if spec.polarity == "axon-bright":
        tone_axon, tone_myelin = TONE_AXON, TONE_MYELIN
    else:
        tone_axon, tone_myelin = 1.0 - TONE_AXON, 1.0 - TONE_MYELIN
    image[axon] = tone_axon
    image[myelin] = tone_myelin
    if spec.noise_sigma > 0:
        image = image + rng.normal(0.0, spec.noise_sigma, size=(h, w))
    image_u8 = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    return image_u8, axon, myelin, objects


def generate(spec: SynthDomainSpec, n_images: int, out_dir) -> Path:
    """Write a full dataset (images, masks, manifest, object ground truth)
    under out_dir; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    samples = []
    ground_truth: Dict[str, list] = {}
    for i in range(n_images):
        image_u8, axon, myelin, objects = render_image(spec, i)
        stem = f"img_{i:03d}"
        save_image_u8(out / f"{stem}.png", image_u8)
        save_mask(out / f"{stem}_seg-axon.png", axon)
        save_mask(out / f"{stem}_seg-myelin.png", myelin)
        samples.append(
            {
                "id": stem,
                "image": f"{stem}.png",
                "axon_mask": f"{stem}_seg-axon.png",
                "myelin_mask": f"{stem}_seg-myelin.png",
            }
        )
        ground_truth[stem] = [
            {
                "center": list(obj.center),
                "radius": obj.radius,
                "axis_ratio": obj.axis_ratio,
                "theta": obj.theta,
                "thickness_frac": obj.thickness_frac,
                "axon_px": obj.axon_px,
                "outer_px": obj.outer_px,
                "analytic_axon_area_px": obj.analytic_axon_area_px,
                "analytic_g_ratio": obj.analytic_g_ratio,
            }
            for obj in objects
        ]

    manifest = {
        "descriptor": {
            "id": spec.id,
            "modality": "SYNTH",
            "species": "synthetic",
            "pathology": "none",
            "organ": "none",
            "pixel_size_um": spec.pixel_size_um,
            "annotated": True,
            "public": True,
        },
        "samples": samples,
    }
    manifest_path = out / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2))
    (out / "objects.json").write_text(
        json.dumps({"spec": asdict(spec), "images": ground_truth}, indent=2)
    )
    return manifest_path


def noise_free(spec: SynthDomainSpec) -> SynthDomainSpec:
    """The same geometry with noise and texture disabled."""
    return replace(spec, noise_sigma=0.0, texture_scale=0)
