"""Synthetic chest-like phantoms with templated reports for desk-scale training."""
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.ndimage import zoom

from app.backend.volume import Modifier, Phase, View, Volume

FINDING_TYPES = ("nodule", "effusion", "consolidation", "cardiomegaly")

# (z, y, x) centroid fractions; "upper" = low z, "left" = low x
REGIONS: dict[str, tuple[float, float, float]] = {
    "left upper": (0.28, 0.32, 0.28),
    "left lower": (0.72, 0.68, 0.28),
    "right upper": (0.28, 0.32, 0.72),
    "right lower": (0.72, 0.68, 0.72),
    "central": (0.5, 0.5, 0.5),
}

ALLOWED_REGIONS: dict[str, tuple[str, ...]] = {
    "nodule": ("left upper", "left lower", "right upper", "right lower"),
    "effusion": ("left lower", "right lower"),
    "consolidation": ("left upper", "left lower", "right upper", "right lower"),
    "cardiomegaly": ("central",),
}

BLOB_INTENSITY = {"nodule": 1.0, "effusion": 0.7, "consolidation": 0.85, "cardiomegaly": 0.6}
SIZE_RANGE_MM = {"nodule": (4, 12), "effusion": (15, 30), "consolidation": (10, 25), "cardiomegaly": (30, 45)}

FINDING_NAMES = {
    "nodule": "nodule",
    "effusion": "pleural effusion",
    "consolidation": "consolidation",
    "cardiomegaly": "cardiomegaly",
}

PRESENT_TEMPLATES = {
    "nodule": "There is a {size} mm nodule in the {location} region.",
    "effusion": "There is pleural effusion in the {location} region measuring {size} mm.",
    "consolidation": "There is consolidation in the {location} region measuring {size} mm.",
    "cardiomegaly": "There is cardiomegaly with a {size} mm cardiac silhouette.",
}

ABSENT_TEMPLATES = {
    "nodule": "No nodule is seen.",
    "effusion": "No pleural effusion.",
    "consolidation": "No consolidation.",
    "cardiomegaly": "No cardiomegaly.",
}

PHANTOM_SPACING = (1.5, 1.5, 1.5)


@dataclass(frozen=True)
class FindingSpec:
    finding_type: str
    location: str
    size_mm: float
    present: bool = True

    def __post_init__(self):
        if self.finding_type not in FINDING_TYPES:
            raise ValueError(f"unknown finding type {self.finding_type!r}")
        if self.location not in REGIONS:
            raise ValueError(f"unknown region {self.location!r}")
        if self.present and not self.size_mm > 0:
            raise ValueError("size_mm must be positive for a present finding")

    def to_dict(self) -> dict:
        return {
            "finding_type": self.finding_type,
            "location": self.location,
            "size_mm": self.size_mm,
            "present": self.present,
        }


def random_findings(rng: np.random.Generator, p_present: float = 0.5) -> list[FindingSpec]:
    """Independently switch each lexicon finding on with probability p_present."""
    findings = []
    for finding_type in FINDING_TYPES:
        if rng.random() < p_present:
            regions = ALLOWED_REGIONS[finding_type]
            location = regions[int(rng.integers(len(regions)))]
            lo, hi = SIZE_RANGE_MM[finding_type]
            findings.append(FindingSpec(finding_type, location, float(rng.integers(lo, hi + 1))))
    return findings


def render_report(findings: Sequence[FindingSpec]) -> str:
    """One sentence per present finding (lexicon order), negations for the rest."""
    present = {f.finding_type: f for f in findings if f.present}
    sentences = []
    for finding_type in FINDING_TYPES:
        spec = present.get(finding_type)
        if spec is None:
            sentences.append(ABSENT_TEMPLATES[finding_type])
        else:
            sentences.append(
                PRESENT_TEMPLATES[finding_type].format(size=int(round(spec.size_mm)), location=spec.location)
            )
    return " ".join(sentences)


def _background(rng: np.random.Generator, shape: tuple[int, int, int]) -> np.ndarray:
    coarse_shape = tuple(max(2, s // 8) for s in shape)
    coarse = rng.normal(0.0, 1.0, size=coarse_shape)
    smooth = zoom(coarse, [s / c for s, c in zip(shape, coarse_shape)], order=1, mode="nearest")
    smooth = smooth[: shape[0], : shape[1], : shape[2]]
    smooth = (smooth - smooth.min()) / max(float(np.ptp(smooth)), 1e-8)
    return 0.1 + 0.2 * smooth


def _blob(shape: tuple[int, int, int], centre: np.ndarray, radius_vox: float) -> np.ndarray:
    grids = np.meshgrid(*[np.arange(s, dtype=np.float64) for s in shape], indexing="ij")
    dist2 = sum((g - c) ** 2 for g, c in zip(grids, centre))
    return np.exp(-dist2 / (2.0 * radius_vox**2))


def synth_volume(
        seed: int,
        findings: Sequence[FindingSpec],
        shape: tuple[int, int, int] = (32, 64, 64),
) -> tuple[Volume, str, list[tuple[str, str]]]:
    """Deterministic phantom: smooth texture plus one Gaussian blob per present finding."""
    from app.backend.vqa import synth_vqa_from_findings

    if len(shape) != 3 or min(shape) < 8:
        raise ValueError(f"phantom shape dims must be >= 8, got {tuple(shape)}")
    shape = tuple(int(s) for s in shape)
    rng = np.random.default_rng(seed)
    voxels = _background(rng, shape)
    dims = np.asarray(shape, dtype=np.float64)
    for spec in findings:
        if not spec.present:
            continue
        jitter = rng.uniform(-0.04, 0.04, size=3)
        centre = (np.asarray(REGIONS[spec.location]) + jitter) * (dims - 1)
        radius = max(1.0, spec.size_mm / 2.0 / PHANTOM_SPACING[2])
        radius = min(radius, min(shape) / 6.0)
        voxels = voxels + BLOB_INTENSITY[spec.finding_type] * _blob(shape, centre, radius)
    volume = Volume(voxels.astype(np.float32), PHANTOM_SPACING, patient_id=f"phantom-{seed}")
    return volume, render_report(findings), synth_vqa_from_findings(findings)


# Contrast applied to the same anatomy for multi-phase studies.
PHASE_CONTRAST = {
    Phase.T2: lambda v: v,
    Phase.T1: lambda v: 1.2 - v,
    Phase.DWI: lambda v: np.sqrt(np.clip(v, 0.0, None)),
    Phase.CT: lambda v: v,
}

DEFAULT_STUDY_PHASES: tuple[tuple[Phase, View, frozenset], ...] = (
    (Phase.T2, View.AXIAL, frozenset()),
    (Phase.T2, View.SAGITTAL, frozenset()),
    (Phase.T1, View.AXIAL, frozenset({Modifier.CE})),
    (Phase.T1, View.AXIAL, frozenset()),
    (Phase.T2, View.CORONAL, frozenset()),
    (Phase.T1, View.SAGITTAL, frozenset({Modifier.FS})),
    (Phase.DWI, View.AXIAL, frozenset()),
)


def _reorient(voxels: np.ndarray, view: View) -> np.ndarray:
    # in-plane size is preserved so all phases stack together
    match view:
        case View.SAGITTAL | View.OBLIQUE_CORONAL:
            return np.ascontiguousarray(np.flip(voxels, axis=2))
        case View.CORONAL:
            return np.ascontiguousarray(np.flip(voxels, axis=1))
        case _:
            return voxels


def synth_study(
        seed: int,
        findings: Sequence[FindingSpec],
        shape: tuple[int, int, int] = (32, 64, 64),
        phases: Sequence[tuple[Phase, View, frozenset]] = DEFAULT_STUDY_PHASES,
) -> tuple[list[Volume], str, list[tuple[str, str]]]:
    """Render one set of findings under several phase/view tags."""
    base, report, qa = synth_volume(seed, findings, shape)
    volumes = []
    for phase, view, modifiers in phases:
        voxels = PHASE_CONTRAST[phase](base.voxels)
        voxels = _reorient(voxels, view)
        volumes.append(
            Volume(voxels.astype(np.float32), base.spacing, view, phase, frozenset(modifiers), base.patient_id)
        )
    return volumes, report, qa
