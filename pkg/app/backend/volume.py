"""Volume representation, preprocessing, phase selection and the binary volume format."""
import struct
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
from scipy.ndimage import zoom

from app.backend.utils import require_positive

VOLUME_MAGIC = b"MSVLM-VOLUME-V1\x00"
_HEADER = struct.Struct("<16s3I3f")

# Intensity windows used when channel_mode == "window" (on [0, 1] intensities).
DEFAULT_WINDOWS = ((0.0, 1.0), (0.0, 0.5), (0.5, 1.0))


class View(str, Enum):
    AXIAL = "axial"
    SAGITTAL = "sagittal"
    CORONAL = "coronal"
    OBLIQUE_AXIAL = "oblique_axial"
    OBLIQUE_CORONAL = "oblique_coronal"


class Phase(str, Enum):
    CT = "CT"
    T1 = "T1"
    T2 = "T2"
    DWI = "DWI"


class Modifier(str, Enum):
    FS = "FS"
    SPIR = "SPIR"
    CE = "CE"


VIEW_ORDER = {
    View.AXIAL: 0,
    View.OBLIQUE_AXIAL: 1,
    View.SAGITTAL: 2,
    View.CORONAL: 3,
    View.OBLIQUE_CORONAL: 4,
}


@dataclass(frozen=True)
class Volume:
    voxels: np.ndarray  # (z, y, x) float32
    spacing: tuple[float, float, float]  # mm per voxel, (z, y, x)
    view: View = View.AXIAL
    phase: Phase = Phase.CT
    modifiers: frozenset[Modifier] = frozenset()
    patient_id: str = ""

    def __post_init__(self):
        if self.voxels.ndim != 3 or min(self.voxels.shape) < 1:
            raise ValueError(f"volume must be a non-empty 3D grid, got shape {self.voxels.shape}")
        if len(self.spacing) != 3:
            raise ValueError("spacing must have three components")
        require_positive("spacing", self.spacing)
        if not np.isfinite(self.voxels).all():
            raise ValueError("volume contains non-finite voxels")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.voxels.shape)

    @property
    def num_slices(self) -> int:
        return self.voxels.shape[0]


@dataclass(frozen=True)
class SliceProvenance:
    volume_id: str
    slice_index: int
    padded: bool = False


@dataclass
class VolumeStack:
    slices: np.ndarray  # (S, 3, H, W) float32
    provenance: list[SliceProvenance] = field(default_factory=list)

    def __post_init__(self):
        if self.slices.ndim != 4 or self.slices.shape[1] != 3:
            raise ValueError(f"stack must be S x 3 x H x W, got {self.slices.shape}")
        if len(self.provenance) != self.slices.shape[0]:
            raise ValueError("provenance length must equal the number of slices")

    def __len__(self) -> int:
        return self.slices.shape[0]


def resample_to_spacing(volume: Volume, target_spacing: Sequence[float]) -> Volume:
    """Trilinear resampling so each axis has the requested spacing."""
    require_positive("target_spacing", target_spacing)
    target = tuple(float(s) for s in target_spacing)
    if np.allclose(target, volume.spacing):
        return replace(volume, spacing=target)
    out_shape = tuple(
        max(1, int(round(dim * current / wanted)))
        for dim, current, wanted in zip(volume.shape, volume.spacing, target)
    )
    factors = [o / i for o, i in zip(out_shape, volume.shape)]
    voxels = zoom(volume.voxels.astype(np.float64), factors, order=1, mode="nearest", grid_mode=False)
    # zoom rounds the output shape itself; enforce the contract explicitly
    voxels = voxels[: out_shape[0], : out_shape[1], : out_shape[2]]
    return replace(volume, voxels=voxels.astype(np.float32), spacing=target)


def _crop_or_pad_axis(array: np.ndarray, axis: int, target: int) -> np.ndarray:
    size = array.shape[axis]
    if size > target:
        start = (size - target) // 2
        index = [slice(None)] * array.ndim
        index[axis] = slice(start, start + target)
        return array[tuple(index)]
    if size < target:
        total = target - size
        widths = [(0, 0)] * array.ndim
        widths[axis] = (total // 2, total - total // 2)
        return np.pad(array, widths, mode="constant", constant_values=0)
    return array


def pad_or_center_crop(volume: Volume, target_shape: Sequence[int]) -> Volume:
    """Symmetric crop/zero-pad per axis; odd remainders go to the high-index side."""
    if len(target_shape) != 3 or min(target_shape) < 1:
        raise ValueError(f"target_shape must be three dims >= 1, got {tuple(target_shape)}")
    voxels = volume.voxels
    for axis, target in enumerate(target_shape):
        voxels = _crop_or_pad_axis(voxels, axis, int(target))
    return replace(volume, voxels=np.ascontiguousarray(voxels, dtype=np.float32))


def normalize_intensity(volume: Volume) -> Volume:
    """Min-max scaling to [0, 1]; constant volumes map to zeros."""
    lo, hi = float(volume.voxels.min()), float(volume.voxels.max())
    if hi - lo <= 0:
        return replace(volume, voxels=np.zeros_like(volume.voxels))
    return replace(volume, voxels=((volume.voxels - lo) / (hi - lo)).astype(np.float32))


def _to_channels(slice_2d: np.ndarray, mode: str, windows: Sequence[tuple[float, float]]) -> np.ndarray:
    if mode == "replicate":
        return np.repeat(slice_2d[None], 3, axis=0)
    if mode == "window":
        channels = [np.clip((slice_2d - lo) / (hi - lo), 0.0, 1.0) for lo, hi in windows]
        return np.stack(channels).astype(np.float32)
    raise ValueError(f"unknown channel mode {mode!r}")


def slice_iter(
        volume: Volume,
        mode: str = "replicate",
        windows: Sequence[tuple[float, float]] = DEFAULT_WINDOWS,
) -> Iterator[np.ndarray]:
    """Yield the z slices of a volume as 3 x H x W arrays, in z order."""
    for z in range(volume.num_slices):
        yield _to_channels(volume.voxels[z], mode, windows)


def stack_volume(volume: Volume, volume_id: str = "", mode: str = "replicate") -> VolumeStack:
    """Every slice of a single volume, in z order."""
    slices = np.stack(list(slice_iter(volume, mode))).astype(np.float32)
    vid = volume_id or volume.patient_id
    provenance = [SliceProvenance(vid, z) for z in range(volume.num_slices)]
    return VolumeStack(slices, provenance)


@dataclass(frozen=True)
class PhaseRule:
    phase: Phase
    with_modifiers: Optional[bool] = None  # None matches either

    def matches(self, volume: Volume) -> bool:
        if volume.phase != self.phase:
            return False
        if self.with_modifiers is None:
            return True
        return bool(volume.modifiers) == self.with_modifiers


DEFAULT_PHASE_PRIORITY: tuple[PhaseRule, ...] = (
    PhaseRule(Phase.T2),
    PhaseRule(Phase.T1, with_modifiers=True),
    PhaseRule(Phase.T1, with_modifiers=False),
    PhaseRule(Phase.DWI),
    PhaseRule(Phase.CT),
)


def _priority_key(volume: Volume, priority: Sequence[PhaseRule]) -> tuple[int, int]:
    rank = next((i for i, rule in enumerate(priority) if rule.matches(volume)), len(priority))
    return rank, VIEW_ORDER[volume.view]


def sample_slice_indices(num_slices: int, count: int) -> list[int]:
    """Uniform stride centred on the volume midpoint; repeats nearest indices when short."""
    if count < 1:
        raise ValueError("count must be >= 1")
    stride = num_slices / count
    middle = (num_slices - 1) / 2
    positions = middle + (np.arange(count) - (count - 1) / 2) * stride
    indices = np.floor(positions + 0.5).astype(int)
    return np.clip(indices, 0, num_slices - 1).tolist()


def select_and_sample_phases(
        volumes: Sequence[Volume],
        priority: Sequence[PhaseRule] = DEFAULT_PHASE_PRIORITY,
        phases_needed: int = 6,
        slices_per_phase: int = 20,
        mode: str = "replicate",
) -> VolumeStack:
    """Rank volumes by phase priority (view order breaks ties) and stack sampled slices."""
    if not volumes:
        raise ValueError("at least one volume is required")
    if phases_needed < 1 or slices_per_phase < 1:
        raise ValueError("phases_needed and slices_per_phase must be >= 1")
    in_plane = {v.shape[1:] for v in volumes}
    if len(in_plane) != 1:
        raise ValueError(f"volumes must share in-plane size, got {sorted(in_plane)}")

    order = sorted(range(len(volumes)), key=lambda i: _priority_key(volumes[i], priority))
    chosen = [(i, False) for i in order[:phases_needed]]
    while len(chosen) < phases_needed:
        chosen.append((order[0], True))

    slices, provenance = [], []
    for i, padded in chosen:
        volume = volumes[i]
        volume_id = volume.patient_id or "volume"
        volume_id = f"{volume_id}/{i}:{volume.phase.value}-{volume.view.value}"
        all_slices = list(slice_iter(volume, mode))
        for z in sample_slice_indices(volume.num_slices, slices_per_phase):
            slices.append(all_slices[z])
            provenance.append(SliceProvenance(volume_id, z, padded))
    return VolumeStack(np.stack(slices).astype(np.float32), provenance)


def save_volume(volume: Volume, path: Path) -> None:
    """Write the 16-byte magic, (z, y, x) u32 dims, 3 x f32 spacing, then f32 voxels (LE)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    z, y, x = volume.shape
    header = _HEADER.pack(VOLUME_MAGIC, z, y, x, *volume.spacing)
    with path.open("wb") as fh:
        fh.write(header)
        fh.write(volume.voxels.astype("<f4", copy=False).tobytes(order="C"))


def load_volume(
        path: Path,
        view: View = View.AXIAL,
        phase: Phase = Phase.CT,
        modifiers: frozenset[Modifier] = frozenset(),
        patient_id: str = "",
) -> Volume:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError(f"{path}: truncated volume header")
    magic, z, y, x, sz, sy, sx = _HEADER.unpack_from(data)
    if magic != VOLUME_MAGIC:
        raise ValueError(f"{path}: not a volume file")
    expected = z * y * x * 4
    payload = data[_HEADER.size:]
    if len(payload) != expected:
        raise ValueError(f"{path}: expected {expected} voxel bytes, found {len(payload)}")
    voxels = np.frombuffer(payload, dtype="<f4").reshape(z, y, x).astype(np.float32)
    return Volume(voxels, (sz, sy, sx), view, phase, modifiers, patient_id)
